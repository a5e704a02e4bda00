//! Recall@K, the containment-aware RC@K, and sentence/segment order agreement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::Prediction;
use crate::temporal_map::Segment;

/// Annotations of one video: sentence index -> segments.
pub type PairTruth = BTreeMap<usize, Vec<Segment>>;

fn hits(p: &Prediction, sentence: usize, g: &Segment, thr: f64, containment: bool) -> bool {
    p.sentence == sentence && (p.segment.iou(g) > thr || (containment && p.segment.is_inside(g)))
}

/// Fraction of annotated segments recalled by the first `k` predictions at
/// IoU strictly above `iou_thr`. `None` when the pair has no annotations.
pub fn recall_at_k(ranked: &[Prediction], gt: &PairTruth, k: usize, iou_thr: f64) -> Option<f64> {
    let top = &ranked[..k.min(ranked.len())];
    let mut total = 0usize;
    let mut found = 0usize;
    for (&s, segs) in gt {
        for g in segs {
            total += 1;
            if top.iter().any(|p| hits(p, s, g, iou_thr, false)) {
                found += 1;
            }
        }
    }
    (total > 0).then(|| found as f64 / total as f64)
}

/// Recall where each annotated sentence is judged on its own first `k`
/// predictions (in ranked order) rather than on a shared global top-`k`.
pub fn sentence_recall_at_k(ranked: &[Prediction], gt: &PairTruth, k: usize, iou_thr: f64) -> Option<f64> {
    let mut total = 0usize;
    let mut found = 0usize;
    for (&s, segs) in gt {
        let own: Vec<&Prediction> = ranked.iter().filter(|p| p.sentence == s).take(k).collect();
        for g in segs {
            total += 1;
            if own.iter().any(|p| hits(p, s, g, iou_thr, false)) {
                found += 1;
            }
        }
    }
    (total > 0).then(|| found as f64 / total as f64)
}

/// Pseudo ground truth for child sentences: each child with an annotated
/// parent inherits the parent's segments.
pub fn inherited_truth(gt: &PairTruth, parents: &[Option<usize>]) -> PairTruth {
    let mut out = PairTruth::new();
    for (child, parent) in parents.iter().enumerate() {
        if let Some(segs) = parent.and_then(|p| gt.get(&p)) {
            if !segs.is_empty() {
                out.insert(child, segs.clone());
            }
        }
    }
    out
}

/// Recall over child sentences against their parent's segments, where a
/// prediction also hits when it lies entirely inside the segment.
pub fn rc_at_k(ranked: &[Prediction], gt: &PairTruth, parents: &[Option<usize>], k: usize, iou_thr: f64) -> Option<f64> {
    let pseudo = inherited_truth(gt, parents);
    let top = &ranked[..k.min(ranked.len())];
    let mut total = 0usize;
    let mut found = 0usize;
    for (&s, segs) in &pseudo {
        for g in segs {
            total += 1;
            if top.iter().any(|p| hits(p, s, g, iou_thr, true)) {
                found += 1;
            }
        }
    }
    (total > 0).then(|| found as f64 / total as f64)
}

/// Fraction of top-`k` child-sentence predictions that satisfy the
/// containment-or-IoU rule against some inherited segment.
pub fn rc_precision(ranked: &[Prediction], gt: &PairTruth, parents: &[Option<usize>], k: usize, iou_thr: f64) -> Option<f64> {
    let pseudo = inherited_truth(gt, parents);
    let mut total = 0usize;
    let mut good = 0usize;
    for p in ranked[..k.min(ranked.len())].iter() {
        if let Some(segs) = pseudo.get(&p.sentence) {
            total += 1;
            if segs.iter().any(|g| hits(p, p.sentence, g, iou_thr, true)) {
                good += 1;
            }
        }
    }
    (total > 0).then(|| good as f64 / total as f64)
}

/// Pooled pairwise concordance between sentence order and segment start
/// order over the annotated `(sentence, start)` instances of each video.
/// Pairs with equal sentences or equal starts are skipped.
pub fn order_agreement(videos: &[Vec<(usize, f64)>]) -> Result<f64> {
    let mut agree = 0usize;
    let mut counted = 0usize;
    for inst in videos {
        for a in 0..inst.len() {
            for b in a + 1..inst.len() {
                let (sa, ta) = inst[a];
                let (sb, tb) = inst[b];
                if sa == sb || ta == tb {
                    continue;
                }
                counted += 1;
                if (sa < sb) == (ta < tb) {
                    agree += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "order agreement needs two instances with distinct sentences and starts".into(),
        ));
    }
    Ok(agree as f64 / counted as f64)
}

/// Annotated `(sentence, start)` instances of one video.
pub fn instances(gt: &PairTruth) -> Vec<(usize, f64)> {
    gt.iter().flat_map(|(&s, segs)| segs.iter().map(move |g| (s, g.start))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub iou: f64,
    pub value: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Per task: (task, R@K rows restricted to the task, order agreement).
    pub per_task: Vec<(String, Vec<MetricRow>, Option<f64>)>,
    /// Videos with predictions but no annotations; left out of every mean.
    pub excluded: Vec<String>,
}

/// Everything evaluation needs about one video.
pub struct EvalPair<'a> {
    pub video_id: &'a str,
    pub task_id: &'a str,
    pub parents: &'a [Option<usize>],
    pub ranked: &'a [Prediction],
    pub truth: Option<&'a PairTruth>,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_IOUS: [f64; 3] = [0.1, 0.3, 0.5];

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn metric_rows(pairs: &[&EvalPair<'_>], ks: &[usize], ious: &[f64]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    type Metric = fn(&[Prediction], &PairTruth, &[Option<usize>], usize, f64) -> Option<f64>;
    let metrics: [(&str, Metric); 4] = [
        ("R@K", |r, g, _, k, t| recall_at_k(r, g, k, t)),
        ("sentence R@K", |r, g, _, k, t| sentence_recall_at_k(r, g, k, t)),
        ("RC@K", rc_at_k),
        ("RC-precision@K", rc_precision),
    ];
    for (name, f) in metrics {
        for &k in ks {
            for &t in ious {
                let vals: Vec<f64> = pairs
                    .iter()
                    .filter_map(|p| p.truth.and_then(|g| f(p.ranked, g, p.parents, k, t)))
                    .collect();
                rows.push(MetricRow {
                    metric: name.to_string(),
                    k,
                    iou: t,
                    value: mean(&vals),
                    pairs: vals.len(),
                });
            }
        }
    }
    rows
}

/// Macro-averaged metrics over video-article pairs, plus a per-task
/// breakdown with order agreement of the annotations.
pub fn evaluate(pairs: &[EvalPair<'_>], ks: &[usize], ious: &[f64]) -> EvalReport {
    let annotated: Vec<&EvalPair<'_>> = pairs.iter().filter(|p| p.truth.is_some_and(|g| !g.is_empty())).collect();
    let excluded = pairs
        .iter()
        .filter(|p| !p.truth.is_some_and(|g| !g.is_empty()))
        .map(|p| p.video_id.to_string())
        .collect();
    let mut tasks: BTreeMap<&str, Vec<&EvalPair<'_>>> = BTreeMap::new();
    for p in &annotated {
        tasks.entry(p.task_id).or_default().push(p);
    }
    let per_task = tasks
        .into_iter()
        .map(|(t, ps)| {
            let rows = metric_rows(&ps, ks, ious).into_iter().filter(|r| r.metric == "R@K").collect();
            let inst: Vec<_> = ps.iter().map(|p| instances(p.truth.unwrap())).collect();
            (t.to_string(), rows, order_agreement(&inst).ok())
        })
        .collect();
    EvalReport {
        rows: metric_rows(&annotated, ks, ious),
        per_task,
        excluded,
    }
}

impl EvalReport {
    pub fn value(&self, metric: &str, k: usize, iou: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.k == k && (r.iou - iou).abs() < 1e-12)
            .map(|r| r.value)
    }

    /// Human-readable table: one block per metric with K down and IoU across.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut metrics: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
        }
        for m in metrics {
            let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.metric == m).collect();
            let mut ious: Vec<f64> = Vec::new();
            for r in &rows {
                if !ious.contains(&r.iou) {
                    ious.push(r.iou);
                }
            }
            let pairs = rows.first().map_or(0, |r| r.pairs);
            let _ = writeln!(out, "{m}  ({pairs} pairs)");
            let _ = write!(out, "{:>6}", "K");
            for t in &ious {
                let _ = write!(out, "  IoU={t:<5}");
            }
            out.push('\n');
            let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
            ks.dedup();
            for k in ks {
                let _ = write!(out, "{k:>6}");
                for t in &ious {
                    let v = rows.iter().find(|r| r.k == k && r.iou == *t).map_or(f64::NAN, |r| r.value);
                    let _ = write!(out, "  {:>9.2}", 100.0 * v);
                }
                out.push('\n');
            }
            out.push('\n');
        }
        let _ = writeln!(out, "per task (R@K, IoU across; order agreement %)");
        for (task, rows, agree) in &self.per_task {
            let cells: Vec<String> = rows
                .iter()
                .map(|r| format!("R@{}/{}={:.2}", r.k, r.iou, 100.0 * r.value))
                .collect();
            let a = agree.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
            let _ = writeln!(out, "{task}\t{}\torder={a}", cells.join(" "));
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(out, "\nexcluded (no annotations): {}", self.excluded.join(", "));
        }
        out
    }

    /// Machine-readable rows: `scope metric K iou value pairs`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scope\tmetric\tK\tiou\tvalue\tpairs\n");
        for r in &self.rows {
            let _ = writeln!(out, "all\t{}\t{}\t{}\t{:.6}\t{}", r.metric, r.k, r.iou, r.value, r.pairs);
        }
        for (task, rows, agree) in &self.per_task {
            for r in rows {
                let _ = writeln!(out, "{task}\t{}\t{}\t{}\t{:.6}\t{}", r.metric, r.k, r.iou, r.value, r.pairs);
            }
            if let Some(a) = agree {
                let _ = writeln!(out, "{task}\torder_agreement\t-\t-\t{a:.6}\t{}", rows.first().map_or(0, |r| r.pairs));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(a: f64, b: f64) -> Segment {
        Segment::new(a, b).unwrap()
    }

    fn pred(sentence: usize, a: f64, b: f64) -> Prediction {
        Prediction {
            video_id: "v".into(),
            sentence,
            segment: seg(a, b),
            score: 0.5,
            cell: 0,
        }
    }

    #[test]
    fn recall_examples() {
        let gt: PairTruth = [(0, vec![seg(0.0, 10.0)])].into();
        // IoU 0.6
        assert_eq!(recall_at_k(&[pred(0, 0.0, 6.0)], &gt, 1, 0.5), Some(1.0));
        assert_eq!(recall_at_k(&[pred(1, 0.0, 10.0)], &gt, 1, 0.5), Some(0.0));
        // strict threshold
        assert_eq!(recall_at_k(&[pred(0, 0.0, 5.0)], &gt, 1, 0.5), Some(0.0));
        let gt3: PairTruth = [(0, vec![seg(0.0, 2.0)]), (1, vec![seg(2.0, 4.0)]), (2, vec![seg(4.0, 6.0)])].into();
        let r = recall_at_k(&[pred(0, 0.0, 2.0), pred(2, 4.0, 6.0), pred(1, 10.0, 12.0)], &gt3, 3, 0.5).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&[], &PairTruth::new(), 3, 0.5), None);
    }

    #[test]
    fn sentence_recall_examples() {
        let gt: PairTruth = [(0, vec![seg(0.0, 2.0)]), (1, vec![seg(2.0, 4.0)])].into();
        let ranked = [pred(0, 10.0, 12.0), pred(0, 12.0, 14.0), pred(1, 2.0, 4.0), pred(0, 0.0, 2.0)];
        // globally the third prediction is out of reach at k = 2
        assert_eq!(recall_at_k(&ranked, &gt, 2, 0.5), Some(0.0));
        assert_eq!(sentence_recall_at_k(&ranked, &gt, 2, 0.5), Some(0.5));
        assert_eq!(sentence_recall_at_k(&ranked, &gt, 3, 0.5), Some(1.0));
    }

    #[test]
    fn rc_examples() {
        let gt: PairTruth = [(0, vec![seg(0.0, 10.0)])].into();
        let parents = [None, Some(0)];
        assert_eq!(rc_at_k(&[pred(1, 3.0, 4.0)], &gt, &parents, 1, 0.5), Some(1.0));
        assert_eq!(rc_at_k(&[pred(1, 12.0, 14.0)], &gt, &parents, 1, 0.5), Some(0.0));
        // IoU 0.6, not contained
        assert_eq!(rc_at_k(&[pred(1, 4.0, 12.0)], &gt, &parents, 1, 0.5), Some(0.0));
        assert_eq!(rc_at_k(&[pred(1, 2.0, 11.0)], &gt, &parents, 1, 0.5), Some(1.0));
        // a child whose parent has no annotation is excluded
        assert_eq!(rc_at_k(&[pred(1, 3.0, 4.0)], &PairTruth::new(), &parents, 1, 0.5), None);
        assert_eq!(rc_precision(&[pred(1, 3.0, 4.0), pred(1, 20.0, 21.0)], &gt, &parents, 2, 0.5), Some(0.5));
    }

    #[test]
    fn order_examples() {
        assert_eq!(order_agreement(&[vec![(1, 0.0), (2, 5.0)]]).unwrap(), 1.0);
        assert_eq!(order_agreement(&[vec![(1, 5.0), (2, 0.0)]]).unwrap(), 0.0);
        let a = order_agreement(&[vec![(0, 0.0), (1, 4.0), (2, 2.0)]]).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(order_agreement(&[vec![(0, 1.0)], vec![]]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_flags_unannotated_pairs() {
        let gt: PairTruth = [(0, vec![seg(0.0, 2.0)]), (1, vec![seg(2.0, 4.0)])].into();
        let preds = vec![pred(0, 0.0, 2.0)];
        let parents = vec![None, Some(0)];
        let pairs = vec![
            EvalPair {
                video_id: "a",
                task_id: "t",
                parents: &parents,
                ranked: &preds,
                truth: Some(&gt),
            },
            EvalPair {
                video_id: "b",
                task_id: "t",
                parents: &parents,
                ranked: &preds,
                truth: None,
            },
        ];
        let rep = evaluate(&pairs, &DEFAULT_KS, &DEFAULT_IOUS);
        assert_eq!(rep.excluded, vec!["b".to_string()]);
        assert_eq!(rep.value("R@K", 1, 0.5), Some(0.5));
        assert_eq!(rep.per_task[0].2, Some(1.0));
        assert!(rep.to_table().contains("R@K"));
        assert!(rep.to_tsv().contains("order_agreement"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_case() -> impl Strategy<Value = (Vec<Prediction>, PairTruth)> {
            let preds = proptest::collection::vec((0usize..3, 0u32..8, 1u32..5), 0..20).prop_map(|v| {
                v.into_iter()
                    .map(|(s, a, l)| pred(s, a as f64, (a + l) as f64))
                    .collect::<Vec<_>>()
            });
            let gt = proptest::collection::vec((0usize..3, 0u32..8, 1u32..5), 1..6).prop_map(|v| {
                let mut g = PairTruth::new();
                for (s, a, l) in v {
                    g.entry(s).or_default().push(seg(a as f64, (a + l) as f64));
                }
                g
            });
            (preds, gt)
        }

        proptest! {
            #[test]
            fn recall_monotone((p, g) in arb_case(), k in 1usize..10, t in 0.0f64..0.9) {
                let r = recall_at_k(&p, &g, k, t).unwrap();
                prop_assert!(recall_at_k(&p, &g, k + 1, t).unwrap() >= r);
                prop_assert!(recall_at_k(&p, &g, k, t + 0.1).unwrap() <= r);
            }

            #[test]
            fn sentence_recall_dominates_global((p, g) in arb_case(), k in 1usize..10, t in 0.0f64..1.0) {
                let s = sentence_recall_at_k(&p, &g, k, t).unwrap();
                prop_assert!(s >= recall_at_k(&p, &g, k, t).unwrap());
                prop_assert!(sentence_recall_at_k(&p, &g, k + 1, t).unwrap() >= s);
            }

            #[test]
            fn rc_dominates_plain_recall((p, g) in arb_case(), k in 1usize..10, t in 0.0f64..1.0) {
                let parents = [None, Some(0), Some(0)];
                let pseudo = inherited_truth(&g, &parents);
                if let Some(rc) = rc_at_k(&p, &g, &parents, k, t) {
                    prop_assert!(rc >= recall_at_k(&p, &pseudo, k, t).unwrap());
                }
            }

            #[test]
            fn sorted_and_reversed_agreement(n in 2usize..10) {
                let sorted: Vec<(usize, f64)> = (0..n).map(|i| (i, i as f64)).collect();
                let reversed: Vec<(usize, f64)> = (0..n).map(|i| (i, (n - i) as f64)).collect();
                prop_assert_eq!(order_agreement(&[sorted]).unwrap(), 1.0);
                prop_assert_eq!(order_agreement(&[reversed]).unwrap(), 0.0);
            }
        }
    }
}
