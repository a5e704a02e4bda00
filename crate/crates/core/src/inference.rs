//! From score maps to ranked segment predictions.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::data::Article;
use crate::model::{forward, ModelParams, ScoreMap};
use crate::objectives::HyperParams;
use crate::temporal_map::{build_map_index, pool_proposal_features, resample_clips, ClipFeatures, MapIndex, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    /// Article position of the sentence.
    pub sentence: usize,
    pub segment: Segment,
    pub score: f64,
    /// Position of the originating map cell; only used to break ties.
    pub cell: usize,
}

/// Higher score first, then earlier start, then smaller cell index.
fn nms_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.cell.cmp(&b.cell))
}

/// Higher score first, then lower sentence index, then earlier start.
fn rank_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.sentence.cmp(&b.sentence))
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.cell.cmp(&b.cell))
}

/// One candidate per valid cell of a sentence's score map.
pub fn map_candidates(video_id: &str, sentence: usize, map: &ScoreMap, index: &MapIndex) -> Result<Vec<Prediction>> {
    if map.size() != index.num_clips() {
        return Err(Error::invalid(format!(
            "score map is {}x{}, index expects {} clips",
            map.size(),
            map.size(),
            index.num_clips()
        )));
    }
    index
        .cells()
        .iter()
        .enumerate()
        .map(|(pos, &c)| {
            Ok(Prediction {
                video_id: video_id.to_string(),
                sentence,
                segment: index.cell_to_segment(c)?,
                score: map.get(c.i, c.j),
                cell: pos,
            })
        })
        .collect()
}

/// Greedy non-maximum suppression within one sentence: keep the best
/// remaining candidate and drop every other with IoU above `iou_thr`.
pub fn per_sentence_nms(candidates: &[Prediction], iou_thr: f64) -> Vec<Prediction> {
    let mut pending: Vec<Prediction> = candidates.to_vec();
    pending.sort_by(nms_order);
    let mut kept: Vec<Prediction> = Vec::new();
    for c in pending {
        if kept.iter().all(|k| k.segment.iou(&c.segment) <= iou_thr) {
            kept.push(c);
        }
    }
    kept
}

/// Merges per-sentence lists into one list ranked by score.
pub fn rank_predictions(lists: &[Vec<Prediction>]) -> Vec<Prediction> {
    let mut all: Vec<Prediction> = lists.iter().flatten().cloned().collect();
    all.sort_by(rank_order);
    all
}

/// Penalty fraction for a pending prediction `earlier` (whose sentence
/// precedes) against a selected prediction `later`.
pub fn order_penalty_overlap(earlier: &Segment, later: &Segment) -> f64 {
    let num = (later.start - earlier.start).max(0.0) + (earlier.end - later.end).max(0.0);
    let den = earlier.end.max(later.end) - earlier.start.min(later.start);
    num / den
}

/// Order-aware rescoring. Predictions are selected greedily by current
/// score; after each selection every pending prediction of an earlier
/// sentence is scaled by `exp(-overlap^2 / constant)`. The first `top_k`
/// selections lead the output, the remaining predictions follow in their
/// rescored order.
pub fn structure_nms(
    ranked: &[Prediction],
    constant: f64,
    top_k: usize,
    order_violation_only: bool,
) -> Result<Vec<Prediction>> {
    if !(constant > 0.0) {
        return Err(Error::invalid("structure-NMS constant must be > 0"));
    }
    let mut pending: Vec<Prediction> = ranked.to_vec();
    let mut out = Vec::with_capacity(ranked.len());
    while out.len() < top_k && !pending.is_empty() {
        let best = (0..pending.len())
            .min_by(|&a, &b| rank_order(&pending[a], &pending[b]))
            .unwrap();
        let chosen = pending.swap_remove(best);
        for p in pending.iter_mut().filter(|p| p.sentence < chosen.sentence) {
            if order_violation_only && p.segment.start <= chosen.segment.start {
                continue;
            }
            let o = order_penalty_overlap(&p.segment, &chosen.segment);
            p.score *= (-o * o / constant).exp();
        }
        out.push(chosen);
    }
    pending.sort_by(rank_order);
    out.extend(pending);
    Ok(out)
}

/// Score maps of every sentence of `article` against a video, with the map
/// index that converts cells to seconds.
pub fn score_video(
    params: &ModelParams,
    clips: &ClipFeatures,
    duration: f64,
    article: &Article,
) -> Result<(Vec<ScoreMap>, MapIndex)> {
    let n = params.dims().num_clips;
    let index = MapIndex::new(n, duration)?;
    let clips = resample_clips(clips, n)?;
    let (maps, _) = forward(params, &clips, &article.embeddings(), &index)?;
    Ok((maps, index))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

/// Training-free scores from the features themselves: `(1 + cos) / 2`
/// between each pooled proposal and the sentence embedding, nudged towards
/// longer cells to break ties.
pub fn oracle_score_maps(clips: &ClipFeatures, duration: f64, sentences: &[Vec<f64>]) -> Result<(Vec<ScoreMap>, MapIndex)> {
    let n = clips.rows();
    let index = build_map_index(n, duration)?;
    let pooled = pool_proposal_features(clips, &index)?;
    let dim = clips.dim().min(sentences.first().map_or(0, Vec::len));
    let maps = sentences
        .iter()
        .map(|s| {
            let mut m = ScoreMap::zeros(n);
            for (p, c) in index.cells().iter().enumerate() {
                let len = (c.j - c.i + 1) as f64 / n as f64;
                let v = 0.5 * (1.0 + cosine(&pooled.cell(p)[..dim], &s[..dim])) + 1e-9 * len;
                m.set(c.i, c.j, v.min(1.0));
            }
            m
        })
        .collect();
    Ok((maps, index))
}

/// Score maps of one video-article pair to the final ranked predictions.
pub fn predict_pair(video_id: &str, maps: &[ScoreMap], index: &MapIndex, hp: &HyperParams) -> Result<Vec<Prediction>> {
    let mut lists = Vec::with_capacity(maps.len());
    for (s, m) in maps.iter().enumerate() {
        lists.push(per_sentence_nms(&map_candidates(video_id, s, m, index)?, hp.nms_iou));
    }
    let ranked = rank_predictions(&lists);
    if hp.structure_nms {
        let k = ranked.len();
        structure_nms(&ranked, hp.snms_const, k, hp.order_violation_only)
    } else {
        Ok(ranked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(sentence: usize, start: f64, end: f64, score: f64) -> Prediction {
        Prediction {
            video_id: "v".into(),
            sentence,
            segment: Segment::new(start, end).unwrap(),
            score,
            cell: 0,
        }
    }

    #[test]
    fn nms_examples() {
        assert_eq!(per_sentence_nms(&[pred(0, 0.0, 1.0, 0.5)], 0.5).len(), 1);
        let two = per_sentence_nms(&[pred(0, 0.0, 1.0, 0.5), pred(0, 2.0, 3.0, 0.4)], 0.5);
        assert_eq!(two.len(), 2);
        let kept = per_sentence_nms(&[pred(0, 1.0, 4.0, 0.8), pred(0, 0.0, 4.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].segment, Segment::new(0.0, 4.0).unwrap());
    }

    #[test]
    fn ranking_examples() {
        let r = rank_predictions(&[vec![pred(1, 0.0, 1.0, 0.7)], vec![pred(2, 0.0, 1.0, 0.9), pred(2, 3.0, 4.0, 0.3)]]);
        let got: Vec<(usize, f64)> = r.iter().map(|p| (p.sentence, p.score)).collect();
        assert_eq!(got, vec![(2, 0.9), (1, 0.7), (2, 0.3)]);
        let tie = rank_predictions(&[vec![pred(3, 0.0, 1.0, 0.5)], vec![pred(1, 2.0, 3.0, 0.5)]]);
        assert_eq!(tie[0].sentence, 1);
    }

    #[test]
    fn structure_nms_examples() {
        let same = structure_nms(&[pred(1, 0.0, 2.0, 0.9), pred(0, 0.0, 2.0, 0.6)], 0.5, 2, false).unwrap();
        assert_eq!(same[1].score, 0.6);
        let out = structure_nms(&[pred(1, 5.0, 8.0, 0.9), pred(0, 0.0, 2.0, 0.6)], 0.5, 2, false).unwrap();
        assert!((out[1].score - 0.6 * (-0.625f64 * 0.625 / 0.5).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.2747).abs() < 1e-4);
        // only earlier sentences are penalised
        let out = structure_nms(&[pred(0, 5.0, 8.0, 0.9), pred(1, 0.0, 2.0, 0.6)], 0.5, 2, false).unwrap();
        assert_eq!(out[1].score, 0.6);
        // in violation-only mode a correctly ordered pair is left alone
        let out = structure_nms(&[pred(1, 5.0, 8.0, 0.9), pred(0, 0.0, 2.0, 0.6)], 0.5, 2, true).unwrap();
        assert_eq!(out[1].score, 0.6);
        assert!(structure_nms(&[], 0.0, 1, false).is_err());
    }

    #[test]
    fn structure_nms_top_k_then_rest() {
        let ranked = vec![pred(2, 6.0, 8.0, 0.9), pred(1, 0.0, 8.0, 0.8), pred(0, 0.0, 1.0, 0.7)];
        let out = structure_nms(&ranked, 0.5, 1, false).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].score, 0.9);
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_preds() -> impl Strategy<Value = Vec<Prediction>> {
            proptest::collection::vec((0usize..4, 0u32..16, 1u32..8, 0.0f64..1.0), 1..20).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(k, (s, a, len, score))| Prediction {
                        video_id: "v".into(),
                        sentence: s,
                        segment: Segment::new(a as f64, (a + len) as f64).unwrap(),
                        score,
                        cell: k,
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn nms_output_is_pairwise_separated(c in arb_preds(), thr in 0.0f64..1.0) {
                let kept = per_sentence_nms(&c, thr);
                for a in 0..kept.len() {
                    for b in a + 1..kept.len() {
                        prop_assert!(kept[a].segment.iou(&kept[b].segment) <= thr);
                    }
                }
            }

            #[test]
            fn structure_nms_never_raises_scores(c in arb_preds(), constant in 0.01f64..10.0) {
                let ranked = rank_predictions(&[c]);
                let out = structure_nms(&ranked, constant, ranked.len(), false).unwrap();
                prop_assert_eq!(out.len(), ranked.len());
                for p in &out {
                    let orig = ranked.iter().find(|q| q.cell == p.cell).unwrap();
                    prop_assert!(p.score <= orig.score);
                }
                prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
            }

            #[test]
            fn huge_constant_keeps_plain_order(c in arb_preds()) {
                let ranked = rank_predictions(&[c]);
                let out = structure_nms(&ranked, 1e9, ranked.len(), false).unwrap();
                let a: Vec<usize> = ranked.iter().map(|p| p.cell).collect();
                let b: Vec<usize> = out.iter().map(|p| p.cell).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
