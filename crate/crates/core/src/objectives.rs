//! Training objectives: the two-level MIL ranking loss, the single-sentence
//! sparsity filter and the cross-sentence hierarchy loss.
//!
//! Every loss comes with its derivative with respect to each score cell so
//! the result can be handed straight to [`crate::model::backward`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ScoreMap;

/// How many sentences represent an article in the MIL loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentenceTopK {
    /// `max(1, ceil(0.3 * sentence count))`
    Auto,
    Fixed(usize),
}

impl SentenceTopK {
    pub fn resolve(&self, sentences: usize) -> usize {
        match *self {
            SentenceTopK::Auto => ((sentences as f64 * 0.3).ceil() as usize).max(1),
            SentenceTopK::Fixed(k) => k,
        }
    }
}

impl fmt::Display for SentenceTopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SentenceTopK::Auto => f.write_str("auto"),
            SentenceTopK::Fixed(k) => write!(f, "{k}"),
        }
    }
}

/// Whether the filtered maps replace the raw maps in the MIL loss or add a
/// second MIL term next to them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsMode {
    Replace,
    Add,
}

impl FromStr for SsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(SsMode::Replace),
            "add" => Ok(SsMode::Add),
            other => Err(Error::invalid(format!("unknown ss_mode `{other}`"))),
        }
    }
}

impl fmt::Display for SsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsMode::Replace => "replace",
            SsMode::Add => "add",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Full,
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "full" => Ok(Phase::Full),
            other => Err(Error::invalid(format!("unknown phase `{other}`"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// MIL ranking margin.
    pub delta: f64,
    /// Cross-sentence margin.
    pub alpha: f64,
    pub k1: SentenceTopK,
    pub k2: usize,
    pub single_sentence: bool,
    pub ss_kernel: usize,
    pub ss_threshold: f64,
    pub ss_mode: SsMode,
    pub cross_sentence: bool,
    pub cs_weight_grad: bool,
    pub lambda_mil: f64,
    pub lambda_cs: f64,
    pub nms_iou: f64,
    pub structure_nms: bool,
    pub snms_const: f64,
    pub order_violation_only: bool,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_sentences: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            delta: 0.3,
            alpha: 0.0,
            k1: SentenceTopK::Auto,
            k2: 5,
            single_sentence: true,
            ss_kernel: 7,
            ss_threshold: 0.5,
            ss_mode: SsMode::Replace,
            cross_sentence: true,
            cs_weight_grad: false,
            lambda_mil: 1.0,
            lambda_cs: 0.1,
            nms_iou: 0.5,
            structure_nms: true,
            snms_const: 0.5,
            order_violation_only: false,
            warmup_epochs: 30,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 100,
            max_sentences: 20,
        }
    }
}

impl HyperParams {
    /// Checks the invariants; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta", "must be a finite value >= 0");
        }
        if !self.alpha.is_finite() {
            return bad("alpha", "must be finite");
        }
        if self.k1 == SentenceTopK::Fixed(0) {
            return bad("k1", "must be >= 1 or `auto`");
        }
        if self.k2 == 0 {
            return bad("k2", "must be >= 1");
        }
        if self.ss_kernel == 0 || self.ss_kernel % 2 == 0 {
            return bad("ss_kernel", "must be an odd integer >= 1");
        }
        if !(0.0..=1.0).contains(&self.ss_threshold) {
            return bad("ss_threshold", "must lie in [0, 1]");
        }
        if !(self.snms_const > 0.0) {
            return bad("snms_const", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou", "must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.max_sentences == 0 {
            return bad("max_sentences", "must be >= 1");
        }
        for (key, v) in [("lambda_mil", self.lambda_mil), ("lambda_cs", self.lambda_cs)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be a finite value >= 0");
            }
        }
        Ok(())
    }
}

/// Parent -> ordered children links of an article.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Hierarchy {
    groups: Vec<(usize, Vec<usize>)>,
}

impl Hierarchy {
    pub fn new(groups: Vec<(usize, Vec<usize>)>) -> Result<Self> {
        let mut seen_child = std::collections::BTreeSet::new();
        let parents: std::collections::BTreeSet<usize> = groups.iter().map(|g| g.0).collect();
        if parents.len() != groups.len() {
            return Err(Error::invalid("a high-level sentence appears twice in the hierarchy"));
        }
        for (_, children) in &groups {
            for &c in children {
                if !seen_child.insert(c) {
                    return Err(Error::invalid(format!("sentence {c} has more than one parent")));
                }
                if parents.contains(&c) {
                    return Err(Error::invalid(format!("sentence {c} is both a parent and a child")));
                }
            }
        }
        Ok(Hierarchy { groups })
    }

    /// Builds the hierarchy from per-sentence parent links.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (child, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                if p >= parents.len() {
                    return Err(Error::invalid(format!("sentence {child} links to missing parent {p}")));
                }
                match groups.iter_mut().find(|g| g.0 == p) {
                    Some(g) => g.1.push(child),
                    None => groups.push((p, vec![child])),
                }
            }
        }
        groups.sort_by_key(|g| g.0);
        Self::new(groups)
    }

    pub fn groups(&self) -> &[(usize, Vec<usize>)] {
        &self.groups
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.groups.iter().flat_map(|(p, cs)| cs.iter().map(move |&c| (*p, c)))
    }

    pub fn check_bounds(&self, count: usize) -> Result<()> {
        for (p, c) in self.pairs() {
            if p >= count || c >= count {
                return Err(Error::invalid(format!(
                    "hierarchy link {p} -> {c} references a missing score map (have {count})"
                )));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest values, ties resolved toward lower index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Mean of the top-`k2` valid cells, with the selected `(i, j)` cells.
pub fn sentence_video_similarity_cells(map: &ScoreMap, k2: usize) -> Result<(f64, Vec<(usize, usize)>)> {
    if k2 == 0 {
        return Err(Error::invalid("k2 must be >= 1"));
    }
    let n = map.size();
    if n == 0 {
        return Err(Error::invalid("score map has no valid cells"));
    }
    let values = map.valid_values();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let top = top_k_indices(&values, k2);
    let mean = top.iter().map(|&t| values[t]).sum::<f64>() / top.len() as f64;
    Ok((mean, top.into_iter().map(|t| cells[t]).collect()))
}

pub fn sentence_video_similarity(map: &ScoreMap, k2: usize) -> Result<f64> {
    Ok(sentence_video_similarity_cells(map, k2)?.0)
}

/// The `min(k1, len)` largest sentence similarities, descending, with the
/// sentence each came from.
pub fn article_video_similarity_indexed(sims: &[f64], k1: usize) -> Result<Vec<(usize, f64)>> {
    if k1 == 0 {
        return Err(Error::invalid("k1 must be >= 1"));
    }
    if sims.is_empty() {
        return Err(Error::invalid("article has no sentences"));
    }
    Ok(top_k_indices(sims, k1).into_iter().map(|i| (i, sims[i])).collect())
}

pub fn article_video_similarity(sims: &[f64], k1: usize) -> Result<Vec<f64>> {
    Ok(article_video_similarity_indexed(sims, k1)?.into_iter().map(|(_, v)| v).collect())
}

/// Derivatives of [`mil_loss`] with respect to each list entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MilGrad {
    pub pos: Vec<f64>,
    pub neg_video: Vec<f64>,
    pub neg_article: Vec<f64>,
}

pub fn mil_loss(pos: &[f64], neg_video: &[f64], neg_article: &[f64], delta: f64) -> f64 {
    mil_loss_with_grad(pos, neg_video, neg_article, delta).0
}

pub fn mil_loss_with_grad(pos: &[f64], neg_video: &[f64], neg_article: &[f64], delta: f64) -> (f64, MilGrad) {
    let mut grad = MilGrad {
        pos: vec![0.0; pos.len()],
        neg_video: vec![0.0; neg_video.len()],
        neg_article: vec![0.0; neg_article.len()],
    };
    let mut loss = 0.0;
    for (i, &p) in pos.iter().enumerate() {
        for (negs, g) in [(neg_video, &mut grad.neg_video), (neg_article, &mut grad.neg_article)] {
            for (j, &q) in negs.iter().enumerate() {
                let h = delta - p + q;
                if h > 0.0 {
                    loss += h;
                    grad.pos[i] -= 1.0;
                    g[j] += 1.0;
                }
            }
        }
    }
    (loss, grad)
}

/// Keep-mask of the single-sentence filter over valid cells (dense `N x N`).
pub fn single_sentence_mask(map: &ScoreMap, kernel: usize, threshold: f64) -> Result<Vec<bool>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!("single-sentence kernel must be odd, got {kernel}")));
    }
    let n = map.size();
    let r = (kernel / 2) as isize;
    let global = map.max_valid();
    let mut keep = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            let v = map.get(i, j);
            if v < threshold * global {
                continue;
            }
            let mut local = f64::NEG_INFINITY;
            let (lo_i, hi_i) = ((i as isize - r).max(0) as usize, (i as isize + r).min(n as isize - 1) as usize);
            let (lo_j, hi_j) = ((j as isize - r).max(0) as usize, (j as isize + r).min(n as isize - 1) as usize);
            for a in lo_i..=hi_i {
                for b in lo_j.max(a)..=hi_j {
                    local = local.max(map.get(a, b));
                }
            }
            keep[i * n + j] = v >= local;
        }
    }
    Ok(keep)
}

/// Zeroes cells that are not the maximum of their `K x K` valid
/// neighbourhood or fall below `threshold` times the map maximum.
pub fn single_sentence_filter(map: &ScoreMap, kernel: usize, threshold: f64) -> Result<ScoreMap> {
    let keep = single_sentence_mask(map, kernel, threshold)?;
    let n = map.size();
    let mut out = ScoreMap::zeros(n);
    for i in 0..n {
        for j in i..n {
            if keep[i * n + j] {
                out.set(i, j, map.get(i, j));
            }
        }
    }
    Ok(out)
}

/// Cross-sentence loss and its per-cell gradients.
///
/// The weight factor (the child score) is a constant for differentiation
/// unless `weight_grad` is set.
pub fn cross_sentence_loss_with_grad(
    maps: &[ScoreMap],
    hierarchy: &Hierarchy,
    alpha: f64,
    weight_grad: bool,
) -> Result<(f64, Vec<ScoreMap>)> {
    hierarchy.check_bounds(maps.len())?;
    let mut grads: Vec<ScoreMap> = maps.iter().map(|m| ScoreMap::zeros(m.size())).collect();
    let mut loss = 0.0;
    for (p, c) in hierarchy.pairs() {
        let (parent, child) = (&maps[p], &maps[c]);
        let n = parent.size();
        if child.size() != n {
            return Err(Error::invalid("parent and child score maps differ in size"));
        }
        for i in 0..n {
            for j in i..n {
                let (ph, pc) = (parent.get(i, j), child.get(i, j));
                let h = alpha - ph + pc;
                if h > 0.0 {
                    loss += h * pc;
                    let gp = grads[p].get(i, j);
                    grads[p].set(i, j, gp - pc);
                    let extra = if weight_grad { h } else { 0.0 };
                    let gc = grads[c].get(i, j);
                    grads[c].set(i, j, gc + pc + extra);
                }
            }
        }
    }
    Ok((loss, grads))
}

pub fn cross_sentence_loss(maps: &[ScoreMap], hierarchy: &Hierarchy, alpha: f64) -> Result<f64> {
    Ok(cross_sentence_loss_with_grad(maps, hierarchy, alpha, false)?.0)
}

/// Score maps of one training example.
pub struct LossInputs<'a> {
    /// The video against its own article.
    pub positive: &'a [ScoreMap],
    /// Another task's video against the same article.
    pub neg_video: &'a [ScoreMap],
    /// The video against another task's article.
    pub neg_article: &'a [ScoreMap],
    /// Hierarchy of the positive article.
    pub hierarchy: &'a Hierarchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mil: f64,
    pub cs: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grad_positive: Vec<ScoreMap>,
    pub grad_neg_video: Vec<ScoreMap>,
    pub grad_neg_article: Vec<ScoreMap>,
}

struct BagTop {
    /// (sentence, similarity) of the selected top-k1 sentences
    picked: Vec<(usize, f64)>,
    /// top-k2 surviving cells per picked sentence
    cells: Vec<Vec<(usize, usize)>>,
}

fn bag_top(maps: &[ScoreMap], hp: &HyperParams, filtered: bool) -> Result<BagTop> {
    let mut sims = Vec::with_capacity(maps.len());
    let mut all_cells = Vec::with_capacity(maps.len());
    for m in maps {
        let (sim, cells) = if filtered {
            let keep = single_sentence_mask(m, hp.ss_kernel, hp.ss_threshold)?;
            let n = m.size();
            let mut f = ScoreMap::zeros(n);
            for i in 0..n {
                for j in i..n {
                    if keep[i * n + j] {
                        f.set(i, j, m.get(i, j));
                    }
                }
            }
            let (sim, cells) = sentence_video_similarity_cells(&f, hp.k2)?;
            // suppressed cells hold a constant zero and carry no gradient
            let cells = cells.into_iter().filter(|&(i, j)| keep[i * n + j]).collect();
            (sim, cells)
        } else {
            sentence_video_similarity_cells(m, hp.k2)?
        };
        sims.push(sim);
        all_cells.push(cells);
    }
    let picked = article_video_similarity_indexed(&sims, hp.k1.resolve(maps.len()))?;
    let cells = picked.iter().map(|&(s, _)| all_cells[s].clone()).collect();
    Ok(BagTop { picked, cells })
}

fn scatter(grads: &mut [ScoreMap], top: &BagTop, d: &[f64], k2: usize, scale: f64) {
    for ((&(s, _), cells), &g) in top.picked.iter().zip(&top.cells).zip(d) {
        if g == 0.0 {
            continue;
        }
        // the mean runs over min(k2, valid) cells even when some were suppressed
        let denom = k2.min(grads[s].num_valid()) as f64;
        for &(i, j) in cells {
            let cur = grads[s].get(i, j);
            grads[s].set(i, j, cur + scale * g / denom);
        }
    }
}

fn mil_term(
    inputs: &LossInputs<'_>,
    hp: &HyperParams,
    filtered: bool,
    scale: f64,
    grads: &mut [Vec<ScoreMap>; 3],
) -> Result<f64> {
    let pos = bag_top(inputs.positive, hp, filtered)?;
    let nv = bag_top(inputs.neg_video, hp, filtered)?;
    let na = bag_top(inputs.neg_article, hp, filtered)?;
    let vals = |t: &BagTop| t.picked.iter().map(|p| p.1).collect::<Vec<_>>();
    let (loss, g) = mil_loss_with_grad(&vals(&pos), &vals(&nv), &vals(&na), hp.delta);
    scatter(&mut grads[0], &pos, &g.pos, hp.k2, scale);
    scatter(&mut grads[1], &nv, &g.neg_video, hp.k2, scale);
    scatter(&mut grads[2], &na, &g.neg_article, hp.k2, scale);
    Ok(loss)
}

/// Weighted training loss of one example, its breakdown, and its gradient
/// with respect to every score cell of the three map sets.
pub fn total_loss(inputs: &LossInputs<'_>, hp: &HyperParams, phase: Phase) -> Result<LossOutput> {
    for (name, maps) in [
        ("positive", inputs.positive),
        ("negative-video", inputs.neg_video),
        ("negative-article", inputs.neg_article),
    ] {
        if maps.is_empty() {
            return Err(Error::invalid(format!("{name} score maps are empty")));
        }
    }
    let zeros = |maps: &[ScoreMap]| maps.iter().map(|m| ScoreMap::zeros(m.size())).collect::<Vec<_>>();
    let mut grads = [zeros(inputs.positive), zeros(inputs.neg_video), zeros(inputs.neg_article)];

    let mil = match (hp.single_sentence, hp.ss_mode) {
        (false, _) => mil_term(inputs, hp, false, hp.lambda_mil, &mut grads)?,
        (true, SsMode::Replace) => mil_term(inputs, hp, true, hp.lambda_mil, &mut grads)?,
        (true, SsMode::Add) => {
            mil_term(inputs, hp, false, hp.lambda_mil, &mut grads)?
                + mil_term(inputs, hp, true, hp.lambda_mil, &mut grads)?
        }
    };

    let mut cs = 0.0;
    if phase == Phase::Full && hp.cross_sentence {
        let (loss, g) = cross_sentence_loss_with_grad(inputs.positive, inputs.hierarchy, hp.alpha, hp.cs_weight_grad)?;
        cs = loss;
        for (acc, gm) in grads[0].iter_mut().zip(&g) {
            for i in 0..acc.size() {
                for j in i..acc.size() {
                    let v = acc.get(i, j) + hp.lambda_cs * gm.get(i, j);
                    acc.set(i, j, v);
                }
            }
        }
    }

    let [grad_positive, grad_neg_video, grad_neg_article] = grads;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            mil,
            cs,
            total: hp.lambda_mil * mil + hp.lambda_cs * cs,
        },
        grad_positive,
        grad_neg_video,
        grad_neg_article,
    })
}
