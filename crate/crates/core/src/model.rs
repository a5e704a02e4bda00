//! The grounding network.
//!
//! Proposal features are mean-pooled from clips, encoded by a masked 3x3
//! convolution stack, projected into a shared space and fused with each
//! projected sentence by an elementwise product. A second masked stack and a
//! linear classifier with a logistic output turn every fused map into a
//! matching-score map. All state is `f64`; gradients are computed by hand.

use std::cell::RefCell;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{add_column_sums, gemm};
use crate::temporal_map::{build_map_index, pool_proposal_features, ClipFeatures, MapIndex};

pub const PRE_FUSION_LAYERS: usize = 2;
pub const POST_FUSION_LAYERS: usize = 3;
const TAPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_s: usize,
    pub d_h: usize,
    pub num_clips: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_s == 0 || self.d_h == 0 || self.num_clips == 0 {
            return Err(Error::invalid(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Offsets of every tensor inside the flat parameter vector, in declaration
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub w_v: Range<usize>,
    pub b_v: Range<usize>,
    pub w_s: Range<usize>,
    pub b_s: Range<usize>,
    pub pre: Vec<(Range<usize>, Range<usize>)>,
    pub post: Vec<(Range<usize>, Range<usize>)>,
    pub cls_w: Range<usize>,
    pub cls_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(dims: &ModelDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w_v = take(dims.d_h * dims.d_v);
        let b_v = take(dims.d_h);
        let w_s = take(dims.d_h * dims.d_s);
        let b_s = take(dims.d_h);
        let pre = (0..PRE_FUSION_LAYERS)
            .map(|_| (take(TAPS * dims.d_v * dims.d_v), take(dims.d_v)))
            .collect();
        let post = (0..POST_FUSION_LAYERS)
            .map(|_| (take(TAPS * dims.d_h * dims.d_h), take(dims.d_h)))
            .collect();
        let cls_w = take(dims.d_h);
        let cls_b = take(1);
        Layout {
            w_v,
            b_v,
            w_s,
            b_s,
            pre,
            post,
            cls_w,
            cls_b,
            total: at,
        }
    }
}

/// All learnable weights, stored flat.
///
/// Projection matrices are `d_h x d_in` row-major. Convolution kernels are
/// `[tap][c_in][c_out]` so a layer is `im2col(x) * kernel`; tap `t` addresses
/// offset `(t / 3 - 1, t % 3 - 1)` in (start, end) clip coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let data = vec![0.0; layout.total];
        Ok(ModelParams { dims, layout, data })
    }

    pub fn from_vec(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        if data.len() != p.layout.total {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, dims require {}",
                data.len(),
                p.layout.total
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        p.data = data;
        Ok(p)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    /// Sets both convolution stacks to the identity kernel (center tap = I,
    /// zero bias).
    pub fn set_identity_convs(&mut self) {
        let dims = self.dims;
        let layers: Vec<_> = self
            .layout
            .pre
            .iter()
            .map(|l| (l.clone(), dims.d_v))
            .chain(self.layout.post.iter().map(|l| (l.clone(), dims.d_h)))
            .collect();
        for ((w, b), c) in layers {
            let kernel = &mut self.data[w];
            kernel.fill(0.0);
            for ch in 0..c {
                kernel[4 * c * c + ch * c + ch] = 1.0;
            }
            self.data[b].fill(0.0);
        }
    }
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_params(d_v: usize, d_s: usize, d_h: usize, num_clips: usize, seed: u64) -> Result<ModelParams> {
    let dims = ModelDims {
        d_v,
        d_s,
        d_h,
        num_clips,
    };
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = params.layout.clone();
    let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut params.data[range] {
            *v = rng.random_range(-a..a);
        }
    };
    fill(layout.w_v, d_v, d_h);
    fill(layout.w_s, d_s, d_h);
    for (w, _) in layout.pre {
        fill(w, TAPS * d_v, TAPS * d_v);
    }
    for (w, _) in layout.post {
        fill(w, TAPS * d_h, TAPS * d_h);
    }
    fill(layout.cls_w, d_h, 1);
    Ok(params)
}

/// Gradient of a scalar loss with respect to every parameter, in the same
/// flat layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub data: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(len: usize) -> Self {
        ParamGradients { data: vec![0.0; len] }
    }

    pub fn add_scaled(&mut self, other: &ParamGradients, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Matching scores of one sentence against every proposal, `N x N`
/// row-major. Cells below the diagonal are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    n: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(n: usize) -> Self {
        ScoreMap {
            n,
            values: vec![0.0; n * n],
        }
    }

    /// Builds a map from values listed in valid-cell (row-major) order.
    pub fn from_valid(n: usize, valid: &[f64]) -> Result<Self> {
        if valid.len() != n * (n + 1) / 2 {
            return Err(Error::invalid(format!(
                "expected {} valid values for a {n}x{n} map, got {}",
                n * (n + 1) / 2,
                valid.len()
            )));
        }
        let mut map = ScoreMap::zeros(n);
        let mut it = valid.iter();
        for i in 0..n {
            for j in i..n {
                map.values[i * n + j] = *it.next().unwrap();
            }
        }
        Ok(map)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i <= j, "cannot write below the diagonal");
        self.values[i * self.n + j] = v;
    }

    pub fn dense(&self) -> &[f64] {
        &self.values
    }

    pub fn num_valid(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    /// Valid-cell values in row-major order.
    pub fn valid_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_valid());
        for i in 0..self.n {
            out.extend_from_slice(&self.values[i * self.n + i..(i + 1) * self.n]);
        }
        out
    }

    pub fn max_valid(&self) -> f64 {
        self.valid_values().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: ModelDims,
    params: ModelParams,
    neighbors: Vec<[Option<usize>; 9]>,
    cells: Vec<(usize, usize)>,
    sentences: Vec<f64>,
    num_sentences: usize,
    /// `pre_acts[0]` is the pooled map, `pre_acts[l + 1]` the output of layer `l`.
    pre_acts: Vec<Vec<f64>>,
    vproj: Vec<f64>,
    sproj: Vec<f64>,
    /// `post_acts[0]` is the fused map of every sentence stacked.
    post_acts: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

impl ForwardCache {
    pub fn num_sentences(&self) -> usize {
        self.num_sentences
    }
}

fn im2col(x: &[f64], blocks: &[usize], p: usize, c: usize, nb: &[[Option<usize>; 9]]) -> Vec<f64> {
    let mut col = Vec::new();
    im2col_into(x, blocks, p, c, nb, &mut col);
    col
}

fn im2col_into(x: &[f64], blocks: &[usize], p: usize, c: usize, nb: &[[Option<usize>; 9]], col: &mut Vec<f64>) {
    let width = TAPS * c;
    col.clear();
    col.resize(blocks.len() * p * width, 0.0);
    for (bi, &b) in blocks.iter().enumerate() {
        let src = &x[b * p * c..(b + 1) * p * c];
        for (pos, taps) in nb.iter().enumerate() {
            let row = &mut col[(bi * p + pos) * width..(bi * p + pos + 1) * width];
            for (t, q) in taps.iter().enumerate() {
                if let Some(q) = q {
                    row[t * c..(t + 1) * c].copy_from_slice(&src[q * c..(q + 1) * c]);
                }
            }
        }
    }
}

fn col2im_add(dcol: &[f64], nblocks: usize, p: usize, c: usize, nb: &[[Option<usize>; 9]], dx: &mut [f64]) {
    let width = TAPS * c;
    for b in 0..nblocks {
        let dst = &mut dx[b * p * c..(b + 1) * p * c];
        for (pos, taps) in nb.iter().enumerate() {
            let row = &dcol[(b * p + pos) * width..(b * p + pos + 1) * width];
            for (t, q) in taps.iter().enumerate() {
                if let Some(q) = q {
                    for (d, v) in dst[q * c..(q + 1) * c].iter_mut().zip(&row[t * c..(t + 1) * c]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// One masked 3x3 convolution over `blocks` independent maps, optionally
/// followed by ReLU.
#[allow(clippy::too_many_arguments)]
fn conv_layer(
    x: &[f64],
    nblocks: usize,
    p: usize,
    c: usize,
    kernel: &[f64],
    bias: &[f64],
    nb: &[[Option<usize>; 9]],
    relu: bool,
) -> Vec<f64> {
    let blocks: Vec<usize> = (0..nblocks).collect();
    let col = im2col(x, &blocks, p, c, nb);
    let rows = nblocks * p;
    let mut y = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(rows, TAPS * c, c, &col, false, kernel, false, 1.0, &mut y);
    if relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

/// The last pre-fusion layer is linear; every other conv layer ends in ReLU.
fn pre_relu(l: usize) -> bool {
    l + 1 < PRE_FUSION_LAYERS
}

fn check_finite(values: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault { layer: layer() })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores every proposal of `index` against every sentence.
pub fn forward(
    params: &ModelParams,
    clips: &ClipFeatures,
    sentences: &[Vec<f64>],
    index: &MapIndex,
) -> Result<(Vec<ScoreMap>, ForwardCache)> {
    let dims = *params.dims();
    if sentences.is_empty() {
        return Err(Error::invalid("forward needs at least one sentence"));
    }
    if clips.dim() != dims.d_v {
        return Err(Error::invalid(format!(
            "clip dim {} does not match model d_v {}",
            clips.dim(),
            dims.d_v
        )));
    }
    if let Some(s) = sentences.iter().find(|s| s.len() != dims.d_s) {
        return Err(Error::invalid(format!(
            "sentence dim {} does not match model d_s {}",
            s.len(),
            dims.d_s
        )));
    }
    let layout = params.layout();
    let p = index.len();
    let n = index.num_clips();
    let s_count = sentences.len();
    let nb = index.neighbor_table();

    let pooled = pool_proposal_features(clips, index)?;
    let mut pre_acts = vec![pooled.data];
    for (l, (w, b)) in layout.pre.iter().enumerate() {
        let y = conv_layer(pre_acts.last().unwrap(), 1, p, dims.d_v, params.slice(w), params.slice(b), &nb, pre_relu(l));
        check_finite(&y, || format!("pre-fusion conv {l}"))?;
        pre_acts.push(y);
    }

    let vfeat = pre_acts.last().unwrap();
    let mut vproj = Vec::with_capacity(p * dims.d_h);
    for _ in 0..p {
        vproj.extend_from_slice(params.slice(&layout.b_v));
    }
    gemm(p, dims.d_v, dims.d_h, vfeat, false, params.slice(&layout.w_v), true, 1.0, &mut vproj);
    check_finite(&vproj, || "video projection".into())?;

    let sent_flat: Vec<f64> = sentences.iter().flatten().copied().collect();
    let mut sproj = Vec::with_capacity(s_count * dims.d_h);
    for _ in 0..s_count {
        sproj.extend_from_slice(params.slice(&layout.b_s));
    }
    gemm(s_count, dims.d_s, dims.d_h, &sent_flat, false, params.slice(&layout.w_s), true, 1.0, &mut sproj);
    check_finite(&sproj, || "sentence projection".into())?;

    let dh = dims.d_h;
    let mut fused = vec![0.0; s_count * p * dh];
    for s in 0..s_count {
        let sp = &sproj[s * dh..(s + 1) * dh];
        for pos in 0..p {
            let vp = &vproj[pos * dh..(pos + 1) * dh];
            let dst = &mut fused[(s * p + pos) * dh..(s * p + pos + 1) * dh];
            for h in 0..dh {
                dst[h] = sp[h] * vp[h];
            }
        }
    }
    let mut post_acts = vec![fused];
    for (l, (w, b)) in layout.post.iter().enumerate() {
        let y = conv_layer(post_acts.last().unwrap(), s_count, p, dh, params.slice(w), params.slice(b), &nb, true);
        check_finite(&y, || format!("post-fusion conv {l}"))?;
        post_acts.push(y);
    }

    let hidden = post_acts.last().unwrap();
    let cls_w = params.slice(&layout.cls_w);
    let cls_b = params.data[layout.cls_b.start];
    let scores: Vec<f64> = hidden
        .chunks_exact(dh)
        .map(|row| sigmoid(row.iter().zip(cls_w).map(|(a, b)| a * b).sum::<f64>() + cls_b))
        .collect();
    check_finite(&scores, || "classifier".into())?;

    let cells: Vec<(usize, usize)> = index.cells().iter().map(|c| (c.i, c.j)).collect();
    let maps = (0..s_count)
        .map(|s| {
            let mut m = ScoreMap::zeros(n);
            for (pos, &(i, j)) in cells.iter().enumerate() {
                m.values[i * n + j] = scores[s * p + pos];
            }
            m
        })
        .collect();

    let cache = ForwardCache {
        dims,
        params: params.clone(),
        neighbors: nb,
        cells,
        sentences: sent_flat,
        num_sentences: s_count,
        pre_acts,
        vproj,
        sproj,
        post_acts,
        scores,
    };
    Ok((maps, cache))
}

/// Exact gradients of a scalar loss whose derivative with respect to each
/// score cell is given by `upstream` (one `N x N` map per sentence; values at
/// invalid cells are ignored).
pub fn backward(cache: &ForwardCache, upstream: &[ScoreMap]) -> Result<ParamGradients> {
    let dims = cache.dims;
    let n = dims_n(cache);
    if upstream.len() != cache.num_sentences || upstream.iter().any(|u| u.size() != n) {
        return Err(Error::invalid(format!(
            "upstream gradient has {} maps, expected {} of size {n}",
            upstream.len(),
            cache.num_sentences
        )));
    }
    let params = &cache.params;
    let layout = params.layout();
    let mut grads = ParamGradients::zeros(params.len());
    let p = cache.cells.len();
    let dh = dims.d_h;
    let nb = &cache.neighbors;

    // sentences whose maps carry gradient; the others contribute nothing
    let active: Vec<usize> = (0..cache.num_sentences)
        .filter(|&s| cache.cells.iter().any(|&(i, j)| upstream[s].get(i, j) != 0.0))
        .collect();
    if active.is_empty() {
        return Ok(grads);
    }
    let a_count = active.len();

    let gather = |buf: &[f64], width: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(a_count * p * width);
        for &s in &active {
            out.extend_from_slice(&buf[s * p * width..(s + 1) * p * width]);
        }
        out
    };

    let mut dlogit = Vec::with_capacity(a_count * p);
    for &s in &active {
        for (pos, &(i, j)) in cache.cells.iter().enumerate() {
            let sc = cache.scores[s * p + pos];
            dlogit.push(upstream[s].get(i, j) * sc * (1.0 - sc));
        }
    }

    let hidden = gather(cache.post_acts.last().unwrap(), dh);
    {
        let g = &mut grads.data[layout.cls_w.clone()];
        gemm(1, a_count * p, dh, &dlogit, false, &hidden, false, 1.0, g);
        grads.data[layout.cls_b.start] += dlogit.iter().sum::<f64>();
    }
    let cls_w = params.slice(&layout.cls_w);
    let mut dx = vec![0.0; a_count * p * dh];
    for (row, &d) in dx.chunks_exact_mut(dh).zip(&dlogit) {
        for (o, w) in row.iter_mut().zip(cls_w) {
            *o = d * w;
        }
    }

    for l in (0..POST_FUSION_LAYERS).rev() {
        let out = gather(&cache.post_acts[l + 1], dh);
        let input = &cache.post_acts[l];
        let (w, b) = &layout.post[l];
        dx = conv_backward(dx, Some(&out), input, &active, p, dh, params.slice(w), nb, &mut grads, w, b);
    }

    // fusion
    let dfused = dx;
    let mut dsproj = vec![0.0; cache.num_sentences * dh];
    let mut dvproj = vec![0.0; p * dh];
    for (ai, &s) in active.iter().enumerate() {
        let sp = &cache.sproj[s * dh..(s + 1) * dh];
        let ds = &mut dsproj[s * dh..(s + 1) * dh];
        for pos in 0..p {
            let df = &dfused[(ai * p + pos) * dh..(ai * p + pos + 1) * dh];
            let vp = &cache.vproj[pos * dh..(pos + 1) * dh];
            let dv = &mut dvproj[pos * dh..(pos + 1) * dh];
            for h in 0..dh {
                ds[h] += df[h] * vp[h];
                dv[h] += df[h] * sp[h];
            }
        }
    }

    gemm(
        dh,
        cache.num_sentences,
        dims.d_s,
        &dsproj,
        true,
        &cache.sentences,
        false,
        1.0,
        &mut grads.data[layout.w_s.clone()],
    );
    add_column_sums(&dsproj, dh, &mut grads.data[layout.b_s.clone()]);

    let vfeat = cache.pre_acts.last().unwrap();
    gemm(dh, p, dims.d_v, &dvproj, true, vfeat, false, 1.0, &mut grads.data[layout.w_v.clone()]);
    add_column_sums(&dvproj, dh, &mut grads.data[layout.b_v.clone()]);

    let mut dx = vec![0.0; p * dims.d_v];
    gemm(p, dh, dims.d_v, &dvproj, false, params.slice(&layout.w_v), false, 0.0, &mut dx);
    for l in (0..PRE_FUSION_LAYERS).rev() {
        let out = &cache.pre_acts[l + 1];
        let input = &cache.pre_acts[l];
        let (w, b) = &layout.pre[l];
        let out = pre_relu(l).then_some(out.as_slice());
        dx = conv_backward(dx, out, input, &[0], p, dims.d_v, params.slice(w), nb, &mut grads, w, b);
    }

    Ok(grads)
}

fn dims_n(cache: &ForwardCache) -> usize {
    cache.cells.last().map(|&(_, j)| j + 1).unwrap_or(0)
}

/// Backward through `conv_layer`. `dout` and `out` (present when the layer
/// ends in ReLU) are compact over `blocks`; `input` is the full stacked
/// layer input.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    mut dout: Vec<f64>,
    out: Option<&[f64]>,
    input: &[f64],
    blocks: &[usize],
    p: usize,
    c: usize,
    kernel: &[f64],
    nb: &[[Option<usize>; 9]],
    grads: &mut ParamGradients,
    w_range: &Range<usize>,
    b_range: &Range<usize>,
) -> Vec<f64> {
    if let Some(out) = out {
        for (d, y) in dout.iter_mut().zip(out) {
            if *y <= 0.0 {
                *d = 0.0;
            }
        }
    }
    let rows = blocks.len() * p;
    let col = im2col(input, blocks, p, c, nb);
    gemm(TAPS * c, rows, c, &col, true, &dout, false, 1.0, &mut grads.data[w_range.clone()]);
    add_column_sums(&dout, c, &mut grads.data[b_range.clone()]);
    let mut dcol = vec![0.0; rows * TAPS * c];
    gemm(rows, c, TAPS * c, &dout, false, kernel, true, 0.0, &mut dcol);
    let mut dx = vec![0.0; rows * c];
    col2im_add(&dcol, blocks.len(), p, c, nb, &mut dx);
    dx
}

/// A scalar loss over score maps together with its per-cell derivative.
pub type LossFn<'a> = dyn Fn(&[ScoreMap]) -> (f64, Vec<ScoreMap>) + 'a;

/// Outcome of a finite-difference audit.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over the resolved parameters.
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub checked: usize,
    /// Parameters whose central difference at the requested step would
    /// straddle a ReLU kink and were estimated one-sided or with a smaller step.
    pub kink_adjusted: usize,
    /// Parameters sitting on a kink at every tried step.
    pub unresolved: usize,
}

/// Which part of the network a parameter feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    PreWeight(usize),
    PreBias(usize),
    VideoProj,
    SentenceProj,
    PostWeight(usize),
    PostBias(usize),
    Classifier,
}

fn site_of(layout: &Layout, k: usize) -> Site {
    for (l, (w, b)) in layout.pre.iter().enumerate() {
        if w.contains(&k) {
            return Site::PreWeight(l);
        }
        if b.contains(&k) {
            return Site::PreBias(l);
        }
    }
    for (l, (w, b)) in layout.post.iter().enumerate() {
        if w.contains(&k) {
            return Site::PostWeight(l);
        }
        if b.contains(&k) {
            return Site::PostBias(l);
        }
    }
    if layout.w_v.contains(&k) || layout.b_v.contains(&k) {
        Site::VideoProj
    } else if layout.w_s.contains(&k) || layout.b_s.contains(&k) {
        Site::SentenceProj
    } else {
        Site::Classifier
    }
}

/// Pre-activations of every conv layer at the unperturbed point, plus the
/// im2col matrices needed to apply a single-weight change as a rank-1 update.
struct FdBase<'a> {
    cache: &'a ForwardCache,
    pre_col: Vec<Vec<f64>>,
    pre_z: Vec<Vec<f64>>,
    post_col: Vec<Vec<f64>>,
    post_z: Vec<Vec<f64>>,
    scratch: RefCell<Vec<f64>>,
}

fn conv_linear(x: &[f64], nblocks: usize, p: usize, c: usize, kernel: &[f64], bias: &[f64], nb: &[[Option<usize>; 9]]) -> (Vec<f64>, Vec<f64>) {
    let blocks: Vec<usize> = (0..nblocks).collect();
    let col = im2col(x, &blocks, p, c, nb);
    let rows = nblocks * p;
    let mut z = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        z.extend_from_slice(bias);
    }
    gemm(rows, TAPS * c, c, &col, false, kernel, false, 1.0, &mut z);
    (col, z)
}

impl<'a> FdBase<'a> {
    fn new(cache: &'a ForwardCache) -> Self {
        let params = &cache.params;
        let layout = params.layout();
        let p = cache.cells.len();
        let (dv, dh) = (cache.dims.d_v, cache.dims.d_h);
        let nb = &cache.neighbors;
        let (mut pre_col, mut pre_z, mut post_col, mut post_z) = (vec![], vec![], vec![], vec![]);
        for (l, (w, b)) in layout.pre.iter().enumerate() {
            let (col, z) = conv_linear(&cache.pre_acts[l], 1, p, dv, params.slice(w), params.slice(b), nb);
            pre_col.push(col);
            pre_z.push(z);
        }
        for (l, (w, b)) in layout.post.iter().enumerate() {
            let (col, z) =
                conv_linear(&cache.post_acts[l], cache.num_sentences, p, dh, params.slice(w), params.slice(b), nb);
            post_col.push(col);
            post_z.push(z);
        }
        FdBase {
            cache,
            pre_col,
            pre_z,
            post_col,
            post_z,
            scratch: RefCell::new(Vec::new()),
        }
    }

    /// Change of every score (stacked `[sentence][cell]`) when parameter `k`
    /// moves by `delta`. Only layers downstream of the parameter are
    /// revisited, and each layer propagates its own change rather than its
    /// new value, so the result carries no cancellation error. The flag
    /// reports a ReLU changing side.
    fn score_delta(&self, k: usize, delta: f64) -> (Vec<f64>, bool) {
        let cache = self.cache;
        let params = &cache.params;
        let layout = params.layout();
        let site = site_of(layout, k);
        let p = cache.cells.len();
        let (dv, ds, dh) = (cache.dims.d_v, cache.dims.d_s, cache.dims.d_h);
        let s_count = cache.num_sentences;
        let nb = &cache.neighbors;
        let mut flipped = false;

        let seed_conv = |col: &[f64], c: usize, rows: usize, w: &Range<usize>, b: &Range<usize>| {
            let mut dz = vec![0.0; rows * c];
            if w.contains(&k) {
                let r = k - w.start;
                let (t, ci, co) = (r / (c * c), (r / c) % c, r % c);
                let width = TAPS * c;
                for (row, zr) in dz.chunks_exact_mut(c).enumerate() {
                    zr[co] = delta * col[row * width + t * c + ci];
                }
            } else {
                let co = k - b.start;
                for zr in dz.chunks_exact_mut(c) {
                    zr[co] = delta;
                }
            }
            dz
        };
        let relu_delta = |z: &[f64], dz: Vec<f64>, flipped: &mut bool| -> Vec<f64> {
            let mut dx = dz;
            for (d, &z0) in dx.iter_mut().zip(z) {
                let z1 = z0 + *d;
                if (z1 > 0.0) != (z0 > 0.0) {
                    *flipped = true;
                    *d = z1.max(0.0) - z0.max(0.0);
                } else if z0 <= 0.0 {
                    *d = 0.0;
                }
            }
            dx
        };
        let conv_delta = |dx: &[f64], nblocks: usize, c: usize, w: &Range<usize>| {
            let blocks: Vec<usize> = (0..nblocks).collect();
            let mut col = self.scratch.borrow_mut();
            im2col_into(dx, &blocks, p, c, nb, &mut col);
            let mut dz = vec![0.0; nblocks * p * c];
            gemm(nblocks * p, TAPS * c, c, &col, false, params.slice(w), false, 0.0, &mut dz);
            dz
        };

        // video branch
        let mut dvproj: Option<Vec<f64>> = None;
        if let Site::PreWeight(l0) | Site::PreBias(l0) = site {
            let (w, b) = &layout.pre[l0];
            let dz = seed_conv(&self.pre_col[l0], dv, p, w, b);
            let mut dx = if pre_relu(l0) { relu_delta(&self.pre_z[l0], dz, &mut flipped) } else { dz };
            for l in l0 + 1..PRE_FUSION_LAYERS {
                let dz = conv_delta(&dx, 1, dv, &layout.pre[l].0);
                dx = if pre_relu(l) { relu_delta(&self.pre_z[l], dz, &mut flipped) } else { dz };
            }
            let mut dvp = vec![0.0; p * dh];
            gemm(p, dv, dh, &dx, false, params.slice(&layout.w_v), true, 0.0, &mut dvp);
            dvproj = Some(dvp);
        } else if site == Site::VideoProj {
            let mut dvp = vec![0.0; p * dh];
            if layout.w_v.contains(&k) {
                let r = k - layout.w_v.start;
                let (h, ci) = (r / dv, r % dv);
                let vfeat = cache.pre_acts.last().unwrap();
                for pos in 0..p {
                    dvp[pos * dh + h] = delta * vfeat[pos * dv + ci];
                }
            } else {
                let h = k - layout.b_v.start;
                for pos in 0..p {
                    dvp[pos * dh + h] = delta;
                }
            }
            dvproj = Some(dvp);
        }
        let dsproj = (site == Site::SentenceProj).then(|| {
            let mut dsp = vec![0.0; s_count * dh];
            if layout.w_s.contains(&k) {
                let r = k - layout.w_s.start;
                let (h, ci) = (r / ds, r % ds);
                for s in 0..s_count {
                    dsp[s * dh + h] = delta * cache.sentences[s * ds + ci];
                }
            } else {
                let h = k - layout.b_s.start;
                for s in 0..s_count {
                    dsp[s * dh + h] = delta;
                }
            }
            dsp
        });

        // post-fusion stack
        let mut dhidden: Option<Vec<f64>> = None;
        if dvproj.is_some() || dsproj.is_some() {
            let zeros_v = vec![0.0; p * dh];
            let zeros_s = vec![0.0; s_count * dh];
            let dvp = dvproj.as_deref().unwrap_or(&zeros_v);
            let dsp = dsproj.as_deref().unwrap_or(&zeros_s);
            let mut dx = vec![0.0; s_count * p * dh];
            for s in 0..s_count {
                for pos in 0..p {
                    for h in 0..dh {
                        let (sv, vv) = (cache.sproj[s * dh + h], cache.vproj[pos * dh + h]);
                        let (dsv, dvv) = (dsp[s * dh + h], dvp[pos * dh + h]);
                        dx[(s * p + pos) * dh + h] = sv * dvv + dsv * vv + dsv * dvv;
                    }
                }
            }
            for l in 0..POST_FUSION_LAYERS {
                let dz = conv_delta(&dx, s_count, dh, &layout.post[l].0);
                dx = relu_delta(&self.post_z[l], dz, &mut flipped);
            }
            dhidden = Some(dx);
        } else if let Site::PostWeight(l0) | Site::PostBias(l0) = site {
            let (w, b) = &layout.post[l0];
            let dz = seed_conv(&self.post_col[l0], dh, s_count * p, w, b);
            let mut dx = relu_delta(&self.post_z[l0], dz, &mut flipped);
            for l in l0 + 1..POST_FUSION_LAYERS {
                let dz = conv_delta(&dx, s_count, dh, &layout.post[l].0);
                dx = relu_delta(&self.post_z[l], dz, &mut flipped);
            }
            dhidden = Some(dx);
        }

        // classifier: logit change, then the exact sigmoid difference
        // s(a + d) - s(a) = s(a) (1 - s(a + d)) expm1(d)
        let hidden = cache.post_acts.last().unwrap();
        let cls_w = params.slice(&layout.cls_w);
        let cls_b = params.data[layout.cls_b.start];
        let dscores = (0..s_count * p)
            .map(|row| {
                let h = &hidden[row * dh..(row + 1) * dh];
                let mut da = match &dhidden {
                    Some(d) => d[row * dh..(row + 1) * dh].iter().zip(cls_w).map(|(a, b)| a * b).sum::<f64>(),
                    None => 0.0,
                };
                if layout.cls_w.contains(&k) {
                    let h_k = h[k - layout.cls_w.start];
                    let dh_k = dhidden.as_ref().map_or(0.0, |d| d[row * dh + k - layout.cls_w.start]);
                    da += delta * (h_k + dh_k);
                } else if k == layout.cls_b.start {
                    da += delta;
                }
                let a = h.iter().zip(cls_w).map(|(x, w)| x * w).sum::<f64>() + cls_b;
                sigmoid(a) * (1.0 - sigmoid(a + da)) * da.exp_m1()
            })
            .collect();
        (dscores, flipped)
    }

    fn shifted_maps(&self, dscores: &[f64]) -> Vec<ScoreMap> {
        let cache = self.cache;
        let n = dims_n(cache);
        let p = cache.cells.len();
        (0..cache.num_sentences)
            .map(|s| {
                let mut m = ScoreMap::zeros(n);
                for (pos, &(i, j)) in cache.cells.iter().enumerate() {
                    m.values[i * n + j] = cache.scores[s * p + pos] + dscores[s * p + pos];
                }
                m
            })
            .collect()
    }
}

/// The scalar loss a finite-difference audit differentiates.
pub enum AuditLoss<'a> {
    /// `sum(weights * scores)` over valid cells. Loss changes are formed
    /// directly from score changes, free of cancellation.
    Linear(&'a [ScoreMap]),
    /// An arbitrary loss, evaluated on the perturbed score maps.
    General(&'a LossFn<'a>),
}

/// Finite-difference estimate of every partial derivative, compared with
/// [`backward`].
///
/// Each parameter is probed with a central difference of step `epsilon`.
/// When one side of that probe moves a ReLU across zero the estimate is taken
/// one-sided (second order) on the other side; when both sides do, the step
/// is shrunk by 4 and the procedure repeated, up to twice.
pub fn finite_difference_audit(
    params: &ModelParams,
    clips: &ClipFeatures,
    sentences: &[Vec<f64>],
    index: &MapIndex,
    loss: AuditLoss<'_>,
    epsilon: f64,
) -> Result<FdReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (maps, cache) = forward(params, clips, sentences, index)?;
    let (center, upstream) = match &loss {
        AuditLoss::Linear(w) => {
            if w.len() != maps.len() || w.iter().any(|m| m.size() != index.num_clips()) {
                return Err(Error::invalid("loss weights must give one map per sentence"));
            }
            (0.0, w.to_vec())
        }
        AuditLoss::General(f) => f(&maps),
    };
    let analytic = backward(&cache, &upstream)?;
    let base = FdBase::new(&cache);
    let p = index.len();
    // loss change relative to the unperturbed point
    let eval = |k: usize, d: f64| -> (f64, bool) {
        let (ds, flipped) = base.score_delta(k, d);
        let change = match &loss {
            AuditLoss::Linear(w) => {
                let mut acc = 0.0;
                for (s, wm) in w.iter().enumerate() {
                    for (pos, &(i, j)) in cache.cells.iter().enumerate() {
                        acc += wm.get(i, j) * ds[s * p + pos];
                    }
                }
                acc
            }
            AuditLoss::General(f) => f(&base.shifted_maps(&ds)).0 - center,
        };
        (change, flipped)
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: 0,
        checked: params.len(),
        kink_adjusted: 0,
        unresolved: 0,
    };
    for k in 0..params.len() {
        let mut numeric = None;
        let mut h = epsilon;
        for attempt in 0..3 {
            let (plus, plus_kink) = eval(k, h);
            let (minus, minus_kink) = eval(k, -h);
            if !plus_kink && !minus_kink {
                numeric = Some((plus - minus) / (2.0 * h));
            } else if plus_kink != minus_kink {
                let (sign, near) = if plus_kink { (-1.0, minus) } else { (1.0, plus) };
                let (far, far_kink) = eval(k, 2.0 * sign * h);
                if !far_kink {
                    numeric = Some(sign * (4.0 * near - far) / (2.0 * h));
                }
            }
            if numeric.is_some() {
                if attempt > 0 || plus_kink || minus_kink {
                    report.kink_adjusted += 1;
                }
                break;
            }
            h /= 4.0;
        }
        let Some(numeric) = numeric else {
            report.unresolved += 1;
            continue;
        };
        let a = analytic.data[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = k;
        }
    }
    Ok(report)
}

/// Worst relative error of [`finite_difference_audit`] for an arbitrary
/// loss; infinite when some parameter could not be resolved.
pub fn finite_difference_check(
    params: &ModelParams,
    clips: &ClipFeatures,
    sentences: &[Vec<f64>],
    index: &MapIndex,
    loss_fn: &LossFn<'_>,
    epsilon: f64,
) -> Result<f64> {
    let r = finite_difference_audit(params, clips, sentences, index, AuditLoss::General(loss_fn), epsilon)?;
    Ok(if r.unresolved > 0 { f64::INFINITY } else { r.max_rel_error })
}

/// Random model and inputs; the loss is a fixed random weighted mean of
/// every score cell so each parameter's derivative is exercised.
pub fn random_gradient_audit(seed: u64, n: usize, d_v: usize, d_s: usize, d_h: usize, sentences: usize, epsilon: f64) -> Result<FdReport> {
    let params = init_params(d_v, d_s, d_h, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let clips = ClipFeatures::new(n, d_v, (0..n * d_v).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let sents: Vec<Vec<f64>> = (0..sentences)
        .map(|_| (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let index = build_map_index(n, n as f64)?;
    // averaged rather than summed over cells so the loss stays O(1e-2)
    let scale = 1.0 / (sentences * index.len()) as f64;
    let weights: Vec<ScoreMap> = (0..sentences)
        .map(|_| {
            let mut m = ScoreMap::zeros(n);
            for c in index.cells() {
                m.set(c.i, c.j, scale * rng.random_range(-1.0..1.0));
            }
            m
        })
        .collect();
    finite_difference_audit(&params, &clips, &sents, &index, AuditLoss::Linear(&weights), epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal_map::build_map_index;

    fn random_inputs(n: usize, d_v: usize, d_s: usize, sents: usize, seed: u64) -> (ClipFeatures, Vec<Vec<f64>>, MapIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clips = ClipFeatures::new(n, d_v, (0..n * d_v).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let sentences = (0..sents)
            .map(|_| (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (clips, sentences, build_map_index(n, n as f64 * 2.0).unwrap())
    }

    fn weighted_loss(seed: u64) -> impl Fn(&[ScoreMap]) -> (f64, Vec<ScoreMap>) {
        move |maps: &[ScoreMap]| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            let grads = maps
                .iter()
                .map(|m| {
                    let n = m.size();
                    let mut g = ScoreMap::zeros(n);
                    for i in 0..n {
                        for j in i..n {
                            let w: f64 = rng.random_range(-1.0..1.0);
                            let v = m.get(i, j);
                            total += w * v + 0.5 * v * v;
                            g.set(i, j, w + v);
                        }
                    }
                    g
                })
                .collect();
            (total, grads)
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(4, 5, 6, 4, 11).unwrap();
        let b = init_params(4, 5, 6, 4, 11).unwrap();
        let c = init_params(4, 5, 6, 4, 12).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
        let l = a.layout();
        assert!(a.as_slice()[l.b_v.clone()].iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.as_slice()[l.w_v.clone()].iter().all(|v| v.abs() < bound));
        assert_eq!(l.total, a.len());
    }

    #[test]
    fn zero_classifier_scores_one_half() {
        let mut params = init_params(3, 4, 5, 5, 1).unwrap();
        let l = params.layout().clone();
        params.as_mut_slice()[l.cls_w.clone()].fill(0.0);
        params.as_mut_slice()[l.cls_b.clone()].fill(0.0);
        let (clips, sents, idx) = random_inputs(5, 3, 4, 2, 3);
        let (maps, _) = forward(&params, &clips, &sents, &idx).unwrap();
        for m in &maps {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(m.get(i, j), if i <= j { 0.5 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn invalid_cells_are_zero_and_valid_in_open_unit_interval() {
        let params = init_params(3, 4, 6, 6, 9).unwrap();
        let (clips, sents, idx) = random_inputs(6, 3, 4, 3, 5);
        let (maps, _) = forward(&params, &clips, &sents, &idx).unwrap();
        assert_eq!(maps.len(), 3);
        for m in &maps {
            for i in 0..6 {
                for j in 0..6 {
                    let v = m.get(i, j);
                    if i > j {
                        assert_eq!(v, 0.0);
                    } else {
                        assert!(v > 0.0 && v < 1.0);
                    }
                }
            }
        }
        let (again, _) = forward(&params, &clips, &sents, &idx).unwrap();
        assert_eq!(maps, again);
    }

    #[test]
    fn sentence_order_does_not_matter() {
        let params = init_params(3, 4, 6, 5, 2).unwrap();
        let (clips, sents, idx) = random_inputs(5, 3, 4, 3, 8);
        let (maps, _) = forward(&params, &clips, &sents, &idx).unwrap();
        let reversed: Vec<_> = sents.iter().rev().cloned().collect();
        let (rmaps, _) = forward(&params, &clips, &reversed, &idx).unwrap();
        for (a, b) in maps.iter().zip(rmaps.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let params = init_params(3, 4, 6, 5, 2).unwrap();
        let (clips, sents, idx) = random_inputs(5, 3, 4, 1, 8);
        assert!(matches!(
            forward(&params, &clips, &[vec![0.0; 5]], &idx),
            Err(Error::InvalidArgument(_))
        ));
        assert!(forward(&params, &clips, &[], &idx).is_err());
        let (other, _, _) = random_inputs(5, 2, 4, 1, 8);
        assert!(forward(&params, &other, &sents, &idx).is_err());
    }

    #[test]
    fn non_finite_weights_name_the_layer() {
        let mut params = init_params(3, 4, 6, 5, 2).unwrap();
        let w = params.layout().w_s.start;
        params.as_mut_slice()[w] = f64::INFINITY;
        let (clips, sents, idx) = random_inputs(5, 3, 4, 1, 8);
        match forward(&params, &clips, &sents, &idx) {
            Err(Error::NumericFault { layer }) => assert_eq!(layer, "sentence projection"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn backward_zero_and_linear_in_upstream() {
        let params = init_params(3, 4, 6, 5, 4).unwrap();
        let (clips, sents, idx) = random_inputs(5, 3, 4, 2, 1);
        let (maps, cache) = forward(&params, &clips, &sents, &idx).unwrap();
        let zeros: Vec<_> = maps.iter().map(|m| ScoreMap::zeros(m.size())).collect();
        let g0 = backward(&cache, &zeros).unwrap();
        assert!(g0.data.iter().all(|&v| v == 0.0));

        let (_, up) = weighted_loss(3)(&maps);
        let doubled: Vec<_> = up
            .iter()
            .map(|m| ScoreMap {
                n: m.n,
                values: m.values.iter().map(|v| 2.0 * v).collect(),
            })
            .collect();
        let g1 = backward(&cache, &up).unwrap();
        let g2 = backward(&cache, &doubled).unwrap();
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(backward(&cache, &up[..1]).is_err());
    }

    #[test]
    fn invalid_cell_upstream_is_ignored() {
        let params = init_params(3, 4, 6, 4, 4).unwrap();
        let (clips, sents, idx) = random_inputs(4, 3, 4, 1, 1);
        let (_, cache) = forward(&params, &clips, &sents, &idx).unwrap();
        let mut up = ScoreMap::zeros(4);
        up.values[3 * 4] = 7.0; // (3, 0)
        let g = backward(&cache, &[up]).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_small_model() {
        let params = init_params(4, 5, 6, 5, 21).unwrap();
        let (clips, sents, idx) = random_inputs(5, 4, 5, 2, 22);
        let loss = weighted_loss(23);
        let err = finite_difference_check(&params, &clips, &sents, &idx, &loss, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn identity_convs_are_exact() {
        let mut params = init_params(4, 5, 6, 4, 31).unwrap();
        params.set_identity_convs();
        // positive projections and inputs keep every ReLU strictly active
        let l = params.layout().clone();
        for r in [l.w_v, l.w_s] {
            params.as_mut_slice()[r].iter_mut().for_each(|v| *v = v.abs());
        }
        let (clips, sents, idx) = random_inputs(4, 4, 5, 2, 32);
        let clips = ClipFeatures::new(4, 4, clips.as_slice().iter().map(|v| v + 2.0).collect()).unwrap();
        let sents: Vec<Vec<f64>> = sents.iter().map(|s| s.iter().map(|v| v + 2.0).collect()).collect();
        let loss = weighted_loss(33);
        let err = finite_difference_check(&params, &clips, &sents, &idx, &loss, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn score_deltas_match_full_forward() {
        let params = init_params(3, 4, 5, 4, 21).unwrap();
        let (clips, sents, idx) = random_inputs(4, 3, 4, 2, 22);
        let (_, cache) = forward(&params, &clips, &sents, &idx).unwrap();
        let base = FdBase::new(&cache);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ks: Vec<usize> = (0..60).map(|_| rng.random_range(0..params.len())).collect();
        let l = params.layout();
        ks.extend([0, params.len() - 1, l.b_s.start, l.b_v.start, l.w_s.start, l.pre[1].1.start, l.post[0].1.start]);
        ks.extend(l.cls_w.clone());
        for k in ks {
            for delta in [1e-3, -0.37] {
                let mut probe = params.clone();
                probe.as_mut_slice()[k] += delta;
                let full = forward(&probe, &clips, &sents, &idx).unwrap().0;
                let (ds, _) = base.score_delta(k, delta);
                let fast = base.shifted_maps(&ds);
                for (a, b) in full.iter().zip(&fast) {
                    for (x, y) in a.dense().iter().zip(b.dense()) {
                        assert!((x - y).abs() < 1e-12, "param {k}: {x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn kink_flag_tracks_relu_crossings() {
        let params = init_params(3, 3, 4, 4, 31).unwrap();
        let (clips, sents, idx) = random_inputs(4, 3, 3, 1, 32);
        let (_, cache) = forward(&params, &clips, &sents, &idx).unwrap();
        let base = FdBase::new(&cache);
        let b = params.layout().post[2].1.start;
        let (ds, flipped) = base.score_delta(b, 0.0);
        assert!(!flipped && ds.iter().all(|&d| d == 0.0));
        let any_on = base.post_z[2].chunks(4).any(|r| r[0] > 0.0);
        assert_eq!(base.score_delta(b, -1e6).1, any_on);
    }

    #[test]
    fn linear_audit_matches_general_audit_on_the_same_loss() {
        let params = init_params(3, 3, 6, 4, 41).unwrap();
        let (clips, sents, idx) = random_inputs(4, 3, 3, 2, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let weights: Vec<ScoreMap> = (0..2)
            .map(|_| {
                let mut m = ScoreMap::zeros(4);
                for c in idx.cells() {
                    m.set(c.i, c.j, rng.random_range(-1.0..1.0));
                }
                m
            })
            .collect();
        let general = |maps: &[ScoreMap]| {
            let mut t = 0.0;
            for (m, w) in maps.iter().zip(&weights) {
                for c in idx.cells() {
                    t += m.get(c.i, c.j) * w.get(c.i, c.j);
                }
            }
            (t, weights.clone())
        };
        let lin = finite_difference_audit(&params, &clips, &sents, &idx, AuditLoss::Linear(&weights), 1e-5).unwrap();
        let gen = finite_difference_audit(&params, &clips, &sents, &idx, AuditLoss::General(&general), 1e-5).unwrap();
        assert_eq!(lin.unresolved, 0);
        assert!(lin.max_rel_error < 1e-6, "{lin:?}");
        // plain evaluation carries cancellation noise on near-zero gradients
        assert!(gen.max_rel_error < 1e-3, "{gen:?}");
        assert!(lin.max_rel_error <= gen.max_rel_error);
    }

    #[test]
    fn epsilon_must_be_positive() {
        let params = init_params(2, 2, 2, 2, 1).unwrap();
        let (clips, sents, idx) = random_inputs(2, 2, 2, 1, 1);
        let loss = weighted_loss(1);
        assert!(finite_difference_check(&params, &clips, &sents, &idx, &loss, 0.0).is_err());
    }

    #[test]
    fn masking_an_intermediate_map_changes_nothing() {
        // Re-running the post-fusion stack on a fused map whose invalid region
        // is explicitly zeroed in dense form reproduces the compact pipeline.
        let params = init_params(3, 3, 4, 4, 5).unwrap();
        let (clips, sents, idx) = random_inputs(4, 3, 3, 1, 6);
        let (maps, cache) = forward(&params, &clips, &sents, &idx).unwrap();
        let n = 4;
        let dh = 4;
        let p = idx.len();
        let mut dense = vec![0.0; n * n * dh];
        for (pos, c) in idx.cells().iter().enumerate() {
            dense[(c.i * n + c.j) * dh..(c.i * n + c.j + 1) * dh]
                .copy_from_slice(&cache.post_acts[0][pos * dh..(pos + 1) * dh]);
        }
        // dense reference convolution with explicit zero padding and masking
        let layout = params.layout();
        for (w, b) in &layout.post {
            let kernel = params.slice(w);
            let bias = params.slice(b);
            let mut next = vec![0.0; n * n * dh];
            for i in 0..n {
                for j in i..n {
                    for co in 0..dh {
                        let mut acc = bias[co];
                        for t in 0..9 {
                            let (ni, nj) = (i as isize + t as isize / 3 - 1, j as isize + t as isize % 3 - 1);
                            if ni < 0 || nj < 0 || ni >= n as isize || nj >= n as isize {
                                continue;
                            }
                            let src = &dense[(ni as usize * n + nj as usize) * dh..][..dh];
                            for ci in 0..dh {
                                acc += src[ci] * kernel[t * dh * dh + ci * dh + co];
                            }
                        }
                        next[(i * n + j) * dh + co] = acc.max(0.0);
                    }
                }
            }
            dense = next;
        }
        let cls_w = params.slice(&layout.cls_w);
        let cls_b = params.as_slice()[layout.cls_b.start];
        for (pos, c) in idx.cells().iter().enumerate() {
            let h = &dense[(c.i * n + c.j) * dh..][..dh];
            let s = sigmoid(h.iter().zip(cls_w).map(|(a, b)| a * b).sum::<f64>() + cls_b);
            assert!((s - maps[0].get(c.i, c.j)).abs() < 1e-12, "cell {pos}");
        }
        assert_eq!(p, 10);
    }
}
