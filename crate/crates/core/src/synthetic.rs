//! Deterministic synthetic grounding datasets with planted ground truth.
//!
//! Each task has one unit "step concept" per high-level sentence. A video
//! splits its clips into contiguous step intervals in article order, and
//! each step interval splits again among the step's child sentences. A
//! child's concept is its parent's concept plus a perturbation orthogonal
//! to it. The perturbations of one parent sum to zero and children of a
//! step have equal length (up to a remainder clip), so pooling over a whole
//! step interval gives back the parent concept.
//!
//! A clip carries the concept of the child interval covering it plus
//! Gaussian noise. Sentence embeddings are concepts plus independent noise.
//! Distractor sentences get concepts orthogonal to every step concept and
//! have no annotations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{parse_pairs, parse_value};
use crate::data::{Article, GroundTruth, Scale, Sentence, Video};
use crate::error::{Error, Result};
use crate::formats::{self, ArticleEntry, Manifest, VideoEntry};
use crate::temporal_map::{ClipFeatures, Segment};

pub const VIDEO_DURATION: f64 = 64.0;
const MAX_ATTEMPTS: usize = 10_000;
const MAX_STEP_COS: f64 = 0.3;
/// Norm of a child's offset from its parent concept.
const CHILD_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub num_tasks: usize,
    pub videos_per_task: usize,
    pub num_clips: usize,
    pub clip_dim: usize,
    pub sent_dim: usize,
    pub high_per_article: usize,
    pub low_per_high: usize,
    pub distractor_count: usize,
    pub noise_sigma: f64,
    pub groundable_fraction: f64,
    /// Chance that a video swaps one adjacent pair of steps.
    pub order_swap_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_tasks: 20,
            videos_per_task: 5,
            num_clips: 16,
            clip_dim: 32,
            sent_dim: 32,
            high_per_article: 6,
            low_per_high: 2,
            distractor_count: 4,
            noise_sigma: 0.1,
            groundable_fraction: 0.75,
            order_swap_prob: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("videos_per_task", self.videos_per_task),
            ("num_clips", self.num_clips),
            ("clip_dim", self.clip_dim),
            ("sent_dim", self.sent_dim),
            ("high_per_article", self.high_per_article),
            ("low_per_high", self.low_per_high),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{key} must be >= 1")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be a finite value >= 0"));
        }
        if !(self.groundable_fraction > 0.0 && self.groundable_fraction <= 1.0) {
            return Err(Error::invalid("groundable_fraction must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.order_swap_prob) {
            return Err(Error::invalid("order_swap_prob must lie in [0, 1]"));
        }
        if self.num_clips < self.high_per_article * self.low_per_high {
            return Err(Error::invalid(format!(
                "num_clips {} cannot hold {} steps of {} children",
                self.num_clips, self.high_per_article, self.low_per_high
            )));
        }
        Ok(())
    }

    pub fn concept_dim(&self) -> usize {
        self.clip_dim.min(self.sent_dim)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_tasks" => self.num_tasks = parse_value(key, value)?,
            "videos_per_task" => self.videos_per_task = parse_value(key, value)?,
            "num_clips" => self.num_clips = parse_value(key, value)?,
            "clip_dim" => self.clip_dim = parse_value(key, value)?,
            "sent_dim" => self.sent_dim = parse_value(key, value)?,
            "high_per_article" => self.high_per_article = parse_value(key, value)?,
            "low_per_high" => self.low_per_high = parse_value(key, value)?,
            "distractor_count" => self.distractor_count = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "groundable_fraction" => self.groundable_fraction = parse_value(key, value)?,
            "order_swap_prob" => self.order_swap_prob = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    message: "unknown generator key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = GeneratorSpec::default();
        for (k, v) in parse_pairs(text)? {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# wsag generator spec")?;
        writeln!(f, "num_tasks = {}", self.num_tasks)?;
        writeln!(f, "videos_per_task = {}", self.videos_per_task)?;
        writeln!(f, "num_clips = {}", self.num_clips)?;
        writeln!(f, "clip_dim = {}", self.clip_dim)?;
        writeln!(f, "sent_dim = {}", self.sent_dim)?;
        writeln!(f, "high_per_article = {}", self.high_per_article)?;
        writeln!(f, "low_per_high = {}", self.low_per_high)?;
        writeln!(f, "distractor_count = {}", self.distractor_count)?;
        writeln!(f, "noise_sigma = {}", self.noise_sigma)?;
        writeln!(f, "groundable_fraction = {}", self.groundable_fraction)?;
        writeln!(f, "order_swap_prob = {}", self.order_swap_prob)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

/// Where a sentence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentenceRole {
    /// High-level sentence for step `s`.
    Step(usize),
    /// Child `c` of step `s`.
    Child(usize, usize),
    Distractor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video: Video,
    /// Clip ranges `[first, last]` per step, indexed by step.
    pub step_clips: Vec<(usize, usize)>,
    /// Clip ranges per step and child.
    pub child_clips: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: String,
    pub step_concepts: Vec<Vec<f64>>,
    /// Concepts of each step's children as planted in the videos.
    pub child_concepts: Vec<Vec<Vec<f64>>>,
    /// Concept of every sentence before noise, in the concept dimension.
    pub sentence_concepts: Vec<Vec<f64>>,
    pub roles: Vec<SentenceRole>,
    /// Whether each sentence still describes its planted content.
    pub groundable: Vec<bool>,
    pub article: Article,
    pub videos: Vec<SyntheticVideo>,
    pub gt: GroundTruth,
}

pub fn task_seed(spec_seed: u64, task_index: usize) -> u64 {
    spec_seed.wrapping_mul(1_000_003).wrapping_add(task_index as u64)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components along the orthonormal `basis`.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
}

fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        project_out(&mut u, &basis);
        let n = norm(&u);
        if n > 1e-9 {
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Splits `total` into `parts` positive sizes that are multiples of `unit`
/// except for the `total % unit` remainder clips, spread one per part.
fn random_partition(rng: &mut ChaCha8Rng, total: usize, parts: usize, unit: usize) -> Vec<usize> {
    let units = total / unit;
    let mut counts = vec![1usize; parts];
    for _ in 0..units - parts {
        counts[rng.random_range(0..parts)] += 1;
    }
    let mut sizes: Vec<usize> = counts.iter().map(|c| c * unit).collect();
    let mut order: Vec<usize> = (0..parts).collect();
    order.shuffle(rng);
    for &p in order.iter().take(total % unit) {
        sizes[p] += 1;
    }
    sizes
}

fn pad(v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(dim, 0.0);
    out
}

pub fn generate_task(spec: &GeneratorSpec, task_index: usize) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(spec.seed, task_index));
    let dim = spec.concept_dim();
    let h = spec.high_per_article;
    let c = spec.low_per_high;
    let task_id = format!("task{task_index:03}");
    let mut attempts = 0usize;

    let mut steps: Vec<Vec<f64>> = Vec::with_capacity(h);
    while steps.len() < h {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::GenerationFailure(format!(
                "could not draw {h} step concepts with |cos| < {MAX_STEP_COS} in {dim} dimensions"
            )));
        }
        let cand = random_unit(&mut rng, dim);
        if steps.iter().all(|s| dot(s, &cand).abs() < MAX_STEP_COS) {
            steps.push(cand);
        }
    }
    let step_basis = orthonormal_basis(&steps);

    let distractor = |rng: &mut ChaCha8Rng, attempts: &mut usize| -> Result<Vec<f64>> {
        loop {
            *attempts += 1;
            if *attempts > MAX_ATTEMPTS {
                return Err(Error::GenerationFailure(format!(
                    "no room for a distractor orthogonal to {h} steps in {dim} dimensions"
                )));
            }
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            project_out(&mut v, &step_basis);
            let n = norm(&v);
            if n > 1e-6 {
                return Ok(v.into_iter().map(|x| x / n).collect());
            }
        }
    };

    // child offsets: orthogonal to the parent, zero-sum, mean norm CHILD_OFFSET
    let mut child_concepts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(h);
    for s in &steps {
        let mut offs: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                project_out(&mut v, std::slice::from_ref(s));
                v
            })
            .collect();
        let mean: Vec<f64> = (0..dim).map(|d| offs.iter().map(|o| o[d]).sum::<f64>() / c as f64).collect();
        for o in &mut offs {
            for (x, m) in o.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        let avg = offs.iter().map(|o| norm(o)).sum::<f64>() / c as f64;
        let scale = if avg > 1e-12 { CHILD_OFFSET / avg } else { 0.0 };
        child_concepts.push(
            offs.iter()
                .map(|o| s.iter().zip(o).map(|(p, e)| p + scale * e).collect())
                .collect(),
        );
    }

    // article layout: each step followed by its children
    let mut concepts: Vec<Vec<f64>> = Vec::new();
    let mut roles: Vec<SentenceRole> = Vec::new();
    for (si, s) in steps.iter().enumerate() {
        concepts.push(s.clone());
        roles.push(SentenceRole::Step(si));
        for (ci, cc) in child_concepts[si].iter().enumerate() {
            concepts.push(cc.clone());
            roles.push(SentenceRole::Child(si, ci));
        }
    }
    let hierarchical = roles.len();
    let replaced = (((1.0 - spec.groundable_fraction) * hierarchical as f64).round() as usize).min(hierarchical);
    let mut idx: Vec<usize> = (0..hierarchical).collect();
    idx.shuffle(&mut rng);
    let mut groundable = vec![true; hierarchical];
    for &i in &idx[..replaced] {
        groundable[i] = false;
        concepts[i] = distractor(&mut rng, &mut attempts)?;
    }
    // extra high-level distractors go between step groups
    let group_starts: Vec<usize> = (0..hierarchical).filter(|&i| matches!(roles[i], SentenceRole::Step(_))).collect();
    let mut inserts: Vec<usize> = (0..spec.distractor_count)
        .map(|_| {
            let g = rng.random_range(0..=group_starts.len());
            group_starts.get(g).copied().unwrap_or(hierarchical)
        })
        .collect();
    inserts.sort_unstable();
    let mut extra = Vec::with_capacity(spec.distractor_count);
    for _ in 0..spec.distractor_count {
        extra.push(distractor(&mut rng, &mut attempts)?);
    }

    let mut order: Vec<(Option<usize>, Vec<f64>)> = Vec::new();
    let mut next_extra = 0;
    for i in 0..=hierarchical {
        while next_extra < inserts.len() && inserts[next_extra] == i {
            order.push((None, extra[next_extra].clone()));
            next_extra += 1;
        }
        if i < hierarchical {
            order.push((Some(i), concepts[i].clone()));
        }
    }

    let mut final_pos = vec![0usize; hierarchical];
    for (pos, (orig, _)) in order.iter().enumerate() {
        if let Some(o) = orig {
            final_pos[*o] = pos;
        }
    }
    // roles list steps in step order
    let step_pos: Vec<usize> = (0..hierarchical)
        .filter(|&i| matches!(roles[i], SentenceRole::Step(_)))
        .map(|i| final_pos[i])
        .collect();

    let text_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut sentences = Vec::with_capacity(order.len());
    let mut all_roles = Vec::with_capacity(order.len());
    let mut all_groundable = Vec::with_capacity(order.len());
    let mut sentence_concepts = Vec::with_capacity(order.len());
    for (orig, concept) in &order {
        let (role, ground) = match orig {
            Some(o) => (roles[*o], groundable[*o]),
            None => (SentenceRole::Distractor, false),
        };
        let (scale, parent) = match role {
            SentenceRole::Child(s, _) => {
                let parent_orig = (0..hierarchical).find(|&i| roles[i] == SentenceRole::Step(s)).unwrap();
                // links only join sentences that both describe planted content
                let linked = ground && groundable[parent_orig];
                (Scale::Low, linked.then_some(step_pos[s]))
            }
            _ => (Scale::High, None),
        };
        let embedding: Vec<f64> = pad(concept, spec.sent_dim)
            .into_iter()
            .map(|x| x + if spec.noise_sigma > 0.0 { text_noise.sample(&mut rng) } else { 0.0 })
            .collect();
        sentences.push(Sentence {
            scale,
            parent,
            embedding,
        });
        all_roles.push(if ground { role } else { SentenceRole::Distractor });
        all_groundable.push(ground);
        sentence_concepts.push(concept.clone());
    }
    let article = Article::new(task_id.clone(), sentences)?;

    let mut videos = Vec::with_capacity(spec.videos_per_task);
    let mut gt = GroundTruth::new();
    let clip_len = VIDEO_DURATION / spec.num_clips as f64;
    for v in 0..spec.videos_per_task {
        let video_id = format!("{task_id}_v{v}");
        let sizes = random_partition(&mut rng, spec.num_clips, h, c);
        let mut step_order: Vec<usize> = (0..h).collect();
        if h > 1 && rng.random::<f64>() < spec.order_swap_prob {
            let k = rng.random_range(0..h - 1);
            step_order.swap(k, k + 1);
        }
        let mut step_clips = vec![(0usize, 0usize); h];
        let mut child_clips = vec![Vec::new(); h];
        let mut cursor = 0;
        for &s in &step_order {
            let len = sizes[s];
            step_clips[s] = (cursor, cursor + len - 1);
            let base = len / c;
            let rem = len % c;
            let mut cc = cursor;
            for k in 0..c {
                let l = base + usize::from(k < rem);
                child_clips[s].push((cc, cc + l - 1));
                cc += l;
            }
            cursor += len;
        }

        let clip_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut data = Vec::with_capacity(spec.num_clips * spec.clip_dim);
        let mut clip_concept: Vec<&Vec<f64>> = vec![&steps[0]; spec.num_clips];
        for s in 0..h {
            for (k, &(a, b)) in child_clips[s].iter().enumerate() {
                for slot in clip_concept.iter_mut().take(b + 1).skip(a) {
                    *slot = &child_concepts[s][k];
                }
            }
        }
        for concept in &clip_concept {
            for x in pad(concept, spec.clip_dim) {
                let noisy = x + if spec.noise_sigma > 0.0 { clip_noise.sample(&mut rng) } else { 0.0 };
                data.push(noisy as f32 as f64);
            }
        }
        let clips = ClipFeatures::new(spec.num_clips, spec.clip_dim, data)?;

        let seconds = |(a, b): (usize, usize)| {
            let end = if b + 1 == spec.num_clips {
                VIDEO_DURATION
            } else {
                (b + 1) as f64 * clip_len
            };
            Segment::new(a as f64 * clip_len, end)
        };
        for (pos, role) in all_roles.iter().enumerate() {
            match *role {
                SentenceRole::Step(s) => gt.add(&video_id, pos, seconds(step_clips[s])?),
                SentenceRole::Child(s, k) => gt.add(&video_id, pos, seconds(child_clips[s][k])?),
                SentenceRole::Distractor => {}
            }
        }
        videos.push(SyntheticVideo {
            video: Video {
                id: video_id,
                task_id: task_id.clone(),
                duration: VIDEO_DURATION,
                clips,
            },
            step_clips,
            child_clips,
        });
    }

    Ok(SyntheticTask {
        task_id,
        step_concepts: steps,
        child_concepts,
        sentence_concepts,
        roles: all_roles,
        groundable: all_groundable,
        article,
        videos,
        gt,
    })
}

/// Train and test tasks, split 80/20 by task index (the last fifth, at
/// least one task, is held out).
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<(Vec<SyntheticTask>, Vec<SyntheticTask>)> {
    if spec.num_tasks < 2 {
        return Err(Error::invalid("a dataset needs at least 2 tasks"));
    }
    spec.validate()?;
    let n_test = ((spec.num_tasks as f64 * 0.2).round() as usize).max(1);
    let n_train = spec.num_tasks - n_test;
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for t in 0..spec.num_tasks {
        let task = generate_task(spec, t)?;
        if t < n_train {
            train.push(task);
        } else {
            test.push(task);
        }
    }
    Ok((train, test))
}

/// Paths written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Annotations of the training videos, kept out of the training split.
    pub train_oracle_gt: PathBuf,
    pub spec_lock: PathBuf,
}

fn write_split(dir: &Path, tasks: &[SyntheticTask], with_gt: bool) -> Result<PathBuf> {
    let mut manifest = Manifest {
        root: dir.to_path_buf(),
        ..Manifest::default()
    };
    let mut gt = GroundTruth::new();
    for t in tasks {
        let article_rel = PathBuf::from("articles").join(format!("{}.article", t.task_id));
        formats::write_article(&dir.join(&article_rel), &t.article)?;
        manifest.articles.push(ArticleEntry {
            task_id: t.task_id.clone(),
            path: article_rel,
        });
        for v in &t.videos {
            let rel = PathBuf::from("features").join(format!("{}.wsagf", v.video.id));
            formats::write_features(&dir.join(&rel), &v.video.clips)?;
            manifest.videos.push(VideoEntry {
                task_id: t.task_id.clone(),
                video_id: v.video.id.clone(),
                feature_path: rel,
                num_clips: v.video.clips.rows(),
                duration: v.video.duration,
            });
        }
        gt.merge(&t.gt);
    }
    if with_gt {
        formats::write_ground_truth(&dir.join("gt.tsv"), &gt)?;
        manifest.ground_truth = Some(PathBuf::from("gt.tsv"));
    }
    let path = dir.join("manifest.tsv");
    manifest.write(&path)?;
    Ok(path)
}

/// Writes `train/` (no annotations), `test/` (with annotations),
/// `oracle/train_gt.tsv` and `spec.lock` under `out`.
pub fn write_dataset(spec: &GeneratorSpec, out: &Path) -> Result<DatasetPaths> {
    let (train, test) = generate_dataset(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train_manifest = write_split(&out.join("train"), &train, false)?;
    let test_manifest = write_split(&out.join("test"), &test, true)?;
    let mut oracle = GroundTruth::new();
    for t in &train {
        oracle.merge(&t.gt);
    }
    let train_oracle_gt = out.join("oracle").join("train_gt.tsv");
    formats::write_ground_truth(&train_oracle_gt, &oracle)?;
    let spec_lock = out.join("spec.lock");
    fs::write(&spec_lock, spec.to_string()).map_err(|e| Error::io(&spec_lock, e))?;
    Ok(DatasetPaths {
        train_manifest,
        test_manifest,
        train_oracle_gt,
        spec_lock,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal_map::{build_map_index, pool_proposal_features};

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    #[test]
    fn zero_noise_clips_equal_concepts() {
        let spec = GeneratorSpec {
            noise_sigma: 0.0,
            ..GeneratorSpec::default()
        };
        let t = generate_task(&spec, 3).unwrap();
        for v in &t.videos {
            for s in 0..spec.high_per_article {
                for (k, &(a, b)) in v.child_clips[s].iter().enumerate() {
                    let expect: Vec<f64> = pad(&t.child_concepts[s][k], spec.clip_dim)
                        .into_iter()
                        .map(|x| x as f32 as f64)
                        .collect();
                    for r in a..=b {
                        assert_eq!(v.video.clips.row(r), &expect[..]);
                    }
                }
            }
        }
        let single = GeneratorSpec {
            noise_sigma: 0.0,
            low_per_high: 1,
            ..GeneratorSpec::default()
        };
        let t = generate_task(&single, 1).unwrap();
        for v in &t.videos {
            for (s, &(a, b)) in v.step_clips.iter().enumerate() {
                let expect: Vec<f64> = t.step_concepts[s].iter().map(|x| *x as f32 as f64).collect();
                for r in a..=b {
                    assert_eq!(v.video.clips.row(r), &expect[..]);
                }
            }
        }
    }

    #[test]
    fn full_groundability_annotates_everything() {
        let spec = GeneratorSpec {
            groundable_fraction: 1.0,
            distractor_count: 0,
            ..GeneratorSpec::default()
        };
        let t = generate_task(&spec, 0).unwrap();
        for v in &t.videos {
            let per = t.gt.for_video(&v.video.id).unwrap();
            for s in 0..t.article.len() {
                assert!(per.get(&s).is_some_and(|g| !g.is_empty()), "sentence {s}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_is_a_partition() {
        let spec = GeneratorSpec {
            num_tasks: 10,
            videos_per_task: 2,
            ..GeneratorSpec::default()
        };
        let (a_train, a_test) = generate_dataset(&spec).unwrap();
        let (b_train, b_test) = generate_dataset(&spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!((a_train.len(), a_test.len()), (8, 2));
        let mut ids: Vec<&str> = a_train.iter().chain(&a_test).map(|t| t.task_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(generate_dataset(&GeneratorSpec {
            num_tasks: 1,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn written_dataset_is_byte_identical_and_train_has_no_gt() {
        let spec = GeneratorSpec {
            num_tasks: 3,
            videos_per_task: 2,
            ..GeneratorSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_dataset(&spec, a.path()).unwrap();
        write_dataset(&spec, b.path()).unwrap();
        for rel in ["train/manifest.tsv", "test/gt.tsv", "test/features/task002_v1.wsagf", "spec.lock"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        let train = Manifest::read(&pa.train_manifest).unwrap();
        assert!(train.ground_truth.is_none());
        let test = Manifest::read(&pa.test_manifest).unwrap();
        assert!(test.load_ground_truth().unwrap().is_some());
        let ds = train.load_dataset().unwrap();
        assert_eq!(ds.tasks.len(), 2);
        assert_eq!(GeneratorSpec::parse(&fs::read_to_string(pa.spec_lock).unwrap()).unwrap(), spec);
    }

    #[test]
    fn crowded_spec_fails() {
        let spec = GeneratorSpec {
            clip_dim: 2,
            sent_dim: 2,
            num_clips: 64,
            high_per_article: 10,
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate_task(&spec, 0), Err(Error::GenerationFailure(_))));
    }

    #[test]
    fn children_nest_inside_parents_and_distractors_are_orthogonal() {
        let spec = GeneratorSpec::default();
        for ti in 0..20 {
            let t = generate_task(&spec, ti).unwrap();
            for v in &t.videos {
                for s in 0..spec.high_per_article {
                    let (pa, pb) = v.step_clips[s];
                    for &(a, b) in &v.child_clips[s] {
                        assert!(pa <= a && b <= pb);
                    }
                }
                let per = t.gt.for_video(&v.video.id).unwrap();
                for (pos, sent) in t.article.sentences.iter().enumerate() {
                    if let (Some(p), Some(child)) = (sent.parent, per.get(&pos)) {
                        let parent = &per[&p][0];
                        assert!(child[0].is_inside(parent));
                    }
                    for g in per.get(&pos).into_iter().flatten() {
                        assert!(g.start >= 0.0 && g.end <= VIDEO_DURATION);
                    }
                }
            }
            for (pos, concept) in t.sentence_concepts.iter().enumerate() {
                if !t.groundable[pos] {
                    assert!(t.gt.for_video(&t.videos[0].video.id).unwrap().get(&pos).is_none());
                    for s in &t.step_concepts {
                        assert!(cos(concept, s).abs() < 0.3);
                    }
                }
            }
        }
    }

    #[test]
    fn planted_cell_maximises_cosine_without_noise() {
        let spec = GeneratorSpec {
            noise_sigma: 0.0,
            ..GeneratorSpec::default()
        };
        for ti in 0..20 {
            let t = generate_task(&spec, ti).unwrap();
            let v = &t.videos[0];
            let index = build_map_index(spec.num_clips, VIDEO_DURATION).unwrap();
            let pooled = pool_proposal_features(&v.video.clips, &index).unwrap();
            let per = t.gt.for_video(&v.video.id).unwrap();
            for (&s, segs) in per {
                let c = &t.sentence_concepts[s];
                let scores: Vec<f64> = (0..index.len()).map(|p| cos(pooled.cell(p), c)).collect();
                let best = scores.iter().cloned().fold(f64::MIN, f64::max);
                let planted = (0..index.len())
                    .find(|&p| index.cell_to_segment(index.cells()[p]).unwrap() == segs[0])
                    .unwrap();
                assert!(scores[planted] >= best - 1e-9, "task {ti} sentence {s}");
            }
        }
    }
}
