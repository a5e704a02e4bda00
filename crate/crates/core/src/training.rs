//! Weakly supervised training: negative sampling, article subsampling, Adam
//! and the epoch loop with checkpoint/resume.
//!
//! Every random draw comes from a generator seeded by `(seed, epoch, step)`,
//! so a run resumed from an epoch checkpoint replays the same trajectory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingState};
use crate::config::RunConfig;
use crate::data::{Article, Dataset};
use crate::error::{Error, Result};
use crate::model::{backward, forward, init_params, ModelParams, ParamGradients, ScoreMap};
use crate::objectives::{total_loss, LossBreakdown, LossInputs, Phase};
use crate::temporal_map::{resample_clips, ClipFeatures, MapIndex};

/// A positive (video, article) pair addressed by task and video position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainPair {
    pub task: usize,
    pub video: usize,
}

pub fn positive_pairs(dataset: &Dataset) -> Vec<TrainPair> {
    dataset
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| (0..task.videos.len()).map(move |v| TrainPair { task: t, video: v }))
        .collect()
}

/// A negative video `(task, video)` and a negative article `task`, each
/// drawn uniformly from the tasks other than `task`.
pub fn sample_negatives<R: Rng>(dataset: &Dataset, task: usize, rng: &mut R) -> Result<((usize, usize), usize)> {
    let others: Vec<usize> = (0..dataset.tasks.len()).filter(|&t| t != task).collect();
    if others.is_empty() {
        return Err(Error::UnsatisfiableNegative(
            "the pool holds a single task, so no negative pair exists".into(),
        ));
    }
    let videos: Vec<(usize, usize)> = others
        .iter()
        .flat_map(|&t| (0..dataset.tasks[t].videos.len()).map(move |v| (t, v)))
        .collect();
    if videos.is_empty() {
        return Err(Error::UnsatisfiableNegative("other tasks have no videos".into()));
    }
    let neg_video = videos[rng.random_range(0..videos.len())];
    let neg_article = others[rng.random_range(0..others.len())];
    Ok((neg_video, neg_article))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("Adam state, parameters and gradients differ in length"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFault {
            layer: "parameter gradient".into(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// Sorted sentence indices to keep for one step. Articles within the cap are
/// kept whole. Otherwise candidates are visited in random order and taken
/// together with their parent when both still fit, so every kept child keeps
/// its parent.
pub fn subsample_article<R: Rng>(article: &Article, max_sentences: usize, rng: &mut R) -> Vec<usize> {
    let n = article.len();
    if n <= max_sentences {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut keep = vec![false; n];
    let mut count = 0;
    for &i in &order {
        if count == max_sentences {
            break;
        }
        if keep[i] {
            continue;
        }
        let parent = article.sentences[i].parent.filter(|&p| !keep[p]);
        let need = 1 + usize::from(parent.is_some());
        if count + need <= max_sentences {
            keep[i] = true;
            if let Some(p) = parent {
                keep[p] = true;
            }
            count += need;
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, u64::MAX))
}

fn step_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, step as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} step={} phase={} l_mil={:.12e} l_cs={:.12e} total={:.12e}",
            self.epoch, self.step, self.phase, self.loss.mil, self.loss.cs, self.loss.total
        )
    }

    pub fn parse(line: &str) -> Result<StepRecord> {
        let mut rec = StepRecord {
            epoch: 0,
            step: 0,
            phase: Phase::Warmup,
            loss: LossBreakdown::default(),
        };
        let bad = || Error::invalid(format!("malformed training log line `{line}`"));
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "epoch" => rec.epoch = v.parse().map_err(|_| bad())?,
                "step" => rec.step = v.parse().map_err(|_| bad())?,
                "phase" => rec.phase = v.parse()?,
                "l_mil" => rec.loss.mil = v.parse().map_err(|_| bad())?,
                "l_cs" => rec.loss.cs = v.parse().map_err(|_| bad())?,
                "total" => rec.loss.total = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 6 {
            return Err(bad());
        }
        Ok(rec)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(StepRecord::parse).collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `last.ckpt`, `model.ckpt`, `train.log` and
    /// `timing.log`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this many epochs in this call (the run stays resumable).
    pub stop_after: Option<usize>,
    /// Print a one-line summary per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub log: Vec<StepRecord>,
}

/// Clip features resampled to the model's map size.
pub fn prepared_clips(dataset: &Dataset, num_clips: usize) -> Result<Vec<Vec<ClipFeatures>>> {
    dataset
        .tasks
        .iter()
        .map(|t| t.videos.iter().map(|v| resample_clips(&v.clips, num_clips)).collect())
        .collect()
}

struct Example<'a> {
    clips: &'a ClipFeatures,
    neg_clips: &'a ClipFeatures,
    article: Article,
    neg_article: Article,
}

/// Loss and gradient of one positive pair with its negatives.
fn example_grad(
    params: &ModelParams,
    ex: &Example<'_>,
    index: &MapIndex,
    cfg: &RunConfig,
    phase: Phase,
) -> Result<(LossBreakdown, ParamGradients)> {
    let hierarchy = ex.article.hierarchy()?;
    let own = ex.article.embeddings();
    let n_own = own.len();
    // the positive and negative-article maps share the video pathway
    let mut joint = own.clone();
    joint.extend(ex.neg_article.embeddings());
    let (maps, cache) = forward(params, ex.clips, &joint, index)?;
    let (neg_maps, neg_cache) = forward(params, ex.neg_clips, &own, index)?;
    let out = total_loss(
        &LossInputs {
            positive: &maps[..n_own],
            neg_video: &neg_maps,
            neg_article: &maps[n_own..],
            hierarchy: &hierarchy,
        },
        &cfg.hp,
        phase,
    )?;
    let mut upstream: Vec<ScoreMap> = out.grad_positive;
    upstream.extend(out.grad_neg_article);
    let mut g = backward(&cache, &upstream)?;
    let g2 = backward(&neg_cache, &out.grad_neg_video)?;
    g.add_scaled(&g2, 1.0);
    Ok((out.breakdown, g))
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Drops log lines from epochs at or after `epochs_done`.
fn truncate_log(path: &Path, epochs_done: usize) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let kept: Vec<StepRecord> = read_log(path)?.into_iter().filter(|r| r.epoch < epochs_done).collect();
    let text: String = kept.iter().map(|r| r.to_line() + "\n").collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(kept)
}

/// Trains on `dataset` with the hyperparameters and seeds of `cfg`.
pub fn train(dataset: &Dataset, cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.tasks.len() < 2 {
        return Err(Error::UnsatisfiableNegative("training needs at least 2 tasks".into()));
    }
    let d_v = dataset.clip_dim().ok_or_else(|| Error::invalid("dataset has no videos"))?;
    let d_s = dataset.sentence_dim().ok_or_else(|| Error::invalid("dataset has no articles"))?;
    let hp = &cfg.hp;
    let clips = prepared_clips(dataset, cfg.num_clips)?;
    let index = MapIndex::new(cfg.num_clips, 1.0)?;
    let pairs = positive_pairs(dataset);
    if pairs.is_empty() {
        return Err(Error::invalid("dataset has no videos"));
    }

    let mut params = init_params(d_v, d_s, cfg.d_h, cfg.num_clips, cfg.init_seed)?;
    let mut adam = AdamState::new(params.len());
    let mut start_epoch = 0usize;
    let mut log = Vec::new();

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let last = dir.join("last.ckpt");
        if opts.resume && last.exists() {
            let ckpt = load_checkpoint(&last)?;
            if ckpt.params.dims() != params.dims() {
                return Err(Error::invalid("checkpoint dimensions do not match the config and data"));
            }
            let state = ckpt
                .training
                .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
            params = ckpt.params;
            adam = state.adam;
            start_epoch = state.epochs_done as usize;
            log = truncate_log(&dir.join("train.log"), start_epoch)?;
        } else {
            for f in ["train.log", "timing.log"] {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
    }

    let started = Instant::now();
    let last_epoch = opts
        .stop_after
        .map_or(hp.epochs, |n| (start_epoch + n).min(hp.epochs));
    for epoch in start_epoch..last_epoch {
        let phase = if epoch < hp.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Full
        };
        let mut order = pairs.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut lines = Vec::new();
        let mut timings = Vec::new();
        let mut epoch_loss = LossBreakdown::default();
        for (step, batch) in order.chunks(hp.batch_size).enumerate() {
            let t0 = Instant::now();
            let mut rng = step_rng(cfg.seed, epoch, step);
            let mut grad = ParamGradients::zeros(params.len());
            let mut loss = LossBreakdown::default();
            let scale = 1.0 / batch.len() as f64;
            for pair in batch {
                let task = &dataset.tasks[pair.task];
                let ((nt, nv), na) = sample_negatives(dataset, pair.task, &mut rng)?;
                let keep = subsample_article(&task.article, hp.max_sentences, &mut rng);
                let neg_task = &dataset.tasks[na];
                let neg_keep = subsample_article(&neg_task.article, hp.max_sentences, &mut rng);
                let ex = Example {
                    clips: &clips[pair.task][pair.video],
                    neg_clips: &clips[nt][nv],
                    article: task.article.select(&keep),
                    neg_article: neg_task.article.select(&neg_keep),
                };
                let (b, g) = example_grad(&params, &ex, &index, cfg, phase)?;
                grad.add_scaled(&g, scale);
                loss.mil += scale * b.mil;
                loss.cs += scale * b.cs;
                loss.total += scale * b.total;
            }
            adam_step(
                params.as_mut_slice(),
                &grad.data,
                &mut adam,
                hp.lr,
                hp.beta1,
                hp.beta2,
                hp.adam_eps,
            )?;
            let rec = StepRecord {
                epoch,
                step,
                phase,
                loss,
            };
            lines.push(rec.to_line());
            timings.push(format!("epoch={epoch} step={step} wall_ms={:.3}", t0.elapsed().as_secs_f64() * 1e3));
            epoch_loss.mil += loss.mil;
            epoch_loss.cs += loss.cs;
            epoch_loss.total += loss.total;
            log.push(rec);
        }
        if opts.verbose {
            let steps = order.chunks(hp.batch_size).len() as f64;
            eprintln!(
                "epoch {epoch:>4} {phase:<6} l_mil={:.5} l_cs={:.5} total={:.5} ({:.1}s)",
                epoch_loss.mil / steps,
                epoch_loss.cs / steps,
                epoch_loss.total / steps,
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = &opts.out_dir {
            append_lines(&dir.join("train.log"), &lines)?;
            append_lines(&dir.join("timing.log"), &timings)?;
            save_checkpoint(
                &dir.join("last.ckpt"),
                &Checkpoint {
                    params: params.clone(),
                    training: Some(TrainingState {
                        adam: adam.clone(),
                        epochs_done: (epoch + 1) as u64,
                    }),
                },
            )?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        if last_epoch == hp.epochs {
            save_checkpoint(
                &dir.join("model.ckpt"),
                &Checkpoint {
                    params: params.clone(),
                    training: None,
                },
            )?;
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        epochs_done: last_epoch,
        log,
    })
}
