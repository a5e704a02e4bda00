use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wsag::checkpoint::load_checkpoint;
use wsag::config::{load_config, RunConfig};
use wsag::evaluation::{evaluate, EvalPair, DEFAULT_IOUS, DEFAULT_KS};
use wsag::formats::{read_predictions, write_predictions, Manifest};
use wsag::inference::{oracle_score_maps, predict_pair, score_video};
use wsag::model::random_gradient_audit;
use wsag::synthetic::{write_dataset, GeneratorSpec};
use wsag::training::{read_log, train, TrainOptions};
use wsag::{Error, Result};

/// Weakly-supervised temporal article grounding.
///
/// WSAG_THREADS caps worker pools; every command currently runs on one
/// thread, which is also the deterministic mode.
#[derive(Parser)]
#[command(name = "wsag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/, test/, oracle/, spec.lock).
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Generator spec file (key = value); flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override one generator key, e.g. `--set noise_sigma=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes run.lock, train.log, timing.log and checkpoints.
    Train {
        /// Training manifest (defaults to `train_manifest` of the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run config (key = value), e.g. a previous run.lock.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Continue from OUT/last.ckpt.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs; resume later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(short, long)]
        verbose: bool,
    },
    /// Score a split and write ranked predictions.
    Infer {
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint; not needed with --oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score cells by cosine between pooled clips and sentence embedding.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        /// Config supplying NMS settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate predictions against the annotations of a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Also write the machine-readable report here.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Finite-difference audit of the model gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 16)]
        d_v: usize,
        #[arg(long, default_value_t = 16)]
        d_s: usize,
        #[arg(long, default_value_t = 32)]
        d_h: usize,
        #[arg(long, default_value_t = 3)]
        sentences: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Per-epoch loss table from a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn split_set(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got `{s}`")))
}

fn resolve_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        let (k, v) = split_set(s)?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<usize> {
    match std::env::var("WSAG_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("WSAG_THREADS must be an integer, got `{v}`"))),
        _ => Ok(0),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let workers = threads()?;
    match cli.command {
        Command::Generate { out, spec, sets, seed } => {
            let mut g = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    GeneratorSpec::parse(&text)?
                }
                None => GeneratorSpec::default(),
            };
            for s in &sets {
                let (k, v) = split_set(s)?;
                g.set(k, v)?;
            }
            if let Some(seed) = seed {
                g.seed = seed;
            }
            g.validate()?;
            let paths = write_dataset(&g, &out)?;
            println!("train manifest: {}", paths.train_manifest.display());
            println!("test manifest:  {}", paths.test_manifest.display());
            println!("train oracle annotations: {}", paths.train_oracle_gt.display());
        }
        Command::Train {
            data,
            out,
            config,
            sets,
            resume,
            stop_after,
            verbose,
        } => {
            let mut cfg = resolve_config(config.as_deref(), &sets)?;
            if let Some(d) = data {
                cfg.train_manifest = Some(d);
            }
            let manifest_path = cfg
                .train_manifest
                .clone()
                .ok_or_else(|| Error::InvalidArgument("no training data: pass --data or set train_manifest".into()))?;
            let manifest = Manifest::read(&manifest_path)?;
            let dataset = manifest.load_dataset()?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let lock = out.join("run.lock");
            let text = format!("# threads = {workers} (deterministic single-threaded run)\n{}", cfg.to_text());
            fs::write(&lock, text).map_err(|e| Error::Io { path: lock.clone(), source: e })?;
            eprint!("{}", cfg.to_text());
            let outcome = train(
                &dataset,
                &cfg,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    resume,
                    stop_after,
                    verbose,
                },
            )?;
            println!(
                "trained {} epochs; checkpoint {}",
                outcome.epochs_done,
                out.join(if outcome.epochs_done == cfg.hp.epochs { "model.ckpt" } else { "last.ckpt" }).display()
            );
        }
        Command::Infer {
            data,
            checkpoint,
            oracle,
            out,
            config,
            sets,
        } => {
            let cfg = resolve_config(config.as_deref(), &sets)?;
            let manifest = Manifest::read(&data)?;
            let dataset = manifest.load_dataset()?;
            let params = match (&checkpoint, oracle) {
                (_, true) => None,
                (Some(p), false) => Some(load_checkpoint(p)?.params),
                (None, false) => return Err(Error::InvalidArgument("pass --checkpoint or --oracle".into())),
            };
            let mut preds = Vec::new();
            for task in &dataset.tasks {
                for v in &task.videos {
                    let (maps, index) = match &params {
                        Some(p) => score_video(p, &v.clips, v.duration, &task.article)?,
                        None => oracle_score_maps(&v.clips, v.duration, &task.article.embeddings())?,
                    };
                    preds.extend(predict_pair(&v.id, &maps, &index, &cfg.hp)?);
                }
            }
            write_predictions(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval { data, predictions, tsv } => {
            let manifest = Manifest::read(&data)?;
            let dataset = manifest.load_dataset()?;
            let gt = manifest
                .load_ground_truth()?
                .ok_or_else(|| Error::InvalidArgument(format!("{} lists no annotations", data.display())))?;
            let preds = read_predictions(&predictions)?;
            let mut by_video: std::collections::BTreeMap<&str, Vec<_>> = Default::default();
            for p in &preds {
                by_video.entry(p.video_id.as_str()).or_default().push(p.clone());
            }
            let parents: Vec<Vec<Option<usize>>> = dataset.tasks.iter().map(|t| t.article.parents()).collect();
            let empty = Vec::new();
            let mut pairs = Vec::new();
            for (ti, task) in dataset.tasks.iter().enumerate() {
                for v in &task.videos {
                    pairs.push(EvalPair {
                        video_id: &v.id,
                        task_id: &task.task_id,
                        parents: &parents[ti],
                        ranked: by_video.get(v.id.as_str()).unwrap_or(&empty),
                        truth: gt.for_video(&v.id),
                    });
                }
            }
            let report = evaluate(&pairs, &DEFAULT_KS, &DEFAULT_IOUS);
            print!("{}", report.to_table());
            if let Some(p) = tsv {
                fs::write(&p, report.to_tsv()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            }
        }
        Command::Gradcheck {
            seed,
            seeds,
            clips,
            d_v,
            d_s,
            d_h,
            sentences,
            epsilon,
            tolerance,
        } => {
            let mut worst: f64 = 0.0;
            for s in seed..seed + seeds {
                let r = random_gradient_audit(s, clips, d_v, d_s, d_h, sentences, epsilon)?;
                println!(
                    "seed {s}: max relative error {:.3e} (param {}, {} params, {} kink-adjusted, {} unresolved)",
                    r.max_rel_error, r.worst_param, r.checked, r.kink_adjusted, r.unresolved
                );
                let err = if r.unresolved > 0 { f64::INFINITY } else { r.max_rel_error };
                worst = worst.max(err);
            }
            let verdict = if worst < tolerance { "PASS" } else { "FAIL" };
            println!("max relative error {worst:.3e} (tolerance {tolerance:e}) {verdict}");
            if worst >= tolerance {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { log, out } => {
            let records = read_log(&log)?;
            let mut table = String::from("epoch\tphase\tsteps\tl_mil\tl_cs\ttotal\n");
            let mut e = 0;
            while e < records.len() {
                let epoch = records[e].epoch;
                let group: Vec<_> = records[e..].iter().take_while(|r| r.epoch == epoch).collect();
                let n = group.len() as f64;
                let mean = |f: fn(&wsag::objectives::LossBreakdown) -> f64| group.iter().map(|r| f(&r.loss)).sum::<f64>() / n;
                table.push_str(&format!(
                    "{epoch}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                    group[0].phase,
                    group.len(),
                    mean(|l| l.mil),
                    mean(|l| l.cs),
                    mean(|l| l.total)
                ));
                e += group.len();
            }
            match out {
                Some(p) => fs::write(&p, table).map_err(|e| Error::Io { path: p.clone(), source: e })?,
                None => print!("{table}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
