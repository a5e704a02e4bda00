//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected and
//! missing keys keep their defaults. [`RunConfig::to_text`] writes every key,
//! so its output (the `run.lock` of a run) parses back to the same config.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::{HyperParams, SentenceTopK, SsMode};

/// Parsed `key = value` pairs in file order.
pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.to_string(),
            message: format!("line {} is not `key = value`", n + 1),
        })?;
        let key = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(Error::Config {
                key,
                message: "given more than once".into(),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.into(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            message: format!("expected true or false, got `{value}`"),
        }),
    }
}

/// Numeric precision of model arithmetic. Only double precision is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: HyperParams,
    pub d_h: usize,
    pub num_clips: usize,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    /// Seed for shuffling, negatives and subsampling.
    pub seed: u64,
    pub precision: Precision,
    /// Training manifest; a command-line path takes precedence.
    pub train_manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hp: HyperParams::default(),
            d_h: 512,
            num_clips: 16,
            init_seed: 0,
            seed: 0,
            precision: Precision::F64,
            train_manifest: None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "delta",
    "alpha",
    "k1",
    "k2",
    "single_sentence",
    "ss_kernel",
    "ss_threshold",
    "ss_mode",
    "cross_sentence",
    "cs_weight_grad",
    "lambda_mil",
    "lambda_cs",
    "nms_iou",
    "structure_nms",
    "snms_const",
    "order_violation_only",
    "warmup_epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "max_sentences",
    "d_h",
    "num_clips",
    "init_seed",
    "seed",
    "precision",
    "train_manifest",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hp = &mut self.hp;
        match key {
            "delta" => hp.delta = parse_value(key, value)?,
            "alpha" => hp.alpha = parse_value(key, value)?,
            "k1" => {
                hp.k1 = if value == "auto" {
                    SentenceTopK::Auto
                } else {
                    SentenceTopK::Fixed(parse_value(key, value)?)
                }
            }
            "k2" => hp.k2 = parse_value(key, value)?,
            "single_sentence" => hp.single_sentence = parse_bool(key, value)?,
            "ss_kernel" => hp.ss_kernel = parse_value(key, value)?,
            "ss_threshold" => hp.ss_threshold = parse_value(key, value)?,
            "ss_mode" => hp.ss_mode = parse_value::<SsMode>(key, value)?,
            "cross_sentence" => hp.cross_sentence = parse_bool(key, value)?,
            "cs_weight_grad" => hp.cs_weight_grad = parse_bool(key, value)?,
            "lambda_mil" => hp.lambda_mil = parse_value(key, value)?,
            "lambda_cs" => hp.lambda_cs = parse_value(key, value)?,
            "nms_iou" => hp.nms_iou = parse_value(key, value)?,
            "structure_nms" => hp.structure_nms = parse_bool(key, value)?,
            "snms_const" => hp.snms_const = parse_value(key, value)?,
            "order_violation_only" => hp.order_violation_only = parse_bool(key, value)?,
            "warmup_epochs" => hp.warmup_epochs = parse_value(key, value)?,
            "lr" => hp.lr = parse_value(key, value)?,
            "beta1" => hp.beta1 = parse_value(key, value)?,
            "beta2" => hp.beta2 = parse_value(key, value)?,
            "adam_eps" => hp.adam_eps = parse_value(key, value)?,
            "batch_size" => hp.batch_size = parse_value(key, value)?,
            "epochs" => hp.epochs = parse_value(key, value)?,
            "max_sentences" => hp.max_sentences = parse_value(key, value)?,
            "d_h" => self.d_h = parse_value(key, value)?,
            "num_clips" => self.num_clips = parse_value(key, value)?,
            "init_seed" => self.init_seed = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f64" | "double" => Precision::F64,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!("unsupported precision `{value}`; only f64 is available"),
                        })
                    }
                }
            }
            "train_manifest" => self.train_manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.d_h == 0 {
            return Err(Error::Config {
                key: "d_h".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.num_clips == 0 {
            return Err(Error::Config {
                key: "num_clips".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let hp = &self.hp;
        let mut out = String::from("# wsag run config\n");
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("delta", hp.delta.to_string());
        put("alpha", hp.alpha.to_string());
        put("k1", hp.k1.to_string());
        put("k2", hp.k2.to_string());
        put("single_sentence", hp.single_sentence.to_string());
        put("ss_kernel", hp.ss_kernel.to_string());
        put("ss_threshold", hp.ss_threshold.to_string());
        put("ss_mode", hp.ss_mode.to_string());
        put("cross_sentence", hp.cross_sentence.to_string());
        put("cs_weight_grad", hp.cs_weight_grad.to_string());
        put("lambda_mil", hp.lambda_mil.to_string());
        put("lambda_cs", hp.lambda_cs.to_string());
        put("nms_iou", hp.nms_iou.to_string());
        put("structure_nms", hp.structure_nms.to_string());
        put("snms_const", hp.snms_const.to_string());
        put("order_violation_only", hp.order_violation_only.to_string());
        put("warmup_epochs", hp.warmup_epochs.to_string());
        put("lr", hp.lr.to_string());
        put("beta1", hp.beta1.to_string());
        put("beta2", hp.beta2.to_string());
        put("adam_eps", hp.adam_eps.to_string());
        put("batch_size", hp.batch_size.to_string());
        put("epochs", hp.epochs.to_string());
        put("max_sentences", hp.max_sentences.to_string());
        put("d_h", self.d_h.to_string());
        put("num_clips", self.num_clips.to_string());
        put("init_seed", self.init_seed.to_string());
        put("seed", self.seed.to_string());
        put("precision", "f64".to_string());
        put(
            "train_manifest",
            self.train_manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        out
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in parse_pairs(text)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
