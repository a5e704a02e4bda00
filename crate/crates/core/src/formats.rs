//! On-disk formats: binary clip features, text articles, ground truth,
//! predictions and dataset manifests.
//!
//! Feature files: `WSAGF1`, then `num_clips` and `dim` as little-endian
//! `u32`, then the row-major matrix as little-endian `f32`.
//!
//! Article files are line oriented:
//!
//! ```text
//! # wsag article v1
//! task <task_id>
//! <index>\t<high|low>\t<parent index or ->\t<comma separated embedding>
//! ```
//!
//! Manifests list `video`, `article` and (test splits only) `gt` records,
//! tab separated, with paths relative to the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{Article, Dataset, GroundTruth, Scale, Sentence, Task, Video};
use crate::error::{Error, Result};
use crate::inference::Prediction;
use crate::temporal_map::{ClipFeatures, Segment};

pub const FEATURE_MAGIC: &[u8; 6] = b"WSAGF1";

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_features(clips: &ClipFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + clips.as_slice().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(clips.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(clips.dim() as u32).to_le_bytes());
    for v in clips.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_features(path: &Path, clips: &ClipFeatures) -> Result<()> {
    write_bytes(path, &encode_features(clips))
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<ClipFeatures> {
    if bytes.len() < 6 || &bytes[..6] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "missing WSAGF1 magic"));
    }
    if bytes.len() < 14 {
        return Err(format_err(path, bytes.len() as u64, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if rows == 0 || dim == 0 {
        return Err(format_err(path, 6, "zero-sized feature matrix"));
    }
    let expected = 14 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {rows}x{dim}, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(path, 14 + 4 * bad as u64, "non-finite feature value"));
    }
    ClipFeatures::new(rows, dim, data)
}

/// Reads a feature file, checking the clip count when one is expected.
pub fn read_features(path: &Path, expected_clips: Option<usize>) -> Result<ClipFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let clips = decode_features(path, &bytes)?;
    if let Some(n) = expected_clips {
        if clips.rows() != n {
            return Err(format_err(
                path,
                6,
                format!("file holds {} clips, manifest says {n}", clips.rows()),
            ));
        }
    }
    Ok(clips)
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encode_article(article: &Article) -> String {
    let mut out = String::from("# wsag article v1\n");
    out.push_str(&format!("task {}\n", article.task_id));
    for (i, s) in article.sentences.iter().enumerate() {
        let parent = s.parent.map_or("-".to_string(), |p| p.to_string());
        out.push_str(&format!("{i}\t{}\t{parent}\t{}\n", s.scale, join_floats(&s.embedding)));
    }
    out
}

pub fn write_article(path: &Path, article: &Article) -> Result<()> {
    write_bytes(path, encode_article(article).as_bytes())
}

pub fn read_article(path: &Path) -> Result<Article> {
    let text = read_text(path)?;
    let mut task_id = None;
    let mut sentences = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(id) = line.strip_prefix("task ") {
            task_id = Some(id.trim().to_string());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(format_err(path, here, "expected 4 tab-separated fields"));
        }
        let index: usize = fields[0].parse().map_err(|_| format_err(path, here, "bad sentence index"))?;
        if index != sentences.len() {
            return Err(format_err(path, here, format!("sentence index {index} out of order")));
        }
        let scale: Scale = fields[1].parse().map_err(|e: Error| format_err(path, here, e.to_string()))?;
        let parent = match fields[2] {
            "-" => None,
            p => Some(p.parse().map_err(|_| format_err(path, here, "bad parent index"))?),
        };
        let embedding = fields[3]
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(path, here, "bad embedding value"))?;
        sentences.push(Sentence {
            scale,
            parent,
            embedding,
        });
    }
    let task_id = task_id.ok_or_else(|| format_err(path, 0, "missing `task` line"))?;
    Article::new(task_id, sentences).map_err(|e| format_err(path, 0, e.to_string()))
}

pub fn encode_ground_truth(gt: &GroundTruth) -> String {
    let mut out = String::from("# video_id\tsentence\tstart\tend\n");
    for (v, s, g) in gt.records() {
        out.push_str(&format!("{v}\t{s}\t{}\t{}\n", g.start, g.end));
    }
    out
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_bytes(path, encode_ground_truth(gt).as_bytes())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = read_text(path)?;
    let mut gt = GroundTruth::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(format_err(path, here, "expected video, sentence, start, end"));
        }
        let sentence = f[1].parse().map_err(|_| format_err(path, here, "bad sentence index"))?;
        let start: f64 = f[2].parse().map_err(|_| format_err(path, here, "bad start"))?;
        let end: f64 = f[3].parse().map_err(|_| format_err(path, here, "bad end"))?;
        let seg = Segment::new(start, end).map_err(|e| format_err(path, here, e.to_string()))?;
        gt.add(f[0], sentence, seg);
    }
    Ok(gt)
}

pub fn encode_predictions(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\n",
            p.video_id, p.sentence, p.segment.start, p.segment.end, p.score
        ));
    }
    out
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_bytes(path, encode_predictions(preds).as_bytes())
}

/// Reads a prediction file; records keep their file order (the ranking).
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(format_err(path, here, "expected 5 tab-separated fields"));
        }
        let parse = |s: &str, what: &str| s.parse::<f64>().map_err(|_| format_err(path, here, format!("bad {what}")));
        let segment = Segment::new(parse(f[2], "start")?, parse(f[3], "end")?)
            .map_err(|e| format_err(path, here, e.to_string()))?;
        out.push(Prediction {
            video_id: f[0].to_string(),
            sentence: f[1].parse().map_err(|_| format_err(path, here, "bad sentence index"))?,
            segment,
            score: parse(f[4], "score")?,
            cell: 0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub task_id: String,
    pub video_id: String,
    pub feature_path: PathBuf,
    pub num_clips: usize,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticleEntry {
    pub task_id: String,
    pub path: PathBuf,
}

/// Index of a dataset split. Paths are stored relative to `root`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub videos: Vec<VideoEntry>,
    pub articles: Vec<ArticleEntry>,
    pub ground_truth: Option<PathBuf>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut out = String::from("# wsag manifest v1\n");
        for a in &self.articles {
            out.push_str(&format!("article\t{}\t{}\n", a.task_id, a.path.display()));
        }
        for v in &self.videos {
            out.push_str(&format!(
                "video\t{}\t{}\t{}\t{}\t{}\n",
                v.task_id,
                v.video_id,
                v.feature_path.display(),
                v.num_clips,
                v.duration
            ));
        }
        if let Some(gt) = &self.ground_truth {
            out.push_str(&format!("gt\t{}\n", gt.display()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.encode().as_bytes())
    }

    /// Parses a manifest; `root` becomes the manifest's directory. Ids must
    /// be unique and every referenced file must exist.
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = read_text(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut m = Manifest {
            root,
            ..Manifest::default()
        };
        let mut offset = 0u64;
        for line in text.lines() {
            let here = offset;
            offset += line.len() as u64 + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            match (f[0], f.len()) {
                ("article", 3) => m.articles.push(ArticleEntry {
                    task_id: f[1].to_string(),
                    path: PathBuf::from(f[2]),
                }),
                ("video", 6) => m.videos.push(VideoEntry {
                    task_id: f[1].to_string(),
                    video_id: f[2].to_string(),
                    feature_path: PathBuf::from(f[3]),
                    num_clips: f[4].parse().map_err(|_| format_err(path, here, "bad num_clips"))?,
                    duration: f[5].parse().map_err(|_| format_err(path, here, "bad duration"))?,
                }),
                ("gt", 2) => m.ground_truth = Some(PathBuf::from(f[1])),
                _ => return Err(format_err(path, here, format!("unrecognised manifest record `{line}`"))),
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for v in &m.videos {
            if !ids.insert(&v.video_id) {
                return Err(format_err(path, 0, format!("duplicate video id `{}`", v.video_id)));
            }
            if !m.root.join(&v.feature_path).is_file() {
                return Err(format_err(path, 0, format!("missing feature file {}", v.feature_path.display())));
            }
        }
        let mut tasks = std::collections::BTreeSet::new();
        for a in &m.articles {
            if !tasks.insert(&a.task_id) {
                return Err(format_err(path, 0, format!("duplicate article for task `{}`", a.task_id)));
            }
            if !m.root.join(&a.path).is_file() {
                return Err(format_err(path, 0, format!("missing article file {}", a.path.display())));
            }
        }
        if let Some(gt) = &m.ground_truth {
            if !m.root.join(gt).is_file() {
                return Err(format_err(path, 0, format!("missing ground-truth file {}", gt.display())));
            }
        }
        Ok(m)
    }

    /// Loads every article and video into memory, grouped by task in
    /// article order.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut tasks = Vec::with_capacity(self.articles.len());
        for a in &self.articles {
            let article = read_article(&self.root.join(&a.path))?;
            let mut videos = Vec::new();
            for v in self.videos.iter().filter(|v| v.task_id == a.task_id) {
                let clips = read_features(&self.root.join(&v.feature_path), Some(v.num_clips))?;
                videos.push(Video {
                    id: v.video_id.clone(),
                    task_id: v.task_id.clone(),
                    duration: v.duration,
                    clips,
                });
            }
            tasks.push(Task {
                task_id: a.task_id.clone(),
                article,
                videos,
            });
        }
        Ok(Dataset { tasks })
    }

    pub fn load_ground_truth(&self) -> Result<Option<GroundTruth>> {
        self.ground_truth
            .as_ref()
            .map(|p| read_ground_truth(&self.root.join(p)))
            .transpose()
    }
}

/// Writes `lines` to a file, creating parent directories.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
