//! In-memory dataset types shared by training, inference and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::Hierarchy;
use crate::temporal_map::{ClipFeatures, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    High,
    Low,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Scale::High),
            "low" => Ok(Scale::Low),
            other => Err(Error::invalid(format!("unknown sentence scale `{other}`"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::High => "high",
            Scale::Low => "low",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub scale: Scale,
    pub parent: Option<usize>,
    pub embedding: Vec<f64>,
}

/// Sentences in article order; a sentence's index is its article position.
#[derive(Debug, Clone, PartialEq)]
pub struct Article {
    pub task_id: String,
    pub sentences: Vec<Sentence>,
}

impl Article {
    pub fn new(task_id: impl Into<String>, sentences: Vec<Sentence>) -> Result<Self> {
        let article = Article {
            task_id: task_id.into(),
            sentences,
        };
        article.validate()?;
        Ok(article)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::invalid(format!("article `{}` has no sentences", self.task_id)));
        }
        let dim = self.sentences[0].embedding.len();
        for (i, s) in self.sentences.iter().enumerate() {
            if s.embedding.len() != dim || dim == 0 {
                return Err(Error::invalid(format!(
                    "article `{}` sentence {i} has embedding length {}, expected {dim}",
                    self.task_id,
                    s.embedding.len()
                )));
            }
            if s.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("article `{}` sentence {i} is not finite", self.task_id)));
            }
            match (s.scale, s.parent) {
                (Scale::High, Some(_)) => {
                    return Err(Error::invalid(format!("high-level sentence {i} cannot have a parent")))
                }
                (Scale::Low, Some(p)) => {
                    if self.sentences.get(p).map(|q| q.scale) != Some(Scale::High) {
                        return Err(Error::invalid(format!(
                            "sentence {i} links to {p}, which is not a high-level sentence"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.sentences[0].embedding.len()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.sentences.iter().map(|s| s.parent).collect()
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::from_parents(&self.parents())
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        self.sentences.iter().map(|s| s.embedding.clone()).collect()
    }

    /// Sub-article of the given sentences (ascending original indices) with
    /// parent links remapped; links to dropped parents are cut.
    pub fn select(&self, indices: &[usize]) -> Article {
        let remap: BTreeMap<usize, usize> = indices.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let sentences = indices
            .iter()
            .map(|&i| {
                let s = &self.sentences[i];
                Sentence {
                    scale: s.scale,
                    parent: s.parent.and_then(|p| remap.get(&p).copied()),
                    embedding: s.embedding.clone(),
                }
            })
            .collect();
        Article {
            task_id: self.task_id.clone(),
            sentences,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub task_id: String,
    pub duration: f64,
    pub clips: ClipFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: String,
    pub article: Article,
    pub videos: Vec<Video>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub tasks: Vec<Task>,
}

impl Dataset {
    pub fn num_videos(&self) -> usize {
        self.tasks.iter().map(|t| t.videos.len()).sum()
    }

    pub fn clip_dim(&self) -> Option<usize> {
        self.tasks.iter().flat_map(|t| &t.videos).map(|v| v.clips.dim()).next()
    }

    pub fn sentence_dim(&self) -> Option<usize> {
        self.tasks.first().map(|t| t.article.embedding_dim())
    }
}

/// Annotated segments per video and sentence index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    entries: BTreeMap<String, BTreeMap<usize, Vec<Segment>>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, video_id: &str, sentence: usize, segment: Segment) {
        self.entries
            .entry(video_id.to_string())
            .or_default()
            .entry(sentence)
            .or_default()
            .push(segment);
    }

    /// Annotations of one video, keyed by sentence index.
    pub fn for_video(&self, video_id: &str) -> Option<&BTreeMap<usize, Vec<Segment>>> {
        self.entries.get(video_id)
    }

    pub fn videos(&self) -> impl Iterator<Item = (&String, &BTreeMap<usize, Vec<Segment>>)> {
        self.entries.iter()
    }

    /// Every `(video, sentence, segment)` record in key order.
    pub fn records(&self) -> Vec<(String, usize, Segment)> {
        self.entries
            .iter()
            .flat_map(|(v, per)| per.iter().flat_map(move |(s, segs)| segs.iter().map(move |g| (v.clone(), *s, *g))))
            .collect()
    }

    pub fn merge(&mut self, other: &GroundTruth) {
        for (v, s, g) in other.records() {
            self.add(&v, s, g);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(scale: Scale, parent: Option<usize>) -> Sentence {
        Sentence {
            scale,
            parent,
            embedding: vec![1.0, 0.0],
        }
    }

    #[test]
    fn article_validation() {
        assert!(Article::new("t", vec![]).is_err());
        assert!(Article::new("t", vec![sent(Scale::High, None), sent(Scale::Low, Some(0))]).is_ok());
        assert!(Article::new("t", vec![sent(Scale::Low, None), sent(Scale::Low, Some(0))]).is_err());
        assert!(Article::new("t", vec![sent(Scale::High, Some(0))]).is_err());
        let mut bad = sent(Scale::High, None);
        bad.embedding = vec![1.0];
        assert!(Article::new("t", vec![sent(Scale::High, None), bad]).is_err());
    }

    #[test]
    fn select_remaps_links() {
        let a = Article::new(
            "t",
            vec![
                sent(Scale::High, None),
                sent(Scale::Low, Some(0)),
                sent(Scale::High, None),
                sent(Scale::Low, Some(2)),
            ],
        )
        .unwrap();
        let s = a.select(&[2, 3]);
        assert_eq!(s.parents(), vec![None, Some(0)]);
        let s = a.select(&[1, 2]);
        assert_eq!(s.parents(), vec![None, None]);
    }
}
