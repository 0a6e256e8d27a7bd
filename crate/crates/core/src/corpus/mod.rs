//! Page documents, PageXML, dataset manifests, character sets and corpus
//! statistics.

mod charset;
mod manifest;
mod pagexml;
mod stats;
mod text;

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use charset::{build_charset, Charset};
pub use manifest::{load_dataset, parse_split_file, DatasetManifest, LineRef, Split};
pub use pagexml::{parse_pagexml, write_pagexml, LineIssue, ParsedPage, NS_2013, NS_2019};
pub use stats::{dataset_stats, roll_type, StatsReport, StatsRow};
pub use text::{normalize_transcription, word_count, words};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed XML at line {line}, column {column}: {message}")]
    Xml {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("not a PAGE document: {0}")]
    NotPage(String),
    #[error("invalid page: {0}")]
    InvalidPage(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate character {0:?} in charset")]
    DuplicateChar(char),
    #[error("character {0:?} is not in the charset")]
    UnknownChar(char),
    #[error("split file line {line}: {message}")]
    SplitFormat { line: usize, message: String },
    #[error("missing page {0}")]
    MissingPage(String),
    #[error("page {page}: missing image {image}")]
    MissingImage { page: String, image: PathBuf },
    #[error("page {page}: no line with id {line}")]
    MissingLine { page: String, line: String },
    #[error("page {page}, line {line}: no transcription")]
    MissingTranscription { page: String, line: String },
    #[error("line {page}/{line} appears in both train and test")]
    SplitOverlap { page: String, line: String },
    #[error("page {page}: {message}")]
    PageErrors { page: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Integer pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Point { x, y }
    }
}

impl From<(i32, i32)> for Point {
    fn from((x, y): (i32, i32)) -> Self {
        Point { x, y }
    }
}

/// One text line: its baseline, optional outline and optional transcription.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextLine {
    pub id: String,
    pub baseline: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcription: Option<String>,
}

impl TextLine {
    pub fn new(id: impl Into<String>, baseline: Vec<Point>) -> Self {
        TextLine {
            id: id.into(),
            baseline,
            polygon: None,
            transcription: None,
        }
    }

    pub fn with_text(mut self, text: &str) -> Self {
        self.transcription = Some(normalize_transcription(text));
        self
    }

    /// Checks the line-level invariants against a page of the given size.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        if self.baseline.len() < 2 {
            return Err(format!(
                "baseline has {} point(s), need at least 2",
                self.baseline.len()
            ));
        }
        if self.baseline.windows(2).any(|w| w[1].x <= w[0].x) {
            return Err("baseline x-coordinates are not strictly increasing".into());
        }
        if let Some(p) = self
            .baseline
            .iter()
            .find(|p| p.x < 0 || p.y < 0 || p.x > width as i32 || p.y > height as i32)
        {
            return Err(format!(
                "baseline point ({},{}) outside {width}x{height}",
                p.x, p.y
            ));
        }
        if let Some(t) = &self.transcription {
            if t.contains('\n') || t.chars().any(char::is_control) {
                return Err("transcription contains control characters".into());
            }
        }
        Ok(())
    }
}

/// Archival metadata of the case the page belongs to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roll: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub membrane: Option<String>,
}

/// A page image with its text lines in reading order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageDocument {
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub lines: Vec<TextLine>,
    #[serde(default)]
    pub metadata: PageMetadata,
}

impl PageDocument {
    pub fn new(image_ref: impl Into<String>, width: u32, height: u32) -> Self {
        PageDocument {
            image_ref: image_ref.into(),
            width,
            height,
            lines: Vec::new(),
            metadata: PageMetadata::default(),
        }
    }

    pub fn line(&self, id: &str) -> Option<&TextLine> {
        self.lines.iter().find(|l| l.id == id)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.width == 0 || self.height == 0 {
            return Err(CorpusError::InvalidPage(format!(
                "page size {}x{} must be positive",
                self.width, self.height
            )));
        }
        let mut seen = HashSet::new();
        for line in &self.lines {
            if !seen.insert(line.id.as_str()) {
                return Err(CorpusError::InvalidPage(format!(
                    "duplicate line id {}",
                    line.id
                )));
            }
            line.validate(self.width, self.height)
                .map_err(|m| CorpusError::InvalidPage(format!("line {}: {m}", line.id)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_increasing_baseline() {
        let line = TextLine::new("l", vec![Point::new(5, 5), Point::new(5, 6)]);
        assert!(line.validate(10, 10).is_err());
    }

    #[test]
    fn rejects_out_of_page_point() {
        let line = TextLine::new("l", vec![Point::new(0, 5), Point::new(11, 6)]);
        assert!(line.validate(10, 10).is_err());
        let line = TextLine::new("l", vec![Point::new(0, 5), Point::new(10, 10)]);
        assert!(line.validate(10, 10).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut doc = PageDocument::new("p.png", 100, 100);
        let l = TextLine::new("a", vec![Point::new(0, 5), Point::new(10, 6)]);
        doc.lines = vec![l.clone(), l];
        assert!(doc.validate().is_err());
    }
}
