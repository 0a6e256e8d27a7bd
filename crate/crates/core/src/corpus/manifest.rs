use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_charset, parse_pagexml, Charset, CorpusError, PageDocument, TextLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Reference to one line of one page.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineRef {
    pub page: String,
    pub line: String,
}

impl LineRef {
    pub fn new(page: impl Into<String>, line: impl Into<String>) -> Self {
        LineRef {
            page: page.into(),
            line: line.into(),
        }
    }
}

/// Train/test line lists over a set of pages, plus the charset derived from
/// the training transcriptions.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pages: BTreeMap<String, PageDocument>,
    pub train: Vec<LineRef>,
    pub test: Vec<LineRef>,
    pub charset: Charset,
}

impl DatasetManifest {
    /// Assembles a manifest from pages already in memory, checking that the
    /// splits are disjoint and every referenced line carries a transcription.
    pub fn from_parts(
        root: impl Into<PathBuf>,
        pages: BTreeMap<String, PageDocument>,
        train: Vec<LineRef>,
        test: Vec<LineRef>,
    ) -> Result<Self, CorpusError> {
        let train_set: HashSet<&LineRef> = train.iter().collect();
        if let Some(dup) = test.iter().find(|r| train_set.contains(r)) {
            return Err(CorpusError::SplitOverlap {
                page: dup.page.clone(),
                line: dup.line.clone(),
            });
        }
        let mut train_text = Vec::with_capacity(train.len());
        for (r, is_train) in train
            .iter()
            .map(|r| (r, true))
            .chain(test.iter().map(|r| (r, false)))
        {
            let line = lookup(&pages, r)?;
            let text = line
                .transcription
                .as_deref()
                .ok_or_else(|| CorpusError::MissingTranscription {
                    page: r.page.clone(),
                    line: r.line.clone(),
                })?;
            if is_train {
                train_text.push(text);
            }
        }
        let charset = build_charset(&train_text)?;
        Ok(DatasetManifest {
            root: root.into(),
            pages,
            train,
            test,
            charset,
        })
    }

    pub fn line(&self, r: &LineRef) -> Option<&TextLine> {
        self.pages.get(&r.page).and_then(|p| p.line(&r.line))
    }

    pub fn transcription(&self, r: &LineRef) -> Option<&str> {
        self.line(r).and_then(|l| l.transcription.as_deref())
    }

    /// Location of the page image: `image_ref` resolved against the directory
    /// holding the page's XML file.
    pub fn image_path(&self, page: &str) -> Option<PathBuf> {
        let doc = self.pages.get(page)?;
        let xml = self.root.join(format!("{page}.xml"));
        let dir = xml.parent().unwrap_or(&self.root);
        Some(dir.join(&doc.image_ref))
    }

    pub fn train_transcriptions(&self) -> Vec<&str> {
        self.train
            .iter()
            .filter_map(|r| self.transcription(r))
            .collect()
    }
}

fn lookup<'a>(
    pages: &'a BTreeMap<String, PageDocument>,
    r: &LineRef,
) -> Result<&'a TextLine, CorpusError> {
    let page = pages
        .get(&r.page)
        .ok_or_else(|| CorpusError::MissingPage(r.page.clone()))?;
    page.line(&r.line).ok_or_else(|| CorpusError::MissingLine {
        page: r.page.clone(),
        line: r.line.clone(),
    })
}

/// Parses a split file: one `page_id<TAB>line_id<TAB>split` per row. Blank
/// lines and lines starting with `#` are ignored.
pub fn parse_split_file(text: &str) -> Result<Vec<(LineRef, Split)>, CorpusError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| CorpusError::SplitFormat {
            line: i + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let split = match fields[2].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("unknown split {other:?}"))),
        };
        rows.push((LineRef::new(fields[0].trim(), fields[1].trim()), split));
    }
    Ok(rows)
}

/// Loads every page named by the split file from `root/<page_id>.xml` and
/// checks that each page image exists next to its XML.
pub fn load_dataset(root: &Path, split_file: &Path) -> Result<DatasetManifest, CorpusError> {
    let rows = parse_split_file(&fs::read_to_string(split_file)?)?;
    let mut pages = BTreeMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, split) in rows {
        if !pages.contains_key(&r.page) {
            let xml_path = root.join(format!("{}.xml", r.page));
            let bytes =
                fs::read(&xml_path).map_err(|_| CorpusError::MissingPage(r.page.clone()))?;
            let parsed = parse_pagexml(&bytes).map_err(|e| CorpusError::PageErrors {
                page: r.page.clone(),
                message: e.to_string(),
            })?;
            let image = xml_path
                .parent()
                .unwrap_or(root)
                .join(&parsed.doc.image_ref);
            if !image.is_file() {
                return Err(CorpusError::MissingImage {
                    page: r.page.clone(),
                    image,
                });
            }
            for issue in &parsed.issues {
                tracing::warn!(page = %r.page, line = %issue.line_id, "{}", issue.message);
            }
            pages.insert(r.page.clone(), parsed.doc);
        }
        match split {
            Split::Train => train.push(r),
            Split::Test => test.push(r),
        }
    }
    DatasetManifest::from_parts(root, pages, train, test)
}
