use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{word_count, DatasetManifest, PageDocument};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub roll_type: String,
    pub cases: usize,
    pub lines: usize,
    pub words: usize,
}

/// Case, line and word counts per roll type over every line of a manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: Vec<StatsRow>,
    pub total: StatsRow,
}

/// Roll type of a page: the leading letters of its roll identifier
/// (`KB27` → `KB`, `JUST1` → `JUST`), or `unknown`.
pub fn roll_type(page: &PageDocument) -> String {
    let prefix: String = page
        .metadata
        .roll
        .as_deref()
        .unwrap_or_default()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    if prefix.is_empty() {
        "unknown".to_string()
    } else {
        prefix
    }
}

pub fn dataset_stats(manifest: &DatasetManifest) -> StatsReport {
    #[derive(Default)]
    struct Acc {
        cases: BTreeSet<String>,
        lines: usize,
        words: usize,
    }
    let mut by_type: BTreeMap<String, Acc> = BTreeMap::new();
    for r in manifest.train.iter().chain(&manifest.test) {
        let Some(page) = manifest.pages.get(&r.page) else {
            continue;
        };
        let acc = by_type.entry(roll_type(page)).or_default();
        acc.cases
            .insert(page.metadata.case_id.clone().unwrap_or_else(|| r.page.clone()));
        acc.lines += 1;
        acc.words += manifest.transcription(r).map(word_count).unwrap_or(0);
    }
    let rows: Vec<StatsRow> = by_type
        .into_iter()
        .map(|(roll_type, acc)| StatsRow {
            roll_type,
            cases: acc.cases.len(),
            lines: acc.lines,
            words: acc.words,
        })
        .collect();
    let total = rows.iter().fold(
        StatsRow {
            roll_type: "total".into(),
            ..Default::default()
        },
        |mut t, r| {
            t.cases += r.cases;
            t.lines += r.lines;
            t.words += r.words;
            t
        },
    );
    StatsReport { rows, total }
}

impl StatsReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("roll_type\tcases\tlines\twords\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.roll_type, r.cases, r.lines, r.words);
        }
        s
    }
}
