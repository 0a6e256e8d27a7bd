//! Character and word error rates, per case and micro-averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_transcription, roll_type, words, DatasetManifest, LineRef};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y {
                diag
            } else {
                1 + diag.min(up).min(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// Edit counts and reference lengths, summed over any number of pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTally {
    pub char_edits: usize,
    pub ref_chars: usize,
    pub word_edits: usize,
    pub ref_words: usize,
}

impl ErrorTally {
    pub fn of(reference: &str, hypothesis: &str) -> Self {
        let r = normalize_transcription(reference);
        let h = normalize_transcription(hypothesis);
        let rc: Vec<char> = r.chars().collect();
        let hc: Vec<char> = h.chars().collect();
        let rw: Vec<&str> = words(&r).collect();
        let hw: Vec<&str> = words(&h).collect();
        ErrorTally {
            char_edits: edit_distance(&rc, &hc),
            ref_chars: rc.len(),
            word_edits: edit_distance(&rw, &hw),
            ref_words: rw.len(),
        }
    }

    pub fn add(&mut self, other: ErrorTally) {
        self.char_edits += other.char_edits;
        self.ref_chars += other.ref_chars;
        self.word_edits += other.word_edits;
        self.ref_words += other.ref_words;
    }

    /// Character error rate in percent. An empty reference counts every
    /// hypothesis character as one error per reference unit.
    pub fn cer(&self) -> f64 {
        rate(self.char_edits, self.ref_chars)
    }

    pub fn wer(&self) -> f64 {
        rate(self.word_edits, self.ref_words)
    }
}

fn rate(edits: usize, len: usize) -> f64 {
    100.0 * edits as f64 / len.max(1) as f64
}

/// Character error rate in percent, after normalizing both sides.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    ErrorTally::of(reference, hypothesis).cer()
}

/// Word error rate in percent over whitespace-delimited tokens.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    ErrorTally::of(reference, hypothesis).wer()
}

/// Rounds a percentage to one decimal for reporting.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub lines: usize,
    pub cer: f64,
    pub wer: f64,
    /// Lines whose transcriber failed and were scored as empty.
    pub failed_lines: usize,
    pub tally: ErrorTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub cases: Vec<CaseRow>,
    /// Micro-average: total edits over total reference length.
    pub total: CaseRow,
}

/// One case's reference and hypothesis lines, in reading order.
#[derive(Debug, Clone, Default)]
pub struct CaseInput {
    pub case: String,
    pub kind: String,
    pub references: Vec<String>,
    pub hypotheses: Vec<String>,
    pub failed_lines: usize,
}

fn row(case: String, kind: String, lines: usize, failed: usize, tally: ErrorTally) -> CaseRow {
    CaseRow {
        case,
        kind,
        lines,
        cer: round1(tally.cer()),
        wer: round1(tally.wer()),
        failed_lines: failed,
        tally,
    }
}

/// Scores each case over its lines joined by newlines.
pub fn evaluate_inputs(system: &str, inputs: &[CaseInput]) -> EvalReport {
    let mut total = ErrorTally::default();
    let mut lines = 0;
    let mut failed = 0;
    let cases = inputs
        .iter()
        .map(|c| {
            let tally = ErrorTally::of(&c.references.join("\n"), &c.hypotheses.join("\n"));
            total.add(tally);
            lines += c.references.len();
            failed += c.failed_lines;
            row(c.case.clone(), c.kind.clone(), c.references.len(), c.failed_lines, tally)
        })
        .collect();
    EvalReport {
        system: system.to_string(),
        cases,
        total: row("total".into(), "all".into(), lines, failed, total),
    }
}

/// Transcribes every test line of `manifest` and scores it per case. A
/// transcriber error scores that line as an empty hypothesis and is counted
/// in `failed_lines`.
pub fn evaluate_cases<E>(
    manifest: &DatasetManifest,
    system: &str,
    mut transcriber: impl FnMut(&LineRef) -> Result<String, E>,
) -> EvalReport {
    let mut by_case: BTreeMap<String, CaseInput> = BTreeMap::new();
    for r in &manifest.test {
        let Some(page) = manifest.pages.get(&r.page) else {
            continue;
        };
        let case = page.metadata.case_id.clone().unwrap_or_else(|| r.page.clone());
        let entry = by_case.entry(case.clone()).or_insert_with(|| CaseInput {
            case,
            kind: roll_type(page),
            ..Default::default()
        });
        entry
            .references
            .push(manifest.transcription(r).unwrap_or_default().to_string());
        match transcriber(r) {
            Ok(h) => entry.hypotheses.push(h),
            Err(_) => {
                tracing::warn!(page = %r.page, line = %r.line, "transcriber failed");
                entry.hypotheses.push(String::new());
                entry.failed_lines += 1;
            }
        }
    }
    let inputs: Vec<CaseInput> = by_case.into_values().collect();
    evaluate_inputs(system, &inputs)
}

impl EvalReport {
    /// Columns: case, type, lines, cer, wer.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case\ttype\tlines\tcer\twer\n");
        for r in self.cases.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.1}\t{:.1}", r.case, r.kind, r.lines, r.cer, r.wer);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(edit_distance(b"abc", b"abc"), 0);
        assert_eq!(edit_distance(b"abc", b"abd"), 1);
        assert_eq!(edit_distance(b"", b"abd"), 3);
        assert_eq!(cer("ab cd", "ab cd"), 0.0);
        assert_eq!(wer("ab cd", "ab ce"), 50.0);
        assert_eq!(cer("ab cd", "ab ce"), 20.0);
        assert_eq!(wer("", "x"), 100.0);
        assert_eq!(wer("", ""), 0.0);
    }

    #[test]
    fn micro_average_is_not_mean_of_rates() {
        let inputs = vec![
            CaseInput {
                case: "a".into(),
                kind: "KB".into(),
                references: vec!["x".into()],
                hypotheses: vec!["y".into()],
                failed_lines: 0,
            },
            CaseInput {
                case: "b".into(),
                kind: "KB".into(),
                references: vec!["p q r".into()],
                hypotheses: vec!["p q r".into()],
                failed_lines: 0,
            },
        ];
        let r = evaluate_inputs("sys", &inputs);
        assert_eq!(r.cases[0].wer, 100.0);
        assert_eq!(r.cases[1].wer, 0.0);
        // 1 edit over 4 words, not (100 + 0) / 2
        assert_eq!(r.total.wer, 25.0);
    }

    #[test]
    fn tsv_layout() {
        let r = evaluate_inputs(
            "s",
            &[CaseInput {
                case: "c1".into(),
                kind: "CP".into(),
                references: vec!["ab cd".into()],
                hypotheses: vec!["ab ce".into()],
                failed_lines: 0,
            }],
        );
        assert_eq!(
            r.to_tsv(),
            "case\ttype\tlines\tcer\twer\nc1\tCP\t1\t20.0\t50.0\ntotal\tall\t1\t20.0\t50.0\n"
        );
    }

    #[test]
    fn newline_join_counts_boundary_once() {
        let t = ErrorTally::of("a b\nc", "a b c");
        assert_eq!(t.word_edits, 0);
        assert_eq!(t.char_edits, 0);
    }
}
