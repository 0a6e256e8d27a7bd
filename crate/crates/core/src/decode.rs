//! CTC decoding: greedy best-path collapse and a prefix beam search with
//! word-level language model fusion.
//!
//! The beam keeps two accumulators per prefix: the forward (sum-over-paths)
//! probability and the best single alignment. Pruning and the per-frame
//! ranking use the best alignment plus the LM score, so a beam of width one
//! follows the best path exactly and reproduces greedy decoding. The final
//! n-best list is ordered by forward probability plus LM score, so with an
//! unpruned beam the top hypothesis is the most probable collapsed string.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Charset;
use crate::lm::{NGramModel, BOS};
use crate::nn::{log_add, LogitMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Weight on `log₁₀ P(word | context)`.
    pub lm_alpha: f64,
    /// Bonus added per completed word.
    pub word_bonus: f64,
    /// Classes whose per-frame natural-log probability falls below this are
    /// not expanded (the frame's best class always is).
    pub prune_threshold: f64,
    pub n_best: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 100,
            lm_alpha: 0.5,
            word_bonus: 1.5,
            prune_threshold: -12.0,
            n_best: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("logit matrix has {got} classes, charset needs {expected}")]
    Classes { expected: usize, got: usize },
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 || self.n_best == 0 {
            return Err(DecodeError::Config("beam_width and n_best must be ≥ 1".into()));
        }
        if !self.lm_alpha.is_finite() || !self.word_bonus.is_finite() || self.prune_threshold.is_nan() {
            return Err(DecodeError::Config("weights must be finite".into()));
        }
        Ok(())
    }
}

/// One decoded string and its total score (natural-log CTC probability plus
/// weighted LM terms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub score: f64,
}

fn check_classes(logits: &LogitMatrix, charset: &Charset) -> Result<(), DecodeError> {
    if logits.classes() != charset.num_classes() {
        return Err(DecodeError::Classes {
            expected: charset.num_classes(),
            got: logits.classes(),
        });
    }
    Ok(())
}

/// First index of the row maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-frame argmax labels, collapsed: repeats merged, blanks dropped.
pub fn greedy_labels(logits: &LogitMatrix) -> Vec<u32> {
    let blank = logits.blank();
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.frames() {
        let k = argmax(logits.row(t)) as u32;
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

pub fn greedy_decode(logits: &LogitMatrix, charset: &Charset) -> Result<String, DecodeError> {
    check_classes(logits, charset)?;
    Ok(charset.decode(&greedy_labels(logits)))
}

const NONE: u32 = u32::MAX;

/// A node of the prefix trie with the language-model state its prefix implies.
struct Node {
    parent: u32,
    label: u32,
    children: HashMap<u32, u32>,
    /// Accumulated `α·log₁₀P + β` over completed words.
    lm_score: f64,
    /// Completed words, most recent last, capped at the LM context length.
    context: Vec<String>,
    partial: String,
}

#[derive(Clone, Copy)]
struct Scores {
    /// Forward log-probability of paths ending in blank / in the last label.
    pb: f64,
    pnb: f64,
    /// Best single-path log-probability, same split.
    vb: f64,
    vnb: f64,
}

const EMPTY: Scores = Scores {
    pb: f64::NEG_INFINITY,
    pnb: f64::NEG_INFINITY,
    vb: f64::NEG_INFINITY,
    vnb: f64::NEG_INFINITY,
};

impl Scores {
    fn total(&self) -> f64 {
        log_add(self.pb, self.pnb)
    }

    fn best(&self) -> f64 {
        self.vb.max(self.vnb)
    }
}

struct Search<'a> {
    nodes: Vec<Node>,
    charset: &'a Charset,
    lm: Option<&'a NGramModel>,
    cfg: &'a DecodeConfig,
    space: Option<u32>,
}

impl Search<'_> {
    fn word_score(&self, context: &[String], word: &str) -> f64 {
        match self.lm {
            Some(lm) => self.cfg.lm_alpha * lm.score(context, word) + self.cfg.word_bonus,
            None => 0.0,
        }
    }

    fn child(&mut self, parent: u32, label: u32) -> u32 {
        if let Some(&c) = self.nodes[parent as usize].children.get(&label) {
            return c;
        }
        let p = &self.nodes[parent as usize];
        let (mut lm_score, mut context, mut partial) = (p.lm_score, p.context.clone(), p.partial.clone());
        if Some(label) == self.space {
            if !partial.is_empty() {
                lm_score += self.word_score(&context, &partial);
                context.push(std::mem::take(&mut partial));
                if let Some(lm) = self.lm {
                    let keep = lm.order().saturating_sub(1);
                    if context.len() > keep {
                        context.drain(..context.len() - keep);
                    }
                }
            }
        } else if let Some(c) = self.charset.char_at(label) {
            partial.push(c);
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            parent,
            label,
            children: HashMap::new(),
            lm_score,
            context,
            partial,
        });
        self.nodes[parent as usize].children.insert(label, id);
        id
    }

    fn labels(&self, mut node: u32) -> Vec<u32> {
        let mut out = Vec::new();
        while node != 0 {
            out.push(self.nodes[node as usize].label);
            node = self.nodes[node as usize].parent;
        }
        out.reverse();
        out
    }

    /// LM score including the unfinished trailing word.
    fn final_lm(&self, node: u32) -> f64 {
        let n = &self.nodes[node as usize];
        if n.partial.is_empty() {
            n.lm_score
        } else {
            n.lm_score + self.word_score(&n.context, &n.partial)
        }
    }
}

fn slot<'a>(next: &'a mut HashMap<u32, Scores>, order: &mut Vec<u32>, id: u32) -> &'a mut Scores {
    next.entry(id).or_insert_with(|| {
        order.push(id);
        EMPTY
    })
}

/// Prefix beam search over `logits`, optionally fused with a word LM.
/// Returns up to `n_best` hypotheses, best first.
pub fn beam_decode(
    logits: &LogitMatrix,
    charset: &Charset,
    lm: Option<&NGramModel>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    check_classes(logits, charset)?;
    let blank = logits.blank() as usize;
    let mut search = Search {
        nodes: vec![Node {
            parent: NONE,
            label: NONE,
            children: HashMap::new(),
            lm_score: 0.0,
            context: vec![BOS.to_string()],
            partial: String::new(),
        }],
        charset,
        lm,
        cfg,
        space: charset.index_of(' '),
    };
    let mut beam: Vec<(u32, Scores)> = vec![(
        0,
        Scores {
            pb: 0.0,
            pnb: f64::NEG_INFINITY,
            vb: 0.0,
            vnb: f64::NEG_INFINITY,
        },
    )];
    for t in 0..logits.frames() {
        let row = logits.row(t);
        let top = argmax(row);
        let expand: Vec<usize> = (0..row.len())
            .filter(|&k| k == top || row[k] >= cfg.prune_threshold)
            .collect();
        let mut next: HashMap<u32, Scores> = HashMap::new();
        let mut order: Vec<u32> = Vec::new();
        for &(node, s) in &beam {
            let last = search.nodes[node as usize].label;
            for &k in &expand {
                let y = row[k];
                if k == blank {
                    let e = slot(&mut next, &mut order, node);
                    e.pb = log_add(e.pb, s.total() + y);
                    e.vb = e.vb.max(s.best() + y);
                    continue;
                }
                let k = k as u32;
                let child = search.child(node, k);
                if k == last {
                    // a repeat without a separating blank stays on this prefix
                    let e = slot(&mut next, &mut order, node);
                    e.pnb = log_add(e.pnb, s.pnb + y);
                    e.vnb = e.vnb.max(s.vnb + y);
                    let c = slot(&mut next, &mut order, child);
                    c.pnb = log_add(c.pnb, s.pb + y);
                    c.vnb = c.vnb.max(s.vb + y);
                } else {
                    let c = slot(&mut next, &mut order, child);
                    c.pnb = log_add(c.pnb, s.total() + y);
                    c.vnb = c.vnb.max(s.best() + y);
                }
            }
        }
        let mut ranked: Vec<(u32, Scores)> = order.into_iter().map(|id| (id, next[&id])).collect();
        ranked.sort_by(|a, b| {
            let ka = a.1.best() + search.nodes[a.0 as usize].lm_score;
            let kb = b.1.best() + search.nodes[b.0 as usize].lm_score;
            kb.total_cmp(&ka)
                .then(b.1.total().total_cmp(&a.1.total()))
                .then(a.0.cmp(&b.0))
        });
        ranked.truncate(cfg.beam_width);
        beam = ranked;
    }
    let mut finals: Vec<(u32, f64)> = beam
        .iter()
        .map(|&(node, s)| (node, s.total() + search.final_lm(node)))
        .collect();
    finals.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(finals
        .into_iter()
        .take(cfg.n_best)
        .map(|(node, score)| Hypothesis {
            text: charset.decode(&search.labels(node)),
            score,
        })
        .collect())
}
