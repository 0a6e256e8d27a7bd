//! Word n-gram language model with interpolated modified Kneser-Ney
//! smoothing, stored and queried in ARPA backoff form (log₁₀).
//!
//! ```
//! use rotulus::lm::{train_ngram, NGramModel};
//!
//! let lm = train_ngram(&["dominus rex", "dominus rex anglie"], 2).unwrap();
//! let seen = lm.score(&["dominus"], "rex");
//! let unseen = lm.score(&["dominus"], "anglie");
//! assert!(seen > unseen);
//! let back = NGramModel::from_arpa(&lm.to_arpa()).unwrap();
//! assert!((back.score(&["dominus"], "rex") - seen).abs() < 1e-6);
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::words;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Log₁₀ probability ARPA files use for impossible events such as `<s>`.
pub const LOG_ZERO: f64 = -99.0;

/// Discount used when count-of-counts give no usable estimate.
pub const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("order must be at least 1, got {0}")]
    Order(usize),
    #[error("ARPA line {line}: {message}")]
    Arpa { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    ModifiedKneserNey,
    /// Used when the corpus has a single word type.
    AddOne,
    /// Loaded from an ARPA file; the estimator is unknown.
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logp: f64,
    backoff: f64,
}

/// Backoff n-gram model over word ids.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// `tables[k]` holds the (k+1)-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
    smoothing: Smoothing,
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    /// Every word the model scores explicitly, including the markers.
    pub fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn id(&self, word: &str) -> u32 {
        self.index
            .get(word)
            .or_else(|| self.index.get(UNK))
            .copied()
            .unwrap_or(u32::MAX)
    }

    fn score_ids(&self, context: &[u32], word: u32) -> f64 {
        let keep = context.len().min(self.order - 1);
        let mut ctx = &context[context.len() - keep..];
        let mut backoff = 0.0;
        loop {
            let mut key = ctx.to_vec();
            key.push(word);
            if let Some(e) = self.tables[ctx.len()].get(&key) {
                return backoff + e.logp;
            }
            if ctx.is_empty() {
                return LOG_ZERO;
            }
            if let Some(e) = self.tables[ctx.len() - 1].get(ctx) {
                backoff += e.backoff;
            }
            ctx = &ctx[1..];
        }
    }

    /// `log₁₀ P(word | context)` by the ARPA backoff rule. Words outside the
    /// vocabulary are scored as `<unk>`; only the last `order − 1` context
    /// words matter.
    pub fn score<S: AsRef<str>>(&self, context: &[S], word: &str) -> f64 {
        let ctx: Vec<u32> = context.iter().map(|w| self.id(w.as_ref())).collect();
        self.score_ids(&ctx, self.id(word))
    }

    /// Sum of `log₁₀` probabilities of a line's words and the closing `</s>`,
    /// with the count of scored tokens.
    pub fn sentence_logprob(&self, line: &str) -> (f64, usize) {
        let mut ctx = vec![self.id(BOS)];
        let mut total = 0.0;
        let mut n = 0;
        for w in words(line).chain(std::iter::once(EOS)) {
            let id = self.id(w);
            total += self.score_ids(&ctx, id);
            ctx.push(id);
            n += 1;
        }
        (total, n)
    }

    pub fn perplexity<S: AsRef<str>>(&self, corpus: &[S]) -> f64 {
        let (mut total, mut n) = (0.0, 0);
        for line in corpus {
            let (lp, k) = self.sentence_logprob(line.as_ref());
            total += lp;
            n += k;
        }
        10f64.powf(-total / n.max(1) as f64)
    }

    /// ARPA text with probabilities and backoffs printed to 7 decimals.
    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, t) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, t.len());
        }
        for (k, t) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let mut rows: Vec<(String, &Entry)> = t
                .iter()
                .map(|(ids, e)| {
                    let text: Vec<&str> = ids.iter().map(|&i| self.vocab[i as usize].as_str()).collect();
                    (text.join(" "), e)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (text, e) in rows {
                if k + 1 < self.order && e.backoff != 0.0 {
                    let _ = writeln!(out, "{:.7}\t{}\t{:.7}", e.logp, text, e.backoff);
                } else {
                    let _ = writeln!(out, "{:.7}\t{}", e.logp, text);
                }
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self, LmError> {
        parse_arpa(text)
    }
}

// ---------------------------------------------------------------------------
// training

struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn new() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [UNK, BOS, EOS] {
            v.id(w);
        }
        v
    }

    fn id(&mut self, w: &str) -> u32 {
        if let Some(&i) = self.index.get(w) {
            return i;
        }
        let i = self.words.len() as u32;
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), i);
        i
    }
}

const UNK_ID: u32 = 0;
const BOS_ID: u32 = 1;

/// Trains an order-`n` model; each corpus line is one sentence wrapped in
/// `<s> … </s>`.
pub fn train_ngram<S: AsRef<str>>(corpus: &[S], n: usize) -> Result<NGramModel, LmError> {
    if n == 0 {
        return Err(LmError::Order(n));
    }
    let mut vocab = Vocab::new();
    let mut sentences: Vec<Vec<u32>> = Vec::new();
    let mut token_types = std::collections::HashSet::new();
    for line in corpus {
        let mut s = vec![BOS_ID];
        for w in words(line.as_ref()) {
            token_types.insert(w.to_string());
            s.push(vocab.id(w));
        }
        s.push(vocab.id(EOS));
        sentences.push(s);
    }
    if token_types.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    // raw counts for every order
    let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); n];
    for s in &sentences {
        for k in 1..=n {
            for i in 0..s.len() {
                if i + k > s.len() {
                    break;
                }
                let g = &s[i..i + k];
                // <s> only ever starts a gram
                if g[1..].contains(&BOS_ID) || (k == 1 && g[0] == BOS_ID) {
                    continue;
                }
                *raw[k - 1].entry(g.to_vec()).or_default() += 1;
            }
        }
    }
    let tables = if token_types.len() == 1 {
        tracing::warn!("corpus has a single word type; using add-one smoothing");
        add_one(&raw, &vocab, n)
    } else {
        kneser_ney(&raw, &vocab, n)
    };
    Ok(NGramModel {
        order: n,
        index: vocab.index,
        vocab: vocab.words,
        tables,
        smoothing: if token_types.len() == 1 {
            Smoothing::AddOne
        } else {
            Smoothing::ModifiedKneserNey
        },
    })
}

/// Modified Kneser-Ney discounts `[D1, D2, D3+]` from count-of-counts.
pub fn estimate_discounts(count_of_counts: [u64; 4]) -> [f64; 3] {
    let [t1, t2, t3, t4] = count_of_counts.map(|v| v as f64);
    if t1 > 0.0 && t2 > 0.0 && t3 > 0.0 {
        let y = t1 / (t1 + 2.0 * t2);
        let d = [
            1.0 - 2.0 * y * t2 / t1,
            2.0 - 3.0 * y * t3 / t2,
            3.0 - 4.0 * y * t4 / t3,
        ];
        if d.iter().enumerate().all(|(i, &v)| v > 0.0 && v <= (i + 1) as f64) {
            return d;
        }
    }
    [FALLBACK_DISCOUNT; 3]
}

fn discount(d: &[f64; 3], count: u64) -> f64 {
    match count {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
    .min(count as f64)
}

fn kneser_ney(raw: &[HashMap<Vec<u32>, u64>], vocab: &Vocab, n: usize) -> Vec<HashMap<Vec<u32>, Entry>> {
    // adjusted counts: raw at the top order and for grams starting with <s>,
    // distinct left extensions otherwise
    let mut adjusted: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); n];
    adjusted[n - 1] = raw[n - 1].clone();
    for k in (0..n - 1).rev() {
        let mut ext: HashMap<Vec<u32>, u64> = HashMap::new();
        for g in raw[k + 1].keys() {
            *ext.entry(g[1..].to_vec()).or_default() += 1;
        }
        for (g, &c) in &raw[k] {
            let a = if g[0] == BOS_ID { c } else { ext.get(g).copied().unwrap_or(0) };
            if a > 0 {
                adjusted[k].insert(g.clone(), a);
            }
        }
    }
    let discounts: Vec<[f64; 3]> = adjusted
        .iter()
        .map(|t| {
            let mut coc = [0u64; 4];
            for &c in t.values() {
                if (1..=4).contains(&c) {
                    coc[c as usize - 1] += 1;
                }
            }
            estimate_discounts(coc)
        })
        .collect();

    // per-context totals and discounted mass
    let mut tables: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); n];
    let mut gamma: Vec<HashMap<Vec<u32>, f64>> = vec![HashMap::new(); n];
    let vocab_size = vocab.words.iter().filter(|w| w.as_str() != BOS).count() as f64;
    for k in 0..n {
        // sorted so floating sums do not depend on hash order
        let mut grams: Vec<(&Vec<u32>, &u64)> = adjusted[k].iter().collect();
        grams.sort();
        let mut totals: BTreeMap<Vec<u32>, (u64, f64)> = BTreeMap::new();
        for &(g, &a) in &grams {
            let t = totals.entry(g[..k].to_vec()).or_default();
            t.0 += a;
            t.1 += discount(&discounts[k], a);
        }
        for (g, &a) in grams {
            let ctx = &g[..k];
            let (total, mass) = totals[&ctx.to_vec()];
            let lower = if k == 0 {
                1.0 / vocab_size
            } else {
                10f64.powf(lookup(&tables, &g[1..]))
            };
            let p = (a as f64 - discount(&discounts[k], a)) / total as f64
                + mass / total as f64 * lower;
            tables[k].insert(
                g.clone(),
                Entry {
                    logp: p.log10(),
                    backoff: 0.0,
                },
            );
        }
        for (ctx, (total, mass)) in totals {
            gamma[k].insert(ctx, mass / total as f64);
        }
        if k == 0 {
            // <unk> only receives interpolated mass; <s> is never predicted
            let g0 = gamma[0].get(&Vec::new()).copied().unwrap_or(1.0);
            tables[0].insert(
                vec![UNK_ID],
                Entry {
                    logp: (g0 / vocab_size).log10(),
                    backoff: 0.0,
                },
            );
            tables[0].insert(
                vec![BOS_ID],
                Entry {
                    logp: LOG_ZERO,
                    backoff: 0.0,
                },
            );
        }
    }
    // backoff weight of a context is its interpolation weight
    for k in 1..n {
        for (ctx, &g) in &gamma[k] {
            if let Some(e) = tables[k - 1].get_mut(ctx) {
                e.backoff = g.log10();
            }
        }
    }
    tables
}

/// Interpolated probability of a gram already stored at its own order, or
/// backed off through shorter orders.
fn lookup(tables: &[HashMap<Vec<u32>, Entry>], g: &[u32]) -> f64 {
    let k = g.len() - 1;
    tables[k].get(g).map(|e| e.logp).unwrap_or(LOG_ZERO)
}

fn add_one(raw: &[HashMap<Vec<u32>, u64>], vocab: &Vocab, n: usize) -> Vec<HashMap<Vec<u32>, Entry>> {
    let predict: Vec<u32> = (0..vocab.words.len() as u32).filter(|&i| i != BOS_ID).collect();
    let v = predict.len() as f64;
    let mut tables: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); n];
    // unigrams
    let total: u64 = raw[0].values().sum();
    for &w in &predict {
        let c = raw[0].get(&vec![w]).copied().unwrap_or(0);
        tables[0].insert(
            vec![w],
            Entry {
                logp: ((c as f64 + 1.0) / (total as f64 + v)).log10(),
                backoff: 0.0,
            },
        );
    }
    tables[0].insert(
        vec![BOS_ID],
        Entry {
            logp: LOG_ZERO,
            backoff: 0.0,
        },
    );
    // every observed context gets a full add-one row
    for k in 1..n {
        let mut ctx_totals: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
        for (g, &c) in &raw[k] {
            *ctx_totals.entry(g[..k].to_vec()).or_default() += c;
        }
        for (ctx, total) in ctx_totals {
            for &w in &predict {
                let mut g = ctx.clone();
                g.push(w);
                let c = raw[k].get(&g).copied().unwrap_or(0);
                tables[k].insert(
                    g,
                    Entry {
                        logp: ((c as f64 + 1.0) / (total as f64 + v)).log10(),
                        backoff: 0.0,
                    },
                );
            }
        }
    }
    tables
}

// ---------------------------------------------------------------------------
// ARPA parsing

fn parse_arpa(text: &str) -> Result<NGramModel, LmError> {
    let err = |line: usize, message: &str| LmError::Arpa {
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    // skip anything before \data\
    loop {
        match lines.next() {
            Some((_, "\\data\\")) => break,
            Some(_) => continue,
            None => return Err(err(text.lines().count() + 1, "missing \\data\\ section")),
        }
    }
    let mut counts: Vec<usize> = Vec::new();
    let mut pending = None;
    for (no, l) in lines.by_ref() {
        if l.is_empty() {
            if counts.is_empty() {
                continue;
            }
            break;
        }
        if let Some(rest) = l.strip_prefix("ngram ") {
            let (k, c) = rest.split_once('=').ok_or_else(|| err(no, "expected `ngram k=count`"))?;
            let k: usize = k.trim().parse().map_err(|_| err(no, "bad n-gram order"))?;
            let c: usize = c.trim().parse().map_err(|_| err(no, "bad n-gram count"))?;
            if k != counts.len() + 1 {
                return Err(err(no, "n-gram orders must be listed 1, 2, …"));
            }
            counts.push(c);
        } else if l.starts_with('\\') {
            pending = Some((no, l));
            break;
        } else {
            return Err(err(no, "expected `ngram k=count`"));
        }
    }
    if counts.is_empty() {
        return Err(err(0, "\\data\\ lists no n-gram counts"));
    }
    let order = counts.len();
    let mut vocab = Vocab::new();
    let mut tables: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); order];
    let mut current: Option<usize> = None;
    let mut ended = false;
    let mut next_header = pending;
    let mut iter = lines.peekable();
    loop {
        let (no, l) = match next_header.take() {
            Some(h) => h,
            None => match iter.next() {
                Some(x) => x,
                None => break,
            },
        };
        if l.is_empty() {
            continue;
        }
        if l == "\\end\\" {
            ended = true;
            break;
        }
        if l.starts_with('\\') {
            let k = l
                .strip_prefix('\\')
                .and_then(|s| s.strip_suffix("-grams:"))
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| err(no, &format!("malformed section header {l:?}")))?;
            if k == 0 || k > order {
                return Err(err(no, &format!("section {k}-grams not declared in \\data\\")));
            }
            if let Some(prev) = current {
                if tables[prev].len() != counts[prev] {
                    return Err(err(no, &format!("{}-grams: declared {}, found {}", prev + 1, counts[prev], tables[prev].len())));
                }
            }
            current = Some(k - 1);
            continue;
        }
        let k = current.ok_or_else(|| err(no, "n-gram entry outside a section"))?;
        let mut fields = l.split_whitespace();
        let logp: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(no, "bad probability"))?;
        let toks: Vec<&str> = fields.collect();
        if toks.len() < k + 1 || toks.len() > k + 2 {
            return Err(err(no, &format!("expected {} words", k + 1)));
        }
        let backoff = if toks.len() == k + 2 {
            toks[k + 1].parse().map_err(|_| err(no, "bad backoff weight"))?
        } else {
            0.0
        };
        let ids: Vec<u32> = toks[..k + 1].iter().map(|w| vocab.id(w)).collect();
        tables[k].insert(ids, Entry { logp, backoff });
    }
    if !ended {
        return Err(err(text.lines().count() + 1, "missing \\end\\"));
    }
    if let Some(prev) = current {
        if tables[prev].len() != counts[prev] {
            return Err(err(0, &format!("{}-grams: declared {}, found {}", prev + 1, counts[prev], tables[prev].len())));
        }
    }
    if !tables[0].contains_key(&vec![UNK_ID]) {
        // files without <unk> give unknown words the floor probability
        tables[0].insert(
            vec![UNK_ID],
            Entry {
                logp: LOG_ZERO,
                backoff: 0.0,
            },
        );
    }
    Ok(NGramModel {
        order,
        index: vocab.index,
        vocab: vocab.words,
        tables,
        smoothing: Smoothing::Imported,
    })
}
