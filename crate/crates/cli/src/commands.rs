use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use rotulus::corpus::{
    dataset_stats, load_dataset, parse_pagexml, write_pagexml, Charset, DatasetManifest, PageDocument,
    TextLine,
};
use rotulus::correct::{
    correct_transcription, translate as llm_translate, ApiKind, CachedProvider, HttpProvider, MockProvider,
    Provider, ProviderConfig,
};
use rotulus::decode::{beam_decode, greedy_labels, DecodeConfig, Hypothesis};
use rotulus::eval::evaluate_cases;
use rotulus::lineproc::{resize_to_height, RasterImage};
use rotulus::lm::{train_ngram, NGramModel};
use rotulus::nn::{
    load_weights, save_weights, train_on_samples, train_samples, LoadOptions, LogitMatrix, Recognizer,
    RecognizerConfig, TrainConfig,
};
use rotulus::pipeline::{self, segment_page, SegmentConfig, Transcriber};
use rotulus_service::ServiceConfig;

use crate::args::*;
use crate::output::{emit, parallel_map, to_json, write_atomic, OutputDir};
use crate::{usage, CliError};

type Result<T = ()> = std::result::Result<T, CliError>;

/// Missing inputs are a usage error, not a failed operation.
fn input(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{}: no such file or directory", path.display())))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(input(path)?).with_context(|| format!("reading {}", path.display()))?)
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    Ok(String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?)
}

fn open_image(path: &Path) -> Result<RasterImage> {
    Ok(RasterImage::open(input(path)?).with_context(|| format!("loading {}", path.display()))?)
}

fn open_page(path: &Path) -> Result<PageDocument> {
    let parsed = parse_pagexml(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    for issue in &parsed.issues {
        tracing::warn!(line = %issue.line_id, "skipped: {}", issue.message);
    }
    Ok(parsed.doc)
}

fn open_dataset(a: &DatasetArgs) -> Result<DatasetManifest> {
    let manifest = input(&a.manifest)?;
    let root = match &a.root {
        Some(r) => input(r)?.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(load_dataset(&root, manifest).with_context(|| format!("loading dataset {}", manifest.display()))?)
}

fn open_lm(path: &Path) -> Result<NGramModel> {
    Ok(NGramModel::from_arpa(&read_text(path)?).with_context(|| format!("loading {}", path.display()))?)
}

fn open_recognizer(path: &Path) -> Result<Recognizer> {
    let w = load_weights(&read(path)?, &LoadOptions::default())
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(Recognizer::from_weights(&w).with_context(|| format!("loading {}", path.display()))?)
}

fn decode_config(a: &DecodeArgs) -> Result<DecodeConfig> {
    let mut cfg = DecodeConfig::default();
    if let Some(v) = a.beam_width {
        cfg.beam_width = v;
    }
    if let Some(v) = a.lm_alpha {
        cfg.lm_alpha = v;
    }
    if let Some(v) = a.word_bonus {
        cfg.word_bonus = v;
    }
    if let Some(v) = a.prune_threshold {
        cfg.prune_threshold = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn transcriber(weights: &Path, a: &DecodeArgs) -> Result<Transcriber> {
    let cfg = decode_config(a)?;
    let rec = open_recognizer(weights)?;
    if a.greedy {
        return Ok(Transcriber::greedy(rec));
    }
    let lm = a.lm.as_deref().map(open_lm).transpose()?;
    Ok(Transcriber::with_beam(rec, lm, cfg))
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn segment(g: &Global, a: &SegmentArgs) -> Result {
    let img = open_image(&a.image)?;
    let w = load_weights(&read(&a.weights)?, &LoadOptions::default())
        .with_context(|| format!("loading {}", a.weights.display()))?;
    let model = w.to_model().context("building segmentation model")?;
    let mut cfg = SegmentConfig::default();
    cfg.width = a.width;
    cfg.vectorize.baseline_threshold = a.baseline_threshold;
    let baselines = segment_page(&img, &model, &cfg)?;
    tracing::info!("{} baselines", baselines.len());
    let name = a.image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut doc = PageDocument::new(name, img.width() as u32, img.height() as u32);
    doc.lines = baselines
        .into_iter()
        .enumerate()
        .map(|(i, b)| TextLine::new(format!("l{}", i + 1), b))
        .collect();
    emit(g, &write_pagexml(&doc)?)?;
    Ok(())
}

#[derive(Serialize)]
struct LineFile {
    id: String,
    file: String,
    width: usize,
    height: usize,
    baseline_row: usize,
}

pub fn extract_lines(g: &Global, a: &ExtractArgs) -> Result {
    if a.height == Some(0) {
        return Err(usage("--height must be positive"));
    }
    let img = open_image(&a.image)?;
    let doc = open_page(&a.pagexml)?;
    let baselines: Vec<&[rotulus::corpus::Point]> = doc.lines.iter().map(|l| l.baseline.as_slice()).collect();
    let mut lines = pipeline::extract_lines(&img, &baselines)?;
    if let Some(h) = a.height {
        lines = lines.iter().map(|l| resize_to_height(l, h)).collect();
    }
    let pngs = parallel_map(&lines, g.jobs(), |_, l| Ok(l.to_raster().to_png(true)))?;
    let mut dir = OutputDir::create(&a.out_dir)?;
    let mut index = Vec::with_capacity(lines.len());
    for ((line, png), l) in doc.lines.iter().zip(&pngs).zip(&lines) {
        let file = format!("{}.png", line.id.replace(['/', '\\'], "_"));
        dir.write(&file, png)?;
        index.push(LineFile {
            id: line.id.clone(),
            file,
            width: l.width,
            height: l.height,
            baseline_row: l.baseline_row,
        });
    }
    let body = if g.tsv {
        let mut s = String::from("id\tfile\twidth\theight\tbaseline_row\n");
        for r in &index {
            s += &format!("{}\t{}\t{}\t{}\t{}\n", tsv_field(&r.id), r.file, r.width, r.height, r.baseline_row);
        }
        s.into_bytes()
    } else {
        to_json(&index)
    };
    emit(g, &body)?;
    dir.commit();
    Ok(())
}

pub fn train_lm(g: &Global, a: &TrainLmArgs) -> Result {
    if a.order == 0 {
        return Err(usage("--order must be at least 1"));
    }
    let corpus: Vec<String> = match (&a.input, &a.manifest) {
        (Some(p), None) => read_text(p)?.lines().map(str::to_string).collect(),
        (None, Some(m)) => {
            let ds = open_dataset(&DatasetArgs {
                manifest: m.clone(),
                root: a.root.clone(),
            })?;
            ds.train_transcriptions().into_iter().map(str::to_string).collect()
        }
        _ => return Err(usage("give either --in or --manifest")),
    };
    let model = train_ngram(&corpus, a.order)?;
    tracing::info!("{} words in vocabulary", model.vocabulary().len());
    emit(g, model.to_arpa().as_bytes())?;
    Ok(())
}

pub fn train_htr(g: &Global, a: &TrainHtrArgs) -> Result {
    let Some(out) = &g.out else {
        return Err(usage("train-htr needs --out for the weights"));
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if a.small {
        cfg.model = RecognizerConfig::small();
    }
    if a.no_augment {
        cfg.augment = false;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = open_dataset(&a.data)?;
    let samples = train_samples(&ds)?;
    tracing::info!("{} training lines, {} characters", samples.len(), ds.charset.len());
    let quiet = g.quiet;
    let (weights, history) = train_on_samples(&samples, &ds.charset, &cfg, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.4}  cer {:.2}  wer {:.2}  lr {:e}",
                r.epoch, r.loss, r.cer, r.wer, r.lr
            );
        }
    })?;
    write_atomic(out, &save_weights(&weights))?;
    if let Some(h) = &a.history {
        write_atomic(h, history.to_csv().as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LineText<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct PageText<'a> {
    lines: Vec<LineText<'a>>,
}

pub fn transcribe(g: &Global, a: &TranscribeArgs) -> Result {
    let img = open_image(&a.image)?;
    let doc = open_page(&a.pagexml)?;
    let t = transcriber(&a.weights, &a.decode)?;
    let baselines: Vec<&[rotulus::corpus::Point]> = doc.lines.iter().map(|l| l.baseline.as_slice()).collect();
    let texts = if baselines.is_empty() {
        Vec::new()
    } else {
        t.transcribe_page(&img, &baselines, g.jobs())?
    };
    let body = if g.tsv {
        doc.lines
            .iter()
            .zip(&texts)
            .map(|(l, t)| format!("{}\t{}\n", tsv_field(&l.id), tsv_field(t)))
            .collect::<String>()
            .into_bytes()
    } else {
        to_json(&PageText {
            lines: doc.lines.iter().zip(&texts).map(|(l, t)| LineText { id: &l.id, text: t }).collect(),
        })
    };
    emit(g, &body)?;
    Ok(())
}

#[derive(Deserialize)]
struct LogitsFile {
    charset: String,
    log_probs: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Decoded {
    hypotheses: Vec<Hypothesis>,
}

pub fn decode_logits(g: &Global, a: &DecodeLogitsArgs) -> Result {
    let file: LogitsFile = serde_json::from_str(&read_text(&a.logits)?)
        .map_err(|e| usage(format!("{}: {e}", a.logits.display())))?;
    let charset = Charset::from_chars(file.charset.chars().collect()).map_err(|e| usage(e.to_string()))?;
    let classes = charset.num_classes();
    if let Some(i) = file.log_probs.iter().position(|r| r.len() != classes) {
        return Err(usage(format!("frame {i} has {} columns, expected {classes}", file.log_probs[i].len())));
    }
    let frames = file.log_probs.len();
    let logits = LogitMatrix::new(frames, classes, file.log_probs.concat()).map_err(|e| usage(e.to_string()))?;
    let hypotheses = if a.decode.greedy {
        // Best path: its own log-probability, collapsed.
        let score = (0..frames)
            .map(|t| logits.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        vec![Hypothesis {
            text: charset.decode(&greedy_labels(&logits)),
            score,
        }]
    } else {
        let mut cfg = decode_config(&a.decode)?;
        cfg.n_best = a.n_best;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let lm = a.decode.lm.as_deref().map(open_lm).transpose()?;
        beam_decode(&logits, &charset, lm.as_ref(), &cfg)?
    };
    let body = if g.tsv {
        hypotheses
            .iter()
            .map(|h| format!("{}\t{}\n", tsv_field(&h.text), h.score))
            .collect::<String>()
            .into_bytes()
    } else {
        to_json(&Decoded { hypotheses })
    };
    emit(g, &body)?;
    Ok(())
}

/// `line_id -> text` for one page of hypotheses.
fn load_hypotheses(dir: &Path, page: &str) -> anyhow::Result<HashMap<String, String>> {
    let xml = dir.join(format!("{page}.xml"));
    let tsv = dir.join(format!("{page}.tsv"));
    if xml.exists() {
        let parsed = parse_pagexml(&std::fs::read(&xml)?).with_context(|| format!("parsing {}", xml.display()))?;
        Ok(parsed
            .doc
            .lines
            .into_iter()
            .map(|l| (l.id, l.transcription.unwrap_or_default()))
            .collect())
    } else if tsv.exists() {
        let text = std::fs::read_to_string(&tsv)?;
        Ok(text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (id, t) = l.split_once('\t').unwrap_or((l, ""));
                (id.to_string(), t.to_string())
            })
            .collect())
    } else {
        anyhow::bail!("no hypotheses for page {page} in {}", dir.display())
    }
}

pub fn evaluate(g: &Global, a: &EvaluateArgs) -> Result {
    let ds = open_dataset(&a.data)?;
    let mut texts: HashMap<(String, String), std::result::Result<String, String>> = HashMap::new();
    if let Some(dir) = &a.hyp {
        input(dir)?;
        let mut pages: BTreeMap<&str, std::result::Result<HashMap<String, String>, String>> = BTreeMap::new();
        for r in &ds.test {
            let page = pages
                .entry(&r.page)
                .or_insert_with(|| load_hypotheses(dir, &r.page).map_err(|e| format!("{e:#}")));
            let text = match page {
                Ok(m) => m.get(&r.line).cloned().ok_or_else(|| format!("no hypothesis for line {}", r.line)),
                Err(e) => Err(e.clone()),
            };
            texts.insert((r.page.clone(), r.line.clone()), text);
        }
    } else if let Some(w) = &a.weights {
        let t = transcriber(w, &a.decode)?;
        for (page_id, doc) in &ds.pages {
            let wanted: Vec<usize> = doc
                .lines
                .iter()
                .enumerate()
                .filter(|(_, l)| ds.test.iter().any(|r| &r.page == page_id && r.line == l.id))
                .map(|(i, _)| i)
                .collect();
            if wanted.is_empty() {
                continue;
            }
            let path = ds.image_path(page_id).context("page has no image")?;
            let img = RasterImage::open(&path).with_context(|| format!("loading {}", path.display()))?;
            let baselines: Vec<&[rotulus::corpus::Point]> = doc.lines.iter().map(|l| l.baseline.as_slice()).collect();
            let lines = pipeline::extract_lines(&img, &baselines)?;
            let picked: Vec<_> = wanted.iter().map(|&i| &lines[i]).collect();
            let out = parallel_map(&picked, g.jobs(), |_, l| Ok(t.transcribe_line(l).map_err(|e| e.to_string())))?;
            for (&i, text) in wanted.iter().zip(out) {
                texts.insert((page_id.clone(), doc.lines[i].id.clone()), text);
            }
        }
    } else {
        return Err(usage("give --hyp or --weights"));
    }
    let report = evaluate_cases(&ds, &a.system, |r| {
        texts
            .remove(&(r.page.clone(), r.line.clone()))
            .unwrap_or_else(|| Err("missing".into()))
    });
    let body = if g.tsv {
        report.to_tsv().into_bytes()
    } else {
        to_json(&report)
    };
    emit(g, &body)?;
    Ok(())
}

fn read_input_lines(path: &PathBuf) -> Result<Vec<String>> {
    let text = if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
        s
    } else {
        read_text(path)?
    };
    Ok(text.lines().map(str::to_string).collect())
}

fn provider(a: &LlmArgs) -> Result<Arc<dyn Provider>> {
    let inner: Arc<dyn Provider> = match a.provider {
        ProviderChoice::Mock => Arc::new(MockProvider::echo()),
        ProviderChoice::Http => {
            let mut cfg: ProviderConfig = match &a.provider_config {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                None => ProviderConfig::default(),
            };
            if let Some(v) = &a.endpoint {
                cfg.endpoint = v.clone();
            }
            if let Some(v) = &a.model {
                cfg.model = v.clone();
            }
            if let Some(v) = &a.api_key_env {
                cfg.api_key_env = v.clone();
            }
            if let Some(v) = a.api {
                cfg.api = match v {
                    ApiChoice::Gemini => ApiKind::Gemini,
                    ApiChoice::Openai => ApiKind::OpenAi,
                };
            }
            if let Some(v) = a.max_retries {
                cfg.max_retries = v;
            }
            Arc::new(HttpProvider::from_env(cfg)?)
        }
    };
    Ok(match &a.cache_dir {
        Some(dir) => Arc::new(CachedProvider::new(inner, dir).with_context(|| format!("cache {}", dir.display()))?),
        None => inner,
    })
}

pub fn correct(g: &Global, a: &LlmArgs) -> Result {
    let lines = read_input_lines(&a.input)?;
    let p = provider(a)?;
    let result = correct_transcription(&lines, p.as_ref())?;
    if result.fallback {
        tracing::warn!("correction kept the input after {} attempts", result.attempts);
    }
    let body = if g.tsv {
        result
            .lines
            .iter()
            .zip(&result.changed)
            .map(|(l, c)| format!("{}\t{}\n", u8::from(*c), tsv_field(l)))
            .collect::<String>()
            .into_bytes()
    } else {
        to_json(&result)
    };
    emit(g, &body)?;
    Ok(())
}

#[derive(Serialize)]
struct Translation {
    translation: String,
}

pub fn translate(g: &Global, a: &LlmArgs) -> Result {
    let lines = read_input_lines(&a.input)?;
    let p = provider(a)?;
    let translation = llm_translate(&lines, p.as_ref())?;
    let body = if g.tsv {
        let mut t = translation;
        if !t.ends_with('\n') {
            t.push('\n');
        }
        t.into_bytes()
    } else {
        to_json(&Translation { translation })
    };
    emit(g, &body)?;
    Ok(())
}

pub fn stats(g: &Global, a: &DatasetArgs) -> Result {
    let report = dataset_stats(&open_dataset(a)?);
    let body = if g.tsv {
        report.to_tsv().into_bytes()
    } else {
        to_json(&report)
    };
    emit(g, &body)?;
    Ok(())
}

pub fn serve(_g: &Global, a: &ServeArgs) -> Result {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(input(p)?).map_err(|e| usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    cfg.apply_process_env().map_err(|e| usage(e.to_string()))?;
    if let Some(v) = &a.host {
        cfg.host = v.clone();
    }
    if let Some(v) = a.port {
        cfg.port = v;
    }
    if let Some(v) = &a.data_dir {
        cfg.data_dir = v.clone();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    rt.block_on(rotulus_service::serve(cfg))?;
    Ok(())
}
