#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotulus::corpus::{build_charset, write_pagexml, PageDocument};
use rotulus::lineproc::RasterImage;
use rotulus::nn::{build_recognizer, save_weights, Model, ModelWeights, RecognizerConfig};
use rotulus::synth::{self, Style};

pub fn rotulus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotulus"))
        .args(args)
        .env_remove("ROTULUS_LOG")
        .output()
        .expect("binary runs")
}

pub fn rotulus_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotulus"))
        .current_dir(dir)
        .args(args)
        .env_remove("ROTULUS_LOG")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `<name>.png` and `<name>.xml` for a synthetic page.
pub fn write_page(dir: &Path, name: &str, lines: &[&str], roll: &str) -> (RasterImage, PageDocument) {
    let (img, mut doc) = synth::page(lines, &Style::default(), &format!("{name}.png"));
    doc.metadata.roll = Some(roll.into());
    doc.metadata.case_id = Some(format!("{roll}-{name}"));
    std::fs::write(dir.join(format!("{name}.png")), img.to_png(false)).unwrap();
    std::fs::write(dir.join(format!("{name}.xml")), write_pagexml(&doc).unwrap()).unwrap();
    (img, doc)
}

pub const PAGE_A: [&str; 3] = ["abc de", "fgh ij", "kl mno"];
pub const PAGE_B: [&str; 2] = ["pqr st", "uvw xyz"];

/// Two pages: the first trains, the second is the test split. Returns the
/// split file.
pub fn write_dataset(dir: &Path) -> PathBuf {
    write_page(dir, "p1", &PAGE_A, "KB27");
    write_page(dir, "p2", &PAGE_B, "JUST1");
    let mut split = String::new();
    for i in 1..=PAGE_A.len() {
        split += &format!("p1\tl{i}\ttrain\n");
    }
    for i in 1..=PAGE_B.len() {
        split += &format!("p2\tl{i}\ttest\n");
    }
    let path = dir.join("split.tsv");
    std::fs::write(&path, split).unwrap();
    path
}

/// An untrained but seeded small recognizer over `a..z` and space.
pub fn write_weights(path: &Path, seed: u64) -> ModelWeights {
    let charset = build_charset(&["abcdefghijklmnopqrstuvwxyz "]).unwrap();
    let spec = build_recognizer(&RecognizerConfig::small(), charset.len());
    let model = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let w = ModelWeights::from_model(&model, Some(charset));
    std::fs::write(path, save_weights(&w)).unwrap();
    w
}
