mod common;

use std::io::{Read, Write};
use std::net::TcpListener;
use std::process::Command;

use common::*;
use rotulus::corpus::parse_pagexml;
use rotulus::lineproc::RasterImage;
use rotulus::lm::{train_ngram, NGramModel};
use rotulus::nn::Recognizer;
use rotulus::pipeline::Transcriber;
use serde_json::Value;

#[test]
fn exit_codes() {
    assert_eq!(rotulus(&[]).status.code(), Some(2));
    assert_eq!(rotulus(&["stats", "--bogus"]).status.code(), Some(2));
    assert_eq!(rotulus(&["--help"]).status.code(), Some(0));
    assert_eq!(rotulus(&["transcribe", "--help"]).status.code(), Some(0));

    let o = rotulus(&["stats", "--manifest", "/does/not/exist.tsv"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    // An existing but unusable input is a failed operation.
    let d = tempfile::tempdir().unwrap();
    let junk = d.path().join("w.bin");
    std::fs::write(&junk, b"not weights").unwrap();
    let (_, _) = write_page(d.path(), "p", &["ab"], "KB27");
    let o = rotulus(&[
        "transcribe",
        "--weights",
        p(&junk),
        "--image",
        p(&d.path().join("p.png")),
        "--pagexml",
        p(&d.path().join("p.xml")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.starts_with("rotulus: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(o.stdout.is_empty());
}

#[test]
fn evaluate_perfect_hypotheses_scores_zero() {
    let d = tempfile::tempdir().unwrap();
    let split = write_dataset(d.path());
    let hyp = d.path().join("hyp");
    std::fs::create_dir(&hyp).unwrap();
    // PageXML hypotheses for p2 (the test page).
    std::fs::copy(d.path().join("p2.xml"), hyp.join("p2.xml")).unwrap();

    let o = rotulus(&["evaluate", "--manifest", p(&split), "--hyp", p(&hyp)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total"]["cer"], 0.0);
    assert_eq!(v["total"]["wer"], 0.0);
    assert_eq!(v["total"]["lines"], 2);
    assert_eq!(v["cases"][0]["type"], "JUST");

    // Same through TSV hypotheses and TSV output.
    std::fs::remove_file(hyp.join("p2.xml")).unwrap();
    let rows: String = PAGE_B.iter().enumerate().map(|(i, t)| format!("l{}\t{t}\n", i + 1)).collect();
    std::fs::write(hyp.join("p2.tsv"), rows).unwrap();
    let o = rotulus(&["--tsv", "evaluate", "--manifest", p(&split), "--hyp", p(&hyp)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let total = out.lines().last().unwrap();
    assert_eq!(total, "total\tall\t2\t0.0\t0.0");

    // One wrong character in 13 reference characters.
    std::fs::write(hyp.join("p2.tsv"), "l1\tpqr st\nl2\tuvw xya\n").unwrap();
    let o = rotulus(&["evaluate", "--manifest", p(&split), "--hyp", p(&hyp)]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total"]["tally"]["char_edits"], 1, "{v}");
}

#[test]
fn train_lm_round_trips_through_arpa() {
    let d = tempfile::tempdir().unwrap();
    let corpus = ["et predictus johannes venit", "et dicit quod predictus", "johannes venit et dicit"];
    let input = d.path().join("corpus.txt");
    std::fs::write(&input, corpus.join("\n") + "\n").unwrap();
    let out = d.path().join("model.arpa");
    let o = rotulus(&["train-lm", "--order", "2", "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let text = std::fs::read_to_string(&out).unwrap();
    let loaded = NGramModel::from_arpa(&text).unwrap();
    let direct = train_ngram(&corpus, 2).unwrap();
    assert_eq!(loaded.order(), 2);
    assert_eq!(loaded.to_arpa(), text);
    for (ctx, w) in [("et", "predictus"), ("johannes", "venit"), ("venit", "quod"), ("xx", "et")] {
        let a = loaded.score(&[ctx], w);
        let b = direct.score(&[ctx], w);
        assert!((a - b).abs() < 1e-6, "{ctx} {w}: {a} vs {b}");
    }
}

#[test]
fn transcribe_is_deterministic_and_matches_library() {
    let d = tempfile::tempdir().unwrap();
    let (img, doc) = write_page(d.path(), "page", &["abc de", "fgh", "ijk lm", "nop"], "KB27");
    let weights = d.path().join("w.bin");
    let w = write_weights(&weights, 11);
    let lm = d.path().join("lm.arpa");
    std::fs::write(&lm, train_ngram(&["abc de", "fgh ijk"], 2).unwrap().to_arpa()).unwrap();

    let run = |jobs: &str| {
        let o = rotulus(&[
            "--jobs",
            jobs,
            "transcribe",
            "--weights",
            p(&weights),
            "--image",
            p(&d.path().join("page.png")),
            "--pagexml",
            p(&d.path().join("page.xml")),
            "--lm",
            p(&lm),
            "--beam-width",
            "8",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o.stdout
    };
    let first = run("1");
    assert_eq!(first, run("1"));
    assert_eq!(first, run("3"));

    let v: Value = serde_json::from_slice(&first).unwrap();
    let lines = v["lines"].as_array().unwrap();
    assert_eq!(lines.len(), doc.lines.len());

    // The binary's output is exactly what the library produces from the
    // same (PNG round-tripped) page.
    let reread = RasterImage::open(&d.path().join("page.png")).unwrap();
    assert_eq!(reread.width(), img.width());
    let mut cfg = rotulus::decode::DecodeConfig::default();
    cfg.beam_width = 8;
    let t = Transcriber::with_beam(
        Recognizer::from_weights(&w).unwrap(),
        Some(NGramModel::from_arpa(&std::fs::read_to_string(&lm).unwrap()).unwrap()),
        cfg,
    );
    let baselines: Vec<_> = doc.lines.iter().map(|l| l.baseline.clone()).collect();
    let expected = t.transcribe_page(&reread, &baselines, 1).unwrap();
    for ((line, l), text) in lines.iter().zip(&doc.lines).zip(&expected) {
        assert_eq!(line["id"], l.id.as_str());
        assert_eq!(line["text"], text.as_str());
    }

    let o = rotulus(&[
        "--tsv",
        "transcribe",
        "--weights",
        p(&weights),
        "--image",
        p(&d.path().join("page.png")),
        "--pagexml",
        p(&d.path().join("page.xml")),
        "--greedy",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().all(|l| l.starts_with('l') && l.contains('\t')));
}

#[test]
fn extract_lines_writes_pngs_and_cleans_up_on_failure() {
    let d = tempfile::tempdir().unwrap();
    write_page(d.path(), "page", &["abc", "defg", "hi"], "KB27");
    let out_dir = d.path().join("lines");
    let args = |dir: &std::path::Path| {
        vec![
            "extract-lines".to_string(),
            "--image".into(),
            p(&d.path().join("page.png")).into(),
            "--pagexml".into(),
            p(&d.path().join("page.xml")).into(),
            "--out-dir".into(),
            p(dir).into(),
        ]
    };
    let argv = args(&out_dir);
    let o = rotulus(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let index: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 3);
    for row in index.as_array().unwrap() {
        let img = RasterImage::open(&out_dir.join(row["file"].as_str().unwrap())).unwrap();
        assert_eq!(img.width() as u64, row["width"].as_u64().unwrap());
        assert_eq!(img.height() as u64, row["height"].as_u64().unwrap());
    }

    // A directory squatting on the second line's file name makes the write
    // fail midway; the first PNG must not be left behind.
    let bad = d.path().join("bad");
    std::fs::create_dir_all(bad.join("l2.png")).unwrap();
    let argv = args(&bad);
    let o = rotulus(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let left: Vec<_> = std::fs::read_dir(&bad)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(left, vec!["l2.png".to_string()]);
}

#[test]
fn out_is_atomic() {
    let d = tempfile::tempdir().unwrap();
    let split = write_dataset(d.path());
    let out = d.path().join("stats.json");
    std::fs::write(&out, "old").unwrap();
    let o = rotulus(&["stats", "--manifest", p(&split), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["total"]["lines"], 5);
    assert_eq!(v["total"]["cases"], 2);

    // A failing command leaves an existing output untouched.
    std::fs::write(&out, "old").unwrap();
    let o = rotulus(&["stats", "--manifest", p(&d.path().join("p1.xml")), "--out", p(&out)]);
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "old");

    // Writing into a missing directory fails without stray files.
    let o = rotulus(&["stats", "--manifest", p(&split), "--out", p(&d.path().join("nope/x.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.path().join("nope").exists());
}

#[test]
fn decode_logits_greedy_agrees_with_width_one_beam() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("logits.json");
    // Columns: a, b, blank.
    let rows: Vec<Vec<f64>> = [[0.6, 0.1, 0.3], [0.2, 0.1, 0.7], [0.1, 0.7, 0.2], [0.1, 0.6, 0.3]]
        .iter()
        .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
        .collect();
    std::fs::write(&f, serde_json::json!({ "charset": "ab", "log_probs": rows }).to_string()).unwrap();
    let greedy = rotulus(&["decode-logits", "--logits", p(&f), "--greedy"]);
    let beam = rotulus(&["decode-logits", "--logits", p(&f), "--beam-width", "1"]);
    assert_eq!(greedy.status.code(), Some(0), "{}", stderr(&greedy));
    let g: Value = serde_json::from_slice(&greedy.stdout).unwrap();
    let b: Value = serde_json::from_slice(&beam.stdout).unwrap();
    assert_eq!(g["hypotheses"][0]["text"], "ab");
    assert_eq!(g["hypotheses"][0]["text"], b["hypotheses"][0]["text"]);

    let nbest = rotulus(&["--tsv", "decode-logits", "--logits", p(&f), "--n-best", "3"]);
    let out = stdout(&nbest);
    assert_eq!(out.lines().count(), 3);
    let scores: Vec<f64> = out.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    std::fs::write(&f, r#"{"charset": "ab", "log_probs": [[0.0, 0.0]]}"#).unwrap();
    assert_eq!(rotulus(&["decode-logits", "--logits", p(&f)]).status.code(), Some(2));
}

#[test]
fn correct_and_translate_with_mock_provider() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("t.txt");
    std::fs::write(&input, "Johannes de Stok\nqui tulit breve\n").unwrap();
    let o = rotulus(&["correct", "--in", p(&input), "--provider", "mock"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["lines"], serde_json::json!(["Johannes de Stok", "qui tulit breve"]));
    assert_eq!(v["changed"], serde_json::json!([false, false]));
    assert_eq!(v["fallback"], false);

    let o = rotulus(&["--tsv", "translate", "--in", p(&input), "--provider", "mock"]);
    assert_eq!(stdout(&o), "Johannes de Stok\nqui tulit breve\n");

    // Stdin input.
    let mut child = Command::new(env!("CARGO_BIN_EXE_rotulus"))
        .args(["--tsv", "correct", "--in", "-", "--provider", "mock"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"a\nb\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "0\ta\n0\tb\n");
}

/// One-shot HTTP server answering every request with `body`.
fn serve_once(body: String) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let h = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        loop {
            let n = s.read(&mut chunk).unwrap();
            buf.extend_from_slice(&chunk[..n]);
            let text = String::from_utf8_lossy(&buf).to_string();
            if let Some(end) = text.find("\r\n\r\n") {
                let len: usize = text[..end]
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                    .unwrap_or(0);
                if buf.len() >= end + 4 + len {
                    break;
                }
            }
            if n == 0 {
                break;
            }
        }
        let resp = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        s.write_all(resp.as_bytes()).unwrap();
        String::from_utf8_lossy(&buf).to_string()
    });
    (url, h)
}

#[test]
fn correct_over_http_provider() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("t.txt");
    std::fs::write(&input, "Johanes de Stok\nqui tulit breve\n").unwrap();
    let reply = serde_json::json!({
        "candidates": [{ "content": { "parts": [{ "text": "Johannes de Stok\nqui tulit breve" }] } }]
    });
    let (url, server) = serve_once(reply.to_string());
    let o = Command::new(env!("CARGO_BIN_EXE_rotulus"))
        .args(["correct", "--in", p(&input), "--endpoint", &url, "--model", "m1", "--api-key-env", "ROTULUS_TEST_KEY"])
        .env("ROTULUS_TEST_KEY", "sekrit")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["changed"], serde_json::json!([true, false]));
    let request = server.join().unwrap();
    assert!(request.starts_with("POST /models/m1:generateContent"), "{request}");
    assert!(request.contains("sekrit"));

    // Without a key the command fails cleanly.
    let o = Command::new(env!("CARGO_BIN_EXE_rotulus"))
        .args(["correct", "--in", p(&input), "--api-key-env", "ROTULUS_TEST_NO_SUCH_KEY"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ROTULUS_TEST_NO_SUCH_KEY"), "{}", stderr(&o));
}

#[test]
fn segment_writes_parseable_pagexml() {
    use rand::SeedableRng;
    use rotulus::nn::{build_segmentation_model, save_weights, Model, ModelWeights};
    let d = tempfile::tempdir().unwrap();
    write_page(d.path(), "page", &["ab"], "KB27");
    let model = Model::init(&build_segmentation_model(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
    let weights = d.path().join("seg.bin");
    std::fs::write(&weights, save_weights(&ModelWeights::from_model(&model, None))).unwrap();
    let out = d.path().join("out.xml");
    let o = rotulus(&[
        "segment",
        "--image",
        p(&d.path().join("page.png")),
        "--weights",
        p(&weights),
        "--width",
        "64",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let parsed = parse_pagexml(&std::fs::read(&out).unwrap()).unwrap();
    assert!(parsed.issues.is_empty());
    assert_eq!(parsed.doc.image_ref, "page.png");
}

#[test]
fn train_htr_needs_out_and_writes_weights() {
    let d = tempfile::tempdir().unwrap();
    let split = write_dataset(d.path());
    let o = rotulus(&["train-htr", "--manifest", p(&split), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let w = d.path().join("w.bin");
    let h = d.path().join("h.csv");
    let o = rotulus(&[
        "-q",
        "--out",
        p(&w),
        "train-htr",
        "--manifest",
        p(&split),
        "--small",
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--no-augment",
        "--history",
        p(&h),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let loaded = rotulus::nn::load_weights(&std::fs::read(&w).unwrap(), &Default::default()).unwrap();
    assert!(Recognizer::from_weights(&loaded).is_ok());
    let csv = std::fs::read_to_string(&h).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,loss,cer,wer,lr");
    assert_eq!(csv.lines().count(), 2);
}

/// The training settings shown in the guide are accepted as written.
#[test]
fn guide_training_config_parses() {
    let guide = include_str!("../../../book/src/cli.md");
    let start = guide.find("```toml\n").expect("toml block") + "```toml\n".len();
    let end = start + guide[start..].find("```").unwrap();
    let cfg: rotulus::nn::TrainConfig = toml::from_str(&guide[start..end]).unwrap();
    assert_eq!(cfg, rotulus::nn::TrainConfig::default());
}
