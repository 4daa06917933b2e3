//! End-to-end acceptance criteria, one report line each.
//!
//! Criteria 5–7 train the default desk configuration three times and take
//! several minutes in total.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use fsvvlm::adec::{adec_loss, match_labels, matching_scores};
use fsvvlm::autodiff::{Tape, Tensor};
use fsvvlm::evalkit::{macro_metrics, ConfusionMatrix, MetricsReport};
use fsvvlm::model::{ablation_rows, examples, Model, ModelConfig};
use fsvvlm::params::{ParamGroup, ParamStore};
use fsvvlm::pmoe::{top1, MoeBlock};
use fsvvlm::synthdata::{default_split, generate_corpus, CorpusSpec, Label};
use fsvvlm::trainer::{train, TrainConfig};

const BIN: &str = env!("CARGO_BIN_EXE_fsvvlm");

struct Report {
    lines: Vec<(u32, bool, String)>,
}

impl Report {
    fn record(&mut self, n: u32, pass: bool, detail: String) {
        println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        self.lines.push((n, pass, detail));
    }
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).env("FSVVLM_THREADS", "1").output().expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        eprintln!("fsvvlm {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    (out.status.code().unwrap_or(-1), stdout)
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| serde_json::from_str(l).expect("valid record"))
        .collect()
}

fn num(v: &Value, path: &[&str]) -> f64 {
    let mut v = v;
    for k in path {
        v = &v[*k];
    }
    v.as_f64().unwrap_or_else(|| panic!("missing number at {path:?} in {v}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn within(m: &MetricsReport, want: [f64; 4]) -> (bool, String) {
    let got = [m.acc, m.macro_f1, m.macro_p, m.macro_r];
    let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.01);
    (ok, format!("ACC {:.2} M-F1 {:.2} M-P {:.2} M-R {:.2}", got[0], got[1], got[2], got[3]))
}

fn criterion_1(r: &mut Report) {
    let m = macro_metrics(&ConfusionMatrix::binary(183, 17, 15, 84)).unwrap();
    let (ok, d) = within(&m, [89.30, 87.98, 87.80, 88.17]);
    r.record(1, ok, format!("detection matrix: {d}"));
}

fn criterion_2(r: &mut Report) {
    let cm = ConfusionMatrix::from_rows(&[
        vec![48, 5, 2, 1],
        vec![1, 13, 1, 2],
        vec![0, 2, 14, 1],
        vec![0, 2, 1, 7],
    ])
    .unwrap();
    let (ok, d) = within(&macro_metrics(&cm).unwrap(), [82.00, 76.19, 74.62, 78.63]);
    r.record(2, ok, format!("attribution matrix: {d}"));
}

fn criterion_3(r: &mut Report, dir: &Path) {
    let t = Instant::now();
    let out = dir.join("gradcheck");
    let (code, text) = run(&["gradcheck", "--seed", "7", "--entropy-reg", "--probes", "60", "--out", s(&out)]);
    let secs = t.elapsed().as_secs_f64();
    let mut probes = 0;
    let mut missing = Vec::new();
    let mut seen = BTreeMap::new();
    for line in text.lines() {
        if let Some((name, rest)) = line.split_once("  ").filter(|_| line.contains(" probes ")) {
            let nums: Vec<usize> = rest.split_whitespace().filter_map(|w| w.parse().ok()).collect();
            seen.insert(name.trim().to_string(), (nums[0], nums[1]));
            probes += nums[0];
        }
    }
    for c in [
        "artifact tokens",
        "detection gate",
        "detection experts",
        "attribution gate",
        "attribution experts",
        "mgap",
        "lora",
    ] {
        if !seen.get(c).is_some_and(|&(n, nz)| n > 0 && nz > 0) {
            missing.push(c);
        }
    }
    let max_err = text
        .lines()
        .find_map(|l| l.split("max rel. err ").nth(1).filter(|_| l.contains(" at ")))
        .and_then(|v| v.split_whitespace().next())
        .unwrap_or("?")
        .to_string();
    let ok = code == 0 && probes >= 50 && missing.is_empty() && secs <= 120.0;
    r.record(
        3,
        ok,
        format!("{probes} probes, max rel. err {max_err}, uncovered {missing:?}, {secs:.1}s"),
    );
}

fn criterion_4(r: &mut Report) {
    let mut failures: Vec<&str> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;

    // Gate simplex and p_r + p_f = 1.
    let mut store = ParamStore::new();
    let det = MoeBlock::new(&mut store, &mut rng, "det", d, 2, 2, ParamGroup::Detection);
    let attr = MoeBlock::new(&mut store, &mut rng, "attr", d, 2, 4, ParamGroup::Attribution);
    let values: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let tokens = Tensor::new(vec![3, d], values).unwrap();
    {
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(&tokens).unwrap();
        let a = det.forward(&mut tape, x, false).unwrap();
        let simplex = (0..3).all(|i| {
            let p = a.decision.token_probs(i);
            p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12
        });
        let mean = a.decision.mean_probs();
        if !simplex || (mean[0] + mean[1] - 1.0).abs() > 1e-12 {
            failures.push("gate simplex");
        }

        // Unselected experts get exactly zero gradient.
        let b = attr.forward(&mut tape, x, false).unwrap();
        let loss = tape.sum(b.out);
        let grads = tape.backward(loss).unwrap();
        let mut unselected = 0;
        for e in 0..attr.experts() {
            if !b.decision.selected.contains(&e) {
                unselected += 1;
                let g = grads.param(attr.expert_weight(e));
                if g.is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                    failures.push("unselected expert gradient");
                }
            }
        }
        if unselected == 0 {
            failures.push("no unselected expert to check");
        }
    }

    // Routing argmax is invariant to a common shift of the gate logits.
    for _ in 0..200 {
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        if top1(&row) != top1(&shifted) {
            failures.push("routing shift invariance");
            break;
        }
    }

    // Event-matching scores.
    let n = 4;
    let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scores = |v: &[f64], t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![n, d], v.to_vec()).unwrap()).unwrap();
        let b = tape.leaf(&Tensor::new(vec![n, d], t.to_vec()).unwrap()).unwrap();
        let (vt, tv) = matching_scores(&mut tape, a, b, 0.07).unwrap();
        (tape.value(vt).to_vec(), tape.value(tv).to_vec())
    };
    let (vt, tv) = scores(&v, &t);
    let stochastic = vt.chunks(n).chain(tv.chunks(n)).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    if !stochastic {
        failures.push("score rows stochastic");
    }
    if vt.iter().chain(&tv).any(|&x| x < 0.0) {
        failures.push("score nonnegativity");
    }
    let (vt2, tv2) = scores(&t, &v);
    if vt.iter().zip(&tv2).chain(tv.iter().zip(&vt2)).any(|(a, b)| (a - b).abs() > 1e-12) {
        failures.push("modality swap symmetry");
    }
    let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
    let (vt3, _) = scores(&scaled, &t);
    if vt.iter().zip(&vt3).any(|(a, b)| (a - b).abs() > 1e-12) {
        failures.push("cosine scale invariance");
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![n, d], v.clone()).unwrap()).unwrap();
        let b = tape.leaf(&Tensor::new(vec![n, d], t.clone()).unwrap()).unwrap();
        let (s_vt, s_tv) = matching_scores(&mut tape, a, b, 0.07).unwrap();
        let fakes = match_labels(&[Label::Fake; 4]);
        let l = adec_loss(&mut tape, s_vt, s_tv, &fakes, Default::default()).unwrap();
        if tape.scalar(l.total) != 0.0 {
            failures.push("event loss zero on all-fake batch");
        }
    }

    // Loss additivity over every ablation row, and frozen bytes across training.
    let spec = CorpusSpec {
        n_samples: 60,
        text_vocab: 64,
        visual_vocab: 64,
        frames: 2,
        patches_per_frame: 2,
        description_len: 4,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let split = default_split(&corpus.samples).unwrap();
    let train_ex = examples(&split.train, &spec, 64).unwrap();
    let val_ex = examples(&split.val, &spec, 64).unwrap();
    let tiny = |toggles| {
        let mut cfg = ModelConfig {
            toggles,
            artifact_tokens: 3,
            ..ModelConfig::default()
        };
        let b = &mut cfg.backbone;
        (b.depth, b.split_layer, b.hidden_dim, b.heads) = (3, 1, 16, 2);
        (b.text_vocab, b.visual_vocab, b.frames, b.patches_per_frame) = (64, 64, 2, 2);
        (b.lora_rank, b.lora_alpha, b.insert_layers, b.max_context) = (2, 8.0, vec![1], 64);
        cfg
    };
    for row in ablation_rows() {
        let mut cfg = tiny(row);
        cfg.entropy_reg = row.c;
        let m = Model::new(cfg, 1).unwrap();
        let l = m.loss(&train_ex[..4]).unwrap();
        if (l.total - (l.ce + l.pmoe + l.adec + l.entropy)).abs() > 1e-10 {
            failures.push("loss additivity");
        }
    }
    let mut m = Model::new(tiny(fsvvlm::model::Toggles::FULL), 2).unwrap();
    let frozen = |m: &Model| -> Vec<u8> {
        m.params
            .iter()
            .filter(|(_, p)| !p.trainable())
            .flat_map(|(_, p)| p.tensor.values().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
            .collect()
    };
    let before = frozen(&m);
    let tc = TrainConfig {
        epochs: 1,
        peak_lr: 1e-3,
        preflight_probes: 0,
        ..TrainConfig::default()
    };
    let mut additive = true;
    train(&mut m, &train_ex, &val_ex, &tc, |s| {
        let l = s.loss;
        additive &= (l.total - (l.ce + l.pmoe + l.adec + l.entropy)).abs() <= 1e-10;
    })
    .unwrap();
    if !additive {
        failures.push("loss additivity during training");
    }
    if frozen(&m) != before {
        failures.push("frozen parameter bytes");
    }
    r.record(4, failures.is_empty(), format!("violations {failures:?}"));
}

struct Run {
    dir: PathBuf,
    secs: f64,
    best_val_acc: f64,
    test_acc: f64,
}

fn train_run(corpus: &Path, dir: PathBuf, extra: &[&str]) -> Option<Run> {
    let t = Instant::now();
    let mut args = vec!["train", "--corpus", s(corpus), "--out", s(&dir), "--seed", "0"];
    args.extend_from_slice(extra);
    let (code, _) = run(&args);
    let secs = t.elapsed().as_secs_f64();
    if code != 0 {
        return None;
    }
    let best_val_acc = records(&dir.join("epochs.jsonl"))
        .iter()
        .map(|e| num(e, &["val", "metrics", "acc"]))
        .fold(f64::MIN, f64::max);
    let test_acc = records(&dir.join("eval.jsonl"))
        .iter()
        .find(|e| e["mode"] == "full")
        .map(|e| num(e, &["metrics", "acc"]))?;
    Some(Run {
        dir,
        secs,
        best_val_acc,
        test_acc,
    })
}

fn val_entropy(corpus: &Path, run: &Run, out: &Path) -> Option<f64> {
    let cfg = run.dir.join("resolved.cfg");
    let ckpt = run.dir.join("model.ckpt");
    let (code, _) = run_eval(corpus, &cfg, &ckpt, out);
    if code != 0 {
        return None;
    }
    records(&out.join("eval.jsonl"))[0]["attribution_entropy"].as_f64()
}

fn run_eval(corpus: &Path, cfg: &Path, ckpt: &Path, out: &Path) -> (i32, String) {
    run(&[
        "eval",
        "--corpus",
        s(corpus),
        "--config",
        s(cfg),
        "--checkpoint",
        s(ckpt),
        "--split",
        "val",
        "--out",
        s(out),
    ])
}

fn criteria_5_to_7(r: &mut Report, dir: &Path) {
    let corpus = dir.join("data").join("corpus.jsonl");
    let (code, _) = run(&["gen", "--out", s(&corpus), "--seed", "0", "--samples", "2000"]);
    assert_eq!(code, 0, "corpus generation");

    let full = train_run(&corpus, dir.join("full"), &[]);
    let none = train_run(&corpus, dir.join("none"), &["--toggles", "none"]);
    match (&full, &none) {
        (Some(f), Some(n)) => {
            let ok = f.best_val_acc >= 95.0 && f.test_acc >= n.test_acc && f.secs <= 600.0 && n.secs <= 600.0;
            r.record(
                5,
                ok,
                format!(
                    "full val acc {:.2}, test acc {:.2} vs toggles-off {:.2}, {:.0}s and {:.0}s",
                    f.best_val_acc, f.test_acc, n.test_acc, f.secs, n.secs
                ),
            );
        }
        _ => r.record(5, false, "a training run failed".into()),
    }

    match &full {
        Some(f) => {
            let out = dir.join("inspect");
            let (code, _) = run(&[
                "inspect",
                "--corpus",
                s(&corpus),
                "--config",
                s(&f.dir.join("resolved.cfg")),
                "--checkpoint",
                s(&f.dir.join("model.ckpt")),
                "--out",
                s(&out),
            ]);
            if code == 0 {
                let rep = &records(&out.join("routing.jsonl"))[0];
                let det = num(rep, &["detection_metrics", "acc"]);
                let head = num(rep, &["head", "acc"]);
                r.record(
                    6,
                    (det - head).abs() <= 5.0,
                    format!("detection gate acc {det:.2} vs answer head {head:.2}"),
                );
            } else {
                r.record(6, false, "inspect failed".into());
            }
        }
        None => r.record(6, false, "no trained model".into()),
    }

    let with = train_run(&corpus, dir.join("entropy"), &["--entropy-reg"]);
    let h_without = full.as_ref().and_then(|f| val_entropy(&corpus, f, &dir.join("val_full")));
    let h_with = with.as_ref().and_then(|w| val_entropy(&corpus, w, &dir.join("val_entropy")));
    match (h_with, h_without, &with) {
        (Some(a), Some(b), Some(w)) => r.record(
            7,
            a < b,
            format!(
                "val attribution entropy {a:.4} with the term vs {b:.4} without; test acc {:.2} vs {:.2}",
                w.test_acc,
                full.as_ref().map_or(f64::NAN, |f| f.test_acc)
            ),
        ),
        _ => r.record(7, false, "an entropy run failed".into()),
    }
}

fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_file() && name != "provenance.cfg" {
            out.insert(name, std::fs::read(&p).unwrap());
        }
    }
    out
}

fn criterion_8(r: &mut Report, dir: &Path) {
    const TINY: &[&str] = &[
        "--set", "depth=3", "--set", "split_layer=1", "--set", "hidden_dim=16", "--set", "heads=2",
        "--set", "lora_rank=2", "--set", "lora_alpha=8", "--set", "frames=2", "--set", "patches_per_frame=2",
        "--set", "epochs=1", "--set", "preflight_probes=10", "--artifact-tokens", "4",
    ];
    let mut bad: Vec<String> = Vec::new();
    let a = dir.join("det_a");
    let b = dir.join("det_b");
    let corpus = a.join("gen").join("corpus.jsonl");
    let cfg = |d: &Path, sub: &str| d.join(sub).join("resolved.cfg");

    let mut gen = vec!["gen", "--out", s(&corpus), "--seed", "3", "--samples", "120"];
    gen.extend_from_slice(TINY);
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen", gen.iter().map(|x| x.to_string()).collect()),
        ("train", vec!["train".into(), "--corpus".into(), s(&corpus).into()]),
        ("eval", vec!["eval".into(), "--corpus".into(), s(&corpus).into(), "--mode".into(), "bare".into()]),
        ("inspect", vec!["inspect".into(), "--corpus".into(), s(&corpus).into()]),
        ("gradcheck", vec!["gradcheck".into(), "--probes".into(), "20".into()]),
        (
            "sweep",
            vec!["sweep".into(), "--corpus".into(), s(&corpus).into(), "--param".into(), "q".into(), "--values".into(), "2,4".into()],
        ),
        ("ablate", vec!["ablate".into(), "--corpus".into(), s(&corpus).into()]),
    ];
    for (name, base) in steps {
        let mut first: Vec<String> = base.clone();
        let mut second: Vec<String> = base.clone();
        let (out_a, out_b) = if name == "gen" {
            let other = b.join("gen").join("corpus.jsonl");
            let i = second.iter().position(|x| x == s(&corpus)).unwrap();
            second[i] = s(&other).into();
            second.truncate(3);
            second.extend(["--config".into(), s(&cfg(&a, "gen")).into()]);
            (a.join("gen"), b.join("gen"))
        } else {
            let (out_a, out_b) = (a.join(name), b.join(name));
            first.extend(TINY.iter().map(|x| x.to_string()));
            first.extend(["--seed".into(), "3".into(), "--out".into(), s(&out_a).into()]);
            if matches!(name, "eval" | "inspect") {
                first.extend(["--checkpoint".into(), s(&a.join("train").join("model.ckpt")).into()]);
                second.extend(["--checkpoint".into(), s(&a.join("train").join("model.ckpt")).into()]);
            }
            second.extend(["--config".into(), s(&cfg(&a, name)).into(), "--out".into(), s(&out_b).into()]);
            (out_a, out_b)
        };
        let fa: Vec<&str> = first.iter().map(String::as_str).collect();
        let fb: Vec<&str> = second.iter().map(String::as_str).collect();
        let (ca, _) = run(&fa);
        let (cb, _) = run(&fb);
        if ca != 0 || cb != 0 {
            bad.push(format!("{name} exit {ca}/{cb}"));
            continue;
        }
        let (da, db) = (dir_files(&out_a), dir_files(&out_b));
        if da.is_empty() || da != db {
            bad.push(name.to_string());
        }
    }
    r.record(8, bad.is_empty(), format!("subcommands differing on rerun {bad:?}"));
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut r = Report { lines: Vec::new() };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r, dir);
    criterion_4(&mut r);
    criteria_5_to_7(&mut r, dir);
    criterion_8(&mut r, dir);
    r.lines.sort_by_key(|l| l.0);
    println!("acceptance summary");
    for (n, pass, detail) in &r.lines {
        println!("  {n}. {} {detail}", if *pass { "pass" } else { "FAIL" });
    }
    let failed: Vec<u32> = r.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
