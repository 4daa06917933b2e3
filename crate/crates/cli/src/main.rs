use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fsvvlm::config::RunConfig;
use fsvvlm::evalkit::{
    hyperparameter_sweep, metrics_table, routing_confusion, run_ablation, summarize, write_records, predict_all,
    RunResult, SweepParam,
};
use fsvvlm::model::{Dataset, Example, Mode, Model};
use fsvvlm::synthdata::{default_split, generate_corpus, load_corpus, serialize_corpus};
use fsvvlm::trainer::{gradient_audit, load_checkpoint, save_checkpoint, train};
use fsvvlm::Error;

#[derive(Parser)]
#[command(name = "fsvvlm", version, about = "Synthetic short-video fake news detector: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSONL.
    Gen(Common),
    /// Train on a corpus and write a checkpoint, logs and the resolved config.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Train every ablation row with the same seed.
    Ablate(Common),
    /// Train once per value of one hyperparameter.
    Sweep(Common),
    /// Routing confusion matrices of a checkpoint on the test split.
    Inspect(Common),
    /// Whole-model finite-difference gradient audit.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    events: Option<usize>,
    /// Four comma-separated probabilities: real, fake video, fake text, fake both.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    artifact_tokens: Option<usize>,
    #[arg(long)]
    split_layer: Option<usize>,
    /// Comma-separated 1-based layers.
    #[arg(long)]
    insert_layers: Option<String>,
    /// Comma list over A..E, or `none`.
    #[arg(long)]
    toggles: Option<String>,
    #[arg(long)]
    gate_scaling: bool,
    #[arg(long)]
    entropy_reg: bool,
    /// full or bare.
    #[arg(long)]
    mode: Option<String>,
    /// Sweep parameter: q, l or layers.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated sweep values; layer lists join entries with `+`.
    #[arg(long)]
    values: Option<String>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Split for eval and inspect: val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Minimum number of probes for gradcheck.
    #[arg(long, default_value_t = 60)]
    probes: usize,
}

/// Usage problems exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Run(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: &str) -> Failure {
    Failure::Usage(msg.to_string())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, synopsis: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| usage(&format!("missing --{flag}\nusage: fsvvlm {synopsis}")))
}

fn resolve(c: &Common) -> Result<RunConfig, Failure> {
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    push("seed", c.seed.map(|v| v.to_string()));
    push("samples", c.samples.map(|v| v.to_string()));
    push("events", c.events.map(|v| v.to_string()));
    push("mix", c.mix.clone());
    push("artifact_tokens", c.artifact_tokens.map(|v| v.to_string()));
    push("split_layer", c.split_layer.map(|v| v.to_string()));
    push("insert_layers", c.insert_layers.clone());
    push("toggles", c.toggles.clone());
    push("gate_scaling", c.gate_scaling.then(|| "true".to_string()));
    push("entropy_reg", c.entropy_reg.then(|| "true".to_string()));
    push("mode", c.mode.clone());
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(&format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    let text = match &c.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure::Run(Error::Io { path: p.clone(), source: e }))?),
        None => None,
    };
    Ok(RunConfig::resolve(text.as_deref(), &flags)?)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Run(Error::Io { path: path.to_path_buf(), source: e }))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Run(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Outcome {
    ensure_dir(dir)?;
    write(&dir.join("resolved.cfg"), &cfg.to_cfg_string())?;
    write(&dir.join("provenance.cfg"), &cfg.provenance_string())
}

fn dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let corpus = load_corpus(path)?;
    let splits = default_split(&corpus.samples)?;
    Ok(Dataset::from_splits(&splits, &cfg.corpus, cfg.model.backbone.max_context)?)
}

fn split<'a>(c: &Common, data: &'a Dataset) -> Result<&'a [Example], Failure> {
    match c.split.as_str() {
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(usage(&format!("--split must be val or test, got {other:?}"))),
    }
}

fn load_model(c: &Common, cfg: &RunConfig, synopsis: &str) -> Result<Model, Failure> {
    let ckpt = required(&c.checkpoint, "checkpoint", synopsis)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    load_checkpoint(&mut model.params, ckpt)?;
    Ok(model)
}

fn gen(c: &Common) -> Outcome {
    let out = required(&c.out, "out", "gen --out FILE [--seed N --samples N --events N --mix P,P,P,P]")?;
    let cfg = resolve(c)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_config(dir, &cfg)?;
    serialize_corpus(&corpus, out)?;
    println!("wrote {} samples to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Outcome {
    let synopsis = "train --corpus FILE --out DIR [--config FILE]";
    let corpus = required(&c.corpus, "corpus", synopsis)?;
    let out = required(&c.out, "out", synopsis)?;
    let cfg = resolve(c)?;
    let data = dataset(corpus, &cfg)?;
    write_config(out, &cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &data.train, &data.val, &cfg.train, |r| {
        if r.step % 100 == 0 {
            eprintln!("step {} epoch {} lr {:.3e} loss {:.4}", r.step, r.epoch, r.lr, r.loss.total);
        }
    })?;
    save_checkpoint(&model.params, &out.join("model.ckpt"))?;
    write_records(&out.join("train_log.jsonl"), &outcome.steps)?;
    write_records(&out.join("epochs.jsonl"), &outcome.epochs)?;
    let mut evals = Vec::new();
    for mode in [Mode::Full, Mode::Bare] {
        let preds = predict_all(&model, &data.test, mode)?;
        evals.push(summarize(&data.test, &preds, mode)?);
    }
    write_records(&out.join("eval.jsonl"), &evals)?;
    let mut rows: Vec<(String, _)> = outcome
        .epochs
        .iter()
        .map(|e| (format!("val epoch {}", e.epoch), e.val.metrics))
        .collect();
    rows.extend(evals.iter().map(|e| (format!("test {}", e.mode), e.metrics)));
    let mut text = metrics_table(&rows);
    text.push_str(&format!("best epoch {}\n", outcome.best_epoch));
    if let Some(a) = &outcome.preflight {
        text.push_str(&format!("gradient audit: {} probes, max rel. err {:.3e}\n", a.probes.len(), a.max_rel_error));
    }
    write(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval(c: &Common) -> Outcome {
    let synopsis = "eval --corpus FILE --checkpoint FILE [--config FILE --mode full|bare --out DIR]";
    let corpus = required(&c.corpus, "corpus", synopsis)?;
    let cfg = resolve(c)?;
    let model = load_model(c, &cfg, synopsis)?;
    let data = dataset(corpus, &cfg)?;
    let examples = split(c, &data)?;
    let preds = predict_all(&model, examples, cfg.mode)?;
    let ev = summarize(examples, &preds, cfg.mode)?;
    let mut text = metrics_table(&[(format!("{} {}", c.split, cfg.mode), ev.metrics)]);
    text.push_str(&format!("confusion (rows true real/fake, cols predicted)\n{}", ev.confusion));
    if let Some(h) = ev.attribution_entropy {
        text.push_str(&format!("attribution gate entropy {h:.6}\n"));
    }
    if let Some(out) = &c.out {
        write_config(out, &cfg)?;
        write_records(&out.join("eval.jsonl"), &[&ev])?;
        write(&out.join("eval.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn report_runs(out: &Path, name: &str, cfg: &RunConfig, runs: &[RunResult]) -> Outcome {
    write_config(out, cfg)?;
    write_records(&out.join(format!("{name}.jsonl")), runs)?;
    let rows: Vec<(String, _)> = runs.iter().map(|r| (r.label.clone(), r.test)).collect();
    let text = metrics_table(&rows);
    write(&out.join(format!("{name}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

fn ablate(c: &Common) -> Outcome {
    let synopsis = "ablate --corpus FILE --out DIR [--config FILE]";
    let corpus = required(&c.corpus, "corpus", synopsis)?;
    let out = required(&c.out, "out", synopsis)?;
    let cfg = resolve(c)?;
    let data = dataset(corpus, &cfg)?;
    let runs = run_ablation(&data, &cfg.model, &cfg.train)?;
    report_runs(out, "ablation", &cfg, &runs)
}

fn sweep(c: &Common) -> Outcome {
    let synopsis = "sweep --corpus FILE --out DIR --param q|l|layers --values V,V,..";
    let corpus = required(&c.corpus, "corpus", synopsis)?;
    let out = required(&c.out, "out", synopsis)?;
    let param: SweepParam = c
        .param
        .as_deref()
        .ok_or_else(|| usage(&format!("missing --param\nusage: fsvvlm {synopsis}")))?
        .parse()?;
    let values: Vec<String> = c
        .values
        .as_deref()
        .ok_or_else(|| usage(&format!("missing --values\nusage: fsvvlm {synopsis}")))?
        .split(',')
        .map(|v| v.trim().to_string())
        .collect();
    let cfg = resolve(c)?;
    let data = dataset(corpus, &cfg)?;
    let runs = hyperparameter_sweep(param, &values, &cfg.model, &cfg.train, &data)?;
    report_runs(out, "sweep", &cfg, &runs)
}

fn inspect(c: &Common) -> Outcome {
    let synopsis = "inspect --corpus FILE --checkpoint FILE [--config FILE --out DIR]";
    let corpus = required(&c.corpus, "corpus", synopsis)?;
    let cfg = resolve(c)?;
    let model = load_model(c, &cfg, synopsis)?;
    let data = dataset(corpus, &cfg)?;
    let r = routing_confusion(&model, split(c, &data)?)?;
    let mut rows = vec![("answer head".to_string(), r.head)];
    rows.extend(r.detection_metrics.map(|m| ("detection gate".to_string(), m)));
    rows.extend(r.attribution_metrics.map(|m| ("attribution gate".to_string(), m)));
    let mut text = metrics_table(&rows);
    if let Some(cm) = &r.detection {
        text.push_str(&format!("detection (rows real/fake, cols expert)\n{cm}"));
    }
    if let Some(cm) = &r.attribution {
        text.push_str(&format!(
            "attribution (rows real/fake video/fake text/fake both, cols expert)\n{cm}"
        ));
    }
    if let Some(h) = r.attribution_entropy {
        text.push_str(&format!("attribution gate entropy {h:.6}\n"));
    }
    if let Some(out) = &c.out {
        write_config(out, &cfg)?;
        write_records(&out.join("routing.jsonl"), &[&r])?;
        write(&out.join("routing.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn gradcheck(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    let examples = match &c.corpus {
        Some(p) => dataset(p, &cfg)?.train,
        None => {
            let spec = fsvvlm::synthdata::CorpusSpec {
                n_samples: 40,
                ..cfg.corpus.clone()
            };
            let corpus = generate_corpus(&spec)?;
            fsvvlm::model::examples(&corpus.samples, &spec, cfg.model.backbone.max_context)?
        }
    };
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    // Fresh LoRA up-projections are zero, which would leave the down factors
    // without gradient; draw them small and nonzero.
    let ups: Vec<_> = model.net.backbone.lora_params().iter().map(|l| l.up).collect();
    for (k, id) in ups.into_iter().enumerate() {
        for (i, v) in model.params.param_mut(id).tensor.values_mut().iter_mut().enumerate() {
            *v = 0.01 * ((((i * 7 + k * 13) % 11) as f64) - 5.0);
        }
    }
    let n = cfg.train.batch_size.min(examples.len());
    let report = gradient_audit(&mut model, &examples[..n], c.probes, cfg.train.seed)?;
    let mut text = String::new();
    for c in report.by_component() {
        text.push_str(&format!(
            "{:<20} {:>4} probes {:>4} nonzero  max rel. err {:.3e}\n",
            c.component, c.probes, c.nonzero, c.max_rel_error
        ));
    }
    let worst = report.worst();
    text.push_str(&format!(
        "{} probes, max rel. err {:.3e} at {} [{}]\n",
        report.probes.len(),
        report.max_rel_error,
        worst.name,
        worst.index
    ));
    if let Some(out) = &c.out {
        write_config(out, &cfg)?;
        write(&out.join("gradcheck.txt"), &text)?;
    }
    print!("{text}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Run(Error::Contract(format!(
            "gradient audit failed: max rel. err {:.3e}",
            report.max_rel_error
        ))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => eval(c),
        Command::Ablate(c) => ablate(c),
        Command::Sweep(c) => sweep(c),
        Command::Inspect(c) => inspect(c),
        Command::Gradcheck(c) => gradcheck(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
