use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use icdlaat_core::corpus::{generate_synthetic, load_corpus, split_corpus, Corpus, CorpusError, SynthSpec};
use icdlaat_core::labelspace::{build_labelspace, LabelSpace, Mode};
use icdlaat_core::trainer::{evaluate, load_model, save_model, train_with_progress, Model, Precision, Strategy, StayPrediction};
use serde::{Deserialize, Serialize};

use crate::config::{self, Setting};
use crate::error::{usage, CliError, Result};
use crate::manifest::{sibling, RunRecorder};

fn corpus_error(e: CorpusError) -> CliError {
    match e {
        CorpusError::SpecInvariant(_) | CorpusError::RatioSum(_) | CorpusError::InvalidRatio(_) | CorpusError::MinPartition { .. } => {
            usage(e.to_string())
        }
        other => CliError::Runtime(other.into()),
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).map_err(|e| CliError::Runtime(anyhow::Error::new(e).context(format!("loading {}", path.display()))))
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated ratios, got {s:?}")),
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// TOML or JSON file with synthetic corpus parameters; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub stays: Option<usize>,
    #[arg(long)]
    pub codes: Option<usize>,
    #[arg(long)]
    pub mean_len: Option<usize>,
    #[arg(long)]
    pub zipf: Option<f64>,
    #[arg(long)]
    pub keywords: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write train/val/test splits with these ratios, e.g. 0.8,0.1,0.1.
    #[arg(long, value_parser = parse_ratios)]
    pub split: Option<(f64, f64, f64)>,
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut rec = RunRecorder::start("gen");
    let mut spec = match &args.spec {
        Some(path) => {
            rec.input(path)?;
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| usage(format!("spec {}: {e}", path.display())))?
            } else {
                toml::from_str(&text).map_err(|e| usage(format!("spec {}: {e}", path.display())))?
            }
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = args.stays {
        spec.n_stays = v;
    }
    if let Some(v) = args.codes {
        spec.n_codes = v;
    }
    if let Some(v) = args.mean_len {
        spec.mean_len = v;
    }
    if let Some(v) = args.zipf {
        spec.zipf_s = v;
    }
    if let Some(v) = args.keywords {
        spec.keywords_per_code = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let synth = generate_synthetic(&spec).map_err(corpus_error)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let corpus_path = args.out.join("corpus.jsonl");
    synth.corpus.save(&corpus_path).map_err(|e| CliError::Runtime(e.into()))?;
    let manifest_path = args.out.join("spec.manifest");
    fs::write(&manifest_path, serde_json::to_string_pretty(&synth.manifest()).expect("serializes") + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    rec.artifact(&corpus_path)?.artifact(&manifest_path)?;
    if let Some(ratios) = args.split {
        let (tr, va, te) = split_corpus(&synth.corpus, ratios, spec.seed).map_err(corpus_error)?;
        for (name, part) in [("train", tr), ("val", va), ("test", te)] {
            let p = args.out.join(format!("{name}.jsonl"));
            part.save(&p).map_err(|e| CliError::Runtime(e.into()))?;
            rec.artifact(&p)?;
        }
    }
    let stats = synth.corpus.stats();
    println!(
        "wrote {} stays ({} tokens, mean length {:.1}, {} distinct codes) to {}",
        stats.stays,
        stats.tokens,
        stats.mean_seq_len,
        stats.distinct_codes,
        args.out.display()
    );
    rec.config(&spec).seed("corpus", spec.seed).metrics(&stats);
    rec.finish(&args.out.join("run.manifest.json"))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Raw,
    Family,
    Topk,
}

#[derive(Args, Debug)]
pub struct LabelsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    pub mode: ModeArg,
    /// Number of most frequent labels kept in topk mode.
    #[arg(long)]
    pub k: Option<usize>,
    /// In topk mode, count frequencies over code families.
    #[arg(long)]
    pub family: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn mode_from(mode: ModeArg, k: Option<usize>, family: bool) -> Result<Mode> {
    match (mode, k) {
        (ModeArg::Raw, None) if !family => Ok(Mode::Raw),
        (ModeArg::Family, None) if !family => Ok(Mode::Family),
        (ModeArg::Topk, Some(k)) if k > 0 => Ok(Mode::TopK { k, family }),
        (ModeArg::Topk, _) => Err(usage("topk mode needs --k with a positive value")),
        _ => Err(usage("--k and --family only apply to topk mode")),
    }
}

pub fn labels(args: LabelsArgs) -> Result<()> {
    let mut rec = RunRecorder::start("labels");
    let mode = mode_from(args.mode, args.k, args.family)?;
    let corpus = read_corpus(&args.corpus)?;
    rec.input(&args.corpus)?;
    let space = build_labelspace(&corpus, mode).map_err(|e| usage(e.to_string()))?;
    if let Mode::TopK { k, family } = mode {
        let distinct = build_labelspace(&corpus, if family { Mode::Family } else { Mode::Raw }).map_err(|e| usage(e.to_string()))?.len();
        if k > distinct {
            log::warn!("K={k} exceeds the {distinct} distinct labels; keeping all of them plus OTHER");
            eprintln!("warning: K={k} exceeds the {distinct} distinct labels; keeping all of them plus OTHER");
        }
    }
    let text = space.to_manifest();
    fs::write(&args.out, &text).with_context(|| format!("writing {}", args.out.display()))?;
    rec.artifact(&args.out)?;
    println!("{} labels ({mode}) written to {}", space.len(), args.out.display());
    rec.config(serde_json::json!({ "mode": mode.to_string() }))
        .metrics(serde_json::json!({ "labels": space.len(), "has_other": space.has_other() }));
    rec.finish(&sibling(&args.out, "run.json"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Label space manifest; defaults to raw codes of the training corpus.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", value_parser = config::parse_assignment)]
    pub overrides: Vec<Setting>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl TrainArgs {
    fn settings(&self, env: impl IntoIterator<Item = (String, String)>) -> Result<Vec<Setting>> {
        let mut s = match &self.config {
            Some(p) => config::file_settings(p)?,
            None => Vec::new(),
        };
        s.extend(config::env_settings(env));
        let flag = |key: &str, value: toml::Value| Setting { key: key.into(), value, source: format!("--{key}") };
        if let Some(v) = self.strategy {
            s.push(flag("strategy", toml::Value::String(v.to_string())));
        }
        if let Some(v) = self.lr {
            s.push(flag("learning_rate", toml::Value::Float(v)));
        }
        if let Some(v) = self.epochs {
            s.push(flag("max_epochs", toml::Value::Integer(v as i64)));
        }
        if let Some(v) = self.patience {
            s.push(flag("patience", toml::Value::Integer(v as i64)));
        }
        if let Some(v) = self.batch_size {
            s.push(flag("batch_size", toml::Value::Integer(v as i64)));
        }
        if let Some(v) = self.seed {
            s.push(flag("seed", toml::Value::Integer(v as i64)));
        }
        if let Some(v) = self.precision {
            let name = match v {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            };
            s.push(flag("precision", toml::Value::String(name.into())));
        }
        s.extend(self.overrides.iter().cloned());
        Ok(s)
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut rec = RunRecorder::start("train");
    let config = config::resolve(&args.settings(std::env::vars())?)?;
    if args.print_config {
        for (k, v) in config::flat_view(&config) {
            println!("{k} = {v}");
        }
        return Ok(());
    }
    if let Some(p) = &args.config {
        rec.input(p)?;
    }
    let train_corpus = read_corpus(&args.train)?;
    let val_corpus = read_corpus(&args.val)?;
    rec.input(&args.train)?.input(&args.val)?;
    let space = match &args.labels {
        Some(p) => {
            rec.input(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            LabelSpace::from_manifest(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => build_labelspace(&train_corpus, Mode::Raw).map_err(|e| usage(e.to_string()))?,
    };
    log::info!("training {} on {} stays, {} labels", config.strategy, train_corpus.len(), space.len());
    let started = std::time::Instant::now();
    let (model, history) = train_with_progress(&train_corpus, &val_corpus, &space, &config, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val P {:.4} R {:.4} F1 {:.4}  ({:.0}s)",
            e.epoch,
            e.train_loss,
            e.val_precision,
            e.val_recall,
            e.val_f1,
            started.elapsed().as_secs_f64()
        );
    })
    .map_err(|e| match e {
        icdlaat_core::trainer::TrainError::Config(_) | icdlaat_core::trainer::TrainError::LabelSpaceMismatch(_) => usage(e.to_string()),
        other => CliError::Runtime(other.into()),
    })?;
    let checksum = save_model(&model, &args.out).map_err(|e| CliError::Runtime(e.into()))?;
    let history_path = sibling(&args.out, "history.json");
    fs::write(&history_path, serde_json::to_string_pretty(&history).expect("serializes") + "\n")
        .with_context(|| format!("writing {}", history_path.display()))?;
    rec.artifact(&args.out)?.artifact(&history_path)?;
    let best = history.best().cloned();
    println!(
        "saved {} (checksum {checksum}); best epoch {} val F1 {:.4}",
        args.out.display(),
        history.best_epoch,
        best.as_ref().map_or(0.0, |b| b.val_f1)
    );
    rec.config(&config)
        .seed("train", config.seed)
        .digests(&model.vocab.to_manifest(), &model.labels.to_manifest())
        .metrics(serde_json::json!({ "best": best, "epochs": history.epochs.len(), "fingerprint": model.fingerprint, "checksum": checksum }));
    rec.finish(&sibling(&args.out, "run.json"))?;
    Ok(())
}

fn open_model(path: &Path) -> Result<Model> {
    load_model(path).map_err(|e| CliError::Runtime(anyhow::Error::new(e).context(format!("loading model {}", path.display()))))
}

fn check_threshold(t: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(usage(format!("threshold must lie in [0, 1], got {t}")))
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to the threshold the model was trained with.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub exclude_other: bool,
    /// Recorded in the run manifest; evaluation itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub run_manifest: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut rec = RunRecorder::start("eval");
    let model = open_model(&args.model)?;
    let corpus = read_corpus(&args.corpus)?;
    rec.input(&args.model)?.input(&args.corpus)?;
    let threshold = check_threshold(args.threshold.unwrap_or(model.config.threshold))?;
    let report = evaluate(&model, &corpus, threshold, args.exclude_other).map_err(|e| CliError::Runtime(e.into()))?;
    print!("{}", report.to_text());
    if let Some(p) = &args.json {
        fs::write(p, report.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
        rec.artifact(p)?;
    }
    rec.config(serde_json::json!({ "threshold": threshold, "exclude_other": args.exclude_other }))
        .seed("eval", args.seed)
        .digests(&model.vocab.to_manifest(), &model.labels.to_manifest())
        .metrics(serde_json::json!({ "precision": report.precision, "recall": report.recall, "f1": report.f1, "tp": report.tp, "fp": report.fp, "fn": report.fn_ }));
    let path = args.run_manifest.clone().unwrap_or_else(|| sibling(args.json.as_deref().unwrap_or(&args.model), "eval.run.json"));
    rec.finish(&path)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL with `{"id": ..., "documents": [...]}` per line.
    #[arg(long, conflicts_with = "text", required_unless_present = "text")]
    pub input: Option<PathBuf>,
    /// A single document to score.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Attention tokens reported per predicted label (attention models only).
    #[arg(long, default_value_t = 0)]
    pub top_tokens: usize,
    /// Drop the OTHER label from the output.
    #[arg(long)]
    pub exclude_other: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSONL output; stdout when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_manifest: Option<PathBuf>,
}

#[derive(Deserialize)]
struct PredictInput {
    #[serde(default)]
    id: Option<String>,
    documents: Vec<String>,
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    id: &'a str,
    #[serde(flatten)]
    prediction: &'a StayPrediction,
}

pub fn predict_one(model: &Model, documents: &[String], threshold: f64, top_tokens: usize, exclude_other: bool) -> Result<StayPrediction> {
    let mut p = model.predict(documents, threshold, top_tokens).map_err(|e| CliError::Runtime(e.into()))?;
    if exclude_other {
        p.codes.retain(|c| c.code != icdlaat_core::labelspace::OTHER);
    }
    Ok(p)
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let mut rec = RunRecorder::start("predict");
    let model = open_model(&args.model)?;
    rec.input(&args.model)?;
    let threshold = check_threshold(args.threshold.unwrap_or(model.config.threshold))?;
    let inputs: Vec<PredictInput> = match (&args.input, &args.text) {
        (Some(path), _) => {
            rec.input(path)?;
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.with_context(|| format!("reading {}", path.display()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut rec: PredictInput =
                    serde_json::from_str(&line).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
                rec.id.get_or_insert_with(|| format!("line{}", i + 1));
                out.push(rec);
            }
            out
        }
        (None, Some(text)) => vec![PredictInput { id: Some("text".into()), documents: vec![text.clone()] }],
        (None, None) => return Err(usage("one of --input or --text is required")),
    };
    let mut sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut predicted = BTreeSet::new();
    for input in &inputs {
        let p = predict_one(&model, &input.documents, threshold, args.top_tokens, args.exclude_other)?;
        predicted.extend(p.codes.iter().map(|c| c.code.clone()));
        let line = serde_json::to_string(&PredictOutput { id: input.id.as_deref().unwrap_or(""), prediction: &p }).expect("serializes");
        writeln!(sink, "{line}").context("writing predictions")?;
    }
    sink.flush().context("writing predictions")?;
    drop(sink);
    if let Some(p) = &args.out {
        rec.artifact(p)?;
    }
    rec.config(serde_json::json!({ "threshold": threshold, "top_tokens": args.top_tokens, "exclude_other": args.exclude_other }))
        .seed("predict", args.seed)
        .digests(&model.vocab.to_manifest(), &model.labels.to_manifest())
        .metrics(serde_json::json!({ "stays": inputs.len(), "distinct_codes_predicted": predicted.len() }));
    let path = args.run_manifest.clone().unwrap_or_else(|| sibling(args.out.as_deref().unwrap_or(&args.model), "predict.run.json"));
    rec.finish(&path)?;
    Ok(())
}
