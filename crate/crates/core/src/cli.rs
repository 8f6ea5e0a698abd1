//! Command-line entry point. Numeric results go to files under `--out`; a short summary
//! goes to standard output.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::explain::{
    beeswarm_rows, explain_global, feature_ranking, render_beeswarm_svg, temporal_report,
    write_beeswarm_csv,
};
use crate::frame::{build_feature_matrix, channel_layout};
use crate::globals::{build_global_vector, global_feature_names};
use crate::model::{prepare_all, SkillModel};
use crate::params::sha256_hex;
use crate::session::{load_sessions, Dataset, LoadOptions};
use crate::synth::{generate, write_synthetic};
use crate::training::{check_training_sessions, evaluate, split_and_cv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "skillscope", version, about = "Explainable skill scoring from tracked hand and tool motion")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic skill-graded dataset with planted signals.
    Synth(SynthArgs),
    /// Extract per-frame feature matrices and, optionally, global features.
    Featurize(FeaturizeArgs),
    /// Split, grid-search with cross-validation, retrain, and report on the test split.
    Train(TrainArgs),
    /// Score labeled sessions and report metrics.
    Evaluate(ModelDataArgs),
    /// Score sessions.
    Predict(ModelDataArgs),
    /// Temporal importance and global-feature Shapley attributions.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Session file (JSON lines) or directory of session files.
    #[arg(long)]
    data: PathBuf,
    /// Ignore unknown fields in session records instead of rejecting them.
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_sessions: Option<usize>,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Also write the 19 global features per session.
    #[arg(long)]
    globals: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelDataArgs {
    /// Trained model file written by `train`
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    inner: ModelDataArgs,
    /// Temporal importance only (default: both kinds).
    #[arg(long)]
    temporal: bool,
    /// Global-feature Shapley attributions only (default: both kinds).
    #[arg(long)]
    global: bool,
    /// Explain only this session.
    #[arg(long)]
    session: Option<String>,
    /// Background sessions for Shapley imputation (default: --data).
    #[arg(long)]
    background: Option<PathBuf>,
    /// Monte-Carlo permutations per session.
    #[arg(long)]
    samples: Option<usize>,
    /// Skip the SVG beeswarm rendering.
    #[arg(long)]
    no_svg: bool,
}

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    seed: u64,
    config: RunConfig,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hash_inputs(path: &Path, out: &mut Vec<InputHash>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            hash_inputs(&p, out)?;
        }
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        out.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(())
}

/// Collects outputs of one run and writes them, plus the manifest, under `--out`.
struct Run {
    out: PathBuf,
    outputs: Vec<String>,
    inputs: Vec<InputHash>,
}

impl Run {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        hash_inputs(path, &mut self.inputs)
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, body: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::File::create(&p)
            .and_then(|mut f| f.write_all(body))
            .map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        self.write(rel, &body)
    }

    fn finish(mut self, command: &str, argv: &[String], cfg: &RunConfig, started: u64) -> Result<()> {
        self.outputs.push("manifest.json".into());
        let manifest = RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            started_unix: started,
            finished_unix: now_unix(),
        };
        let body = serde_json::to_vec_pretty(&manifest)?;
        let p = self.out.join("manifest.json");
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn load(args: &DataArgs) -> Result<Dataset> {
    load_sessions(&args.data, LoadOptions { strict: !args.lenient })
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

fn cmd_synth(a: &SynthArgs, cfg: &mut RunConfig, run: &mut Run) -> Result<()> {
    if let Some(n) = a.n_sessions {
        cfg.synth.n_sessions = n;
    }
    let set = generate(&cfg.synth)?;
    write_synthetic(&set, &cfg.synth, &run.out)?;
    run.outputs
        .extend(["sessions.jsonl", "ground_truth.jsonl", "generator.json"].map(String::from));
    println!(
        "generated {} sessions ({} frames total) into {}",
        set.dataset.len(),
        set.truth.iter().map(|t| t.frames).sum::<usize>(),
        run.out.display()
    );
    Ok(())
}

fn cmd_featurize(a: &FeaturizeArgs, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    run.input(&a.data.data)?;
    let ds = load(&a.data)?;
    let header = {
        let mut h = vec!["frame".to_string()];
        h.extend(channel_layout());
        h
    };
    for s in ds.sessions() {
        let m = build_feature_matrix(s, &cfg.preprocess)?;
        let rows = (0..m.frames()).map(|t| {
            let mut r = vec![t.to_string()];
            r.extend((0..m.rows()).map(|c| m.get(c, t).to_string()));
            r
        });
        let body = csv_bytes(&header, rows)?;
        run.write(&format!("features/{}.csv", file_stem_for(&s.session_id)), &body)?;
    }
    if a.globals {
        let mut h = vec!["session_id".to_string()];
        h.extend(global_feature_names());
        let rows = ds
            .sessions()
            .iter()
            .map(|s| {
                let g = build_global_vector(s, &cfg.globals)?;
                let mut r = vec![s.session_id.clone()];
                r.extend(g.values.iter().map(|v| v.to_string()));
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let body = csv_bytes(&h, rows.into_iter())?;
        run.write("globals.csv", &body)?;
    }
    println!("featurized {} sessions into {}", ds.len(), run.out.display());
    Ok(())
}

fn predictions_csv(report: &crate::training::EvalReport) -> Result<Vec<u8>> {
    let header = ["session_id", "predicted", "label"].map(String::from);
    csv_bytes(
        &header,
        report.predictions.iter().map(|p| {
            vec![
                p.session_id.clone(),
                p.predicted.to_string(),
                p.label.to_string(),
            ]
        }),
    )
}

fn cmd_train(a: &TrainArgs, cfg: &mut RunConfig, run: &mut Run) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    run.input(&a.data.data)?;
    let ds = load(&a.data)?;
    check_training_sessions(ds.sessions())?;
    let data = prepare_all(ds.sessions(), &cfg.preprocess, &cfg.globals)?;
    let out = split_and_cv(
        &data,
        &cfg.model,
        &cfg.preprocess,
        &cfg.globals,
        &cfg.train,
        &cfg.grid,
        &cfg.cv,
    )?;
    let model_path = run.path("model.skm")?;
    out.model.save(&model_path)?;

    let mut log = String::new();
    for (p, g) in out.grid.iter().enumerate() {
        for (f, r) in g.fold_r.iter().enumerate() {
            log.push_str(&serde_json::to_string(&json!({
                "event": "cv_fold", "grid_point": p, "fold": f, "validation_r": r
            }))?);
            log.push('\n');
        }
    }
    for (e, l) in out.log.epoch_losses.iter().enumerate() {
        log.push_str(&serde_json::to_string(&json!({"event": "epoch", "epoch": e, "loss": l}))?);
        log.push('\n');
    }
    run.write("train_log.jsonl", log.as_bytes())?;
    let ids = |idx: &[usize]| -> Vec<&str> { idx.iter().map(|&i| data[i].session_id.as_str()).collect() };
    run.write_json(
        "cv_report.json",
        &json!({
            "grid": out.grid,
            "best": out.best,
            "train_sessions": ids(&out.split.train),
            "test_sessions": ids(&out.split.test),
            "folds": out.split.folds.iter().map(|f| ids(f)).collect::<Vec<_>>(),
        }),
    )?;
    run.write_json("test_report.json", &out.test_report)?;
    run.write("test_predictions.csv", &predictions_csv(&out.test_report)?)?;
    run.write_json(
        "normalization.json",
        &json!({"globals": out.model.global_norm, "frames": out.model.frame_norm}),
    )?;
    let r = &out.test_report;
    println!(
        "trained on {} sessions, tested on {}: r={:.3} rmse={:.3} mae={:.3} r2={:.3}",
        out.split.train.len(),
        out.split.test.len(),
        r.pearson_r,
        r.rmse,
        r.mae,
        r.r2
    );
    Ok(())
}

fn load_model(path: &Path, run: &mut Run) -> Result<SkillModel> {
    run.input(path)?;
    let m = SkillModel::load(path)?;
    m.check_layout()?;
    Ok(m)
}

fn cmd_evaluate(a: &ModelDataArgs, run: &mut Run) -> Result<()> {
    let model = load_model(&a.model, run)?;
    run.input(&a.data.data)?;
    let ds = load(&a.data)?;
    let data = prepare_all(ds.sessions(), &model.preprocess, &model.globals)?;
    let report = evaluate(&model, &data)?;
    run.write_json("eval_report.json", &report)?;
    run.write("predictions.csv", &predictions_csv(&report)?)?;
    println!(
        "evaluated {} sessions: r={:.3} rmse={:.3} mae={:.3} r2={:.3}",
        report.n, report.pearson_r, report.rmse, report.mae, report.r2
    );
    Ok(())
}

fn cmd_predict(a: &ModelDataArgs, run: &mut Run) -> Result<()> {
    let model = load_model(&a.model, run)?;
    run.input(&a.data.data)?;
    let ds = load(&a.data)?;
    let data = prepare_all(ds.sessions(), &model.preprocess, &model.globals)?;
    let header = ["session_id", "predicted_score"].map(String::from);
    let rows = data
        .iter()
        .map(|s| Ok(vec![s.session_id.clone(), model.predict(s)?.score.to_string()]))
        .collect::<Result<Vec<_>>>()?;
    run.write("predictions.csv", &csv_bytes(&header, rows.into_iter())?)?;
    println!("scored {} sessions", data.len());
    Ok(())
}

fn cmd_explain(a: &ExplainArgs, cfg: &mut RunConfig, run: &mut Run) -> Result<()> {
    if let Some(n) = a.samples {
        cfg.shap.n_samples = n;
    }
    let (temporal, global) = match (a.temporal, a.global) {
        (false, false) => (true, true),
        t => t,
    };
    let model = load_model(&a.inner.model, run)?;
    run.input(&a.inner.data.data)?;
    let ds = load(&a.inner.data)?;
    let targets: Vec<_> = match &a.session {
        Some(id) => vec![ds
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("session {id} not found")))?
            .clone()],
        None => ds.sessions().to_vec(),
    };

    if temporal {
        let mut summary = Vec::new();
        for s in &targets {
            let rep = temporal_report(s, &model, &cfg.temporal)?;
            let (argmax, _) = rep
                .importance
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &w)| if w > b.1 { (i, w) } else { b });
            summary.push(vec![
                rep.session_id.clone(),
                rep.predicted_score.to_string(),
                argmax.to_string(),
                rep.segments
                    .first()
                    .map(|g| format!("{}-{}", g.start, g.end))
                    .unwrap_or_default(),
            ]);
            run.write_json(&format!("temporal/{}.json", file_stem_for(&s.session_id)), &rep)?;
        }
        let header = ["session_id", "predicted_score", "peak_frame", "top_segment"].map(String::from);
        run.write("temporal_summary.csv", &csv_bytes(&header, summary.into_iter())?)?;
    }

    if global {
        let background = match &a.background {
            Some(p) => {
                run.input(p)?;
                load_sessions(p, LoadOptions { strict: !a.inner.data.lenient })?
            }
            None => ds.clone(),
        };
        let bg = prepare_all(background.sessions(), &model.preprocess, &model.globals)?;
        let inst = prepare_all(&targets, &model.preprocess, &model.globals)?;
        let attrs = inst
            .iter()
            .map(|s| explain_global(&model, &bg, s, &cfg.shap))
            .collect::<Result<Vec<_>>>()?;
        run.write_json("shap_attributions.json", &attrs)?;
        let rows = beeswarm_rows(&attrs)?;
        let csv_path = run.path("beeswarm.csv")?;
        write_beeswarm_csv(&csv_path, &rows)?;
        if !a.no_svg {
            run.write("beeswarm.svg", render_beeswarm_svg(&attrs)?.as_bytes())?;
        }
        let ranking = feature_ranking(&attrs)?;
        println!(
            "top global features: {}",
            ranking
                .iter()
                .take(3)
                .map(|(n, v)| format!("{n} ({v:.3})"))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    println!("explained {} sessions into {}", targets.len(), run.out.display());
    Ok(())
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<()> {
    let started = now_unix();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    cfg.validate()?;
    let (name, out) = match &cli.command {
        Command::Synth(a) => ("synth", &a.out),
        Command::Featurize(a) => ("featurize", &a.out),
        Command::Train(a) => ("train", &a.out),
        Command::Evaluate(a) | Command::Predict(a) => (
            if matches!(cli.command, Command::Evaluate(_)) { "evaluate" } else { "predict" },
            &a.out,
        ),
        Command::Explain(a) => ("explain", &a.inner.out),
    };
    let mut run = Run::new(out)?;
    if let Some(p) = &cli.config {
        run.input(p)?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &mut cfg, &mut run)?,
        Command::Featurize(a) => cmd_featurize(a, &cfg, &mut run)?,
        Command::Train(a) => cmd_train(a, &mut cfg, &mut run)?,
        Command::Evaluate(a) => cmd_evaluate(a, &mut run)?,
        Command::Predict(a) => cmd_predict(a, &mut run)?,
        Command::Explain(a) => cmd_explain(a, &mut cfg, &mut run)?,
    }
    run.finish(name, argv, &cfg, started)
}

/// Parses `argv` (including the program name), runs the subcommand, and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match std::panic::catch_unwind(move || dispatch(cli, &argv)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_INTERNAL
            }
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}
