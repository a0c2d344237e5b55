mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use statelens::dataset::{load_frames, load_manifest, Manifest};
use statelens::encoder::Encoder;
use statelens::error::TrainError;
use statelens::games::{generate_dataset, Environment, GenerateSpec, Split};
use statelens::objectives::Method;
use statelens::probe::{group_average, improvement_svg, probe_all, ProbeReport, ReportJson};
use statelens::selftest::{self, Faults};
use statelens::trainer::Trainer;

use crate::config::{parse_group, ExperimentConfig};

const MANIFEST: &str = "manifest.json";
const CHECKPOINT: &str = "checkpoint.sslg";
const TRAIN_LOG: &str = "train_log.csv";
const EXPERIMENT: &str = "experiment.json";
const SVG: &str = "improvement.svg";

/// An error plus the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 2, error: e.into() }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "statelens", version, about = "Self-supervised representation learning on synthetic game frames, evaluated by linear probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render train and eval datasets with ground-truth state.
    GenData(GenDataArgs),
    /// Pretrain an encoder with one SSL method.
    Train(TrainArgs),
    /// Linear-probe an encoder against the state variables of a manifest.
    Probe(ProbeArgs),
    /// Run gradient checks, loss oracles and solver invariants.
    Selftest(SelftestArgs),
    /// Train every method, probe them and the random baseline, and tabulate.
    RunMatrix(MatrixArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    Pitch,
    Corridor,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "pitch")]
    env: EnvName,
    /// Players per team (pitch only).
    #[arg(long, default_value_t = 2)]
    players: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    eval: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.learning_rate=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training manifest; defaults to the config's, else data is generated.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained checkpoint; its directory's experiment.json supplies the
    /// encoder shape unless `--config` is given.
    #[arg(long, conflicts_with = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Probe a freshly initialised encoder instead.
    #[arg(long)]
    random_init: bool,
    /// Initialisation seed for `--random-init` (default: train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Earlier probe_summary.json to compute improvements against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Variable groups, e.g. `defenders=0,1,2,3`.
    #[arg(long = "groups", value_name = "NAME=I,J,…")]
    groups: Vec<String>,
    #[arg(long)]
    label: Option<String>,
    /// Fit on half of the rows and score on the other half.
    #[arg(long)]
    split_half: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    NtXentSign,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Selftest(a) => run_selftest(a),
        Command::RunMatrix(a) => run_matrix(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// The error chain joined with `: `, skipping causes whose text the
/// previous message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

// ------------------------------------------------------------------ gen-data

fn gen_data(a: GenDataArgs) -> CmdResult {
    let env = match a.env {
        EnvName::Pitch => Environment::Pitch { players: 2 * a.players },
        EnvName::Corridor => Environment::Corridor,
    };
    env.validate()?;
    let paths = generate_splits(env, a.train, a.eval, a.seed, (a.height, a.width), &a.out)?;
    let players = match env {
        Environment::Pitch { players } => format!(" ({} per team, {players} total)", players / 2),
        Environment::Corridor => String::new(),
    };
    println!("environment      {}{players}", env.name());
    println!("images           {} train / {} eval", a.train, a.eval);
    println!("state variables  {}", env.k());
    println!("resolution       {}x{}", a.width, a.height);
    println!("seed             {}", a.seed);
    println!("train manifest   {}", paths.0.display());
    println!("eval manifest    {}", paths.1.display());
    Ok(())
}

fn generate_splits(
    env: Environment,
    train: usize,
    eval: usize,
    seed: u64,
    (height, width): (usize, usize),
    out: &Path,
) -> anyhow::Result<(PathBuf, PathBuf)> {
    let mut made = Vec::new();
    for (split, count) in [(Split::Train, train), (Split::Eval, eval)] {
        if count == 0 {
            bail!("{} count must be positive", split.name());
        }
        let spec = GenerateSpec { env, count, split, seed, height, width };
        let dir = out.join(split.name());
        made.push(generate_dataset(&spec, &dir).with_context(|| format!("cannot write dataset to {}", dir.display()))?);
    }
    Ok((made.remove(0), made.remove(0)))
}

/// Train and eval manifests named by the config, generating whatever is missing
/// under `out/data`.
fn resolve_data(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    let d = &cfg.dataset;
    let eval_cfg = cfg.probe.eval_manifest.clone().or_else(|| d.eval_manifest.clone());
    if let (Some(t), Some(e)) = (&d.train_manifest, &eval_cfg) {
        return Ok((t.clone(), e.clone()));
    }
    let data = out.join("data");
    let (t, e) = (data.join(Split::Train.name()).join(MANIFEST), data.join(Split::Eval.name()).join(MANIFEST));
    if !(t.exists() && e.exists()) {
        eprintln!("generating {} data under {}", d.env.name(), data.display());
        generate_splits(d.env, d.train_count, d.eval_count, d.seed, (d.height, d.width), &data)?;
    }
    Ok((d.train_manifest.clone().unwrap_or(t), eval_cfg.unwrap_or(e)))
}

// --------------------------------------------------------------------- train

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn train(a: TrainArgs) -> CmdResult {
    let mut overrides = a.cfg.overrides.clone();
    if let Some(m) = a.method {
        overrides.push(format!("train.method={}", m.tag()));
    }
    if let Some(e) = a.epochs {
        overrides.push(format!("train.epochs={e}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("train.seed={s}"));
    }
    if let Some(m) = &a.manifest {
        overrides.push(format!("dataset.train_manifest={}", serde_json::to_string(m)?));
    }
    let cfg = ExperimentConfig::load(a.cfg.config.as_deref(), &overrides)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.report.out_dir.clone());
    let train_manifest = match &cfg.dataset.train_manifest {
        Some(p) => p.clone(),
        None => resolve_data(&cfg, &out)?.0,
    };
    let manifest = load_manifest(&train_manifest)?;
    train_into(&cfg, &manifest, &out)?;
    Ok(())
}

/// Trains `cfg.train` on `manifest` and writes checkpoint, log and the
/// resolved config into `out`.
fn train_into(cfg: &ExperimentConfig, manifest: &Manifest, out: &Path) -> CmdResult<Encoder> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let tc = &cfg.train;
    let frames = load_frames(manifest, (tc.encoder.input_height, tc.encoder.input_width))?;
    write_json(&out.join(EXPERIMENT), cfg)?;
    let ckpt = out.join(CHECKPOINT);
    let mut trainer = Trainer::new(tc.clone())?.with_abort_checkpoint(&ckpt);
    println!("training {} on {} frames: {} epochs, batch {}", tc.method, frames.len(), tc.epochs, tc.batch_size);
    for _ in 0..tc.epochs {
        if let Err(e) = trainer.run_epoch(&frames) {
            let code = if matches!(e, TrainError::NumericalAbort { .. }) { 3 } else { 2 };
            trainer.log().write_csv(&out.join(TRAIN_LOG)).context("cannot write train log")?;
            return Err(Failure { code, error: e.into() });
        }
        let (epoch, mean) = *trainer.log().epoch_means().last().expect("epoch just ran");
        let secs = trainer.log().epoch_seconds.last().copied().unwrap_or(0.0);
        println!("epoch {:>3}  mean loss {mean:.5}  ({secs:.1}s)", epoch + 1);
    }
    trainer.save_checkpoint(&ckpt)?;
    trainer.log().write_csv(&out.join(TRAIN_LOG)).context("cannot write train log")?;
    println!("wrote {} and {}", ckpt.display(), out.join(TRAIN_LOG).display());
    Ok(trainer.encoder())
}

// --------------------------------------------------------------------- probe

fn probe(a: ProbeArgs) -> CmdResult {
    let sidecar = a.checkpoint.as_ref().and_then(|c| c.parent()).map(|d| d.join(EXPERIMENT)).filter(|p| p.exists());
    let cfg_path = a.cfg.config.clone().or(sidecar);
    let mut overrides = a.cfg.overrides.clone();
    if let Some(m) = &a.manifest {
        overrides.push(format!("probe.eval_manifest={}", serde_json::to_string(m)?));
    }
    if a.split_half {
        overrides.push("probe.split_half=true".into());
    }
    let cfg = ExperimentConfig::load(cfg_path.as_deref(), &overrides)?;
    let eval = cfg
        .probe
        .eval_manifest
        .clone()
        .or_else(|| cfg.dataset.eval_manifest.clone())
        .context("no evaluation manifest: pass --manifest or set probe.eval_manifest")?;
    let manifest = load_manifest(&eval)?;

    let (encoder, default_label) = match (&a.checkpoint, a.random_init) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(anyhow::anyhow!("checkpoint {} not found", path.display()).into());
            }
            (Encoder::load(cfg.train.encoder.clone(), path)?, cfg.train.method.tag().to_string())
        }
        (None, true) => (Encoder::build(cfg.train.encoder.clone(), a.seed.unwrap_or(cfg.train.seed))?, "baseline".to_string()),
        (None, false) => return Err(anyhow::anyhow!("pass --checkpoint or --random-init").into()),
    };
    let mut groups: Vec<(String, Vec<usize>)> = cfg.probe.groups.clone().into_iter().collect();
    for g in &a.groups {
        groups.push(parse_group(g)?);
    }
    let label = a.label.clone().unwrap_or(default_label);
    let baseline = a.baseline.as_deref().map(read_report).transpose()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.report.out_dir.clone());
    let report = probe_into(&encoder, &manifest, &label, &cfg, &groups, baseline, &out)?;
    print_table(&[&report]);
    if let Some(c) = &report.comparison {
        println!("avg R² change vs {}: {:+.1}%", c.baseline_label, c.average);
    }
    Ok(())
}

fn read_report(path: &Path) -> anyhow::Result<ProbeReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read baseline {}", path.display()))?;
    let j: ReportJson = serde_json::from_str(&text).with_context(|| format!("{} is not a probe summary", path.display()))?;
    Ok(ProbeReport::from_json(&j))
}

/// Probes, attaches groups and the optional comparison, and writes the
/// report files into `out`.
fn probe_into(
    encoder: &Encoder,
    manifest: &Manifest,
    label: &str,
    cfg: &ExperimentConfig,
    groups: &[(String, Vec<usize>)],
    baseline: Option<ProbeReport>,
    out: &Path,
) -> anyhow::Result<ProbeReport> {
    let mut report = probe_all(encoder, manifest, label, &cfg.probe.options())?;
    report.groups = group_average(&report, groups)?;
    if let Some(mut base) = baseline {
        if base.variables.len() == report.variables.len() {
            base.groups = group_average(&base, groups)?;
        }
        report.compare_to(&base);
    }
    report.write_outputs(out)?;
    Ok(report)
}

fn print_table(reports: &[&ProbeReport]) {
    println!("| {:<10} | {:>5} | {:>5} | {:>5} |", "encoder", "min", "avg", "max");
    println!("|{:-<12}|{:-<7}|{:-<7}|{:-<7}|", "", "", "", "");
    for r in reports {
        println!("{}", r.table_row());
    }
}

// ------------------------------------------------------------------ selftest

fn run_selftest(a: SelftestArgs) -> CmdResult {
    let faults = Faults { nt_xent_sign: matches!(a.inject_fault, Some(Fault::NtXentSign)) };
    let start = std::time::Instant::now();
    let results = selftest::run(faults);
    for r in &results {
        println!("{} {:<36} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{} checks, {} failed, {:.1}s", results.len(), failed.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 1, error: anyhow::anyhow!("failed checks: {}", failed.join(", ")) })
    }
}

// ---------------------------------------------------------------- run-matrix

#[derive(Serialize)]
struct MatrixRow {
    label: String,
    min: Option<f64>,
    avg: Option<f64>,
    max: Option<f64>,
    avg_improvement_pct: Option<f64>,
}

#[derive(Serialize)]
struct MatrixSummary {
    rows: Vec<MatrixRow>,
    /// Mean of the three methods' average-R² improvements.
    mean_improvement_pct: Option<f64>,
    best_method: String,
    /// Improvement of the best method's average R² over the baseline.
    best_improvement_pct: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn run_matrix(a: MatrixArgs) -> CmdResult {
    let mut overrides = a.cfg.overrides.clone();
    if let Some(e) = a.epochs {
        overrides.push(format!("train.epochs={e}"));
    }
    let cfg = ExperimentConfig::load(a.cfg.config.as_deref(), &overrides)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.report.out_dir.clone());
    let (train_path, eval_path) = resolve_data(&cfg, &out)?;
    let train_m = load_manifest(&train_path)?;
    let eval_m = load_manifest(&eval_path)?;
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    if cfg.dataset.train_manifest.is_none() {
        groups.extend(cfg.dataset.env.groups());
    }
    groups.extend(cfg.probe.groups.clone());

    let base_enc = Encoder::build(cfg.train.encoder.clone(), cfg.train.seed)?;
    let baseline = match &cfg.report.baseline_report {
        Some(p) => read_report(p)?,
        None => probe_into(&base_enc, &eval_m, "baseline", &cfg, &groups, None, &out.join("baseline"))?,
    };
    let mut reports = Vec::new();
    for method in Method::ALL {
        let mut mc = cfg.clone();
        mc.train.method = method;
        let dir = out.join(method.tag());
        let enc = train_into(&mc, &train_m, &dir)?;
        reports.push(probe_into(&enc, &eval_m, method.tag(), &mc, &groups, Some(baseline.clone()), &dir)?);
    }

    let mut rows = vec![row(&baseline, f64::NAN)];
    let mut bars = Vec::new();
    for r in &reports {
        let imp = r.comparison.as_ref().map_or(f64::NAN, |c| c.average);
        rows.push(row(r, imp));
        bars.push((r.label.clone(), imp));
    }
    let best = reports
        .iter()
        .max_by(|x, y| x.summary().avg.total_cmp(&y.summary().avg))
        .expect("three methods");
    let best_imp = best.comparison.as_ref().map_or(f64::NAN, |c| c.average);
    let mean_imp = bars.iter().map(|b| b.1).sum::<f64>() / bars.len() as f64;
    bars.push((format!("best ({})", best.label), best_imp));
    let summary = MatrixSummary {
        rows,
        mean_improvement_pct: finite(mean_imp),
        best_method: best.label.clone(),
        best_improvement_pct: finite(best_imp),
    };
    write_json(&out.join("matrix_summary.json"), &summary)?;
    let svg = improvement_svg("average R² change over the random-init baseline (%)", &bars);
    std::fs::write(out.join(SVG), svg).context("cannot write matrix chart")?;
    let table = matrix_table(&baseline, &reports);
    std::fs::write(out.join("matrix_table.md"), &table).context("cannot write matrix table")?;
    print!("{table}");
    println!("mean improvement {mean_imp:+.1}%, best method {} {best_imp:+.1}%", best.label);
    Ok(())
}

fn row(r: &ProbeReport, imp: f64) -> MatrixRow {
    let s = r.summary();
    MatrixRow { label: r.label.clone(), min: finite(s.min), avg: finite(s.avg), max: finite(s.max), avg_improvement_pct: finite(imp) }
}

/// Statistics down, encoders across.
fn matrix_table(baseline: &ProbeReport, reports: &[ProbeReport]) -> String {
    let all: Vec<&ProbeReport> = std::iter::once(baseline).chain(reports).collect();
    let mut t = String::from("| R²  |");
    for r in &all {
        let _ = write!(t, " {:>8} |", r.label);
    }
    t.push_str("\n|-----|");
    t.push_str(&"----------|".repeat(all.len()));
    t.push('\n');
    for (name, pick) in [("min", 0), ("avg", 1), ("max", 2)] {
        let _ = write!(t, "| {name} |");
        for r in &all {
            let s = r.summary();
            let v = [s.min, s.avg, s.max][pick];
            let _ = write!(t, " {:>8} |", if v.is_finite() { format!("{v:.2}") } else { "-".into() });
        }
        t.push('\n');
    }
    t
}
