//! `mmr`: train, certify, attack and evaluate small ReLU classifiers.
//!
//! Thread count follows `RAYON_NUM_THREADS`. All randomness comes from the
//! `--seed` of each invocation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmr_core::attacks::{attack_dataset, overlap_stats, AttackNorm, AttackSettings, PointAttack};
use mmr_core::certify::{certify_dataset, EpsTriple, ErrorBounds};
use mmr_core::data::{blobs, hypercube, two_moons, Dataset};
use mmr_core::eval::{derive_eps2, run_evaluation, EvalConfig};
use mmr_core::geometry::{comparison_curves, ratio_analysis, DEFAULT_RATIO_SAMPLES};
use mmr_core::mmr::MmrUniversalConfig;
use mmr_core::train::{train, TrainConfig};
use mmr_core::{seed, NormOrder, ReluNet};
use serde_json::json;
use tracing::info;

#[derive(Parser)]
#[command(name = "mmr", version, about = "Universal lp-robustness for small ReLU networks")]
struct Cli {
    /// Omit wall-clock times so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    GenData(GenDataArgs),
    /// Train a network, optionally with the MMR-Universal regularizer.
    Train(TrainArgs),
    /// Certify every point and report the robust error upper bound.
    Certify(CertifyArgs),
    /// Run PGD attacks and report the robust error lower bound.
    Attack(AttackArgs),
    /// Minimal-norm curves for the union and the hull of l1/l∞ balls.
    Geometry(GeometryArgs),
    /// Lower and upper bounds on the robust test error in one report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blobs,
    Moons,
    Hypercube,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    kind: Kind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Blobs only.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Blobs only: distance of the centers from (0.5, 0.5).
    #[arg(long, default_value_t = 0.6)]
    radius: f64,
    /// Standard deviation of the Gaussian noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `.csv` for text, anything else for the binary container.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for the per-epoch history.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Hidden layer sizes, comma separated (empty for a linear model).
    #[arg(long, default_value = "64")]
    arch: String,
    #[arg(long, default_value_t = 0.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.0)]
    lambdainf: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma1: f64,
    #[arg(long, default_value_t = 0.1)]
    gammainf: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct EpsArgs {
    #[arg(long)]
    eps1: f64,
    /// Defaults to the l2 radius implied by eps1 and epsinf.
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    epsinf: f64,
}

impl EpsArgs {
    fn triple(self) -> Result<EpsTriple> {
        let l2 = match self.eps2 {
            Some(e) => e,
            None => derive_eps2(self.eps1, self.epsinf)?,
        };
        Ok(EpsTriple { l1: self.eps1, l2, linf: self.epsinf })
    }
}

#[derive(Args)]
struct OutArgs {
    /// Summary JSON (stdout if absent).
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-point CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    eps: EpsArgs,
    /// Extra lp-norms for the universal certificate, e.g. `3,4.5`.
    #[arg(long, default_value = "")]
    p: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormChoice {
    L1,
    L2,
    Linf,
    All,
}

impl NormChoice {
    fn norms(self) -> Vec<AttackNorm> {
        match self {
            NormChoice::L1 => vec![AttackNorm::L1],
            NormChoice::L2 => vec![AttackNorm::L2],
            NormChoice::Linf => vec![AttackNorm::Linf],
            NormChoice::All => AttackNorm::ALL.to_vec(),
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    norm: NormChoice,
    #[command(flatten)]
    eps: EpsArgs,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0.01)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long)]
    d: usize,
    #[arg(long, default_value = "2")]
    p: String,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Curves CSV: delta, naive, union, hull, ratio (with eps_inf = 1).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    eps: EpsArgs,
    #[arg(long, default_value_t = 1000)]
    max_points: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Certify(a) => certify_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Geometry(a) => geometry_cmd(a),
        Command::Report(a) => report_cmd(a, cli.deterministic),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<ReluNet> {
    ReluNet::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn check_fit(net: &ReluNet, data: &Dataset) -> Result<()> {
    if net.input_dim() != data.dim() || net.num_classes() < data.num_classes() {
        bail!(
            "model (d={}, K={}) does not fit dataset (d={}, K={})",
            net.input_dim(),
            net.num_classes(),
            data.dim(),
            data.num_classes()
        );
    }
    Ok(())
}

fn emit_json(value: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let ds = match a.kind {
        Kind::Blobs => blobs(a.n, a.classes, a.radius, a.noise, a.seed)?,
        Kind::Moons => two_moons(a.n, a.noise, a.seed)?,
        Kind::Hypercube => hypercube(a.n, a.noise, a.seed)?,
    };
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!(n = ds.len(), d = ds.dim(), k = ds.num_classes(), "dataset written");
    Ok(())
}

fn parse_arch(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let n: usize = t.parse().with_context(|| format!("bad layer size '{t}'"))?;
            if n == 0 {
                bail!("layer sizes must be positive");
            }
            Ok(n)
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let test = a.test.as_deref().map(load_data).transpose()?;
    let hidden = parse_arch(&a.arch)?;
    let mut rng = seed::rng(a.seed, seed::purpose::INIT, 0);
    let net0 = ReluNet::random(data.dim(), &hidden, data.num_classes(), &mut rng)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mmr = MmrUniversalConfig {
        lambda1: a.lambda1,
        lambda_inf: a.lambdainf,
        gamma1: a.gamma1,
        gamma_inf: a.gammainf,
        lambda_ramp_epochs: MmrUniversalConfig::default().lambda_ramp_epochs.min(a.epochs),
        ..MmrUniversalConfig::default()
    };
    let regularized = a.lambda1 > 0.0 || a.lambdainf > 0.0;
    let (net, history) = train(&net0, &data, test.as_ref(), regularized.then_some(&mmr), &cfg)?;
    net.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(h) = &a.history {
        history.write_csv(h).with_context(|| format!("writing {}", h.display()))?;
    }
    let last = history.epochs.last().expect("at least one epoch");
    emit_json(
        &json!({
            "model": a.out,
            "epochs": a.epochs,
            "final_loss": last.loss,
            "test_error": last.test_error,
            "mean_rho1": last.mean_rho1,
            "mean_rho_inf": last.mean_rho_inf,
        }),
        None,
    )
}

fn parse_orders(s: &str) -> Result<Vec<NormOrder>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<NormOrder>().map_err(Into::into))
        .collect()
}

fn certify_cmd(a: CertifyArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    check_fit(&net, &data)?;
    let eps = a.eps.triple()?;
    let extra = parse_orders(&a.p)?;
    let certs = certify_dataset(&net, data.features(), data.labels())?;
    let flags: Vec<[bool; 3]> = certs.iter().map(|c| c.uncertified(&eps)).collect();
    let ub = ErrorBounds::from_flags(&flags);
    if let Some(path) = &a.out.csv {
        let mut w = csv_writer(path)?;
        let mut header = vec!["index", "label", "predicted", "l1_radius", "l2_radius", "linf_radius", "rho1", "rho_inf"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(extra.iter().map(|p| format!("universal_l{p}")));
        w.write_record(&header)?;
        for (i, c) in certs.iter().enumerate() {
            let mut rec = vec![
                i.to_string(),
                (c.label + 1).to_string(),
                (c.predicted + 1).to_string(),
                c.l1_bound().to_string(),
                c.l2_bound().to_string(),
                c.linf_bound().to_string(),
                c.rho1.to_string(),
                c.rho_inf.to_string(),
            ];
            rec.extend(extra.iter().map(|&p| c.universal(p).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    emit_json(
        &json!({ "points": certs.len(), "eps": eps, "upper_bound": ub }),
        a.out.json.as_deref(),
    )
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn attack_cmd(a: AttackArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    check_fit(&net, &data)?;
    let eps = a.eps.triple()?;
    let norms = a.norm.norms();
    let settings = AttackSettings {
        iterations: a.iters,
        restarts: a.restarts,
        sparsity: a.sparsity,
        seed: a.seed,
    };
    let points = attack_dataset(&net, data.features(), data.labels(), &eps, &norms, &settings)?;
    // norms that were not requested count only the misclassified points
    let lb = ErrorBounds::from_flags(&points.iter().map(PointAttack::broken).collect::<Vec<_>>());
    if let Some(path) = &a.out.csv {
        write_attack_csv(path, &points, &norms)?;
    }
    let stats = overlap_stats(&points, &eps);
    let overlap: Vec<_> = AttackNorm::ALL
        .iter()
        .map(|&p| json!({ "attack": p.to_string(), "in_l1": stats.percent(p, AttackNorm::L1), "in_l2": stats.percent(p, AttackNorm::L2), "in_linf": stats.percent(p, AttackNorm::Linf) }))
        .collect();
    emit_json(
        &json!({
            "points": points.len(),
            "eps": eps,
            "norms": norms.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "lower_bound": lb,
            "overlap_percent": overlap,
            "settings": settings,
        }),
        a.out.json.as_deref(),
    )
}

fn write_attack_csv(path: &Path, points: &[PointAttack], norms: &[AttackNorm]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["index".to_string(), "correct".to_string()];
    for n in norms {
        header.push(format!("{n}_success"));
        header.push(format!("{n}_norm"));
    }
    w.write_record(&header)?;
    for (i, p) in points.iter().enumerate() {
        let mut rec = vec![i.to_string(), p.correct.to_string()];
        for &n in norms {
            let k = AttackNorm::ALL.iter().position(|&m| m == n).expect("known norm");
            match &p.found[k] {
                Some(pert) => {
                    rec.push("true".into());
                    rec.push(pert.norms[k].to_string());
                }
                None => {
                    rec.push("false".into());
                    rec.push(String::new());
                }
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn geometry_cmd(a: GeometryArgs) -> Result<()> {
    let p: NormOrder = a.p.parse()?;
    let curves = comparison_curves(a.d, p, a.samples)?;
    if let Some(path) = &a.out {
        let mut w = csv_writer(path)?;
        w.write_record(["delta", "naive", "union", "hull", "ratio"])?;
        for c in &curves {
            w.write_record([c.delta, c.naive, c.union, c.hull, c.ratio].map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    let ratio = ratio_analysis(a.d, DEFAULT_RATIO_SAMPLES)?;
    emit_json(
        &json!({
            "d": a.d,
            "p": p.to_string(),
            "samples": a.samples,
            "l2_max_ratio": ratio.max_ratio,
            "l2_delta_star": ratio.delta_star,
            "l2_envelope_delta_star": ratio.envelope_delta_star,
        }),
        None,
    )
}

fn report_cmd(a: ReportArgs, deterministic: bool) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    check_fit(&net, &data)?;
    let model_id = a
        .model
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let mut cfg = EvalConfig::new(model_id, a.eps.triple()?);
    cfg.max_points = a.max_points;
    cfg.deterministic = deterministic;
    cfg.attack = AttackSettings {
        iterations: a.iters,
        restarts: a.restarts,
        seed: a.seed,
        ..AttackSettings::default()
    };
    let report = run_evaluation(&net, &data, &cfg)?;
    if let Some(path) = &a.out.csv {
        fs::write(path, report.rows_csv()?).with_context(|| format!("writing {}", path.display()))?;
    }
    let text = report.to_json()? + "\n";
    match &a.out.json {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
