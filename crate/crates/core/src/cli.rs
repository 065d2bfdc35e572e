//! `scfm` command line: argument parsing, command execution, metric files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::Tensor;
use crate::data::stf::write_atomic;
use crate::data::{config_echo, config_load, gen_factors_lite, gen_gmm2d, stf_read, stf_write};
use crate::error::{Result, ScfmError};
use crate::metrics::{
    dci_disentanglement, factorvae_score, frechet_from_samples, hungarian_acc, importance_from_linear, nmi,
    probe_train_eval, FactorVaeProtocol, ProbeKind,
};
use crate::model::ScfmModel;
use crate::objectives::{aggregate_kl_estimate, ema_model, train, DatasetKind, MetricsLog, TrainConfig};
use crate::oracle::run_oracle_suite;
use crate::rng::ScfmRng;
use crate::sampler::{reconstruct, sample_decoder, sample_full, sample_refined, SampleTrace, SolverSpec};

/// A metric value: integers print as integers, reals in scientific notation
/// with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Int(i64),
    Real(f64),
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        MetricValue::Real(v)
    }
}

impl From<u64> for MetricValue {
    fn from(v: u64) -> Self {
        MetricValue::Int(v as i64)
    }
}

impl From<usize> for MetricValue {
    fn from(v: usize) -> Self {
        MetricValue::Int(v as i64)
    }
}

pub type Metrics = BTreeMap<String, MetricValue>;

/// Canonical JSON text: sorted keys, fixed real formatting, trailing newline.
pub fn canonical_metrics(values: &Metrics) -> Result<String> {
    let mut parts = Vec::with_capacity(values.len());
    for (k, v) in values {
        let text = match v {
            MetricValue::Int(i) => i.to_string(),
            MetricValue::Real(r) if r.is_finite() => format!("{r:.16e}"),
            MetricValue::Real(r) => {
                return Err(ScfmError::Numerical(format!("metric \"{k}\" is {r}")));
            }
        };
        parts.push(format!("{}: {text}", serde_json::to_string(k).expect("string")));
    }
    Ok(format!("{{{}}}\n", parts.join(", ")))
}

/// Writes `values` as canonical JSON; identical inputs give identical bytes.
pub fn emit_metrics(path: impl AsRef<Path>, values: &Metrics) -> Result<()> {
    let text = canonical_metrics(values)?;
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Exit code for an error: 1 verification or metric failure, 2 usage or
/// config, 3 IO or unreadable file.
pub fn exit_code_for(e: &ScfmError) -> i32 {
    match e {
        ScfmError::Config(_) | ScfmError::Domain(_) | ScfmError::Shape(_) => 2,
        ScfmError::Io { .. } | ScfmError::Format(_) => 3,
        _ => 1,
    }
}

#[derive(Debug)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "scfm", version, about = "Structured-coupling flow matching: train, sample, evaluate, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Encode data and regenerate it through the flow.
    Reconstruct(ReconstructArgs),
    /// Evaluate a model or sample sets.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Train a probe on frozen latent means.
    Probe(ProbeArgs),
    /// Run the closed-form verification suite.
    Oracle(OracleArgs),
    /// Write a synthetic dataset as STF files.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Decoder,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Heun,
    Dopri5,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    #[arg(long, value_enum, default_value_t = SolverArg::Heun)]
    pub solver: SolverArg,
    /// Heun steps [default: 25 for full flow, 5 for refinement]
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
}

impl SolverArgs {
    fn spec(&self, default_steps: usize) -> SolverSpec {
        match self.solver {
            SolverArg::Heun => SolverSpec::heun(self.steps.unwrap_or(default_steps)),
            SolverArg::Dopri5 => SolverSpec::dopri5(self.rtol, self.atol),
        }
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    pub mode: ModeArg,
    /// Start time of refinement.
    #[arg(long, default_value_t = 0.8)]
    pub t0: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Add unit Gaussian noise to the decoder proposal.
    #[arg(long, default_value_t = false)]
    pub stochastic_decoder: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Cluster accuracy and NMI of prior-responsibility assignments.
    Cluster(ClusterArgs),
    /// FactorVAE score and DCI disentanglement of latent means.
    Disentangle(DisentangleArgs),
    /// Fréchet distance between Gaussian fits of two sample sets.
    Frechet(FrechetArgs),
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Metric JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    FactorsLite,
}

#[derive(Args, Debug)]
pub struct DisentangleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = DatasetArg::FactorsLite)]
    pub dataset: DatasetArg,
    /// Seed of the dataset renderer and of the vote sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FrechetArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Linear,
    Mlp,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = ProbeArg::Linear)]
    pub kind: ProbeArg,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub topk: Vec<usize>,
    /// Fraction of rows held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenDataset {
    Gmm2d,
    FactorsLite,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub dataset: GenDataset,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Cluster count for gmm2d.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives data.stf and labels.stf (or factors.stf).
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return CommandOutcome {
                exit_code: code,
                artifacts: Vec::new(),
            };
        }
    };
    let mut artifacts = Vec::new();
    match run(cli.command, &mut artifacts) {
        Ok(code) => CommandOutcome { exit_code: code, artifacts },
        Err(e) => {
            eprintln!("error: {e}");
            CommandOutcome {
                exit_code: exit_code_for(&e),
                artifacts,
            }
        }
    }
}

/// Sizes the global worker pool from `SCFM_THREADS` when set.
pub fn init_thread_pool_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("SCFM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| ScfmError::Config(format!("SCFM_THREADS={v:?} is not a count")))?;
        if n == 0 {
            return Err(ScfmError::Config("SCFM_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ScfmError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cmd: Command, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a, artifacts),
        Command::Sample(a) => cmd_sample(a, artifacts),
        Command::Reconstruct(a) => cmd_reconstruct(a, artifacts),
        Command::Eval(EvalCommand::Cluster(a)) => cmd_cluster(a, artifacts),
        Command::Eval(EvalCommand::Disentangle(a)) => cmd_disentangle(a, artifacts),
        Command::Eval(EvalCommand::Frechet(a)) => cmd_frechet(a, artifacts),
        Command::Probe(a) => cmd_probe(a, artifacts),
        Command::Oracle(a) => cmd_oracle(a, artifacts),
        Command::Gen(a) => cmd_gen(a, artifacts),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ScfmError::io(dir, e))
}

fn write_text(path: &Path, text: &str, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    artifacts.push(path.to_path_buf());
    Ok(())
}

/// Prints metrics to stdout and, when `out` is given, writes them there.
fn report(values: &Metrics, out: Option<&Path>, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let text = canonical_metrics(values)?;
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text, artifacts)?;
    }
    Ok(())
}

/// Training data for a config: `(observations, labels)`.
pub fn training_data(cfg: &TrainConfig) -> Result<(Tensor, Vec<usize>)> {
    match cfg.dataset {
        DatasetKind::Gmm2d => gen_gmm2d(cfg.k, cfg.separation, cfg.dataset_size, cfg.seed),
        DatasetKind::FactorsLite => {
            let ds = gen_factors_lite(cfg.seed)?;
            let tuples = ds.sample_uniform(cfg.dataset_size, &mut ScfmRng::substream(cfg.seed, "factors-draw", 0));
            let labels = tuples.iter().map(|t| t[0]).collect();
            Ok((ds.render_batch(&tuples)?, labels))
        }
    }
}

fn cmd_train(a: TrainArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let mut cfg = config_load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let echo = config_echo(&cfg);
    println!("{echo}");
    create_dir(&a.out)?;
    write_text(&a.out.join("config.json"), &format!("{echo}\n"), artifacts)?;
    let (data, _) = training_data(&cfg)?;
    let probe_x = data.select_rows(&(0..data.rows().min(2000)).collect::<Vec<_>>());
    let mut log = if cfg.log_every > 0 {
        let p = a.out.join("log.jsonl");
        artifacts.push(p.clone());
        Some(MetricsLog::create(p)?)
    } else {
        None
    };
    let mut kl_trace = Metrics::new();
    let out = train(&cfg, &data, |step, model, loss| {
        if let Some(log) = log.as_mut() {
            if step % cfg.log_every == 0 || step == 1 || step == cfg.steps {
                log.record(step, loss)?;
                let kl = aggregate_kl_estimate(model, &probe_x, &mut ScfmRng::substream(cfg.seed, "agg-kl", step as u64))?;
                kl_trace.insert(format!("agg_kl_step_{step:06}"), kl.into());
            }
        }
        Ok(())
    })?;
    if let Some(log) = log {
        log.finish()?;
    }
    out.model.save(a.out.join("model"))?;
    ema_model(&out.model, &out.state)?.save(a.out.join("ema"))?;
    artifacts.push(a.out.join("model"));
    artifacts.push(a.out.join("ema"));
    let last = out.history.last().copied().unwrap_or_default();
    let mut m = kl_trace;
    m.insert("steps".into(), cfg.steps.into());
    for (k, v) in [
        ("final_vfm", last.vfm),
        ("final_rec", last.rec),
        ("final_kl_z", last.kl_z),
        ("final_r_eps", last.r_eps),
        ("final_tc", last.tc),
        ("final_total", last.total),
    ] {
        m.insert(k.into(), v.into());
    }
    let kl = aggregate_kl_estimate(&out.model, &probe_x, &mut ScfmRng::substream(cfg.seed, "agg-kl", u64::MAX))?;
    m.insert("final_agg_kl".into(), kl.into());
    report(&m, Some(&a.out.join("metrics.json")), artifacts)?;
    Ok(0)
}

fn write_samples(trace: &SampleTrace, out: &Path, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    stf_write(out, &trace.x_final)?;
    artifacts.push(out.to_path_buf());
    let s = trace.summary();
    let mut m = Metrics::new();
    m.insert("nfe".into(), s.nfe.into());
    m.insert("accepted".into(), s.accepted.into());
    m.insert("rejected".into(), s.rejected.into());
    m.insert("flops_est".into(), s.flops_est.into());
    m.insert("decoder_evals".into(), s.decoder_evals.into());
    let mut side = out.as_os_str().to_owned();
    side.push(".trace.json");
    let side = PathBuf::from(side);
    report(&m, Some(&side), artifacts)
}

fn cmd_sample(a: SampleArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let model = ScfmModel::load(&a.model)?;
    let mut rng = ScfmRng::substream(a.seed, "sample", 0);
    let trace = match a.mode {
        ModeArg::Full => sample_full(&model, a.n, &a.solver.spec(25), &mut rng)?,
        ModeArg::Decoder => sample_decoder(&model, a.n, &mut rng)?,
        ModeArg::Refine => sample_refined(&model, a.n, a.t0, &a.solver.spec(5), &mut rng, a.stochastic_decoder)?,
    };
    write_samples(&trace, &a.out, artifacts)?;
    Ok(0)
}

fn cmd_reconstruct(a: ReconstructArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let model = ScfmModel::load(&a.model)?;
    let x = stf_read(&a.data)?;
    let trace = reconstruct(&model, &x, &a.solver.spec(25), &mut ScfmRng::substream(a.seed, "reconstruct", 0))?;
    write_samples(&trace, &a.out, artifacts)?;
    Ok(0)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let t = stf_read(path)?;
    t.data()
        .iter()
        .map(|v| {
            if *v >= 0.0 && v.fract() == 0.0 {
                Ok(*v as usize)
            } else {
                Err(ScfmError::Format(format!("label {v} is not a non-negative integer")))
            }
        })
        .collect()
}

fn read_matrix(path: &Path, cols: usize) -> Result<Tensor> {
    let x = stf_read(path)?;
    if x.rank() != 2 || x.cols() != cols {
        return Err(ScfmError::Shape(format!("{} has shape {:?}, expected N×{cols}", path.display(), x.shape())));
    }
    Ok(x)
}

/// Encoder means `μ^z(x)` at the data endpoint.
pub fn latent_means(model: &ScfmModel, x: &Tensor) -> Result<Tensor> {
    Ok(model.endpoint_encode(x)?.0)
}

/// Prior-responsibility cluster ids of encoded points.
pub fn cluster_assignments(model: &ScfmModel, x: &Tensor) -> Result<Vec<usize>> {
    model.prior.assign(&latent_means(model, x)?)
}

fn cmd_cluster(a: ClusterArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let model = ScfmModel::load(&a.model)?;
    let x = read_matrix(&a.data, model.dims().data_dim)?;
    let labels = read_labels(&a.labels)?;
    let clusters = cluster_assignments(&model, &x)?;
    let (acc, _) = hungarian_acc(&labels, &clusters)?;
    let mut m = Metrics::new();
    m.insert("acc".into(), acc.into());
    m.insert("nmi".into(), nmi(&labels, &clusters)?.into());
    m.insert("n".into(), labels.len().into());
    report(&m, a.out.as_deref(), artifacts)?;
    Ok(0)
}

fn cmd_disentangle(a: DisentangleArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let model = ScfmModel::load(&a.model)?;
    let ds = match a.dataset {
        DatasetArg::FactorsLite => gen_factors_lite(a.seed)?,
    };
    if model.dims().data_dim != ds.obs_dim() {
        return Err(ScfmError::Shape(format!(
            "model expects D={}, dataset renders D={}",
            model.dims().data_dim,
            ds.obs_dim()
        )));
    }
    let repr = |x: &Tensor| latent_means(&model, x);
    let fv = factorvae_score(repr, &ds, &FactorVaeProtocol::default(), &mut ScfmRng::substream(a.seed, "factorvae", 0))?;
    let lat = latent_means(&model, &ds.render_all()?)?;
    let dci = dci_disentanglement(&importance_from_linear(&lat, &ds.factor_table())?)?;
    let mut m = Metrics::new();
    m.insert("factorvae".into(), fv.score.into());
    m.insert("factorvae_pruned".into(), fv.pruned.len().into());
    m.insert("dci".into(), dci.into());
    report(&m, a.out.as_deref(), artifacts)?;
    Ok(0)
}

fn cmd_frechet(a: FrechetArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let x = stf_read(&a.a)?;
    let y = stf_read(&a.b)?;
    let mut m = Metrics::new();
    m.insert("frechet".into(), frechet_from_samples(&x, &y)?.into());
    report(&m, a.out.as_deref(), artifacts)?;
    Ok(0)
}

fn cmd_probe(a: ProbeArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    if !(a.test_frac > 0.0 && a.test_frac < 1.0) {
        return Err(ScfmError::Domain("--test-frac must lie in (0, 1)".into()));
    }
    let model = ScfmModel::load(&a.model)?;
    let x = read_matrix(&a.data, model.dims().data_dim)?;
    let labels = read_labels(&a.labels)?;
    if labels.len() != x.rows() {
        return Err(ScfmError::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let feats = latent_means(&model, &x)?;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    ScfmRng::substream(a.seed, "probe-split", 0).shuffle(&mut order);
    let n_test = ((x.rows() as f64 * a.test_frac).round() as usize).clamp(1, x.rows().saturating_sub(1).max(1));
    let (test, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| idx.iter().map(|i| labels[*i]).collect::<Vec<_>>();
    let kind = match a.kind {
        ProbeArg::Linear => ProbeKind::Linear,
        ProbeArg::Mlp => ProbeKind::Mlp,
    };
    let acc = probe_train_eval(
        &feats.select_rows(train_idx),
        &pick(train_idx),
        &feats.select_rows(test),
        &pick(test),
        kind,
        &a.topk,
        a.seed,
    )?;
    let mut m: Metrics = acc.into_iter().map(|(k, v)| (format!("top{k}"), v.into())).collect();
    m.insert("n_test".into(), test.len().into());
    report(&m, a.out.as_deref(), artifacts)?;
    Ok(0)
}

fn cmd_oracle(a: OracleArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    let report = run_oracle_suite(a.seed);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(p) = &a.out {
        write_text(p, &format!("{text}\n"), artifacts)?;
    }
    for c in report.failures() {
        eprintln!("verification failed: {} {}", c.name, c.details);
    }
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_gen(a: GenArgs, artifacts: &mut Vec<PathBuf>) -> Result<i32> {
    create_dir(&a.out)?;
    let (x, labels) = match a.dataset {
        GenDataset::Gmm2d => gen_gmm2d(a.k, a.separation, a.n, a.seed)?,
        GenDataset::FactorsLite => {
            let ds = gen_factors_lite(a.seed)?;
            let tuples = ds.sample_uniform(a.n, &mut ScfmRng::substream(a.seed, "factors-draw", 0));
            let factors: Vec<Vec<f64>> = tuples.iter().map(|t| t.iter().map(|v| *v as f64).collect()).collect();
            let f = a.out.join("factors.stf");
            stf_write(&f, &Tensor::from_rows(&factors)?)?;
            artifacts.push(f);
            let labels = tuples.iter().map(|t| t[0]).collect();
            (ds.render_batch(&tuples)?, labels)
        }
    };
    let lab = Tensor::vector(labels.iter().map(|l| *l as f64).collect());
    for (name, t) in [("data.stf", &x), ("labels.stf", &lab)] {
        let p = a.out.join(name);
        stf_write(&p, t)?;
        artifacts.push(p);
    }
    Ok(0)
}
