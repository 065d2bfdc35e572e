//! End-to-end acceptance checks. Every test prints one `PASS`/`FAIL` line
//! with the measured numbers before asserting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use scfm::autodiff::{eval_and_grad, grad_check_finite_diff, Tape, Tensor, Var};
use scfm::cli::cluster_assignments;
use scfm::data::{config_parse, gen_factors_lite, gen_gmm2d};
use scfm::interpolant::{sample_coupling, CouplingBatch};
use scfm::metrics::{
    dci_disentanglement, factorvae_score, frechet_distance, frechet_from_samples, hungarian_acc, nmi, FactorVaeProtocol,
    GaussianStats, ImportanceMatrix,
};
use scfm::model::{ModelArch, ModelDims, ScfmModel};
use scfm::nn::MeanHead;
use scfm::objectives::{aggregate_kl_estimate, endpoint_loss, scfm_loss, train, vfm_loss, LossVars, Regularizer, TrainConfig};
use scfm::rng::ScfmRng;
use scfm::sampler::{draw_source, integrate, sample_decoder, sample_full, sample_full_from, sample_refined, sample_refined_from, FnField, SolverSpec};

const TOY_CONFIG: &str = include_str!("../../../configs/toy.json");
const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 1. oracle

#[test]
fn c1_oracle_identities() {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_scfm"))
        .args(["oracle", "--seed", "0"])
        .env("SCFM_THREADS", "1")
        .output()
        .expect("run scfm oracle");
    let elapsed = start.elapsed();
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).expect("oracle report is JSON");
    let check = |name: &str| {
        report["checks"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["name"] == name)
            .unwrap_or_else(|| panic!("missing check {name}"))
            .clone()
    };
    let loss = check("loss_equivalence");
    let kl = check("kl_decomposition_and_bound");
    let mc = check("posterior_mean_monte_carlo");

    // independent values: data N(0,1), q(z|x) = N(x/2, 1/2), prior N(0,1),
    // decoder N(z,1). The aggregate is N(0, 3/4); the joint KL uses the 2x2
    // Gaussian formula written out by hand.
    let kl_agg = {
        let v = 0.75f64;
        0.5 * (v - 1.0 - v.ln())
    };
    let kl_joint = {
        // q = [[1, .5], [.5, .75]], p = [[2, 1], [1, 1]], det p = 1, p⁻¹ = [[1, -1], [-1, 2]]
        let tr = 1.0 * 1.0 + 2.0 * (-1.0 * 0.5) + 2.0 * 0.75;
        let det_q = 1.0 * 0.75 - 0.25;
        0.5 * (tr - 2.0 + (1.0f64 / det_q).ln())
    };
    // symmetric pair at x_t = 0.25, t = 0.5: candidate sources -0.5 and 1.5
    let posterior = {
        let w = 1.0 / (1.0 + (-1.0f64).exp());
        w * -0.5 + (1.0 - w) * 1.5
    };
    let mc_case = &mc["details"]["x_t=0.25"];
    let z = mc_case["z"].as_f64().unwrap();
    let ok = out.status.success()
        && report["passed"] == true
        && loss["details"]["cases"] == 1000
        && loss["details"]["max_rel_error"].as_f64().unwrap() <= 1e-10
        && kl["details"]["max_residual"].as_f64().unwrap() <= 1e-10
        && (kl_agg - 0.018841).abs() < 5e-7
        && (kl_joint - 0.096574).abs() < 5e-7
        && (kl["details"]["kl_aggregate"].as_f64().unwrap() - kl_agg).abs() <= 1e-12
        && (kl["details"]["kl_joint"].as_f64().unwrap() - kl_joint).abs() <= 1e-12
        && kl_agg <= kl_joint
        && (posterior - 0.037883).abs() < 5e-7
        && (mc_case["exact"].as_f64().unwrap() - posterior).abs() <= 1e-12
        && z.abs() <= 4.0
        && elapsed <= Duration::from_secs(60);
    assert!(verdict(
        "1 oracle identities",
        ok,
        format!(
            "exit {:?}, equivalence err {:e}, KL {} <= {}, MC z {z:.3}, {elapsed:.1?}",
            out.status.code(),
            loss["details"]["max_rel_error"].as_f64().unwrap_or(f64::NAN),
            kl["details"]["kl_aggregate"],
            kl["details"]["kl_joint"],
        )
    ));
}

// ---------------------------------------------------------- 2. gradients

fn random_model(head: MeanHead, seed: u64) -> ScfmModel {
    let arch = ModelArch {
        hidden: vec![6, 6],
        decoder_hidden: vec![5],
        mean_head: head,
        ..ModelArch::default()
    };
    let mut m = ScfmModel::new(ModelDims::new(2, 1, 3), &arch, &mut ScfmRng::new(seed)).unwrap();
    let mut rng = ScfmRng::new(seed + 100);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v = 0.4 * rng.normal();
        }
    }
    m
}

fn term<'t>(l: &LossVars<'t>, name: &str) -> Var<'t> {
    match name {
        "vfm" => l.vfm,
        "rec" => l.rec,
        "kl_z" => l.kl_z,
        "r_eps" => l.r_eps,
        "tc" => l.tc,
        _ => l.total,
    }
}

/// The objective as a function of the flat parameter vector. The coupling
/// targets `(sg(z), ε, t, x_t)` are drawn once from the unperturbed model and
/// held fixed, which is exactly what the stop-gradient promises; the
/// endpoint terms replay the same rng stream on every evaluation.
struct Objective {
    model: ScfmModel,
    cfg: TrainConfig,
    x1: Tensor,
    coupling: (Tensor, Vec<f64>, Tensor),
    endpoint_rng: ScfmRng,
}

impl Objective {
    fn new(model: ScfmModel, cfg: TrainConfig, x1: Tensor, seed: u64) -> Self {
        let mut rng = ScfmRng::new(seed);
        let coupling = sample_coupling(&model, &x1, &mut rng).unwrap();
        Self {
            model,
            cfg,
            x1,
            coupling,
            endpoint_rng: rng,
        }
    }

    fn terms<'t>(&self, tape: &'t Tape, flat: Var<'t>) -> scfm::Result<LossVars<'t>> {
        let bound = self.model.bind_flat(flat)?;
        let (x0, t, x_t) = self.coupling.clone();
        let batch = CouplingBatch {
            x0: tape.constant(x0),
            x1: tape.constant(self.x1.clone()),
            t,
            x_t: tape.constant(x_t),
        };
        let vfm = vfm_loss(&bound, &batch, self.cfg.sigma_x0)?.scale(self.cfg.vfm_weight);
        let ep = endpoint_loss(&bound, tape.constant(self.x1.clone()), &self.cfg, &mut self.endpoint_rng.clone())?;
        let w = self.cfg.endpoint_weight;
        let (rec, kl_z, r_eps, tc) = (ep.rec.scale(w), ep.kl_z.scale(w), ep.r_eps.scale(w), ep.tc.scale(w));
        Ok(LossVars {
            vfm,
            rec,
            kl_z,
            r_eps,
            tc,
            total: vfm + rec + kl_z + r_eps + tc,
        })
    }
}

#[test]
fn c2_gradient_fidelity() {
    let start = Instant::now();
    let x1 = ScfmRng::new(7).normal_tensor(&[4, 3]);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut replay_matches = true;
    for head in [MeanHead::Direct, MeanHead::Skip, MeanHead::Velocity] {
        let model = random_model(head, 3);
        let flat = model.flat_params();
        for regularizer in [Regularizer::BetaVae, Regularizer::BetaTcvae] {
            let cfg = TrainConfig {
                regularizer,
                k: 3,
                d_z: 2,
                d_eps: 1,
                data_dim: 3,
                sigma_x0: 0.7,
                ..TrainConfig::default()
            };
            let obj = Objective::new(model.clone(), cfg.clone(), x1.clone(), 11);

            // the fixed-coupling objective is the training objective itself
            let tape = Tape::new();
            let live = scfm_loss(&model.bind(&tape, false).unwrap(), tape.constant(x1.clone()), &cfg, &mut ScfmRng::new(11))
                .unwrap()
                .values();
            let replay = obj.terms(&tape, tape.constant(flat.clone())).unwrap().values();
            replay_matches &= live == replay;

            for name in ["vfm", "rec", "kl_z", "r_eps", "tc", "total"] {
                if name == "tc" && regularizer == Regularizer::BetaVae {
                    continue;
                }
                let err = grad_check_finite_diff(|tape, p| Ok(term(&obj.terms(tape, p)?, name)), &flat, 1e-5).unwrap();
                let e = worst.entry(format!("{name}/{regularizer:?}")).or_insert(0.0);
                *e = e.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let ok = max <= 1e-5 && replay_matches && elapsed <= Duration::from_secs(10);
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    assert!(verdict(
        "2 gradient fidelity",
        ok,
        format!("{} (replay matches training loss: {replay_matches}, {elapsed:.1?})", detail.join(", "))
    ));
}

// ------------------------------------------------------- 3. stop-gradient

#[test]
fn c3_stop_gradient_contract() {
    let mut all_equal = true;
    let mut checked = 0;
    for head in [MeanHead::Direct, MeanHead::Skip, MeanHead::Velocity] {
        let model = random_model(head, 5);
        let x1 = ScfmRng::new(8).normal_tensor(&[16, 3]);

        let live = {
            let tape = Tape::new();
            let bound = model.bind(&tape, true).unwrap();
            let batch = scfm::interpolant::encoder_coupling_batch(&bound, tape.constant(x1.clone()), &mut ScfmRng::new(9)).unwrap();
            let loss = vfm_loss(&bound, &batch, 0.8).unwrap();
            eval_and_grad(loss, &bound.params).unwrap()
        };
        let detached = {
            let (x0, t, x_t) = sample_coupling(&model, &x1, &mut ScfmRng::new(9)).unwrap();
            let tape = Tape::new();
            let bound = model.bind(&tape, true).unwrap();
            let batch = CouplingBatch {
                x0: tape.constant(x0),
                x1: tape.constant(x1.clone()),
                t,
                x_t: tape.constant(x_t),
            };
            let loss = vfm_loss(&bound, &batch, 0.8).unwrap();
            eval_and_grad(loss, &bound.params).unwrap()
        };
        for (name, (a, b)) in model.param_names().iter().zip(live.iter().zip(&detached)) {
            if name.starts_with("decoder") || name.starts_with("prior") {
                continue;
            }
            checked += 1;
            all_equal &= a.bit_eq(b);
        }
    }
    assert!(verdict(
        "3 stop-gradient contract",
        all_equal,
        format!("{checked} encoder tensors compared bitwise")
    ));
}

// ---------------------------------------------------------- 4. solvers

#[test]
fn c4_solver_orders() {
    let field = FnField(|x: &Tensor, _t: f64| x.clone());
    let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let e = std::f64::consts::E;
    let steps = [10usize, 20, 40, 80];
    let errs: Vec<f64> = steps
        .iter()
        .map(|&n| {
            let tr = integrate(&field, &x, 0.0, &SolverSpec::heun(n).with_t_start(0.0)).unwrap();
            (tr.x_final.data()[0] - e).abs()
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let ln_n: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ln_e: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
    let (mn, me) = (mean(ln_n.clone()), mean(ln_e.clone()));
    let slope = -ln_n.iter().zip(&ln_e).map(|(a, b)| (a - mn) * (b - me)).sum::<f64>()
        / ln_n.iter().map(|a| (a - mn).powi(2)).sum::<f64>();
    let heun_ok = ratios.iter().all(|r| (3.6..=4.4).contains(r)) && (slope - 2.0).abs() <= 0.1;

    let dp = integrate(&field, &x, 0.0, &SolverSpec::dopri5(1e-8, 1e-8).with_t_start(0.0)).unwrap();
    let dp_err = (dp.x_final.data()[0] - e).abs();

    let model = random_model(MeanHead::Velocity, 12);
    let mut rng = ScfmRng::new(13);
    let (z, eps) = draw_source(&model, 32, &mut rng).unwrap();
    let mut same = true;
    for spec in [SolverSpec::heun(25), SolverSpec::dopri5(1e-5, 1e-5)] {
        let refined = sample_refined_from(&model, &z, &eps, 0.0, &spec, None).unwrap();
        let full = sample_full_from(&model, &z, &eps, &spec).unwrap();
        same &= refined.x_final.bit_eq(&full.x_final);
    }

    let ok = heun_ok && dp_err <= 1e-6 && same;
    assert!(verdict(
        "4 solver orders",
        ok,
        format!("heun ratios {ratios:.3?} slope {slope:.3}, dopri5 err {dp_err:.1e}, refine(t0=0) == full: {same}")
    ));
}

// ---------------------------------------------- 5, 6, 9. toy training runs

struct ToyRun {
    acc: f64,
    nmi: f64,
    fd_decoder: f64,
    fd_refine: f64,
    fd_full: f64,
    refine_nfe: u64,
    full_nfe: u64,
    kl_early: f64,
    kl_final: f64,
}

struct ToyRuns {
    runs: Vec<ToyRun>,
    train_time: Duration,
}

fn toy_runs() -> &'static ToyRuns {
    static RUNS: OnceLock<ToyRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = config_parse(TOY_CONFIG).unwrap();
        let mut train_time = Duration::ZERO;
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..base.clone() };
                let (data, _) = gen_gmm2d(cfg.k, cfg.separation, cfg.dataset_size, seed).unwrap();
                let (test, labels) = gen_gmm2d(cfg.k, cfg.separation, 5000, seed + 1000).unwrap();
                let kl_rows = test.select_rows(&(0..2000).collect::<Vec<_>>());
                let mut kl = Vec::new();
                let start = Instant::now();
                let out = train(&cfg, &data, |step, model, _| {
                    if step == 50 || step == cfg.steps {
                        kl.push(aggregate_kl_estimate(model, &kl_rows, &mut ScfmRng::substream(seed, "agg-kl", 0))?);
                    }
                    Ok(())
                })
                .unwrap();
                train_time += start.elapsed();

                let clusters = cluster_assignments(&out.model, &test).unwrap();
                let mut rng = ScfmRng::substream(seed, "sample", 0);
                let n = test.rows();
                let dec = sample_decoder(&out.model, n, &mut rng).unwrap();
                let refine = sample_refined(&out.model, n, 0.8, &SolverSpec::heun(5), &mut rng, false).unwrap();
                let full = sample_full(&out.model, n, &SolverSpec::heun(25), &mut rng).unwrap();
                let run = ToyRun {
                    acc: hungarian_acc(&labels, &clusters).unwrap().0,
                    nmi: nmi(&labels, &clusters).unwrap(),
                    fd_decoder: frechet_from_samples(&dec.x_final, &test).unwrap(),
                    fd_refine: frechet_from_samples(&refine.x_final, &test).unwrap(),
                    fd_full: frechet_from_samples(&full.x_final, &test).unwrap(),
                    refine_nfe: refine.nfe,
                    full_nfe: full.nfe,
                    kl_early: kl[0],
                    kl_final: kl[1],
                };
                println!(
                    "seed {seed}: acc {:.4} nmi {:.4} FD dec {:.4} refine {:.4} full {:.4} KL@50 {:.4} KL@{} {:.4}",
                    run.acc, run.nmi, run.fd_decoder, run.fd_refine, run.fd_full, run.kl_early, cfg.steps, run.kl_final
                );
                run
            })
            .collect();
        ToyRuns { runs, train_time }
    })
}

#[test]
fn c5_toy_clustering() {
    let r = toy_runs();
    let acc = mean(r.runs.iter().map(|x| x.acc));
    let nmi = mean(r.runs.iter().map(|x| x.nmi));
    let ok = acc >= 0.95 && nmi >= 0.90 && r.train_time <= Duration::from_secs(300);
    assert!(verdict(
        "5 toy clustering",
        ok,
        format!("mean ACC {acc:.4}, mean NMI {nmi:.4}, training {:.1?} for 3 seeds", r.train_time)
    ));
}

#[test]
fn c6_quality_compute_ordering() {
    let r = toy_runs();
    let dec = mean(r.runs.iter().map(|x| x.fd_decoder));
    let refine = mean(r.runs.iter().map(|x| x.fd_refine));
    let full = mean(r.runs.iter().map(|x| x.fd_full));
    let nfe_ok = r.runs.iter().all(|x| x.refine_nfe == 10 && x.full_nfe == 50);
    let ok = refine <= dec + 0.05 && full <= refine + 0.05 && nfe_ok;
    assert!(verdict(
        "6 quality-compute ordering",
        ok,
        format!("mean FD decoder {dec:.4}, refine {refine:.4}, full {full:.4}")
    ));
}

#[test]
fn c9_prior_alignment_trend() {
    let r = toy_runs();
    let lower = r.runs.iter().filter(|x| x.kl_final < x.kl_early).count();
    let pairs: Vec<String> = r.runs.iter().map(|x| format!("{:.4}->{:.4}", x.kl_early, x.kl_final)).collect();
    assert!(verdict(
        "9 prior-alignment trend",
        2 * lower > r.runs.len(),
        format!("KL(q_agg || p) step 50 -> final per seed: {}; lower on {lower}/3", pairs.join(", "))
    ));
}

// ------------------------------------------------------------ 7. metrics

fn brute_force_acc(labels: &[usize], clusters: &[usize], k: usize) -> f64 {
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, k - 1);
                out.push(q);
            }
        }
        out
    }
    let best = permutations(k)
        .iter()
        .map(|perm| labels.iter().zip(clusters).filter(|(l, c)| perm[**c] == **l).count())
        .max()
        .unwrap();
    best as f64 / labels.len() as f64
}

fn importance(rows: &[Vec<f64>]) -> ImportanceMatrix {
    ImportanceMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
}

fn gauss(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> GaussianStats {
    GaussianStats::new(mean, cov).unwrap()
}

#[test]
fn c7_metrics_exactness() {
    let mut rng = ScfmRng::new(2024);
    let mut acc_mismatch = 0;
    for _ in 0..100 {
        let k = 1 + rng.below(7);
        let n = 1 + rng.below(60);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let got = hungarian_acc(&labels, &clusters).unwrap().0;
        if got != brute_force_acc(&labels, &clusters, k) {
            acc_mismatch += 1;
        }
    }

    let u = 1.0 / 3.0;
    let dci = [
        dci_disentanglement(&importance(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])).unwrap(),
        dci_disentanglement(&importance(&[vec![u; 3], vec![u; 3], vec![u; 3]])).unwrap(),
        dci_disentanglement(&importance(&[vec![0.8, 0.2], vec![0.2, 0.8]])).unwrap(),
    ];
    let dci_ok = (dci[0] - 1.0).abs() <= 1e-5 && dci[1].abs() <= 1e-5 && (dci[2] - 0.27807).abs() <= 1e-5;

    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let same = gauss(vec![0.3, -1.0], vec![vec![2.0, 0.5], vec![0.5, 1.0]]);
    let fd = [
        frechet_distance(&same, &same).unwrap(),
        frechet_distance(&gauss(vec![1.0, 0.0], eye.clone()), &gauss(vec![0.0, 0.0], eye)).unwrap(),
        frechet_distance(&gauss(vec![0.0], vec![vec![4.0]]), &gauss(vec![0.0], vec![vec![1.0]])).unwrap(),
    ];
    let fd_ok = fd[0].abs() <= 1e-9 && (fd[1] - 1.0).abs() <= 1e-9 && (fd[2] - 1.0).abs() <= 1e-9;

    let ds = gen_factors_lite(0).unwrap();
    let fvae = factorvae_score(|x: &Tensor| ds.lookup_factors(x), &ds, &FactorVaeProtocol::default(), &mut ScfmRng::new(1))
        .unwrap()
        .score;

    let ok = acc_mismatch == 0 && dci_ok && fd_ok && fvae == 1.0;
    assert!(verdict(
        "7 metrics exactness",
        ok,
        format!(
            "ACC mismatches {acc_mismatch}/100, DCI {dci:.6?}, FD {:?}, FactorVAE {fvae}",
            fd.map(|v| format!("{v:.1e}"))
        )
    ));
}

// -------------------------------------------------------- 8. determinism

fn scfm(dir: &Path, threads: &str, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_scfm"))
        .args(args)
        .current_dir(dir)
        .env("SCFM_THREADS", threads)
        .output()
        .expect("run scfm");
    assert!(out.status.success(), "scfm {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs every subcommand in a fresh directory and returns the bytes of every
/// file it produced, keyed by relative path.
fn cli_session(threads: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("toy.json"),
        r#"{"steps": 30, "hidden": [16, 16], "decoder_hidden": [16], "log_every": 10, "batch_size": 64, "dataset_size": 2000}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("factors.json"),
        r#"{"dataset": "factors-lite", "D": 16, "d_z": 3, "d_eps": 13, "K": 4, "steps": 10, "hidden": [16], "decoder_hidden": [16], "batch_size": 32}"#,
    )
    .unwrap();
    let runs: &[&[&str]] = &[
        &["gen", "gmm2d", "--n", "1000", "--seed", "4", "--out", "gmm"],
        &["gen", "factors-lite", "--out", "fl"],
        &["train", "--config", "toy.json", "--out", "run", "--seed", "3"],
        &["train", "--config", "factors.json", "--out", "frun"],
        &["sample", "--model", "run/model", "--n", "200", "--seed", "5", "--out", "full.stf"],
        &["sample", "--model", "run/model", "--n", "200", "--mode", "refine", "--seed", "5", "--out", "refine.stf"],
        &["sample", "--model", "run/model", "--n", "200", "--mode", "decoder", "--stochastic-decoder", "--out", "dec.stf"],
        &["sample", "--model", "run/model", "--n", "50", "--solver", "dopri5", "--out", "dp.stf"],
        &["reconstruct", "--model", "run/model", "--data", "gmm/data.stf", "--out", "recon.stf"],
        &["eval", "cluster", "--model", "run/model", "--data", "gmm/data.stf", "--labels", "gmm/labels.stf", "--out", "cluster.json"],
        &["eval", "frechet", "--a", "full.stf", "--b", "gmm/data.stf", "--out", "frechet.json"],
        &["eval", "disentangle", "--model", "frun/model", "--out", "disentangle.json"],
        &["probe", "--model", "run/model", "--data", "gmm/data.stf", "--labels", "gmm/labels.stf", "--kind", "mlp", "--out", "probe.json"],
        &["oracle", "--out", "oracle.json"],
    ];
    for args in runs {
        scfm(dir, threads, args);
    }
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn c8_cli_determinism() {
    let one = cli_session("1");
    let four = cli_session("4");
    let again = cli_session("1");
    let differing: Vec<String> = one
        .keys()
        .chain(four.keys())
        .filter(|k| one.get(*k) != four.get(*k) || one.get(*k) != again.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let json_files = one.keys().filter(|k| k.extension().is_some_and(|e| e == "json" || e == "jsonl")).count();
    assert!(verdict(
        "8 CLI determinism",
        differing.is_empty() && json_files >= 8,
        format!("{} files ({json_files} JSON) compared across SCFM_THREADS=1/4/1; differing: {differing:?}", one.len())
    ));
}
