//! Acceptance criteria, one verdict line each. Runs without the libtest
//! harness so the criteria execute one after another and their wall-clock
//! budgets are measured without interference.

use std::path::Path;
use std::time::{Duration, Instant};

use analog_md::annealer::{anneal_with, gibbs_associations, mapping_gradient, model_cost_table, model_gradient, AnnealSchedule, Association, LocalModel, LocalModelSet};
use analog_md::baselines::{linear_scheme, projection_baseline_2to1};
use analog_md::cli::{main_with_args, opta_at};
use analog_md::config::{ConfigFile, RunConfig};
use analog_md::decoders::{central_posterior, optimal_decoders, randomized_decoders, side_posterior};
use analog_md::md2to1::{anneal_2to1, export_structure};
use analog_md::numerics::{build_source_grid, gaussian_density, ChannelGrid};
use analog_md::opta::{opta_central, opta_central_snr_db, opta_min_cost, OptaQuery};
use analog_md::system::{evaluate_system, GridSpec, Metrics, Mode, ScalarMapping, SystemConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P15: f64 = 31.622776601683793;

// pinned tolerances and budgets
const OPTA_SNR_15DB: f64 = 30.272;
const OPTA_SNR_TOL_DB: f64 = 0.01;
const LINEAR_D_SIDE: f64 = 0.030654;
const LINEAR_D_CENTRAL: f64 = 0.015565;
const LINEAR_SNR_DB: f64 = 17.953;
const LINEAR_REL_TOL: f64 = 1e-3;
const DOMINANCE_SLACK: f64 = 1e-9;
const BOUND_SLACK_DB: f64 = 0.01;
const TREND_SLACK: f64 = 0.02;
const SOFT_GAIN_DB: f64 = 0.5;
const FD_REL_TOL: f64 = 1e-4;
const POSTERIOR_TOL: f64 = 1e-10;
const REGIME_TOL: f64 = 1e-7;
const TOTAL_VARIANCE_TOL: f64 = 1e-6;
const DETERMINISM_TOL: f64 = 1e-10;

const BUDGET_OPTA: Duration = Duration::from_secs(1);
const BUDGET_LINEAR: Duration = Duration::from_secs(5);
const BUDGET_PER_EPSILON: Duration = Duration::from_secs(300);
const BUDGET_CONTRACTS: Duration = Duration::from_secs(120);
const BUDGET_2TO1: Duration = Duration::from_secs(1200);

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn verdict(&mut self, id: &str, pass: bool, detail: &str) {
        println!("[{id}] {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn resolved(text: &str) -> RunConfig {
    RunConfig::resolve(ConfigFile::parse(text).unwrap(), None, None, None).unwrap()
}

fn central_snr_bound(cfg: &SystemConfig, m: &Metrics) -> f64 {
    let beta = cfg.mode.bandwidth_ratio();
    opta_central_snr_db(&OptaQuery {
        p1: m.p1 / cfg.noise_variance_1,
        p2: m.p2 / cfg.noise_variance_2,
        beta1: beta,
        beta2: beta,
        sigma2: cfg.source_variance,
        epsilon: cfg.epsilon,
    })
}

fn opta_anchor(r: &mut Report) {
    let t = Instant::now();
    let p = opta_min_cost(&OptaQuery::symmetric(P15, 1.0, 0.0)).unwrap();
    let dt = t.elapsed();
    let ok = (p.snr_db - OPTA_SNR_15DB).abs() <= OPTA_SNR_TOL_DB && dt < BUDGET_OPTA;
    r.verdict("1 opta anchor", ok, &format!("snr {:.5} dB (target {OPTA_SNR_15DB} ± {OPTA_SNR_TOL_DB}), {dt:.2?}", p.snr_db));
}

fn linear_anchor(r: &mut Report) {
    let rc = resolved("csnr_db = 15.0\nepsilon = 0.01\n");
    let t = Instant::now();
    let m = linear_scheme(&rc.system, P15, P15, &rc.grids).unwrap().numeric;
    let dt = t.elapsed();
    let errs = [rel(m.d1, LINEAR_D_SIDE), rel(m.d2, LINEAR_D_SIDE), rel(m.d0, LINEAR_D_CENTRAL), rel(m.snr_db, LINEAR_SNR_DB)];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let ok = worst <= LINEAR_REL_TOL && dt < BUDGET_LINEAR;
    r.verdict(
        "2 linear anchor",
        ok,
        &format!("d0 {:.7} d1 {:.7} d2 {:.7} snr {:.4} dB, worst rel err {worst:.2e} (tol {LINEAR_REL_TOL}), {dt:.2?}", m.d0, m.d1, m.d2, m.snr_db),
    );
}

/// Criteria 3–5 share one continuation sweep at 15 dB.
fn sweep_criteria(r: &mut Report) {
    let rc = resolved("csnr_db = 15.0\n");
    let mut prev: Option<ScalarMapping> = None;
    let mut rows = Vec::new();
    for &eps in &rc.sweep_epsilons {
        let cfg = rc.system.clone().with_epsilon(eps);
        let seeded: Vec<ScalarMapping> = prev.iter().cloned().collect();
        let t = Instant::now();
        let out = anneal_with(&cfg, &rc.schedule, &rc.grids, rc.seed, &seeded).unwrap();
        let dt = t.elapsed();
        println!(
            "  eps {eps}: J {:.8e} (linear {:.8e}), snr {:.4} dB (linear {:.4}), d0 {:.6} d1 {:.6} d2 {:.6} p ({:.4}, {:.4}), {dt:.1?}",
            out.metrics.j_cost, out.baseline.j_cost, out.metrics.snr_db, out.baseline.snr_db, out.metrics.d0, out.metrics.d1, out.metrics.d2, out.metrics.p1, out.metrics.p2
        );
        prev = Some(out.mapping.clone());
        rows.push((eps, cfg, out, dt));
    }

    let dominated = rows.iter().all(|(_, _, o, _)| o.metrics.j_cost <= o.baseline.j_cost + DOMINANCE_SLACK);
    let slowest = rows.iter().map(|row| row.3).max().unwrap();
    let gains: Vec<String> = rows.iter().map(|(e, _, o, _)| format!("{e}: {:+.3} dB", o.metrics.snr_db - o.baseline.snr_db)).collect();
    r.verdict(
        "3 optimizer dominance",
        dominated && slowest <= BUDGET_PER_EPSILON,
        &format!("J <= linear J + {DOMINANCE_SLACK:e} at every eps; slowest eps {slowest:.1?} (budget {BUDGET_PER_EPSILON:?})"),
    );
    let soft = rows.iter().filter(|row| row.0 <= 0.01).all(|(_, _, o, _)| o.metrics.snr_db - o.baseline.snr_db >= SOFT_GAIN_DB);
    println!("  soft target (recorded, not gated): gain >= {SOFT_GAIN_DB} dB at eps <= 0.01: {} [{}]", if soft { "met" } else { "not met" }, gains.join(", "));

    let mut worst_margin = f64::NEG_INFINITY;
    for (_, cfg, o, _) in &rows {
        for m in [&o.metrics, &o.baseline] {
            let bound = opta_at(cfg, m.p1, m.p2).unwrap().snr_db;
            worst_margin = worst_margin.max(m.snr_db - bound);
        }
    }
    r.verdict("4 bound dominance", worst_margin <= BOUND_SLACK_DB, &format!("max snr - opta(measured powers) = {worst_margin:.4} dB (slack {BOUND_SLACK_DB})"));

    // the sweep runs in decreasing eps order
    let mut trend = true;
    for w in rows.windows(2) {
        let (a, b) = (&w[0].2.metrics, &w[1].2.metrics);
        trend &= b.d0 <= a.d0 * (1.0 + TREND_SLACK);
        trend &= b.d1 + b.d2 >= (a.d1 + a.d2) * (1.0 - TREND_SLACK);
    }
    let d0s: Vec<String> = rows.iter().map(|row| format!("{:.6}", row.2.metrics.d0)).collect();
    let sides: Vec<String> = rows.iter().map(|row| format!("{:.6}", row.2.metrics.d1 + row.2.metrics.d2)).collect();
    r.verdict("5 eps trend", trend, &format!("d0 [{}], d1+d2 [{}] (slack {TREND_SLACK})", d0s.join(", "), sides.join(", ")));
}

fn random_models(rng: &mut ChaCha8Rng, mm: usize) -> LocalModelSet<1> {
    let models = (0..mm)
        .map(|_| LocalModel::affine(rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)))
        .collect();
    LocalModelSet::new(models).unwrap()
}

fn soft_cost(set: &LocalModelSet<1>, q: &Association, table: &[f64], weights: &[f64]) -> f64 {
    let m = set.len();
    weights.iter().enumerate().map(|(k, p)| p * (0..m).map(|j| q.get(k, j) * table[k * m + j]).sum::<f64>()).sum()
}

fn gradients(rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let grid = build_source_grid(61, 4.0, 1.0).unwrap();
    let g = ChannelGrid::covering(14.0, 1.0, 97, 5.0).unwrap();
    // randomized encoders: gradient in the local-model parameters
    for _ in 0..10 {
        let set = random_models(rng, 3);
        let raw: Vec<f64> = (0..grid.len() * 3).map(|_| rng.gen_range(0.0..3.0)).collect();
        let q = gibbs_associations(&raw, 3, 1.0).unwrap();
        let cfg = SystemConfig::default().with_epsilon(rng.gen_range(0.0..0.5)).with_lambda(rng.gen_range(0.0..0.05));
        let dec = randomized_decoders(&set, &q, &grid, g.clone(), g.clone(), &cfg).unwrap();
        let grad = model_gradient(&set, &q, &dec, &grid, &cfg);
        let m = rng.gen_range(0..3);
        for (slot, idx) in [(0usize, 0usize), (2, 1)] {
            let at = |d: f64| {
                let mut s = set.clone();
                s.models[m].slope[idx][0] += d;
                soft_cost(&s, &q, &model_cost_table(&s, &grid, &dec, &cfg).unwrap(), grid.weights())
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max((grad[m][slot] - fd).abs() / fd.abs().max(1e-8));
        }
    }
    // deterministic encoders: per-point gradient of J
    let grid = build_source_grid(101, 5.0, 1.0).unwrap();
    for _ in 0..10 {
        let (a, b, c) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..6.0), rng.gen_range(-1.0..1.0));
        let g1: Vec<f64> = grid.points().iter().map(|x| a * x + (b * x).sin()).collect();
        let g2: Vec<f64> = grid.points().iter().map(|x| a * x + c * (x * x - 1.0)).collect();
        let map = ScalarMapping::new(grid.clone(), g1, g2).unwrap();
        let cfg = SystemConfig::default().with_epsilon(rng.gen_range(0.0..0.5)).with_lambda(rng.gen_range(0.0..0.05));
        let cg = ChannelGrid::covering(map.max_abs()[0].max(map.max_abs()[1]) + 1.0, 1.0, 129, 5.0).unwrap();
        let dec = optimal_decoders(&map, cg.clone(), cg, &cfg).unwrap();
        let grad = mapping_gradient(&map, &dec, &cfg);
        let k = rng.gen_range(20..81);
        let ch = rng.gen_range(0..2);
        let at = |d: f64| {
            let (mut u, mut v) = (map.g1().to_vec(), map.g2().to_vec());
            if ch == 0 {
                u[k] += d
            } else {
                v[k] += d
            }
            evaluate_system(&ScalarMapping::new(grid.clone(), u, v).unwrap(), &dec, &cfg).unwrap().j_cost
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((grad[k][ch] - fd).abs() / fd.abs().max(1e-10));
    }
    worst
}

fn linear_setup(p: f64) -> (ScalarMapping, SystemConfig, ChannelGrid) {
    let grid = build_source_grid(401, 5.0, 1.0).unwrap();
    let a = p.sqrt();
    let m = ScalarMapping::linear(grid, a, a);
    let g = ChannelGrid::covering(m.max_abs()[0], 1.0, 129, 5.0).unwrap();
    (m, SystemConfig::default().with_epsilon(0.1), g)
}

fn posterior_error(rng: &mut ChaCha8Rng) -> f64 {
    let (m, cfg, _) = linear_setup(3.0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let y = [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)];
        let s1: f64 = side_posterior(&m, 0, y[0], &cfg).iter().sum();
        let s2: f64 = side_posterior(&m, 1, y[1], &cfg).iter().sum();
        let s0: f64 = central_posterior(&m, y, &cfg).iter().sum();
        worst = worst.max((s1 - 1.0).abs()).max((s2 - 1.0).abs()).max((s0 - 1.0).abs());
    }
    worst
}

/// Number of perturbed tables that lowered a distortion (must be 0).
fn perturbation_violations(rng: &mut ChaCha8Rng) -> usize {
    let (m, cfg, g) = linear_setup(5.0);
    let n = g.len();
    let dec = optimal_decoders(&m, g.clone(), g, &cfg).unwrap();
    let base = evaluate_system(&m, &dec, &cfg).unwrap();
    let mut bad = 0;
    for i in 0..20 {
        let mut d = dec.clone();
        let delta = rng.gen_range(-0.1..0.1);
        let j = rng.gen_range(0..n);
        let worse = match i % 3 {
            0 => {
                d.side_table_mut(0)[j][0] += delta;
                evaluate_system(&m, &d, &cfg).unwrap().d1 >= base.d1
            }
            1 => {
                d.side_table_mut(1)[j][0] += delta;
                evaluate_system(&m, &d, &cfg).unwrap().d2 >= base.d2
            }
            _ => {
                d.central_table_mut()[j * n + rng.gen_range(0..n)][0] += delta;
                evaluate_system(&m, &d, &cfg).unwrap().d0 >= base.d0
            }
        };
        bad += (!worse) as usize;
    }
    bad
}

fn regime_gap() -> f64 {
    let mut worst = 0.0f64;
    for (p, eps) in [(P15, 0.1), (10.0, 0.01), (100.0, 0.3)] {
        let q = OptaQuery::symmetric(p, 1.0, eps);
        let b = 0.5 * (1.0 + q.nu());
        let below = b * (1.0 - 1e-12);
        let (inside, _, _) = opta_central(below, below, &q).unwrap();
        let (outside, _, _) = opta_central(b * (1.0 + 1e-12), b * (1.0 + 1e-12), &q).unwrap();
        worst = worst.max((inside - outside).abs() / outside);
    }
    worst
}

fn total_variance_gap() -> f64 {
    // E[x²] = E[x̂²] + E[(x - x̂)²] for the MMSE side estimator
    let (m, cfg, g) = linear_setup(2.0);
    let dec = optimal_decoders(&m, g.clone(), g, &cfg).unwrap();
    let met = evaluate_system(&m, &dec, &cfg).unwrap();
    let w = dec.w1();
    let grid = dec.grid(0);
    let mut e2 = 0.0;
    for (j, &y) in grid.points().iter().enumerate() {
        let f: f64 = (0..m.grid().len()).map(|k| m.grid().weights()[k] * gaussian_density(y - m.g1()[k], cfg.noise_variance_1).unwrap()).sum();
        e2 += grid.quad_weights()[j] * f * w[j] * w[j];
    }
    let ex2 = m.grid().expect(|x| x * x);
    (ex2 - e2 - met.d1).abs()
}

/// Largest relative rise of the free energy between consecutive inner-loop
/// evaluations of a short anneal.
fn free_energy_rise() -> f64 {
    let spec = GridSpec { source_points: 101, source_half_range: 5.0, channel_points: 65, channel_margin_sd: 5.0, ..GridSpec::default() };
    let cfg = SystemConfig::default().with_epsilon(0.01).with_lambda(2.5e-4);
    let schedule = AnnealSchedule { alpha: 0.7, t_min_ratio: 1e-3, restarts: 2, models: 6, ..AnnealSchedule::default() };
    let out = anneal_with(&cfg, &schedule, &spec, 4, &[]).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for seq in &out.trace.inner_free_energy {
        for w in seq.windows(2) {
            worst = worst.max((w[1] - w[0]) / w[0].abs());
        }
    }
    worst
}

fn contracts(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let t = Instant::now();
    let fd = gradients(&mut rng);
    let post = posterior_error(&mut rng);
    let pert = perturbation_violations(&mut rng);
    let regime = regime_gap();
    let tv = total_variance_gap();
    let rise = free_energy_rise();
    let dt = t.elapsed();
    let parts = [
        ("a", fd < FD_REL_TOL, format!("gradient vs finite difference, worst rel {fd:.2e} over 20 configurations (tol {FD_REL_TOL:e})")),
        ("b", post < POSTERIOR_TOL, format!("posterior mass error {post:.2e} (tol {POSTERIOR_TOL:e})")),
        ("c", pert == 0, format!("{pert} of 20 decoder perturbations lowered a distortion")),
        ("d", regime < REGIME_TOL, format!("regime-boundary jump {regime:.2e} (tol {REGIME_TOL:e})")),
        ("e", tv < TOTAL_VARIANCE_TOL, format!("total-variance gap {tv:.2e} (tol {TOTAL_VARIANCE_TOL:e})")),
        ("f", rise <= 0.0, format!("largest relative inner-loop free-energy rise {rise:.2e}")),
    ];
    for (id, ok, detail) in &parts {
        println!("  6{id}: {} {detail}", if *ok { "ok" } else { "violated" });
    }
    let ok = parts.iter().all(|p| p.1) && dt < BUDGET_CONTRACTS;
    r.verdict("6 numerical contracts", ok, &format!("{dt:.1?} (budget {BUDGET_CONTRACTS:?})"));
}

fn two_to_one(r: &mut Report) {
    let rc = resolved("csnr_db = 15.0\nmode = \"2to1\"\n");
    let cfg = &rc.system;
    let t = Instant::now();
    let out = anneal_2to1(cfg, &rc.schedule, &rc.grids, rc.seed).unwrap();
    let dt = t.elapsed();
    let (_, projection) = projection_baseline_2to1(cfg, P15, &rc.grids).unwrap();
    let projection = projection.with_lambda(out.lambda);
    let m = out.metrics;
    let snr0 = 10.0 * (cfg.source_variance / m.d0).log10();
    let bound = central_snr_bound(cfg, &m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g1_structure.csv");
    std::fs::write(&path, export_structure(&out.mapping, 0)).unwrap();
    let exported = std::fs::read_to_string(&path).map(|s| s.lines().count() == out.mapping.grid().axis().len() + 1).unwrap_or(false);
    println!(
        "  2:1 J {:.8e} (projection {:.8e}), snr {:.4} dB (projection {:.4}), snr0 {snr0:.4} dB (opta {bound:.4}), d1 {:.5} d2 {:.5}, p ({:.4}, {:.4}), {dt:.1?}",
        m.j_cost, projection.j_cost, m.snr_db, projection.snr_db, m.d1, m.d2, m.p1, m.p2
    );
    let ok = m.j_cost <= projection.j_cost + DOMINANCE_SLACK && snr0 <= bound + BOUND_SLACK_DB && exported && dt <= BUDGET_2TO1;
    r.verdict(
        "7 2:1 suite",
        ok,
        &format!("J dominance, snr0 - opta = {:.4} dB (slack {BOUND_SLACK_DB}), structure export {exported}, {dt:.1?} (budget {BUDGET_2TO1:?})", snr0 - bound),
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn metric_gap(a: &Path, b: &Path) -> f64 {
    let read = |p: &Path| Metrics::from_text(&std::fs::read_to_string(p.join("metrics.txt")).unwrap()).unwrap();
    let (x, y) = (read(a), read(b));
    [x.d0 - y.d0, x.d1 - y.d1, x.d2 - y.d2, x.p1 - y.p1, x.p2 - y.p2, x.j_cost - y.j_cost].iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn determinism(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let base = "csnr_db = 15.0\nepsilon = 0.05\nsource_points = 101\nchannel_points = 65\nmodels = 4\nrestarts = 2\nalpha = 0.6\nt_min_ratio = 1e-2\nrefine_max_rounds = 60\n";
    let run = |name: &str, extra: &str| {
        let cfg = tmp.path().join(format!("{name}.toml"));
        std::fs::write(&cfg, format!("{base}{extra}")).unwrap();
        let out = tmp.path().join(name);
        let code = main_with_args(["analog-md", "optimize", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "optimize run {name} failed");
        out
    };
    let a = run("a", "");
    let b = run("b", "");
    let identical = files(&a) == files(&b);
    let info = std::fs::read_to_string(a.join("run_info.toml")).unwrap();
    let recorded = info.contains("execution = ") && info.contains("reduction = \"fixed-order\"");
    let s = run("s", "execution = \"sequential\"\n");
    let gap = metric_gap(&a, &s);
    let same_mapping = std::fs::read(a.join("mapping.csv")).unwrap() == std::fs::read(s.join("mapping.csv")).unwrap();
    r.verdict(
        "8 determinism",
        identical && recorded && gap <= DETERMINISM_TOL,
        &format!("repeat run byte-identical {identical}, mode recorded {recorded}; sequential vs default: metric gap {gap:.1e} (tol {DETERMINISM_TOL:e}), identical mapping {same_mapping}"),
    );
}

fn main() {
    // `cargo test -- --list` and friends pass flags; only `--list` needs an answer
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    assert_eq!(Mode::TwoToOne.bandwidth_ratio(), 0.5);
    // positional arguments select criteria by name, like libtest filters
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (&'static str, fn(&mut Report));
    let criteria: [Criterion; 6] = [
        ("opta", opta_anchor),
        ("linear", linear_anchor),
        ("contracts", contracts),
        ("determinism", determinism),
        ("sweep", sweep_criteria),
        ("2to1", two_to_one),
    ];
    let mut r = Report { failed: Vec::new() };
    for (name, run) in criteria {
        if filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())) {
            run(&mut r);
        }
    }
    if r.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", r.failed.join(", "));
        std::process::exit(1);
    }
}
