//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs every criterion; pass numbers
//! (`-- 1 5`) to run a subset. Failures are reported but only turn into a
//! non-zero exit status when `HSDE_ACCEPTANCE_STRICT` is set.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hsde::em::{spike_objective, update_marks, waiting_time_objective, EventStats, SpikeSamples};
use hsde::inducing::{
    order_statistics_gap_sample, sample_repulsive, InducingSequence, MarkModel, NiwPrior, PriorHyperparams, RatePrior,
    RepulsionParams, ShapePrior, WaitingTimeModel,
};
use hsde::oracle::{gp_fit_predict, gp_grid_search, kalman_filter, GpGrid, LinearGaussianSSM};
use hsde::real::standard_normal;
use hsde::sde::{simulate_path, NoiseParams, TimeGrid};
use hsde::smc::{run_filter_fixed_events, SmcConfig};
use hsde::{stats, GaussianObsModel, ModelParams, ObsModel, Truth};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Gamma};

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(configs_dir().join(name)).unwrap()).unwrap()
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn hsde(args: &[&str]) -> (String, f64) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_hsde")).args(args).output().expect("binary runs");
    let secs = start.elapsed().as_secs_f64();
    assert!(out.status.success(), "hsde {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    (String::from_utf8(out.stdout).unwrap(), secs)
}

fn run_config(cmd: &str, cfg: &Path, extra: &[&str]) -> (String, f64) {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    hsde(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn load_truth(dir: &Path) -> Truth {
    Truth::from_json(&std::fs::read_to_string(dir.join("truth.json")).unwrap()).unwrap()
}

/// Simulates with a shipped config redirected into `work`.
fn simulate(work: &Path, config: &str, name: &str) -> PathBuf {
    let out = work.join(name);
    let mut cfg = load_config(config);
    cfg["out"] = json!(out);
    run_config("simulate", &write_json(&work.join(format!("{name}_sim.json")), &cfg), &[]);
    out
}

/// Fit config from a shipped one, pointed at `data` and writing to `out`.
fn fit_config(config: &str, data: &Path, out: &Path) -> Value {
    let mut cfg = load_config(config);
    cfg["data"][0]["path"] = json!(data.join("obs.csv"));
    cfg["out"] = json!(out);
    cfg
}

fn eval(work: &Path, truth: &Path, field: &str, estimate: &Path) -> Value {
    let cfg = json!({
        "schema": 1,
        "truth": { "path": truth.join("truth.json"), "field": field },
        "estimate": { "path": estimate },
    });
    let (stdout, _) = run_config("eval", &write_json(&work.join("eval.json"), &cfg), &[]);
    serde_json::from_str(&stdout).unwrap()
}

fn chirp(work: &Path) -> Vec<Check> {
    let data = simulate(work, "chirp_simulate.json", "chirp");
    let fit_dir = work.join("chirp_fit");
    let cfg = write_json(&work.join("chirp_fit.json"), &fit_config("chirp_fit.json", &data, &fit_dir));
    let (_, secs) = run_config("fit", &cfg, &[]);
    let mse = eval(work, &data, "clean", &fit_dir.join("prediction.csv"))["mse"].as_f64().unwrap();

    // Exact GP on 25 observations spaced 10 s apart, predicting every sample.
    let truth = load_truth(&data);
    let (_, obs) = read_csv(&data.join("obs.csv"));
    let (t_train, y_train): (Vec<f64>, Vec<f64>) =
        obs.iter().filter(|r| (r[0] / 10.0 - (r[0] / 10.0).round()).abs() < 1e-9).map(|r| (r[0], r[1])).unzip();
    let span = truth.times.last().unwrap() - truth.times[0];
    let (model, _) = gp_grid_search(&t_train, &y_train, &GpGrid::for_data(span, stats::variance(&y_train))).unwrap();
    let pred = gp_fit_predict(&model, &t_train, &y_train, &truth.times).unwrap();
    let clean = truth.clean.as_ref().unwrap();
    let gp_mse = pred.mean.iter().zip(clean).map(|(p, c)| (p - c[0]).powi(2)).sum::<f64>() / clean.len() as f64;

    let events = read_json(&fit_dir.join("events.json"))["mean_event_count"].as_f64().unwrap();
    let wt = &read_json(&fit_dir.join("params.json"))["waiting_time"];
    let waiting = wt["alpha"].as_f64().unwrap() / wt["rate"].as_f64().unwrap();
    vec![
        check("chirp reconstruction mse <= 0.5", mse <= 0.5, format!("mse {mse:.4}")),
        check(
            "chirp gp oracle mse in [0.1, 0.4]",
            (0.1..=0.4).contains(&gp_mse),
            format!("gp mse {gp_mse:.4} from {} training points", t_train.len()),
        ),
        check(
            "chirp event count in [20, 40]",
            (20.0..=40.0).contains(&events),
            format!("posterior mean count {events:.1}"),
        ),
        check(
            "chirp mean waiting time in [6, 14] s",
            (6.0..=14.0).contains(&waiting),
            format!("learned mean {waiting:.2} s"),
        ),
        check("chirp fit runtime <= 15 min", secs <= 900.0, format!("{secs:.0} s")),
    ]
}

fn kalman_equivalence() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d, m, k_n, dt) = (2, 3, 100, 0.1);
    let w = DMatrix::from_fn(m, d, |_, _| standard_normal::<f64, _>(&mut rng));
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.2, 0.4]));
    let params = ModelParams::new(
        ObsModel::Gaussian(GaussianObsModel::new(w, r).unwrap()),
        NoiseParams::uniform(d, 0.3, 0.05),
        WaitingTimeModel::from_mean_std(2.5, 0.5).unwrap(),
        MarkModel::isotropic(d, 0.0, 1.0).unwrap(),
    )
    .unwrap();
    let times = [2.13, 4.6, 7.05, 9.4, 10.6];
    let marks = times.iter().map(|_| (0..d).map(|_| standard_normal::<f64, _>(&mut rng)).collect()).collect();
    let seq = InducingSequence::from_times(0.0, &times, marks).unwrap();
    let grid = TimeGrid::new(dt, k_n, 0.0).unwrap();
    let path = simulate_path(&seq, &grid, &params.noise, &[0.2, -0.4], &[0.1, 0.3], &mut rng).unwrap();
    let (obs, _) = params.obs.simulate_series(&path, &grid, &mut rng).unwrap();
    let kf = kalman_filter(&LinearGaussianSSM::from_fixed_events(&seq, &params, &grid).unwrap(), &obs).unwrap();
    let log_ml: Vec<f64> = (0..50)
        .map(|seed| {
            let cfg = SmcConfig { particles: 5000, seed, ..SmcConfig::default() };
            run_filter_fixed_events(&obs, &params, &cfg, &seq).unwrap().log_marginal_likelihood
        })
        .collect();
    let z = (stats::mean(&log_ml) - kf.log_marginal_likelihood) / stats::std_error(&log_ml);
    vec![check(
        "smc log-ml within 3 se of kalman (50 seeds, U=5000)",
        z.abs() < 3.0,
        format!("kalman {:.3}, smc mean {:.3}, z {z:.2}", kf.log_marginal_likelihood, stats::mean(&log_ml)),
    )]
}

fn integral_approximation() -> Vec<Check> {
    let span = 2.0 * std::f64::consts::PI;
    let steps = 6400;
    let grid = TimeGrid::new(span / steps as f64, steps, 0.0).unwrap();
    let errs: Vec<f64> = [8usize, 16, 32, 64]
        .iter()
        .map(|&n| {
            let times: Vec<f64> = (1..=n).map(|i| i as f64 * span / n as f64).collect();
            let marks = times.iter().map(|t| vec![t.cos()]).collect();
            let seq = InducingSequence::from_times(0.0, &times, marks).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = simulate_path(&seq, &grid, &NoiseParams::uniform(1, 0.0, 0.0), &[1.0], &[0.0], &mut rng).unwrap();
            (0..=steps).map(|k| (p.y(k)[0] - grid.time(k).sin()).abs()).fold(0.0, f64::max)
        })
        .collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    vec![check("integral sup error decreasing, < 0.01 at N=64", monotone && errs[3] < 0.01, format!("{errs:.4?}"))]
}

fn parse_stat(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|v| v.trim_start_matches(':').trim().parse().ok())
        .unwrap_or(f64::NAN)
}

fn bench(work: &Path) -> Vec<Check> {
    let mut cfg = load_config("bench.json");
    cfg["out"] = json!(work.join("bench.csv"));
    let (stdout, secs) = run_config("bench", &write_json(&work.join("bench.json"), &cfg), &[]);
    let smc = parse_stat(&stdout, "smc log-log slope");
    let gp = parse_stat(&stdout, "gp log-log slope");
    let ratio = parse_stat(&stdout, "particle time ratio");
    vec![
        check("smc time slope in K within [0.85, 1.15]", (0.85..=1.15).contains(&smc), format!("{smc:.3}")),
        check("gp time slope within [2.5, 3.3]", (2.5..=3.3).contains(&gp), format!("{gp:.3}")),
        check("doubling particles scales time by [1.7, 2.4]", (1.7..=2.4).contains(&ratio), format!("{ratio:.3}")),
        check("bench runtime <= 10 min", secs <= 600.0, format!("{secs:.0} s")),
    ]
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Centred moving average over `width` samples, truncated at the ends.
fn smooth(v: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..v.len())
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + width - half).min(v.len()));
            v[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

fn lorenz(work: &Path) -> Vec<Check> {
    let data = simulate(work, "lorenz_simulate.json", "lorenz");
    let fit_dir = work.join("lorenz_fit");
    let mut cfg = fit_config("lorenz_fit.json", &data, &fit_dir);
    // The known projection is the generator's.
    let truth = load_truth(&data);
    cfg["init"]["loadings"] = read_json(&data.join("truth.json"))["loadings"].clone();
    let (_, secs) = run_config("fit", &write_json(&work.join("lorenz_fit.json"), &cfg), &[]);
    let r2 = eval(work, &data, "latent", &fit_dir.join("summary.csv"))["r2"].as_f64().unwrap();

    let dt = truth.times[1] - truth.times[0];
    let l = &truth.latent;
    let n = l.len();
    let speed: Vec<f64> = (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (0..3).map(|j| ((l[b][j] - l[a][j]) / ((b - a) as f64 * dt)).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let events = read_json(&fit_dir.join("events.json"));
    let ev_times: Vec<f64> = events["times"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(ev_times.len(), n);
    let density: Vec<f64> = events["density"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() / dt).collect();
    let density = smooth(&density, 10);
    let (q1, q3) = (quantile(&speed, 0.25), quantile(&speed, 0.75));
    let mean_where = |keep: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = speed.iter().zip(&density).filter(|(s, _)| keep(**s)).map(|(_, d)| *d).collect();
        stats::mean(&v)
    };
    let (hi, lo) = (mean_where(&|s| s >= q3), mean_where(&|s| s <= q1));
    vec![
        check("lorenz affine r2 >= 0.7", r2 >= 0.7, format!("r2 {r2:.3}")),
        check(
            "lorenz event density higher in fast quartile",
            hi > lo,
            format!("{hi:.2} vs {lo:.2} events/s, {:.1} events", events["mean_event_count"].as_f64().unwrap()),
        ),
        check("lorenz fit runtime <= 45 min", secs <= 2700.0, format!("{secs:.0} s")),
    ]
}

fn spikes(work: &Path) -> Vec<Check> {
    let data = simulate(work, "spikes_simulate.json", "spikes");
    let fit_dir = work.join("spikes_fit");
    let cfg = write_json(&work.join("spikes_fit.json"), &fit_config("spikes_fit.json", &data, &fit_dir));
    run_config("fit", &cfg, &[]);
    let r2 = eval(work, &data, "latent", &fit_dir.join("summary.csv"))["r2"].as_f64().unwrap();
    let (_, counts) = read_csv(&data.join("obs.csv"));
    let (_, pred) = read_csv(&fit_dir.join("prediction.csv"));
    let neurons = counts[0].len() - 1;
    let col_mean = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j + 1]).sum::<f64>() / rows.len() as f64;
    let empirical: Vec<f64> = (0..neurons).map(|j| col_mean(&counts, j)).collect();
    let predicted: Vec<f64> = (0..neurons).map(|j| col_mean(&pred, j)).collect();
    let r = stats::pearson(&empirical, &predicted);
    vec![
        check("spike latent affine r2 >= 0.6", r2 >= 0.6, format!("r2 {r2:.3}")),
        check("spike rate correlation >= 0.9", r >= 0.9, format!("r {r:.4}")),
    ]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn statistical_suites() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let wt = WaitingTimeModel::from_mean_std(8.0, 4.0).unwrap();
    let n = 1_000_000;
    let v: Vec<f64> = (0..n).map(|_| wt.sample(&mut rng)).collect();
    let z_mean = (stats::mean(&v) - wt.mean()) / (wt.variance() / n as f64).sqrt();
    let se_var = wt.variance() * ((2.0 + 6.0 / wt.alpha()) / n as f64).sqrt();
    let z_var = (stats::variance(&v) - wt.variance()) / se_var;
    let ks = stats::ks_one_sample(&v[..20_000], |x| Gamma::new(wt.alpha(), wt.rate()).unwrap().cdf(x)).p_value;
    out.push(check(
        "gamma moments within 3 se, ks p > 0.01",
        z_mean.abs() < 3.0 && z_var.abs() < 3.0 && ks > 0.01,
        format!("z mean {z_mean:.2}, z var {z_var:.2}, ks p {ks:.3}"),
    ));

    let (k, horizon) = (50usize, 7.0);
    let first: Vec<f64> = (0..5000).map(|_| order_statistics_gap_sample(k, horizon, &mut rng)[0]).collect();
    let p_beta = stats::ks_one_sample(&first, |x| 1.0 - (1.0 - (x / horizon).clamp(0.0, 1.0)).powi(k as i32)).p_value;
    let big = 200_000;
    let scaled: Vec<f64> = order_statistics_gap_sample(big, 1.0, &mut rng).iter().map(|g| g * big as f64).collect();
    let thin: Vec<f64> = scaled.iter().step_by(20).copied().collect();
    let p_exp = stats::ks_one_sample(&thin, |x| 1.0 - (-x).exp()).p_value;
    out.push(check(
        "uniform gaps: beta ks and exponential limit ks p > 0.01",
        p_beta > 0.01 && p_exp > 0.01,
        format!("p beta {p_beta:.3}, p exp {p_exp:.3}"),
    ));

    let mu = DVector::from_vec(vec![1.0f64, -2.0, 0.5]);
    let sigma = DMatrix::from_row_slice(3, 3, &[2.0f64, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 0.5]);
    let truth = MarkModel::new(mu.clone(), sigma.clone()).unwrap();
    let n = 10_000;
    let mut s = EventStats::new(3);
    for _ in 0..n {
        s.push(1.0, &truth.sample(&mut rng), 1.0);
    }
    let fit = update_marks(&s, &NiwPrior::weak(3)).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        worst = worst.max((fit.mu()[i] - mu[i]).abs() / (sigma[(i, i)] / n as f64).sqrt());
        for j in 0..3 {
            let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
            worst = worst.max((fit.sigma()[(i, j)] - sigma[(i, j)]).abs() / se);
        }
    }
    out.push(check("niw recovery within 4 se", worst < 4.0, format!("largest |error| / se {worst:.2}")));

    let wt = WaitingTimeModel::new(4.0, 2.0).unwrap();
    let rep = RepulsionParams::new(10.0, 3).unwrap();
    let min_gap = |taus: &[f64]| {
        let mut best = f64::INFINITY;
        for i in 1..taus.len() {
            for j in i.saturating_sub(3)..i {
                best = best.min((taus[i] - taus[j]).abs());
            }
        }
        best
    };
    let free: Vec<f64> = (0..500).map(|_| min_gap(&(0..5).map(|_| wt.sample(&mut rng)).collect::<Vec<_>>())).collect();
    let repelled: Vec<f64> =
        (0..500).map(|_| min_gap(&sample_repulsive(5, &wt, &rep, 500, &mut rng).unwrap().taus)).collect();
    let p = stats::mann_whitney_greater(&repelled, &free);
    out.push(check("repulsion enlarges min gaps (mann-whitney p < 1e-3)", p < 1e-3, format!("p {p:.2e}")));

    let mut es = EventStats::new(1);
    for (i, t) in [3.0, 7.5, 1.2, 9.9, 4.4].iter().enumerate() {
        es.push(*t, &[0.0], 0.3 + 0.1 * i as f64);
    }
    let mut pr = PriorHyperparams::<f64>::weak(1);
    pr.shape = ShapePrior::LogNormal { mu: 1.0, sigma2: 0.3 };
    pr.rate = RatePrior::InvGamma { shape: 2.0, scale: 0.5 };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (la, ll) in [(0.3, -1.0), (1.7, 0.4), (-0.5, -2.2)] {
        let (_, g) = waiting_time_objective(&es, &pr, la, ll);
        let fd_a = (waiting_time_objective(&es, &pr, la + h, ll).0 - waiting_time_objective(&es, &pr, la - h, ll).0)
            / (2.0 * h);
        let fd_l = (waiting_time_objective(&es, &pr, la, ll + h).0 - waiting_time_objective(&es, &pr, la, ll - h).0)
            / (2.0 * h);
        worst = worst.max(rel_err(g[0], fd_a)).max(rel_err(g[1], fd_l));
    }
    let mut ss = SpikeSamples::new(2, 1, 0.01);
    for i in 0..40 {
        ss.push(&[standard_normal::<f64, _>(&mut rng), 0.1 * i as f64], &[(i % 4) as u32], 0.5 + 0.01 * i as f64);
    }
    for _ in 0..10 {
        let theta: Vec<f64> = (0..3).map(|_| standard_normal::<f64, _>(&mut rng)).collect();
        let (_, g, hess) = spike_objective(&ss, 0, &theta);
        for a in 0..3 {
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[a] += h;
            tm[a] -= h;
            let (fp, gp, _) = spike_objective(&ss, 0, &tp);
            let (fm, gm, _) = spike_objective(&ss, 0, &tm);
            worst = worst.max(rel_err(g[a], (fp - fm) / (2.0 * h)));
            for b in 0..3 {
                worst = worst.max(rel_err(hess[(b, a)], (gp[b] - gm[b]) / (2.0 * h)));
            }
        }
    }
    out.push(check(
        "analytic gradients match finite differences (rel err <= 1e-5)",
        worst <= 1e-5,
        format!("{worst:.2e}"),
    ));
    out
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Vec<String> {
    files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.to_string())
        .collect()
}

fn determinism(work: &Path) -> Vec<Check> {
    let work = &work.join("determinism");
    std::fs::create_dir_all(work).unwrap();
    let mut diffs = Vec::new();
    let fit_files = ["params.json", "trace.json", "summary.csv", "summary_x.csv", "prediction.csv", "events.json"];
    for kind in ["chirp", "lorenz", "spikes"] {
        let a = simulate(work, &format!("{kind}_simulate.json"), &format!("{kind}_a"));
        let b = simulate(work, &format!("{kind}_simulate.json"), &format!("{kind}_b"));
        diffs
            .extend(same_files(&a, &b, &["obs.csv", "truth.json"]).into_iter().map(|f| format!("simulate {kind} {f}")));

        let mut cfg = fit_config(&format!("{kind}_fit.json"), &a, &work.join(format!("{kind}_t1")));
        cfg["em"]["iterations"] = json!(2);
        cfg["em"]["smc"]["particles"] = json!(400);
        let cfg = write_json(&work.join(format!("{kind}_fit.json")), &cfg);
        let t1 = work.join(format!("{kind}_t1"));
        let t4 = work.join(format!("{kind}_t4"));
        let again = work.join(format!("{kind}_again"));
        run_config("fit", &cfg, &["--threads", "1"]);
        run_config("fit", &cfg, &["--threads", "4", "--out", t4.to_str().unwrap()]);
        run_config("fit", &cfg, &["--threads", "1", "--out", again.to_str().unwrap()]);
        for other in [&t4, &again] {
            diffs.extend(same_files(&t1, other, &fit_files).into_iter().map(|f| format!("fit {kind} {f}")));
        }
        let field = if kind == "chirp" { "clean" } else { "latent" };
        let est = t1.join(if kind == "chirp" { "prediction.csv" } else { "summary.csv" });
        if eval(work, &a, field, &est) != eval(work, &a, field, &est) {
            diffs.push(format!("eval {kind}"));
        }
    }

    let bench_cfg = json!({
        "schema": 1, "out": work.join("bench1.csv"), "smc_steps": [100, 200], "smc_particles": 200,
        "particle_counts": [100, 200], "particle_steps": 100, "gp_sizes": [100, 200], "repeats": 1
    });
    let cfg = write_json(&work.join("bench.json"), &bench_cfg);
    run_config("bench", &cfg, &["--threads", "1"]);
    run_config("bench", &cfg, &["--threads", "4", "--out", work.join("bench4.csv").to_str().unwrap()]);
    let keyed = |p: &Path| -> Vec<(String, String)> {
        let mut rdr = csv::Reader::from_path(p).unwrap();
        rdr.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[2].to_string())).collect()
    };
    if keyed(&work.join("bench1.csv")) != keyed(&work.join("bench4.csv")) {
        diffs.push("bench rows".into());
    }
    vec![check(
        "cli outputs byte-identical across reruns and thread counts",
        diffs.is_empty(),
        if diffs.is_empty() { "simulate, fit, eval and bench rows identical".into() } else { diffs.join(", ") },
    )]
}

type Criterion<'a> = (usize, &'a str, &'a dyn Fn() -> Vec<Check>);

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let criteria: [Criterion; 8] = [
        (1, "chirp", &|| chirp(work)),
        (2, "kalman", &kalman_equivalence),
        (3, "integral", &integral_approximation),
        (4, "scaling", &|| bench(work)),
        (5, "lorenz", &|| lorenz(work)),
        (6, "spikes", &|| spikes(work)),
        (7, "statistics", &statistical_suites),
        (8, "determinism", &|| determinism(work)),
    ];
    let mut failed = 0;
    for (i, label, run) in criteria {
        if !want(i) {
            continue;
        }
        let start = Instant::now();
        let checks = run();
        let pass = checks.iter().all(|c| c.pass);
        failed += usize::from(!pass);
        println!(
            "{} criterion {i} ({label}, {:.0} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for c in &checks {
            println!("    {} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && std::env::var_os("HSDE_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
