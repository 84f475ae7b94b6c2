use std::path::Path;
use std::process::Command;

use sogp::config::RunConfig;
use sogp::data::{load_dataset, DataSource};
use sogp::kernels::kernel_eval;
use sogp::linalg::Mat;
use sogp::models::{elbo, Checkpoint};

fn sogp(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sogp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    dir.join(name).display().to_string()
}

fn diagnostics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("diagnostics.json")).unwrap()).unwrap()
}

fn pair<'a>(d: &'a serde_json::Value, kernel: &str, act: &str) -> &'a serde_json::Value {
    d.as_array()
        .unwrap()
        .iter()
        .find(|p| p["kernel"] == kernel && p["activation"] == act)
        .unwrap()
}

#[test]
fn spectrum_flags_the_expected_pairings() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = sogp(dir.path(), &["spectrum", "--out", "s", "--plot"]);
    assert_eq!(code, 0);
    let s = dir.path().join("s");
    let d = diagnostics(&s);
    assert_eq!(pair(&d, "arccos1", "softplus")["divergent"], false);
    let mr = pair(&d, "matern52", "relu");
    assert_eq!(mr["divergent"], true);
    assert!(!mr["mismatch_levels"].as_array().unwrap().is_empty());
    let csv = std::fs::read_to_string(s.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("kernel,activation,level,sqrt_lambda,varsigma"));
    // 3 kernels x 2 activations x 36 levels.
    assert_eq!(csv.lines().count(), 1 + 6 * 36);
    roxmltree::Document::parse(&std::fs::read_to_string(s.join("spectrum.svg")).unwrap()).unwrap();
}

#[test]
fn constant_kernel_spectrum_vanishes_beyond_level_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[spectrum]\nkernels = [\"constant\"]\nactivations = [\"relu\"]\nmax_level = 10\n",
    );
    let (code, out) = sogp(dir.path(), &["spectrum", "--config", &cfg]);
    assert_eq!(code, 0, "{out}");
    let csv = std::fs::read_to_string(dir.path().join("out/spectrum.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let level: usize = f[2].parse().unwrap();
        let root: f64 = f[3].parse().unwrap();
        if level == 0 {
            assert!(root > 0.0);
        } else {
            assert_eq!(root, 0.0, "level {level}");
        }
    }
}

#[test]
fn invalid_spectrum_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[spectrum]\nactivations = []\n");
    assert_eq!(sogp(dir.path(), &["spectrum", "--config", &cfg]).0, 1);
    let cfg = write(dir.path(), "d.toml", "[spectrum]\nkernels = [\"laplace\"]\n");
    assert_eq!(sogp(dir.path(), &["spectrum", "--config", &cfg]).0, 1);
    assert_eq!(sogp(dir.path(), &["spectrum", "--seed", "minus-one"]).0, 1);
    assert_eq!(sogp(dir.path(), &["--help"]).0, 0);
}

const SNELSON_FIT: &str = r#"
out = "run"
[model]
kernel = "matern52"
max_level = 8
base = "activations"
num_base = 8
num_orthogonal = 8
activation = "relu"
[schedule]
max_iters = 150
[predict]
grid = 120
"#;

#[test]
fn fit_then_predict_round_trips_through_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "fit.toml", SNELSON_FIT);
    let (code, out) = sogp(dir.path(), &["fit", "--config", &cfg_path, "--seed", "4"]);
    assert_eq!(code, 0, "{out}");
    let run = dir.path().join("run");

    let ck = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    assert_eq!(ck.seed, Some(4));
    let t = ck.transform.clone().unwrap();
    let data = load_dataset(&DataSource::named("snelson")).unwrap();
    let (x, y) = (t.apply_inputs(&data.x), t.apply_targets(&data.y));
    let re = elbo(&ck.model, &x, &y, x.nrows() as f64).unwrap();
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    let last: f64 = trace.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((re - last).abs() <= 1e-9 * last.abs(), "{re} vs {last}");

    let (code, out) = sogp(dir.path(), &["predict", "--config", &cfg_path, "--plot"]);
    assert_eq!(code, 0, "{out}");
    let preds = std::fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "x0,mean,variance");
    assert_eq!(preds.lines().count(), 121);
    for name in ["band.svg", "variance_terms.svg"] {
        let svg = std::fs::read_to_string(run.join(name)).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let counts: Vec<usize> = doc
            .descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .map(|n| n.attribute("points").unwrap().split_whitespace().count())
            .collect();
        assert!(!counts.is_empty() && counts.iter().all(|&c| c == 120), "{name}: {counts:?}");
    }
    for name in ["band.csv", "variance_terms.csv"] {
        assert_eq!(std::fs::read_to_string(run.join(name)).unwrap().lines().count(), 121);
    }
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "fit.toml", &SNELSON_FIT.replace("max_iters = 150", "max_iters = 5"));
    assert_eq!(sogp(dir.path(), &["fit", "--config", &cfg_path]).0, 0);
    let ck = dir.path().join("run/checkpoint.json");
    let text = std::fs::read_to_string(&ck).unwrap().replace("\"version\": 1", "\"version\": 99");
    std::fs::write(&ck, text).unwrap();
    let (code, out) = sogp(dir.path(), &["predict", "--config", &cfg_path]);
    assert_eq!(code, 1);
    assert!(out.contains("version 99"), "{out}");
}

#[test]
fn collapsed_model_predicts_the_exact_posterior_at_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,y\n");
    for i in 0..10 {
        let x = -2.0 + 0.45 * i as f64;
        csv.push_str(&format!("{x},{}\n", (1.3 * x).sin() + 0.1 * (i % 3) as f64));
    }
    let data_path = write(dir.path(), "tiny.csv", &csv);
    let cfg = format!(
        r#"
out = "run"
[data]
name = "{data_path}"
[model]
kernel = "squaredexp"
max_level = 4
base = "points"
num_base = 10
mode = "svgp"
[schedule]
max_iters = 2000
[predict]
grid = 0
"#
    );
    let cfg_path = write(dir.path(), "c.toml", &cfg);
    assert_eq!(sogp(dir.path(), &["fit", "--config", &cfg_path]).0, 0);
    assert_eq!(sogp(dir.path(), &["predict", "--config", &cfg_path]).0, 0);

    let ck = Checkpoint::load(&dir.path().join("run/checkpoint.json")).unwrap();
    let t = ck.transform.unwrap();
    let data = load_dataset(&DataSource::named(&data_path)).unwrap();
    let x = t.apply_inputs(&data.x);
    let y = t.apply_targets(&data.y);
    let k = kernel_eval(&ck.model.prior.kernel, &x, &x).unwrap();
    let noisy = &k + Mat::identity(10, 10) / ck.model.noise_precision;
    let dense_mean = &k * noisy.cholesky().unwrap().solve(&y);

    let preds = std::fs::read_to_string(dir.path().join("run/predictions.csv")).unwrap();
    for (i, line) in preds.lines().skip(1).enumerate() {
        let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        let oracle = dense_mean[i] * t.y_std + t.y_mean;
        assert!((mean - oracle).abs() < 1e-3, "row {i}: {mean} vs {oracle}");
    }
}

#[test]
fn empty_benchmark_grid_writes_a_header_only_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.toml", "[benchmark]\ndatasets = []\n");
    let (code, out) = sogp(dir.path(), &["benchmark", "--config", &cfg, "--out", "b"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("b/results.csv")).unwrap(),
        "dataset,kernel,features,M,K,L,seed,rmse,nlpd,elbo,throughput\n"
    );
}

#[test]
fn failed_benchmark_cell_exits_nonzero_and_keeps_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.toml",
        r#"
[benchmark]
datasets = ["snelson", "does-not-exist.csv"]
kernels = ["squaredexp"]
features = ["points"]
configs = [{ M = 4, K = 0, L = 4 }]
seeds = [0, 1]
schedule = { max_iters = 5, phase1_iters = 2 }
"#,
    );
    let (code, out) = sogp(dir.path(), &["benchmark", "--config", &cfg, "--out", "b"]);
    assert_eq!(code, 3, "{out}");
    let rows = sogp::bench::read_results(&dir.path().join("b/results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.dataset == "snelson" && r.elbo.is_finite()));
}

#[test]
fn snelson_three_variant_suite_reports_elbo_and_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.toml",
        r#"
[benchmark]
datasets = ["snelson"]
kernels = ["matern52"]
features = ["relu"]
configs = [{ M = 8, K = 0, L = 8 }, { M = 8, K = 0, L = 16 }, { M = 8, K = 8, L = 8 }]
seeds = [0]
test_fraction = 0.0
schedule = { max_iters = 20 }
"#,
    );
    let (code, out) = sogp(dir.path(), &["benchmark", "--config", &cfg, "--out", "b"]);
    assert_eq!(code, 0, "{out}");
    let rows = sogp::bench::read_results(&dir.path().join("b/results.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.elbo.is_finite() && r.throughput > 0.0);
        assert!(r.rmse.is_nan(), "no test split was requested");
    }
    let aggs = std::fs::read_to_string(dir.path().join("b/aggregates.csv")).unwrap();
    assert!(aggs.contains("\"M=8, K=8\""));
    assert!(out.contains("throughput"));
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let cli = <sogp_cli::Cli as clap::Parser>::try_parse_from(["sogp", "fit", "--seed", "9", "--out", "elsewhere"]).unwrap();
    let cfg: RunConfig = sogp_cli::resolve_config(&cli).unwrap();
    assert_eq!((cfg.seed, cfg.schedule.seed), (9, 9));
    assert_eq!(cfg.out, Path::new("elsewhere"));
}
