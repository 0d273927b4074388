//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria 5 to 9 run the reference pipeline twice (1 and 4 workers), which
//! takes a while. Set `DTC_ACCEPTANCE_DIR` to keep the run directories.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{brute_force_paths, free_point, random_scene, rel};
use dtclab::dataset::{mask_features, EnvViews, FusionSample};
use dtclab::dtcloop::{allocate_power, sum_rate};
use dtclab::experiments::{cosine_similarity, nmse};
use dtclab::neural::{
    grad_check, FusionConfig, FusionInput, FusionPredictor, GptConfig, GptPredictor, HeadKind, Init, ParamStore,
    SequenceBatch, Tensor,
};
use dtclab::raytrace::{paths_to_cfr, trace_paths, ArrayOrientation, RadioConfig};
use dtclab::scene::{AntennaArray, Rect, Scene};
use glam::DVec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use std::f64::consts::PI;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn raytrace_oracle() -> Outcome {
    let t0 = Instant::now();
    let radio = RadioConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for i in 0..50 {
        let scene = random_scene(&mut rng, 3);
        let tx = free_point(&mut rng, &scene);
        let rx = free_point(&mut rng, &scene);
        let got = trace_paths(&scene, tx, rx, 2, &radio).unwrap();
        let want = brute_force_paths(&scene, tx, rx, 2, radio.wavelength());
        if got.len() != want.len() {
            return outcome(false, format!("scene {i}: {} traced vs {} enumerated", got.len(), want.len()));
        }
        for (g, w) in got.iter().zip(&want) {
            if g.order() != w.order {
                return outcome(false, format!("scene {i}: order mismatch"));
            }
            worst = worst.max(rel(g.delay, w.delay)).max((g.gain - w.gain).norm() / w.gain.norm());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst <= 1e-10 && secs < 30.0, format!("50 scenes, worst rel err {worst:.1e}, {secs:.1} s"))
}

fn analytic_channel() -> Outcome {
    let radio = RadioConfig::default();
    let lambda = radio.wavelength();
    let open = Scene::empty(Rect::new(-100.0, -100.0, 100.0, 100.0));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut los_err = 0.0_f64;
    let mut flat_err = 0.0_f64;
    for _ in 0..20 {
        let tx = DVec3::new(rng.random_range(-90.0..90.0), rng.random_range(-90.0..90.0), rng.random_range(1.0..40.0));
        let rx = DVec3::new(rng.random_range(-90.0..90.0), rng.random_range(-90.0..90.0), rng.random_range(1.0..40.0));
        let paths = trace_paths(&open, tx, rx, 0, &radio).unwrap();
        assert_eq!(paths.len(), 1);
        let d = (rx - tx).length();
        let want = lambda / (4.0 * PI * d);
        los_err = los_err.max(rel(paths[0].gain.norm(), want));
        let cfr = paths_to_cfr(&paths, &radio, &AntennaArray::single(), ArrayOrientation::default());
        assert_eq!(cfr.data.len(), 69);
        for z in &cfr.data {
            flat_err = flat_err.max(rel(z.norm(), want));
        }
    }
    let mut recip_err = 0.0_f64;
    for _ in 0..20 {
        let scene = random_scene(&mut rng, 3);
        let a = free_point(&mut rng, &scene);
        let b = free_point(&mut rng, &scene);
        let one = AntennaArray::single();
        let ab = paths_to_cfr(&trace_paths(&scene, a, b, 2, &radio).unwrap(), &radio, &one, ArrayOrientation::default());
        let ba = paths_to_cfr(&trace_paths(&scene, b, a, 2, &radio).unwrap(), &radio, &one, ArrayOrientation::default());
        let peak = ab.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (x, y) in ab.data.iter().zip(&ba.data) {
            recip_err = recip_err.max((x - y).norm() / peak);
        }
    }
    outcome(
        los_err <= 1e-12 && flat_err <= 1e-12 && recip_err <= 1e-10,
        format!("LOS rel err {los_err:.1e}, CFR flatness {flat_err:.1e}, reciprocity {recip_err:.1e} of peak"),
    )
}

fn wave(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * a + b).sin()).collect()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamStore::new();
    p.add("w", &[5, 3], Init::Normal(0.5), &mut rng);
    p.add("b", &[3], Init::Normal(0.5), &mut rng);
    let x = Tensor::new(vec![4, 5], wave(20, 0.7, 0.1)).unwrap();
    let target = wave(12, 1.3, 0.4);
    let affine = grad_check(
        &p,
        |s, g| {
            let xv = g.input(x.clone())?;
            let (w, b) = (g.param_by_name(s, "w"), g.param_by_name(s, "b"));
            let y = g.linear(xv, w, b)?;
            g.mse(y, &target)
        },
        1e-8,
    )
    .unwrap();

    let cfg = GptConfig { n_layers: 2, n_heads: 2, d_model: 8, context: 45, feature_width: 4, mlp_ratio: 2 };
    let model = GptPredictor::new(cfg, 11).unwrap();
    let (h1, f1, h2, f2) = (wave(24, 0.31, 0.0), wave(8, 0.31, 2.0), wave(24, 0.17, 1.0), wave(8, 0.17, 3.0));
    let batch = SequenceBatch::from_windows([(&h1[..], &f1[..]), (&h2[..], &f2[..])], 4);
    let gpt = grad_check(
        &model.params,
        |s, g| GptPredictor { config: cfg, params: s.clone() }.loss(g, &batch),
        1e-4,
    )
    .unwrap();

    let sample = |seed: f64| {
        let target = wave(12, 0.9, seed);
        let pilots = vec![0, 3];
        FusionSample {
            input: mask_features(&target, 1, 6, &pilots),
            pilots,
            views: EnvViews {
                depths: wave(128, 0.23, seed).into_iter().map(|d| 5.0 + 4.0 * d).collect(),
                n_views: 2,
                resolution: 8,
                rx_position: DVec3::ZERO,
            },
            target,
            scene: 0,
            slot_index: 0,
        }
    };
    let samples = [sample(0.0), sample(1.5)];
    let refs: Vec<&FusionSample> = samples.iter().collect();
    let targets: Vec<f64> = samples.iter().flat_map(|s| s.target.clone()).collect();
    let mut fusion_worst = 0.0_f64;
    let mut fusion_ok = true;
    for use_env in [false, true] {
        for head in [HeadKind::Mlp, HeadKind::Attention] {
            let cfg = FusionConfig {
                n_tx: 1,
                n_subcarriers: 6,
                use_env,
                head,
                pilot_hidden: 6,
                embed: 4,
                head_hidden: 6,
                n_heads: 2,
                n_views: 2,
                resolution: 8,
                conv_channels: vec![2, 2],
                max_depth: 10.0,
            };
            let model = FusionPredictor::new(cfg.clone(), 5).unwrap();
            let input = FusionInput::from_samples(&refs, &cfg);
            let r = grad_check(
                &model.params,
                |s, g| FusionPredictor { config: cfg.clone(), params: s.clone() }.loss(g, &input, &targets),
                1e-4,
            )
            .unwrap();
            fusion_worst = fusion_worst.max(r.max_rel_err);
            fusion_ok &= r.passed;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        affine.passed && gpt.passed && fusion_ok && secs < 60.0,
        format!(
            "affine {:.1e}, gpt {:.1e}, fusion {:.1e}, {secs:.1} s",
            affine.max_rel_err, gpt.max_rel_err, fusion_worst
        ),
    )
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    let mut cos_err = 0.0_f64;
    for _ in 0..200 {
        let n = 2 * rng.random_range(1..70);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled = |v: &[f64], s: f64| v.iter().map(|x| s * x).collect::<Vec<f64>>();
        ok &= nmse(&t, &t).unwrap() == 0.0;
        ok &= nmse(&vec![0.0; n], &t).unwrap() == 1.0;
        ok &= nmse(&scaled(&t, 2.0), &t).unwrap() == 1.0;
        ok &= nmse(&scaled(&t, 0.5), &t).unwrap() == 0.25;
        cos_err = cos_err
            .max((cosine_similarity(&scaled(&t, a), &t).unwrap() - 1.0).abs())
            .max((cosine_similarity(&scaled(&t, -a), &t).unwrap() + 1.0).abs())
            .max((cosine_similarity(&scaled(&p, a), &t).unwrap() - cosine_similarity(&p, &t).unwrap()).abs());
    }
    outcome(ok && cos_err <= 1e-12, format!("nmse cases exact: {ok}, worst cosine err {cos_err:.1e}"))
}

/// Output of one `dtc reproduce` run.
struct RunDir {
    dir: PathBuf,
    wall_s: f64,
}

impl RunDir {
    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.dir.join(rel)).unwrap()).unwrap()
    }

    fn bytes(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.dir.join(rel)).unwrap_or_default()
    }
}

fn reproduce(root: &Path, workers: usize) -> Result<RunDir, String> {
    let dir = root.join(format!("workers_{workers}"));
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dtc"))
        .args(["reproduce", "-q", "--workers", &workers.to_string(), "--config"])
        .arg(config)
        .arg("-o")
        .arg(&dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(RunDir { dir, wall_s: t0.elapsed().as_secs_f64() })
}

fn table_nmse(report: &Value, method: &str, scene: &str) -> f64 {
    report["table2"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["method"] == method && r["scene"] == scene)
        .and_then(|r| r["nmse"].as_f64())
        .unwrap()
}

fn fusion_trend(run: &RunDir) -> Outcome {
    let r = run.json("report.json");
    let wowei = table_nmse(&r, "rs_wowei", "origin");
    let wwei = table_nmse(&r, "rs_wwei", "origin");
    let fusion = table_nmse(&r, "fusion", "origin");
    let budget: f64 = ["rs_wowei", "rs_wwei", "fusion"]
        .iter()
        .map(|m| r["extra"]["train_seconds"][m].as_f64().unwrap())
        .sum();
    let ratio = wwei / wowei;
    outcome(
        ratio <= 0.6 && fusion <= wowei && budget <= 600.0,
        format!(
            "rs_wowei {wowei:.4}, rs_wwei {wwei:.4} (ratio {ratio:.3}, need <= 0.6), fusion {fusion:.4}, training {budget:.0} s"
        ),
    )
}

fn generalization_trend(run: &RunDir) -> Outcome {
    let r = run.json("report.json");
    let deg = |m: &str| {
        let o = table_nmse(&r, m, "origin");
        (table_nmse(&r, m, "new") - o) / o
    };
    let (fusion, wowei) = (deg("fusion"), deg("rs_wowei"));
    outcome(
        fusion <= wowei,
        format!("relative degradation fusion {fusion:.3} vs rs_wowei {wowei:.3}"),
    )
}

fn horizon_trend(run: &RunDir) -> Outcome {
    let r = run.json("report.json");
    let mid = |m: &str| {
        let c: Vec<f64> = r["horizon_nmse"][m].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        c[4..18].iter().sum::<f64>() / 14.0
    };
    let (gpt, hold, ar) = (mid("gpt"), mid("identity_hold"), mid("linear_ar"));
    outcome(
        gpt < hold && gpt < ar,
        format!("mean NMSE h=5..18: gpt {gpt:.4}, identity_hold {hold:.4}, linear_ar {ar:.4}"),
    )
}

fn closed_loop(run: &RunDir) -> Outcome {
    let log = String::from_utf8(run.bytes("loop_oracle_log.jsonl")).unwrap();
    let mut oracle_err = 0.0_f64;
    let mut slots = 0;
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        oracle_err = oracle_err.max((rec["gain_ratio"].as_f64().unwrap() - 1.0).abs());
        slots += 1;
    }
    let summary = run.json("loop_summary.json");
    let gain = summary["predictor"]["mean_gain_ratio"].as_f64().unwrap();
    let test_nmse = run.json("eval.json")["loop_gpt_one_step_nmse"].as_f64().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut wf_gap = 0.0_f64;
    for _ in 0..100 {
        let gains: Vec<f64> = (0..2).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect();
        let total = rng.random_range(0.1..10.0);
        let noise = rng.random_range(0.05..2.0);
        let wf = sum_rate(&gains, &allocate_power(&gains, total, noise).unwrap(), noise);
        let grid = (0..=1000)
            .map(|i| {
                let p = total * i as f64 / 1000.0;
                sum_rate(&gains, &[p, total - p], noise)
            })
            .fold(0.0, f64::max);
        wf_gap = wf_gap.max((wf - grid).abs() / grid);
    }
    outcome(
        slots > 0 && oracle_err <= 1e-9 && test_nmse <= 0.05 && gain >= 0.9 && wf_gap <= 0.01,
        format!(
            "oracle {slots} slots, max |ratio-1| {oracle_err:.1e}; predictor test NMSE {test_nmse:.4}, mean gain ratio {gain:.4}; water-filling gap {wf_gap:.1e}"
        ),
    )
}

fn reproducibility(a: &RunDir, b: &RunDir) -> Outcome {
    let same = ["curve.csv", "table2.csv"].iter().all(|f| {
        let x = a.bytes(f);
        !x.is_empty() && x == b.bytes(f)
    });
    let slowest = a.wall_s.max(b.wall_s);
    outcome(
        same && slowest <= 1200.0,
        format!(
            "runs with 1 and 4 workers, curve.csv/table2.csv identical: {same}, slowest {slowest:.0} s"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "ray-tracer oracle equivalence", raytrace_oracle());
    report(2, "analytic channel checks", analytic_channel());
    report(3, "gradient suite", gradients());
    report(4, "metric properties", metric_properties());

    let tmp = tempfile::tempdir().unwrap();
    let root = std::env::var_os("DTC_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    match (reproduce(&root, 1), reproduce(&root, 4)) {
        (Ok(a), Ok(b)) => {
            report(5, "fusion trend", fusion_trend(&a));
            report(6, "generalization trend", generalization_trend(&a));
            report(7, "horizon trend", horizon_trend(&a));
            report(8, "closed-loop sanity", closed_loop(&a));
            report(9, "end-to-end reproducibility", reproducibility(&a, &b));
        }
        (a, b) => {
            let err = a.err().or(b.err()).unwrap_or_default();
            for (n, name) in [(5, "fusion trend"), (6, "generalization trend"), (7, "horizon trend"), (8, "closed-loop sanity"), (9, "end-to-end reproducibility")] {
                report(n, name, outcome(false, format!("reproduce failed: {}", err.trim())));
            }
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
