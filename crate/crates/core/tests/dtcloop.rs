use dtclab::dataset::CsiSample;
use dtclab::dtcloop::{
    allocate_power, build_channel_map, run_loop, sum_rate, BeamCodebook, LoopAction, LoopError, LoopPredictor,
    LoopSetup, LoopThresholds, OraclePredictor, PredictContext, ZeroPredictor,
};
use dtclab::experiments::TrainReport;
use dtclab::raytrace::{steering_vector, ArrayOrientation, Cfr, ChannelSnapshot, Direction, RadioConfig};
use dtclab::scene::{AntennaArray, Rect, Scene, Transceiver, USER_HEIGHT};
use glam::DVec3;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const HISTORY: usize = 4;
const N_SUB: usize = 6;

/// Two-path channel whose directions drift slot by slot.
fn user_track(array: &AntennaArray, seed: u64, n: usize) -> Vec<ChannelSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let az0 = rng.random_range(-1.0..1.0);
    let el0 = rng.random_range(-0.5..-0.1);
    let g0 = Complex64::from_polar(1e-4, rng.random_range(-PI..PI));
    let g1 = Complex64::from_polar(4e-5, rng.random_range(-PI..PI));
    (0..n)
        .map(|t| {
            let drift = 0.01 * t as f64;
            let mut cfr = Cfr::zeros(array.n_elements(), N_SUB);
            for (dir, g, tau) in [
                (Direction { azimuth: az0 + drift, elevation: el0 }, g0, 0.0),
                (Direction { azimuth: -az0 - drift, elevation: el0 * 0.5 }, g1, 2e-7),
            ] {
                let a = steering_vector(array, ArrayOrientation::default(), dir);
                for (m, am) in a.iter().enumerate() {
                    for k in 0..N_SUB {
                        let rot = Complex64::from_polar(1.0, -2.0 * PI * 30e3 * k as f64 * tau);
                        cfr.data[m * N_SUB + k] += g * am * rot;
                    }
                }
            }
            ChannelSnapshot {
                cfr,
                rx_position: DVec3::new(t as f64 * 0.01, 0.0, USER_HEIGHT),
                slot_index: t,
                paths: Vec::new(),
            }
        })
        .collect()
}

fn setup(array: AntennaArray) -> LoopSetup {
    LoopSetup {
        codebook: BeamCodebook::dft(array, 2).unwrap(),
        total_power_dbm: 30.0,
        noise_power_dbm: -100.0,
        history: HISTORY,
    }
}

fn users(array: &AntennaArray, n_slots: usize) -> Vec<Vec<ChannelSnapshot>> {
    (0..3).map(|u| user_track(array, u, HISTORY + n_slots)).collect()
}

#[test]
fn oracle_loop_has_unit_gain_ratio_and_no_actions() {
    let array = AntennaArray::upa(2, 2, 0.5).unwrap();
    let users = users(&array, 50);
    let mut corpus = Vec::new();
    let run = run_loop(&mut OraclePredictor, &users, &setup(array), 50, &LoopThresholds::default(), &mut corpus).unwrap();
    assert_eq!(run.records.len(), 50);
    for r in &run.records {
        assert!((r.gain_ratio - 1.0).abs() <= 1e-9);
        assert_eq!(r.nmse, 0.0);
        assert_eq!(r.action, LoopAction::None);
        let total: f64 = r.powers.iter().sum();
        assert!((total - 1000.0).abs() <= 1e-9 * 1000.0);
    }
    assert!(corpus.is_empty());
    assert_eq!(run.summary.n_retrain, 0);
}

#[test]
fn zero_predictor_retrains_on_the_window_th_slot() {
    let array = AntennaArray::upa(2, 2, 0.5).unwrap();
    let users = users(&array, 45);
    let th = LoopThresholds::default();
    let mut corpus = Vec::new();
    let run = run_loop(&mut ZeroPredictor, &users, &setup(array), 45, &th, &mut corpus).unwrap();
    let actions: Vec<LoopAction> = run.records.iter().map(|r| r.action).collect();
    for (i, a) in actions.iter().enumerate() {
        let want = if (i + 1) % th.window == 0 { LoopAction::Retrain } else { LoopAction::Recollect };
        assert_eq!(*a, want, "slot {i}");
    }
    assert_eq!(run.summary.n_retrain, 2);
    assert_eq!(run.summary.retrains[0].slot_index, HISTORY + th.window - 1);
    assert_eq!(corpus.len(), 45 * 3);
    // Every recollected window ends on the slot that was just served.
    assert_eq!(corpus[0].future, users[0][HISTORY].cfr.to_features());
    assert!(run.records.iter().all(|r| (r.nmse - 1.0).abs() < 1e-12));
}

#[test]
fn evaluate_only_leaves_corpus_untouched() {
    let array = AntennaArray::upa(2, 2, 0.5).unwrap();
    let users = users(&array, 30);
    let mut corpus = vec![CsiSample { history: vec![1.0], future: vec![2.0], scene: 0, slot_index: 0 }];
    let before = corpus.clone();
    let run = run_loop(&mut ZeroPredictor, &users, &setup(array), 30, &LoopThresholds::evaluate_only(), &mut corpus)
        .unwrap();
    assert_eq!(corpus, before);
    assert!(run.records.iter().all(|r| r.action == LoopAction::None));
}

/// Predicts zeros until it is fine-tuned, then predicts the truth.
struct Learner {
    tuned: bool,
    seen: usize,
}

impl LoopPredictor for Learner {
    fn name(&self) -> &str {
        "learner"
    }

    fn predict(&self, ctx: &PredictContext) -> Result<Vec<f64>, LoopError> {
        Ok(if self.tuned { ctx.truth.to_vec() } else { vec![0.0; ctx.truth.len()] })
    }

    fn fine_tune(&mut self, corpus: &[CsiSample], _epochs: usize) -> Result<Option<TrainReport>, LoopError> {
        self.tuned = true;
        self.seen = corpus.len();
        Ok(None)
    }
}

#[test]
fn retrain_outcome_reports_rolling_nmse_after() {
    let array = AntennaArray::upa(2, 2, 0.5).unwrap();
    let users = users(&array, 60);
    let mut learner = Learner { tuned: false, seen: 0 };
    let mut corpus = Vec::new();
    let run = run_loop(&mut learner, &users, &setup(array), 60, &LoopThresholds::default(), &mut corpus).unwrap();
    assert_eq!(run.summary.n_retrain, 1);
    let r = &run.summary.retrains[0];
    assert_eq!(learner.seen, 20 * 3);
    assert_eq!(r.corpus_size, 60);
    assert!(r.rolling_before > 0.99);
    assert_eq!(r.rolling_after, Some(0.0));
    assert!(run.records[20..].iter().all(|x| (x.gain_ratio - 1.0).abs() < 1e-9));
}

#[test]
fn short_trajectories_are_rejected() {
    let array = AntennaArray::upa(2, 2, 0.5).unwrap();
    let users = users(&array, 10);
    let mut corpus = Vec::new();
    assert!(run_loop(&mut OraclePredictor, &users, &setup(array), 11, &LoopThresholds::default(), &mut corpus).is_err());
}

#[test]
fn single_antenna_codebook_is_broadside() {
    let cb = BeamCodebook::dft(AntennaArray::single(), 1).unwrap();
    assert_eq!(cb.grid, vec![(0.0, 0.0)]);
    assert_eq!(cb.codewords, vec![vec![Complex64::new(1.0, 0.0)]]);
}

#[test]
fn line_of_sight_map_matches_friis() {
    let scene = Scene::empty(Rect::new(-40.0, -40.0, 40.0, 40.0));
    let tx = Transceiver {
        position: DVec3::new(3.0, -7.0, 25.0),
        array: AntennaArray::single(),
        tx_power_dbm: 20.0,
    };
    let radio = RadioConfig::default();
    let cb = BeamCodebook::dft(AntennaArray::single(), 1).unwrap();
    let map = build_channel_map(&scene, &tx, ArrayOrientation::default(), 10.0, &radio, &cb, 0).unwrap();
    assert_eq!((map.nx, map.ny), (8, 8));
    assert_eq!(map.n_outage(), 0);
    for c in &map.cells {
        let d = (DVec3::new(c.x, c.y, USER_HEIGHT) - tx.position).length();
        let fspl = 20.0 * (4.0 * PI * d / radio.wavelength()).log10();
        assert!((c.path_loss_db.unwrap() - fspl).abs() < 1e-9);
        assert!((c.rsrp_dbm.unwrap() - (20.0 - fspl)).abs() < 1e-9);
    }
}

/// Exhaustive power split on a `steps` grid for two or three users.
fn grid_best(gains: &[f64], total: f64, noise: f64, steps: usize) -> f64 {
    let mut best = 0.0_f64;
    match gains.len() {
        2 => {
            for i in 0..=steps {
                let p = total * i as f64 / steps as f64;
                best = best.max(sum_rate(gains, &[p, total - p], noise));
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (a, b) = (total * i as f64 / steps as f64, total * j as f64 / steps as f64);
                    best = best.max(sum_rate(gains, &[a, b, total - a - b], noise));
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

#[test]
fn water_filling_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.random_range(2..=3);
        let gains: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect();
        let total = rng.random_range(0.1..10.0);
        let noise = rng.random_range(0.05..2.0);
        let p = allocate_power(&gains, total, noise).unwrap();
        let wf = sum_rate(&gains, &p, noise);
        let grid = grid_best(&gains, total, noise, 300);
        assert!(wf >= grid * (1.0 - 1e-12), "{wf} < {grid}");
        assert!(wf <= grid * 1.01);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn water_filling_kkt(
        gains in prop::collection::vec(1e-3f64..1e3, 1..8),
        total in 1e-2f64..1e2,
        noise in 1e-3f64..10.0,
    ) {
        let p = allocate_power(&gains, total, noise).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - total).abs() <= 1e-9 * total);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let levels: Vec<f64> = p.iter().zip(&gains).filter(|(x, _)| **x > 0.0).map(|(x, g)| x + noise / g).collect();
        prop_assert!(!levels.is_empty());
        let mu = levels[0];
        for l in &levels {
            prop_assert!((l - mu).abs() <= 1e-6 * mu);
        }
        for (x, g) in p.iter().zip(&gains) {
            if *x == 0.0 {
                prop_assert!(noise / g >= mu * (1.0 - 1e-9));
            }
        }
    }
}
