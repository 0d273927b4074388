//! Closed loop over two moving users: a one-step GPT predicts each user's
//! next-slot CSI, the base station picks beams and water-fills power, and
//! the rolling prediction error decides when to recollect data or fine-tune.
//!
//! ```text
//! cargo run --release --example closed_loop
//! ```

use dtclab::dataset::{build_timeseries_dataset, TimeseriesDataset, MAX_HORIZON};
use dtclab::dtcloop::{
    run_loop, BeamCodebook, GptLoopPredictor, LoopPredictor, LoopSetup, LoopSummary, LoopThresholds, OraclePredictor,
    ZeroPredictor,
};
use dtclab::experiments::{train_gpt, TrainConfig};
use dtclab::neural::GptConfig;
use dtclab::raytrace::{simulate_along_trajectory, ArrayOrientation, ChannelSnapshot, RadioConfig};
use dtclab::scene::{generate_urban_scene, street_route, AntennaArray, SceneSpec, Trajectory, Transceiver};

const HISTORY: usize = 25;
const TRAIN_SLOTS: usize = 1000;
const LOOP_SLOTS: usize = 100;

fn print_summary(s: &LoopSummary) {
    println!(
        "{:>6}: mean NMSE {:.4}, mean gain ratio {:.4} (min {:.4}), recollect {}, retrain {}, corpus +{}",
        s.predictor, s.mean_nmse, s.mean_gain_ratio, s.min_gain_ratio, s.n_recollect, s.n_retrain, s.corpus_added
    );
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_urban_scene(1, &SceneSpec::default())?;
    let array = AntennaArray::upa(2, 2, 0.5)?;
    let tx = Transceiver {
        position: scene.rooftop_site().ok_or("scene has no central building")?,
        array,
        tx_power_dbm: 30.0,
    };
    let radio = RadioConfig::default();
    let routes = [[[-90.0, -4.0], [-30.0, -4.0]], [[90.0, 4.0], [30.0, 4.0]]];
    let mut users: Vec<Vec<ChannelSnapshot>> = Vec::new();
    let mut parts = Vec::new();
    for route in &routes {
        let traj = Trajectory::new(street_route(route), 10.0, 1e-3)?;
        let snaps = simulate_along_trajectory(
            &scene,
            &tx,
            ArrayOrientation::default(),
            &traj,
            TRAIN_SLOTS + LOOP_SLOTS,
            &radio,
            2,
        )?;
        parts.push(build_timeseries_dataset(&snaps[..TRAIN_SLOTS], HISTORY, 1, &scene.id())?);
        users.push(snaps[TRAIN_SLOTS - HISTORY..].to_vec());
    }
    let data = TimeseriesDataset::merge(parts)?;

    let config = GptConfig {
        n_layers: 1,
        n_heads: 4,
        d_model: 32,
        context: HISTORY + MAX_HORIZON,
        feature_width: data.width(),
        mlp_ratio: 4,
    };
    let train = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let (model, report) = train_gpt(config, 11, &data, &train)?;
    println!("one-step GPT: best validation NMSE {:.4}", report.best_val.unwrap_or(f64::NAN));

    let setup = LoopSetup {
        codebook: BeamCodebook::dft(array, 2)?,
        total_power_dbm: 30.0,
        noise_power_dbm: radio.noise_power_dbm(),
        history: HISTORY,
    };
    println!("{} codewords, noise {:.1} dBm\n", setup.codebook.len(), setup.noise_power_dbm);

    let thresholds = LoopThresholds::default();
    let mut predictors: Vec<Box<dyn LoopPredictor>> = vec![
        Box::new(OraclePredictor),
        Box::new(ZeroPredictor),
        Box::new(GptLoopPredictor { model, train }),
    ];
    for p in predictors.iter_mut() {
        let mut corpus = data.train.clone();
        let run = run_loop(p.as_mut(), &users, &setup, LOOP_SLOTS, &thresholds, &mut corpus)?;
        print_summary(&run.summary);
        for r in &run.summary.retrains {
            println!(
                "        retrain at slot {}: rolling NMSE {:.4} -> {}",
                r.slot_index,
                r.rolling_before,
                r.rolling_after.map_or("n/a".to_string(), |v| format!("{v:.4}"))
            );
        }
    }
    Ok(())
}
