//! Trains a small GPT predictor on one street trajectory and compares its
//! NMSE per prediction horizon against identity hold and a linear AR model.
//!
//! A reduced version of `dtc sweep`; the reference run uses four segments
//! and a larger model.
//!
//! ```text
//! cargo run --release --example horizon_prediction
//! ```

use dtclab::dataset::build_timeseries_dataset;
use dtclab::experiments::{horizon_sweep, train_gpt, IdentityHold, LinearAr, SequencePredictor, TrainConfig};
use dtclab::neural::GptConfig;
use dtclab::raytrace::{simulate_along_trajectory, ArrayOrientation, RadioConfig};
use dtclab::scene::{generate_urban_scene, street_route, AntennaArray, SceneSpec, Trajectory, Transceiver};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_urban_scene(1, &SceneSpec::default())?;
    let tx = Transceiver {
        position: scene.rooftop_site().ok_or("scene has no central building")?,
        array: AntennaArray::single(),
        tx_power_dbm: 30.0,
    };
    let traj = Trajectory::new(street_route(&[[-90.0, 4.0], [-50.0, 4.0]]), 10.0, 1e-3)?;
    let radio = RadioConfig::default();
    let snaps = simulate_along_trajectory(&scene, &tx, ArrayOrientation::default(), &traj, 1200, &radio, 2)?;
    let (history, horizon) = (25, 20);
    let data = build_timeseries_dataset(&snaps, history, horizon, &scene.id())?;
    let width = data.width();

    let config = GptConfig {
        n_layers: 1,
        n_heads: 4,
        d_model: 32,
        context: history + horizon,
        feature_width: width,
        mlp_ratio: 4,
    };
    let train = TrainConfig {
        epochs: 8,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let (gpt, report) = train_gpt(config, 7, &data, &train)?;
    for e in &report.epochs {
        println!("epoch {}: train loss {:.4}, val {:.4}", e.epoch, e.train_loss, e.val_score);
    }
    let ar = LinearAr::fit_select(&data, 8, horizon)?;

    let predictors: Vec<&dyn SequencePredictor> = vec![&IdentityHold, &ar, &gpt];
    let curves = horizon_sweep(&predictors, &data.test, width, horizon)?;
    println!("\n{:>14} {:>9} {:>9} {:>9} {:>12}", "model", "h=1", "h=10", "h=20", "mean 5..18");
    for (name, c) in &curves {
        let mid = c[4..18].iter().sum::<f64>() / 14.0;
        println!("{name:>14} {:>9.4} {:>9.4} {:>9.4} {mid:>12.4}", c[0], c[9], c[19]);
    }
    Ok(())
}
