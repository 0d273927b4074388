//! Reconstructs full CSI from 1/8 pilot subcarriers with and without the
//! rendered environment views, then evaluates the models trained on the
//! origin scene on a second scene.
//!
//! A reduced version of `dtc table2`.
//!
//! ```text
//! cargo run --release --example pilot_fusion
//! ```

use dtclab::dataset::{build_fusion_dataset, FusionBuildConfig, FusionDataset};
use dtclab::experiments::report::format_table2;
use dtclab::experiments::{generalization_table, relative_degradation, train_fusion, FusionMethod, TrainConfig};
use dtclab::neural::FusionConfig;
use dtclab::raytrace::{simulate_at_positions, ArrayOrientation, RadioConfig};
use dtclab::scene::{generate_urban_scene, road_positions, AntennaArray, SceneSpec, Transceiver};

fn corpus(seed: u64, n: usize) -> Result<FusionDataset, Box<dyn std::error::Error>> {
    let scene = generate_urban_scene(seed, &SceneSpec::default())?;
    let tx = Transceiver {
        position: scene.rooftop_site().ok_or("scene has no central building")?,
        array: AntennaArray::upa(2, 2, 0.5)?,
        tx_power_dbm: 30.0,
    };
    let positions = road_positions(&scene, n, seed + 100)?;
    let snaps = simulate_at_positions(&scene, &tx, ArrayOrientation::default(), &positions, &RadioConfig::default(), 2)?;
    let build = FusionBuildConfig {
        resolution: 16,
        ..FusionBuildConfig::default()
    };
    Ok(build_fusion_dataset(&snaps, &scene, &build)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let origin = corpus(1, 400)?;
    let new = corpus(2, 100)?;
    println!(
        "origin: {} train / {} val / {} test samples, new scene: {} samples",
        origin.train.len(),
        origin.val.len(),
        origin.test.len(),
        new.all_samples().count()
    );

    let base = FusionConfig {
        n_tx: 4,
        resolution: 16,
        pilot_hidden: 128,
        head_hidden: 128,
        embed: 32,
        conv_channels: vec![4, 8],
        ..FusionConfig::default()
    };
    let train = TrainConfig {
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut models = Vec::new();
    for m in FusionMethod::ALL {
        let (model, report) = train_fusion(m.config(&base), 3, &origin, &train)?;
        println!("{}: best validation NMSE {:.4}", m.name(), report.best_val.unwrap_or(f64::NAN));
        models.push((m, model));
    }
    let refs: Vec<_> = models.iter().map(|(m, f)| (*m, f)).collect();
    let rows = generalization_table(&refs, &origin, &new)?;
    println!();
    print!("{}", format_table2(&rows));
    for m in FusionMethod::ALL {
        if let Some(d) = relative_degradation(&rows, m) {
            println!("{} relative degradation origin -> new: {d:+.3}", m.name());
        }
    }
    Ok(())
}
