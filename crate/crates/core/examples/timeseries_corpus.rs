//! Drives a single-antenna user down a street, stores the snapshots as a
//! record stream and turns them into history/future windows.
//!
//! ```text
//! cargo run --release --example timeseries_corpus
//! ```

use dtclab::dataset::{build_timeseries_dataset, TimeseriesDataset};
use dtclab::raytrace::{simulate_along_trajectory, ArrayOrientation, RadioConfig};
use dtclab::records::{load_snapshots, save_snapshots, SnapshotMeta};
use dtclab::scene::{generate_urban_scene, street_route, AntennaArray, SceneSpec, Trajectory, Transceiver};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_urban_scene(1, &SceneSpec::default())?;
    let tx = Transceiver {
        position: scene.rooftop_site().ok_or("scene has no central building")?,
        array: AntennaArray::single(),
        tx_power_dbm: 30.0,
    };
    let radio = RadioConfig::default();
    // 10 m/s with 1 ms slots: 1000 slots cover 10 m of the 40 m segment.
    let traj = Trajectory::new(street_route(&[[-90.0, -4.0], [-50.0, -4.0]]), 10.0, 1e-3)?;
    let snaps = simulate_along_trajectory(&scene, &tx, ArrayOrientation::default(), &traj, 1000, &radio, 2)?;
    let mean_paths = snaps.iter().map(|s| s.paths.len()).sum::<usize>() as f64 / snaps.len() as f64;
    println!("{} snapshots, {mean_paths:.1} paths per slot on average", snaps.len());

    let dir = tempfile_dir()?;
    let archive = dir.join("street.dtcr");
    let meta = SnapshotMeta {
        radio,
        array: tx.array,
        orientation: ArrayOrientation::default(),
        scene_id: scene.id(),
    };
    save_snapshots(&archive, &meta, &snaps)?;
    let (_, back) = load_snapshots(&archive)?;
    assert_eq!(back.len(), snaps.len());
    println!("record stream round trip: {}", archive.display());

    let data = build_timeseries_dataset(&back, 25, 20, &scene.id())?;
    let m = &data.manifest;
    println!(
        "windows: train {}, val {}, test {} (history {}, horizon {}, {} features per slot)",
        m.counts.train,
        m.counts.val,
        m.counts.test,
        data.history(),
        data.horizon(),
        data.width()
    );
    data.save(dir.join("dataset"))?;
    let loaded = TimeseriesDataset::load(dir.join("dataset"))?;
    println!("dataset hash {}", loaded.manifest.hash());
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("dtclab_timeseries_corpus");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
