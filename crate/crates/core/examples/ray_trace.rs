//! Traces the propagation paths between the rooftop base station and one
//! street receiver, then builds the 69-subcarrier frequency response.
//!
//! ```text
//! cargo run --example ray_trace
//! ```

use dtclab::raytrace::{paths_to_cfr, trace_paths, ArrayOrientation, RadioConfig};
use dtclab::scene::{generate_urban_scene, AntennaArray, SceneSpec, USER_HEIGHT};
use glam::DVec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_urban_scene(1, &SceneSpec::default())?;
    let tx = scene.rooftop_site().ok_or("scene has no central building")?;
    let rx = DVec3::new(-60.0, -4.0, USER_HEIGHT);
    let radio = RadioConfig::default();
    let paths = trace_paths(&scene, tx, rx, 2, &radio)?;

    println!("{} paths from ({:.1}, {:.1}, {:.1}) to ({}, {}, {})", paths.len(), tx.x, tx.y, tx.z, rx.x, rx.y, rx.z);
    println!("{:>5} {:>11} {:>9} {:>10}", "order", "delay (ns)", "gain dB", "AoD az");
    for p in &paths {
        println!(
            "{:>5} {:>11.2} {:>9.2} {:>10.1}",
            p.order(),
            p.delay * 1e9,
            20.0 * p.gain.norm().log10(),
            p.aod.azimuth.to_degrees()
        );
    }

    let array = AntennaArray::upa(2, 2, 0.5)?;
    let cfr = paths_to_cfr(&paths, &radio, &array, ArrayOrientation::default());
    println!("\n|H| on antenna 0 every 8th subcarrier (dB):");
    let row: Vec<String> = (0..radio.n_subcarriers)
        .step_by(8)
        .map(|k| format!("{:.1}", 20.0 * cfr.get(0, k).norm().log10()))
        .collect();
    println!("  {}", row.join("  "));
    println!("energy per antenna and subcarrier: {:.3e}", cfr.energy() / (array.n_elements() * radio.n_subcarriers) as f64);
    Ok(())
}
