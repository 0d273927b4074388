//! Path-loss and best-beam RSRP coverage map of the origin scene, written
//! as CSV and drawn as a coarse ASCII heat map.
//!
//! ```text
//! cargo run --release --example channel_map -- [resolution_m]
//! ```

use dtclab::dtcloop::{build_channel_map, BeamCodebook};
use dtclab::raytrace::{ArrayOrientation, RadioConfig};
use dtclab::scene::{generate_urban_scene, AntennaArray, SceneSpec, Transceiver};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let resolution: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8.0);
    let scene = generate_urban_scene(1, &SceneSpec::default())?;
    let tx = Transceiver {
        position: scene.rooftop_site().ok_or("scene has no central building")?,
        array: AntennaArray::upa(4, 4, 0.5)?,
        tx_power_dbm: 30.0,
    };
    let codebook = BeamCodebook::dft(tx.array, 1)?;
    let map = build_channel_map(
        &scene,
        &tx,
        ArrayOrientation::default(),
        resolution,
        &RadioConfig::default(),
        &codebook,
        2,
    )?;
    let path = std::env::temp_dir().join("dtclab_channel_map.csv");
    map.write_csv(&path)?;
    println!("{}x{} cells, {} in outage, written to {}", map.nx, map.ny, map.n_outage(), path.display());

    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let (lo, hi) = (-90.0, -20.0);
    println!("RSRP from {lo} dBm (' ') to {hi} dBm ('@'), 'x' = outage, north up:");
    for iy in (0..map.ny).rev() {
        let row: String = (0..map.nx)
            .map(|ix| match map.cell(ix, iy).rsrp_dbm {
                None => 'x',
                Some(r) => {
                    let t = ((r - lo) / (hi - lo)).clamp(0.0, 0.999);
                    shades[(t * shades.len() as f64) as usize]
                }
            })
            .collect();
        println!("  {row}");
    }
    Ok(())
}
