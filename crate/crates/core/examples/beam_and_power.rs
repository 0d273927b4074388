//! Beam selection from a DFT codebook and water-filling power allocation,
//! checked against an exhaustive power grid.
//!
//! ```text
//! cargo run --example beam_and_power
//! ```

use dtclab::dtcloop::{allocate_power, select_beam, sum_rate, BeamCodebook};
use dtclab::raytrace::{paths_to_cfr, trace_paths, ArrayOrientation, RadioConfig};
use dtclab::scene::{generate_urban_scene, AntennaArray, SceneSpec, USER_HEIGHT};
use glam::DVec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_urban_scene(1, &SceneSpec::default())?;
    let bs = scene.rooftop_site().ok_or("scene has no central building")?;
    let array = AntennaArray::upa(4, 4, 0.5)?;
    let codebook = BeamCodebook::dft(array, 2)?;
    let radio = RadioConfig::default();

    let users = [[-60.0, -4.0], [4.0, 70.0], [60.0, 4.0]];
    let mut gains = Vec::new();
    for [x, y] in users {
        let paths = trace_paths(&scene, bs, DVec3::new(x, y, USER_HEIGHT), 2, &radio)?;
        let cfr = paths_to_cfr(&paths, &radio, &array, ArrayOrientation::default());
        let beam = select_beam(&cfr, &codebook)?;
        let (u, v) = codebook.grid[beam.index];
        println!(
            "user at ({x:>5}, {y:>5}): beam {:>2} (u {u:+.3}, v {v:+.3}), gain {:.1} dB",
            beam.index,
            10.0 * beam.gain.log10()
        );
        gains.push(beam.gain);
    }

    // Powers in mW, noise scaled so the users sit at moderate SNR.
    let noise = gains.iter().cloned().fold(f64::INFINITY, f64::min) * 10.0;
    let total = 100.0;
    let p = allocate_power(&gains, total, noise)?;
    let rate = sum_rate(&gains, &p, noise);
    println!("\nwater-filling: powers {p:.2?} mW, sum rate {rate:.4} bit/s/Hz");

    let steps = 200;
    let mut best = 0.0_f64;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let p0 = total * i as f64 / steps as f64;
            let p1 = total * j as f64 / steps as f64;
            best = best.max(sum_rate(&gains, &[p0, p1, total - p0 - p1], noise));
        }
    }
    println!("grid search (step {:.1} mW): sum rate {best:.4} bit/s/Hz", total / steps as f64);
    Ok(())
}
