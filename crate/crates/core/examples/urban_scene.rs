//! Generates the origin and new urban scenes, saves them as JSON and renders
//! the four depth views seen from a street position.
//!
//! ```text
//! cargo run --example urban_scene -- [seed]
//! ```

use dtclab::dataset::render_env_views;
use dtclab::scene::{generate_urban_scene, save_scene, SceneSpec, USER_HEIGHT};
use glam::DVec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let spec = SceneSpec::default();
    for (label, s) in [("origin", seed), ("new", seed + 1)] {
        let scene = generate_urban_scene(s, &spec)?;
        let tallest = scene.buildings.iter().map(|b| b.height).fold(0.0, f64::max);
        println!(
            "{label:>6} scene seed {s}: id {}, {} buildings, {} vehicles, {} roads, tallest {tallest:.1} m",
            scene.id(),
            scene.buildings.len(),
            scene.vehicles.len(),
            scene.roads.len()
        );
        if let Some(site) = scene.rooftop_site() {
            println!("       rooftop base station at ({:.1}, {:.1}, {:.1})", site.x, site.y, site.z);
        }
        let path = std::env::temp_dir().join(format!("dtclab_scene_{label}.json"));
        save_scene(&scene, &path)?;
        println!("       saved to {}", path.display());
    }

    let scene = generate_urban_scene(seed, &spec)?;
    let rx = DVec3::new(-60.0, -4.0, USER_HEIGHT);
    let views = render_env_views(&scene, rx, 4, 16);
    println!("\ndepth views at ({}, {}), 16x16, metres (row 8):", rx.x, rx.y);
    for v in 0..views.n_views {
        let row: Vec<String> = (0..views.resolution).map(|c| format!("{:5.0}", views.pixel(v, 8, c))).collect();
        println!("  heading {:3}: {}", 90 * v, row.join(""));
    }
    Ok(())
}
