//! Checks rotation and translation symmetry of every model family on one
//! random cluster.
//!
//! ```text
//! cargo run --release --example equivariance
//! ```

use molkd::geometry::{random_cluster, random_rotation, rotate};
use molkd::models::{Family, ModelConfig, ModelParams};
use molkd::rng::rng_from_seed;

fn main() -> molkd::Result<()> {
    let mut rng = rng_from_seed(0);
    let s = random_cluster(&mut rng, 8, 4, 4.5, 0.9);
    let r = random_rotation(&mut rng);
    let moved = s.transformed(&r, [1.0, -3.0, 2.5]);
    for family in [Family::S, Family::P, Family::G] {
        let m = ModelParams::init(ModelConfig::default_for(family), 1)?;
        let a = m.predict(&s)?;
        let b = m.predict(&moved)?;
        let force_err = a
            .forces
            .iter()
            .zip(&b.forces)
            .map(|(fa, fb)| {
                let ra = rotate(&r, *fa);
                (0..3).map(|k| (ra[k] - fb[k]).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        println!("{family}: energy {:.6} eV, |dE| {:.1e}, max force error {force_err:.1e}", a.energy, (a.energy - b.energy).abs());
    }
    Ok(())
}
