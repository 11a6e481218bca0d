//! Inference throughput of the three model families at default sizes.
//!
//! ```text
//! cargo run --release --example profile_models
//! ```

use molkd::analysis::{inference_trace, profile_throughput};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::models::{Family, ModelConfig, ModelParams};

fn main() -> molkd::Result<()> {
    let cfg = DataConfig { n_train: 0, n_val_id: 0, n_val_ood: 0, n_test: 100, ..DataConfig::default() };
    let data = generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff)?, 0)?;
    for family in [Family::S, Family::P, Family::G] {
        let m = ModelParams::init(ModelConfig::default_for(family), 0)?;
        let t = profile_throughput(&m, &data.test, 5)?;
        let ops = inference_trace(&m, &data.test[0])?.len();
        println!("{family}: {:8.1} systems/s, {} parameters, {ops} tape ops per system", t.samples_per_sec, m.params.n_values());
    }
    Ok(())
}
