//! Layer-wise CKA between two independently initialized models, and the
//! same model against itself.
//!
//! ```text
//! cargo run --release --example cka_similarity
//! ```

use molkd::analysis::{cka_matrix, probe_systems};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::models::{ModelConfig, ModelParams};

fn main() -> molkd::Result<()> {
    let cfg = DataConfig { n_train: 0, n_val_id: 80, n_val_ood: 0, n_test: 0, ..DataConfig::default() };
    let data = generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff)?, 0)?;
    let probe = probe_systems(&data.val_id, 40, 0);
    let g = ModelParams::init(ModelConfig::gnet(), 1)?;
    let p = ModelParams::init(ModelConfig::pnet(), 2)?;
    let g_taps = g.config.tap_keys();
    let p_taps = p.config.tap_keys();

    let m = cka_matrix(&g, &p, &probe, &g_taps, &p_taps)?;
    print!("{:>28}", "");
    for c in &m.cols {
        print!(" {:>8}", &c[..c.len().min(8)]);
    }
    println!();
    for (r, row) in m.rows.iter().zip(&m.values) {
        print!("{r:>28}");
        for v in row {
            print!(" {v:8.3}");
        }
        println!();
    }
    let own = cka_matrix(&p, &p, &probe, &p_taps, &p_taps)?;
    let diag: Vec<String> = (0..p_taps.len()).map(|i| format!("{:.3}", own.values[i][i])).collect();
    println!("P-Net self-similarity diagonal: {}", diag.join(" "));
    Ok(())
}
