//! Generates a small oracle-labeled dataset and writes it as JSON Lines.
//!
//! ```text
//! cargo run --release --example generate_data -- [out.jsonl] [n_train]
//! ```

use molkd::data::{dataset_hash, generate_dataset, read_dataset, write_dataset, DataConfig, OracleParams, SplitName};

fn main() -> molkd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "dataset.jsonl".into());
    let n_train = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = DataConfig { n_train, n_val_id: 50, n_val_ood: 50, n_test: 50, ..DataConfig::default() };
    let oracle = OracleParams::standard(cfg.n_species, cfg.cutoff)?;
    let data = generate_dataset(&cfg, &oracle, 0)?;
    for split in SplitName::ALL {
        let systems = data.split(split);
        let atoms: usize = systems.iter().map(|s| s.n_atoms()).sum();
        let max_atoms = systems.iter().map(|s| s.n_atoms()).max().unwrap_or(0);
        println!("{:8} {:5} systems, {:6} atoms, largest {max_atoms}", split.as_str(), systems.len(), atoms);
    }
    write_dataset(&data, &out)?;
    let back = read_dataset(&out)?;
    assert_eq!(dataset_hash(&back), dataset_hash(&data));
    println!("wrote {out} (hash {})", &dataset_hash(&data)[..16]);
    Ok(())
}
