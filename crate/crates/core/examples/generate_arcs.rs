//! Generate a synthetic arc corpus, split it and write JSON Lines files.
//!
//! ```text
//! cargo run --release --example generate_arcs -- /tmp/arcs
//! ```

use vmat_latent::arcdata::save_dataset;
use vmat_latent::synthgen::{channel_medians, generate_dataset, split, GeneratorConfig};

fn main() -> vmat_latent::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "arcs".into());
    std::fs::create_dir_all(&out)?;

    let cfg = GeneratorConfig {
        n_arcs: 100,
        seed: 7,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg)?;
    let (train, val) = split(&ds, 0.9, cfg.seed)?;
    let (pos, gap) = channel_medians(&ds);
    println!("{} arcs ({} train / {} val)", ds.len(), train.len(), val.len());
    println!("median leaf position {pos:.2} mm, median gap {gap:.2} mm");

    let a = &ds.arcs[0];
    let widest = (0..80).map(|c| a.gap(c, 40)).fold(0.0, f64::max);
    println!("arc {}: widest central-leaf gap {widest:.1} mm", a.id());

    save_dataset(&train, format!("{out}/train.jsonl"))?;
    save_dataset(&val, format!("{out}/val.jsonl"))?;
    println!("wrote {out}/train.jsonl and {out}/val.jsonl");
    Ok(())
}
