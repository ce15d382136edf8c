//! Generates a held-in / held-out split, writes it to disk, and reads it back.
//!
//!     cargo run --example synthetic_data

use softpair::config::RunConfig;
use softpair::data;

fn main() -> softpair::Result<()> {
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/noisy_ablation.toml"))?;
    let split = data::generate_split(&cfg.data, cfg.seed)?;
    println!(
        "vocab {} concepts, image dim {}, text dim {}",
        split.vocab.len(),
        split.vocab.image_dim(),
        split.vocab.text_dim()
    );
    println!("held-out concepts: {:?}", split.held_out);
    println!("train pairs: {}", split.train.len());
    println!("first image depicts {:?}, caption mentions {:?}", split.train.image_concepts[0], split.train.text_concepts[0]);

    let dir = std::env::temp_dir().join(format!("softpair-example-{}", std::process::id()));
    data::save_dataset(&split.train, &dir)?;
    let back = data::load_dataset(&dir)?;
    // features are stored as f32 on disk
    let err = back.image_features.max_abs_diff(&split.train.image_features)?;
    println!("reloaded {} pairs from {}, max abs diff {err:.2e}", back.len(), dir.display());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
