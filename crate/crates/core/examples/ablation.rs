//! Contrastive-only (C) versus contrastive plus EMA distillation (C+D) on
//! noisy pairs, scored on concepts never seen in training.
//!
//!     cargo run --release --example ablation [seeds]

use softpair::commands::Ablation;
use softpair::config::RunConfig;
use softpair::{data, evaluate, train};

fn main() -> softpair::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let base = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/noisy_ablation.toml"))?;
    let mut sums = [0.0; 2];
    for seed in 1..=seeds {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        let split = data::generate_split(&cfg.data, seed)?;
        let held_out = split.eval_held_out.as_ref().expect("config holds out concepts");
        let labels = split.vocab.label_features();
        let mut row = Vec::new();
        for (i, arm) in [Ablation::Contrastive, Ablation::ContrastiveDistill].into_iter().enumerate() {
            let mut c = cfg.clone();
            arm.apply(&mut c);
            let out = train(&split.train, &c.model_config(), &c.train)?;
            let r = evaluate(&out.checkpoint.model, &held_out.image_features, &held_out.image_concepts, &labels, &[1])?;
            let last = out.metrics.last().map(|m| m.total).unwrap_or(f64::NAN);
            sums[i] += r.hit_rates[&1];
            row.push(format!("{arm:?}: FH@1 {:.4} final loss {last:.4}", r.hit_rates[&1]));
        }
        println!("seed {seed}: {}", row.join(" | "));
    }
    let n = seeds as f64;
    println!("mean held-out FH@1: C {:.4}  C+D {:.4}", sums[0] / n, sums[1] / n);
    Ok(())
}
