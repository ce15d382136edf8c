//! Train on clean pairs, then classify held-in evaluation images by nearest
//! prompted label embedding and report flat hit@k against chance.
//!
//!     cargo run --release --example zero_shot

use softpair::config::RunConfig;
use softpair::zeroshot::{build_label_index, knn_predict};
use softpair::{data, evaluate, init_model, train, PromptTemplate};

fn main() -> softpair::Result<()> {
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/noise_free.toml"))?;
    let split = data::generate_split(&cfg.data, cfg.seed)?;
    let labels = split.vocab.label_features();
    let template = PromptTemplate::new(cfg.eval.template.clone())?;
    println!("label 0 prompt: {:?}", template.apply(&labels.names[0])?);

    let eval = &split.eval_held_in;
    let untrained = init_model(cfg.train.seed, &cfg.model_config())?;
    let before = evaluate(&untrained, &eval.image_features, &eval.image_concepts, &labels, &cfg.eval.ks)?;
    let outcome = train(&split.train, &cfg.model_config(), &cfg.train)?;
    let model = &outcome.checkpoint.model;
    let after = evaluate(model, &eval.image_features, &eval.image_concepts, &labels, &cfg.eval.ks)?;
    for (k, fh) in &after.hit_rates {
        println!(
            "FH@{k:<2} trained {fh:.4}  untrained {:.4}  chance {:.4}",
            before.hit_rates[k], after.baseline[k]
        );
    }

    let index = build_label_index(&labels.features, &labels.names, &model.text)?;
    let (z, _) = softpair::model::forward(&model.image, &eval.image_features.select_rows(&[0]))?;
    let top = knn_predict(&index, z.row(0), 3)?;
    println!("image 0 shows {:?}", eval.image_concepts[0].iter().map(|&c| &labels.names[c]).collect::<Vec<_>>());
    for nb in top {
        println!("  {}  cos {:.3}", index.labels()[nb.label], nb.similarity);
    }
    Ok(())
}
