//! Splitting a global batch across simulated workers, gathering embeddings so
//! every worker sees all negatives, gives the same loss and gradients as a
//! single worker.
//!
//!     cargo run --example all_gather

use softpair::losses::LossOptions;
use softpair::model::ema_init;
use softpair::train::sharded_loss;
use softpair::{init_model, Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> softpair::Result<()> {
    let mc = ModelConfig::new(10, 7, vec![16], 8);
    let model = init_model(3, &mc)?;
    let teacher = ema_init(&init_model(4, &mc)?, 0.99)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 16;
    let img = random(&mut rng, n, 10)?;
    let txt = random(&mut rng, n, 7)?;
    let opts = LossOptions::with_alpha(1.0);

    let single = sharded_loss(&model, teacher.params(), &img, &txt, 1, opts)?;
    for workers in [2, 4, 8] {
        let r = sharded_loss(&model, teacher.params(), &img, &txt, workers, opts)?;
        println!(
            "{workers} workers x {} rows: total {:.12} (1 worker {:.12}), max grad diff {:.2e}",
            n / workers,
            r.total,
            single.total,
            r.grads.max_abs_diff(&single.grads)?
        );
    }
    Ok(())
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> softpair::Result<Matrix> {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}
