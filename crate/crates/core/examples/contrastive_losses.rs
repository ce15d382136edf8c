//! Symmetric InfoNCE and the KL distillation term on a tiny hand-made batch.
//!
//!     cargo run --example contrastive_losses

use softpair::losses::{infonce_loss, kl_distillation_loss, match_probabilities, similarity_logits, ProbabilityPair};
use softpair::Matrix;

fn main() -> softpair::Result<()> {
    // three unit embeddings per side, pair i matches row i
    let img = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]])?;
    let txt = Matrix::from_rows(&[vec![0.8, 0.6], vec![0.0, 1.0], vec![0.6, 0.8]])?;
    for tau in [1.0, 0.07] {
        let logits = similarity_logits(&img, &txt, tau)?;
        let l = infonce_loss(&logits);
        println!(
            "tau {tau:<5} L_image {:.6}  L_text {:.6}  L_InfoNCE {:.6}",
            l.l_image, l.l_text, l.l_infonce
        );
    }

    let logits = similarity_logits(&img, &txt, 0.07)?;
    let p = match_probabilities(&logits);
    println!("KL(student || itself) = {:e}", kl_distillation_loss(&p, &p)?);

    // one-row example: teacher [0.75, 0.25], student [0.5, 0.5]
    let t = Matrix::from_rows(&[vec![0.75, 0.25]])?;
    let s = Matrix::from_rows(&[vec![0.5, 0.5]])?;
    let teacher = ProbabilityPair::new(t.clone(), t)?;
    let student = ProbabilityPair::new(s.clone(), s)?;
    println!("hand example KL = {:.6} (expect 0.130812)", kl_distillation_loss(&student, &teacher)?);
    Ok(())
}
