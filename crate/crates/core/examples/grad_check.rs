//! Central finite differences against the hand-written backward pass, then
//! the same check with a deliberately corrupted gradient.
//!
//!     cargo run --release --example grad_check

use softpair::gradcheck::{run_grad_check, GradCheckConfig};
use softpair::model::Gradients;

fn corrupt(g: &mut Gradients) {
    let w = &mut g.image[0].weight;
    let v = w.get(0, 0);
    w.set(0, 0, v * 1.01 + 1e-4);
}

fn main() -> softpair::Result<()> {
    let cfg = GradCheckConfig {
        trials: 10,
        ..GradCheckConfig::default()
    };
    let ok = run_grad_check(&cfg, 7, None)?;
    println!(
        "{} trials, {} coordinates, max rel err {:.3e} (tolerance {:e}) -> {}",
        ok.trials,
        ok.coordinates,
        ok.max_rel_error,
        ok.tolerance,
        if ok.passed() { "pass" } else { "FAIL" }
    );
    let bad = run_grad_check(&cfg, 7, Some(corrupt))?;
    let w = &bad.worst;
    println!(
        "corrupted: max rel err {:.3e} at trial {} {}[{}, {}] -> {}",
        bad.max_rel_error,
        w.trial,
        w.tensor,
        w.row,
        w.col,
        if bad.passed() { "pass" } else { "FAIL" }
    );
    Ok(())
}
