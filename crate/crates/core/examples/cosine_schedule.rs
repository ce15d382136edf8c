//! SGD with momentum under a cosine learning-rate schedule.
//!
//!     cargo run --example cosine_schedule

use softpair::CosineSchedule;

fn main() -> softpair::Result<()> {
    let total = 20;
    let sched = CosineSchedule::new(3e-3, total, 0.0)?;
    for step in (0..=total).step_by(4) {
        let lr = sched.lr_at(step)?;
        let bar = "#".repeat((lr / 3e-3 * 40.0).round() as usize);
        println!("step {step:>2}  lr {lr:.6}  {bar}");
    }

    // momentum on a 1-D quadratic f(x) = x^2 / 2, same recipe as training
    let (mut x, mut v) = (1.0_f64, 0.0_f64);
    let sched = CosineSchedule::new(0.1, 100, 0.0)?;
    for step in 0..100 {
        let g = x;
        v = 0.9 * v + g;
        x -= sched.lr_at(step)? * v;
    }
    println!("quadratic after 100 steps: x = {x:.3e}");
    Ok(())
}
