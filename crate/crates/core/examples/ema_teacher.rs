//! The EMA teacher tracks a student that is held fixed.
//!
//! After k updates toward a constant student the gap shrinks by exactly
//! `decay^k`.
//!
//!     cargo run --example ema_teacher

use softpair::model::ema_init;
use softpair::{ema_update, init_model, ModelConfig};

fn main() -> softpair::Result<()> {
    let mc = ModelConfig::new(6, 5, vec![8], 4);
    let start = init_model(1, &mc)?;
    let student = init_model(2, &mc)?;
    let decay = 0.9;
    let mut teacher = ema_init(&start, decay)?;
    let gap0 = max_gap(teacher.params(), &student);
    for k in 1..=30 {
        ema_update(&mut teacher, &student)?;
        if k % 5 == 0 {
            let gap = max_gap(teacher.params(), &student);
            println!("k {k:>2}  gap/gap0 {:.6}  decay^k {:.6}", gap / gap0, decay.powi(k));
        }
    }
    Ok(())
}

fn max_gap(a: &softpair::TwoTowerModel, b: &softpair::TwoTowerModel) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| x.max_abs_diff(y).unwrap())
        .fold(0.0, f64::max)
}
