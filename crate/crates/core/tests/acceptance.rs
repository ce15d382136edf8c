//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softpair::config::RunConfig;
use softpair::data::{self, SyntheticSplit};
use softpair::gradcheck::{run_grad_check, GradCheckConfig};
use softpair::losses::{
    combined_loss, infonce_loss, kl_distillation_loss, LogitMatrix, LossOptions, ProbabilityPair,
};
use softpair::math::Matrix;
use softpair::model::{ema_init, init_model, ModelConfig};
use softpair::optim::CosineSchedule;
use softpair::tensor_io::{self, Dtype};
use softpair::train::{self, sharded_loss, TrainConfig};
use softpair::zeroshot::{self, flat_hit_at_k, knn_predict, LabelIndex};
use softpair::Error;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn single_core<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn err(e: Error) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        trials: 100,
        ..GradCheckConfig::default()
    };
    let report = run_grad_check(&cfg, softpair::gradcheck::DEFAULT_SEED, None).map_err(err)?;
    let elapsed = start.elapsed();
    let w = &report.worst;
    check(
        report.max_rel_error <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "{} trials, {} coordinates, max rel err {:.3e} at {}[{},{}] (trial {}), {:.1}s",
            report.trials,
            report.coordinates,
            report.max_rel_error,
            w.tensor,
            w.row,
            w.col,
            w.trial,
            elapsed.as_secs_f64()
        ),
    )
}

fn closed_forms() -> Outcome {
    let id = LogitMatrix::new(Matrix::identity(2)).map_err(err)?;
    let got = infonce_loss(&id).l_infonce;
    let e = std::f64::consts::E;
    let want = -(e / (e + 1.0)).ln();
    let mut worst_equal: f64 = 0.0;
    for n in 2..=64 {
        let flat = LogitMatrix::new(Matrix::new(n, n, vec![0.37; n * n]).map_err(err)?).map_err(err)?;
        worst_equal = worst_equal.max((infonce_loss(&flat).l_infonce - (n as f64).ln()).abs());
    }
    check(
        (got - want).abs() <= 1e-9 && (got - 0.313262).abs() < 5e-7 && worst_equal <= 1e-12,
        format!(
            "identity N=2: {got:.9} (want {want:.9}); all-equal N=2..64 max |L - ln N| = {worst_equal:.1e}"
        ),
    )
}

fn distillation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mc = ModelConfig::new(6, 5, vec![8], 4);
    let mut worst_kl: f64 = 0.0;
    let mut worst_total: f64 = 0.0;
    for trial in 0..20 {
        let student = init_model(trial, &mc).map_err(err)?;
        let teacher = ema_init(&student, 0.9).map_err(err)?;
        let n = [2, 4, 8][trial as usize % 3];
        let x = Matrix::new(n, 6, (0..n * 6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .map_err(err)?;
        let y = Matrix::new(n, 5, (0..n * 5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .map_err(err)?;
        let r = combined_loss(&student, &teacher, &x, &y, 1.0).map_err(err)?;
        worst_kl = worst_kl.max(r.l_kl.abs());
        worst_total = worst_total.max((r.total - r.l_infonce).abs());
    }
    let t = Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).map_err(err)?;
    let s = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).map_err(err)?;
    let kl = kl_distillation_loss(
        &ProbabilityPair::new(s.clone(), s).map_err(err)?,
        &ProbabilityPair::new(t.clone(), t).map_err(err)?,
    )
    .map_err(err)?;
    check(
        worst_kl <= 1e-12 && worst_total <= 1e-12 && (kl - 0.130812).abs() <= 1e-6,
        format!(
            "teacher == student: max L_KL {worst_kl:.1e}, max |total - L_InfoNCE| {worst_total:.1e}; hand example KL = {kl:.6}"
        ),
    )
}

fn gather_equivalence() -> Outcome {
    let ds = data::generate(16, 96, 6, 5, &data::NoiseConfig::clean(), 5).map_err(err)?;
    let mc = ModelConfig::new(6, 5, vec![8], 4);
    let student = init_model(1, &mc).map_err(err)?;
    let teacher = init_model(2, &mc).map_err(err)?;
    let x = ds.image_features.slice_rows(0, 16);
    let y = ds.text_features.slice_rows(0, 16);
    let opts = LossOptions::with_alpha(0.5);
    let base = sharded_loss(&student, &teacher, &x, &y, 1, opts).map_err(err)?;
    let mut step_diff: f64 = 0.0;
    for w in [2, 4] {
        let r = sharded_loss(&student, &teacher, &x, &y, w, opts).map_err(err)?;
        step_diff = step_diff
            .max((r.total - base.total).abs())
            .max(r.grads.max_abs_diff(&base.grads).map_err(err)?);
    }

    let mut finals = Vec::new();
    for w in [1, 2, 4] {
        let mut tc = TrainConfig::new(2, 16 / w, w, 9);
        tc.lr = 0.05;
        tc.ema_decay = 0.9;
        finals.push(train::train(&ds, &mc, &tc).map_err(err)?.checkpoint);
    }
    let mut run_diff: f64 = 0.0;
    for c in &finals[1..] {
        for (a, b) in c.model.tensors().into_iter().zip(finals[0].model.tensors()) {
            run_diff = run_diff.max(a.max_abs_diff(b).map_err(err)?);
        }
    }
    check(
        step_diff <= 1e-9 && run_diff <= 1e-9,
        format!(
            "workers {{1,2,4}}: max loss/grad diff {step_diff:.1e}; 2-epoch final param diff {run_diff:.1e}"
        ),
    )
}

fn ema_closed_form() -> Outcome {
    let mc = ModelConfig::new(6, 5, vec![8], 4);
    let t0 = init_model(1, &mc).map_err(err)?;
    let s = init_model(2, &mc).map_err(err)?;
    let decay: f64 = 0.93;
    let mut worst: f64 = 0.0;
    for k in [1, 5, 50] {
        let mut teacher = ema_init(&t0, decay).map_err(err)?;
        for _ in 0..k {
            teacher.update(&s).map_err(err)?;
        }
        let dk = decay.powi(k);
        for ((t, a), b) in teacher
            .params()
            .tensors()
            .into_iter()
            .zip(t0.tensors())
            .zip(s.tensors())
        {
            for ((&tv, &av), &bv) in t.data().iter().zip(a.data()).zip(b.data()) {
                worst = worst.max((tv - (dk * av + (1.0 - dk) * bv)).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("k in {{1,5,50}}, decay {decay}: max deviation {worst:.1e}"))
}

fn brute_force_hit(pred: &[usize], truth: &[usize], k: usize) -> bool {
    let mut hit = false;
    for p in &pred[..k] {
        for t in truth {
            if p == t {
                hit = true;
            }
        }
    }
    hit
}

fn oracle_ranking(emb: &Matrix, query: &[f64]) -> Vec<usize> {
    let sims: Vec<f64> = (0..emb.rows())
        .map(|r| {
            let mut s = 0.0;
            for c in 0..emb.cols() {
                s += emb.get(r, c) * query[c];
            }
            s
        })
        .collect();
    let mut remaining: Vec<usize> = (0..emb.rows()).collect();
    let mut order = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if sims[remaining[i]] > sims[remaining[best]] {
                best = i;
            }
        }
        order.push(remaining.remove(best));
    }
    order
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ks = [1, 2, 5, 10];
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for _ in 0..1000 {
        let c = rng.random_range(10..40);
        let n = rng.random_range(1..20);
        let labels: Vec<usize> = (0..c).collect();
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..n {
            let mut p = labels.clone();
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
            preds.push(p);
            let m = rng.random_range(1..4);
            truth.push(labels.choose_multiple(&mut rng, m).copied().collect::<Vec<_>>());
        }
        let mut prev = 0.0;
        for k in ks {
            let got = flat_hit_at_k(&preds, &truth, k).map_err(err)?;
            let hits = preds
                .iter()
                .zip(&truth)
                .filter(|(p, t)| brute_force_hit(p, t, k))
                .count();
            if got != hits as f64 / n as f64 {
                mismatches += 1;
            }
            if got < prev {
                non_monotone += 1;
            }
            prev = got;
        }
    }

    let mut knn_mismatches = 0;
    let mut ties = 0;
    for trial in 0..200 {
        let c = 50;
        let d = 8;
        // coarse integer coordinates plus duplicated rows force exact ties
        let mut rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| f64::from(rng.random_range(-2i32..=2))).collect())
            .collect();
        for r in rows.iter_mut() {
            if r.iter().all(|&v| v == 0.0) {
                r[0] = 1.0;
            }
        }
        for _ in 0..10 {
            let (a, b) = (rng.random_range(0..c), rng.random_range(0..c));
            rows[b] = rows[a].clone();
        }
        let names = (0..c).map(|i| format!("l{i}")).collect();
        let index = LabelIndex::new(names, &Matrix::from_rows(&rows).map_err(err)?).map_err(err)?;
        let query: Vec<f64> = if trial % 2 == 0 {
            index.embeddings().row(rng.random_range(0..c)).to_vec()
        } else {
            (0..d).map(|_| f64::from(rng.random_range(-2i32..=2))).collect()
        };
        let oracle = oracle_ranking(index.embeddings(), &query);
        let got: Vec<usize> = knn_predict(&index, &query, c)
            .map_err(err)?
            .iter()
            .map(|n| n.label)
            .collect();
        let sims = knn_predict(&index, &query, c).map_err(err)?;
        ties += sims.windows(2).filter(|w| w[0].similarity == w[1].similarity).count();
        if got != oracle {
            knn_mismatches += 1;
        }
    }
    check(
        mismatches == 0 && non_monotone == 0 && knn_mismatches == 0 && ties > 0,
        format!(
            "1000 instances x k in {{1,2,5,10}}: {mismatches} mismatches, {non_monotone} monotonicity violations; knn: {knn_mismatches}/200 mismatches ({ties} tied neighbours exercised)"
        ),
    )
}

fn schedule() -> Outcome {
    let mut worst: f64 = 0.0;
    for eta_min in [0.0, 1e-4] {
        for total in [10, 1000] {
            let s = CosineSchedule::new(3e-3, total, eta_min).map_err(err)?;
            worst = worst
                .max((s.lr_at(0).map_err(err)? - 3e-3).abs())
                .max((s.lr_at(total).map_err(err)? - eta_min).abs())
                .max((s.lr_at(total / 2).map_err(err)? - (3e-3 + eta_min) / 2.0).abs());
        }
    }
    check(worst <= 1e-12, format!("lr(0), lr(T), lr(T/2) max deviation {worst:.1e}"))
}

fn split_for(cfg: &RunConfig) -> Result<SyntheticSplit, String> {
    data::generate_split(&cfg.data, cfg.seed).map_err(err)
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::load(config_path("noise_free.toml")).map_err(err)?;
    let start = Instant::now();
    let (trained, untrained, n) = single_core(|| -> Result<_, String> {
        let split = split_for(&cfg)?;
        let labels = split.vocab.label_features();
        let mc = cfg.model_config();
        let out = train::train(&split.train, &mc, &cfg.train).map_err(err)?;
        let eval = &split.eval_held_in;
        let trained = zeroshot::evaluate(&out.checkpoint.model, &eval.image_features, &eval.image_concepts, &labels, &[1])
            .map_err(err)?;
        let init = init_model(cfg.train.seed, &mc).map_err(err)?;
        let untrained = zeroshot::evaluate(&init, &eval.image_features, &eval.image_concepts, &labels, &[1])
            .map_err(err)?;
        Ok((trained.hit_at(1).unwrap(), untrained.hit_at(1).unwrap(), eval.len()))
    })?;
    let elapsed = start.elapsed();
    let p = 1.0 / 64.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let z = (untrained - p) / sigma;
    check(
        trained >= 0.90 && trained >= 50.0 * p && z.abs() <= 3.0 && elapsed < Duration::from_secs(300),
        format!(
            "held-in FH@1 {trained:.4} ({:.1}x baseline); untrained FH@1 {untrained:.4} (z = {z:+.2}); {:.1}s on one core",
            trained / p,
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation() -> Outcome {
    let base = RunConfig::load(config_path("noisy_ablation.toml")).map_err(err)?;
    let start = Instant::now();
    let seeds: Vec<u64> = (1..=10).collect();
    let mut c_scores = Vec::new();
    let mut cd_scores = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        let split = split_for(&cfg)?;
        let labels = split.vocab.label_features();
        let held_out = split
            .eval_held_out
            .as_ref()
            .ok_or("config has no held-out concepts")?;
        for distill in [false, true] {
            cfg.train.distillation = distill;
            let out = train::train(&split.train, &cfg.model_config(), &cfg.train).map_err(err)?;
            let r = zeroshot::evaluate(
                &out.checkpoint.model,
                &held_out.image_features,
                &held_out.image_concepts,
                &labels,
                &[1],
            )
            .map_err(err)?;
            let score = r.hit_at(1).unwrap();
            if distill {
                cd_scores.push(score);
            } else {
                c_scores.push(score);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, cd) = (mean(&c_scores), mean(&cd_scores));
    let elapsed = start.elapsed();
    check(
        cd >= c - 0.01 && elapsed < Duration::from_secs(900),
        format!(
            "{} seeds, held-out FH@1 mean: C {:.4}, C+D {:.4} (diff {:+.2}pp); {:.1}s",
            seeds.len(),
            c,
            cd,
            100.0 * (cd - c),
            elapsed.as_secs_f64()
        ),
    )
}

fn format_and_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = Matrix::new(7, 5, (0..35).map(|_| rng.random_range(-1e3..1e3)).collect()).map_err(err)?;
    let (back64, _) = tensor_io::decode(&tensor_io::encode(&m, Dtype::F64)).map_err(err)?;
    let bits_equal = |a: &Matrix, b: &Matrix| {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let q = tensor_io::quantize_f32(&m);
    let (back32, _) = tensor_io::decode(&tensor_io::encode(&q, Dtype::F32)).map_err(err)?;
    let emb_ok = bits_equal(&back64, &m) && bits_equal(&back32, &q);

    let mut cfg = RunConfig::load(config_path("noisy_ablation.toml")).map_err(err)?;
    cfg.train.epochs = 2;
    cfg.train.num_workers = 2;
    cfg.train.batch_size_per_worker = 32;
    let split = split_for(&cfg)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let out = train::train(&split.train, &cfg.model_config(), &cfg.train).map_err(err)?;
        let ck = dir.path().join(format!("ck{run}"));
        let metrics = dir.path().join(format!("metrics{run}.jsonl"));
        train::save_checkpoint(&out.checkpoint, &ck).map_err(err)?;
        train::write_metrics(&metrics, &out.metrics).map_err(err)?;
        let read = |p: PathBuf| std::fs::read(p).map_err(|e| e.to_string());
        files.push((
            read(ck.join("tensors.bin"))?,
            read(ck.join("manifest.json"))?,
            read(metrics)?,
        ));
        let loaded = train::load_checkpoint(&ck).map_err(err)?;
        if loaded != out.checkpoint {
            return Err("checkpoint did not round-trip exactly".into());
        }
    }
    let identical = files[0] == files[1];
    check(
        emb_ok && identical,
        format!(
            "EMB1 f64/f32 round trip bit-exact: {emb_ok}; repeated runs byte-identical (tensors.bin {} B, manifest, metrics): {identical}",
            files[0].0.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients),
        ("closed-form loss values", closed_forms),
        ("distillation identity", distillation_identity),
        ("gather equivalence", gather_equivalence),
        ("EMA closed form", ema_closed_form),
        ("metric oracle", metric_oracle),
        ("schedule", schedule),
        ("end-to-end learning", end_to_end),
        ("ablation direction", ablation),
        ("format and determinism", format_and_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
