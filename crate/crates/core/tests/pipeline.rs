use softpair::data::{self, DataConfig, NoiseConfig};
use softpair::model::Activation;
use softpair::train::MetricsRecord;
use softpair::{evaluate, load_checkpoint, save_checkpoint, train, ModelConfig, TrainConfig};

fn clean_split(seed: u64) -> data::SyntheticSplit {
    let cfg = DataConfig {
        vocab_size: 12,
        train_size: 384,
        eval_size: 192,
        image_dim: 10,
        text_dim: 9,
        latent_dim: None,
        held_out_fraction: 0.0,
        noise: NoiseConfig::clean(),
        eval_noise: None,
    };
    data::generate_split(&cfg, seed).unwrap()
}

fn model_config() -> ModelConfig {
    let mut mc = ModelConfig::new(10, 9, vec![24], 8);
    mc.activation = Activation::Tanh;
    mc
}

fn train_config(epochs: usize, workers: usize) -> TrainConfig {
    let mut tc = TrainConfig::new(epochs, 32 / workers, workers, 11);
    tc.ema_decay = 0.9;
    tc
}

fn epoch_records(m: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    m.iter().filter(|r| r.kind == "epoch").collect()
}

#[test]
fn clean_training_lowers_infonce() {
    let split = clean_split(1);
    let out = train(&split.train, &model_config(), &train_config(6, 1)).unwrap();
    let epochs = epoch_records(&out.metrics);
    assert_eq!(epochs.len(), 6);
    let (first, last) = (epochs[0].l_infonce, epochs[5].l_infonce);
    assert!(last < first, "first {first} last {last}");
    assert!(out.metrics.iter().all(|r| r.total.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let split = clean_split(2);
    let a = train(&split.train, &model_config(), &train_config(2, 2)).unwrap();
    let b = train(&split.train, &model_config(), &train_config(2, 2)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn worker_count_does_not_change_the_trajectory() {
    let split = clean_split(3);
    let one = train(&split.train, &model_config(), &train_config(2, 1)).unwrap();
    let four = train(&split.train, &model_config(), &train_config(2, 4)).unwrap();
    for (a, b) in one.checkpoint.model.tensors().iter().zip(four.checkpoint.model.tensors()) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-9);
    }
}

#[test]
fn checkpoint_reload_evaluates_identically() {
    let split = clean_split(4);
    let out = train(&split.train, &model_config(), &train_config(3, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&out.checkpoint, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, out.checkpoint);

    let labels = split.vocab.label_features();
    let eval = &split.eval_held_in;
    let ks = [1, 2, 5, 12];
    let r1 = evaluate(&out.checkpoint.model, &eval.image_features, &eval.image_concepts, &labels, &ks).unwrap();
    let r2 = evaluate(&back.model, &eval.image_features, &eval.image_concepts, &labels, &ks).unwrap();
    assert_eq!(r1, r2);
    let fh: Vec<f64> = r1.hit_rates.values().copied().collect();
    assert!(fh.windows(2).all(|w| w[0] <= w[1]), "{fh:?}");
    assert_eq!(fh[3], 1.0);
    assert!(fh[0] > r1.baseline[&1]);
}

#[test]
fn teacher_lags_the_student() {
    let split = clean_split(5);
    let out = train(&split.train, &model_config(), &train_config(2, 1)).unwrap();
    let ck = &out.checkpoint;
    let init = softpair::init_model(11, &model_config()).unwrap();
    // the teacher sits strictly between the initialization and the student
    for ((s, t), i) in ck.model.tensors().iter().zip(ck.teacher.params().tensors()).zip(init.tensors()) {
        let st = s.max_abs_diff(t).unwrap();
        let si = s.max_abs_diff(i).unwrap();
        assert!(st > 0.0 && st < si, "student-teacher {st} student-init {si}");
    }
}
