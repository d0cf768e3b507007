//! End-to-end properties of the training loop and the two-stage model.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsban::checkpoint::Checkpoint;
use wsban::config::{Ablation, RunConfig};
use wsban::data::{self, Dataset, DatasetSpec, Split};
use wsban::experiment;
use wsban::localization::BoundingBox;
use wsban::model::{ForwardOptions, ModelConfig, StageOptions, WsBanModel, CROP_MARGIN};
use wsban::training::{TrainConfig, Trainer};
use wsban::{Tape, Tensor};

fn small_run(train_samples: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "classes=4",
        "image_size=32",
        "channels=8,16,16",
        "parts=4",
        "batch_size=8",
        "test_samples=16",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.data.train_samples = train_samples;
    cfg.train.epochs = epochs;
    cfg
}

fn checkpoint_bytes(cfg: &RunConfig, train: &Dataset) -> Vec<u8> {
    experiment::train(cfg, train, None, |_| {}).unwrap().0.to_bytes()
}

#[test]
fn fifty_steps_halve_the_loss_on_a_small_set() {
    let spec = DatasetSpec {
        train_samples: 32,
        test_samples: 8,
        ..DatasetSpec::default()
    };
    let train = data::generate(&spec, Split::Train).unwrap();
    let model = WsBanModel::<f32>::new(ModelConfig::new(8, 8, 64, vec![16, 32, 64, 64]), 1).unwrap();
    let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let mut losses = Vec::new();
    while trainer.steps() < 50 {
        let epoch = trainer.steps() / 2;
        losses.push(trainer.train_epoch(train.labeled_images(), epoch).unwrap().0);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    println!("mean loss over first epoch {first:.4}, after 50 steps {last:.4}");
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn no_regularization_weight_no_dropout_and_one_stage_is_plain_bap() {
    let mut reduced = small_run(32, 2);
    reduced.train.lambda = 0.0;
    reduced.train.keep_prob = 1.0;
    reduced.train.refinement = false;
    assert!(reduced.train.regularization && reduced.train.dropout);
    let mut plain = small_run(32, 2);
    plain.apply_ablation(Ablation::Row2);
    let (train, _) = experiment::generate_splits(&plain).unwrap();
    let a = experiment::train(&reduced, &train, None, |_| {}).unwrap().0;
    let b = experiment::train(&plain, &train, None, |_| {}).unwrap().0;
    assert_eq!(a.model, b.model);
}

#[test]
fn training_never_reads_boxes_or_part_centers() {
    let cfg = small_run(16, 1);
    let (train, _) = experiment::generate_splits(&cfg).unwrap();
    let mut blind = train.clone();
    for s in &mut blind.samples {
        s.object_box = BoundingBox::FULL;
        s.part_centers.clear();
    }
    assert_eq!(checkpoint_bytes(&cfg, &train), checkpoint_bytes(&cfg, &blind));
}

#[test]
fn raw_pixel_nearest_centroid_is_far_from_solving_the_default_task() {
    let spec = DatasetSpec::default();
    let train = data::generate(&spec, Split::Train).unwrap();
    let test = data::generate(&spec, Split::Test).unwrap();
    let acc = data::nearest_centroid_accuracy(&train, &test);
    println!("nearest-centroid accuracy {acc:.4}");
    assert!(acc < 0.6, "{acc}");
}

fn tiny_f64() -> (WsBanModel<f64>, Tensor<f64>, Vec<usize>) {
    let model = WsBanModel::<f64>::new(ModelConfig::new(2, 3, 16, vec![4, 6]), 5).unwrap();
    let images = Tensor::<f64>::new(&[2, 16, 16, 3], wsban::Init::Uniform { bound: 0.5, seed: 8 })
        .unwrap()
        .map(|v| v + 0.5);
    (model, images, vec![0, 1])
}

fn eval_options() -> ForwardOptions {
    ForwardOptions {
        stage: StageOptions::eval(),
        refinement: true,
        theta: 0.2,
        crop_margin: CROP_MARGIN,
    }
}

/// Parameter gradients of `L1`, `L2` or their sum on a fresh tape.
fn stage_grads(model: &WsBanModel<f64>, images: &Tensor<f64>, labels: &[usize], terms: (bool, bool)) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model
        .forward_two_stage(&mut tape, &bound, images, &eval_options(), &mut rng)
        .unwrap();
    let (l1, _) = tape.softmax_cross_entropy(out.stage1.logits, labels).unwrap();
    let (l2, _) = tape.softmax_cross_entropy(out.stage2.unwrap().logits, labels).unwrap();
    let loss = match terms {
        (true, true) => tape.add(l1, l2).unwrap(),
        (true, false) => l1,
        _ => l2,
    };
    tape.backward(loss).unwrap();
    bound
        .vars
        .iter()
        .zip(model.named_params())
        .map(|(&v, (_, t))| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

#[test]
fn gradients_of_both_stages_add_up() {
    let (model, images, labels) = tiny_f64();
    let both = stage_grads(&model, &images, &labels, (true, true));
    let first = stage_grads(&model, &images, &labels, (true, false));
    let second = stage_grads(&model, &images, &labels, (false, true));
    let mut worst = 0.0f64;
    for ((b, f), s) in both.iter().zip(&first).zip(&second) {
        for ((&b, &f), &s) in b.iter().zip(f).zip(s) {
            let sum = f + s;
            worst = worst.max((b - sum).abs() / b.abs().max(sum.abs()).max(1e-8));
        }
    }
    println!("max rel-err of summed stage gradients {worst:.3e}");
    assert!(worst < 1e-6, "{worst}");
    assert!(second.iter().flatten().any(|&g| g != 0.0));
}

#[test]
fn both_stages_read_the_same_parameters() {
    let (mut model, images, _) = tiny_f64();
    let run = |m: &WsBanModel<f64>| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward_two_stage(&mut tape, &bound, &images, &eval_options(), &mut rng).unwrap();
        (out.stage1.probs, out.stage2.unwrap().probs)
    };
    let (p1, p2) = run(&model);
    let mut bias = model.named_params().last().unwrap().1.clone();
    bias.data_mut()[0] += 1.0;
    model.set_param("classifier.bias", bias).unwrap();
    let (q1, q2) = run(&model);
    assert!(q1.data()[0] > p1.data()[0]);
    assert!(q2.data()[0] > p2.data()[0]);
}

#[test]
fn checkpoints_reload_to_the_same_predictions() {
    let cfg = small_run(16, 1);
    let (train, test) = experiment::generate_splits(&cfg).unwrap();
    let (ck, _) = experiment::train(&cfg, &train, None, |_| {}).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(
        experiment::evaluate(&ck, &test).unwrap(),
        experiment::evaluate(&back, &test).unwrap()
    );
}
