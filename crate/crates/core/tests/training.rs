use creasenet::losses::softmax_cross_entropy_grad;
use creasenet::losses::triplet::TripletConfig;
use creasenet::losses::{ArcConfig, ArcFaceLayer};
use creasenet::model::{Backbone, BackboneConfig, Head, HeadConfig};
use creasenet::optim::{Adam, OptimizerSpec};
use creasenet::tensor::Volume;
use creasenet::training::{
    backbone_step, batch_seed, sample_indexed, train_backbone, train_head, Batch, BackboneMode, BatchSpec,
    HeadModel, Stage, StageOutputs, TrainState, TrainingSet,
};
use creasenet::model::Grads;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 4] = [4, 16, 16, 3];

/// `classes` identities, each a fixed random pattern plus small per-sample noise.
fn separable_set(classes: usize, per_class: usize) -> (Vec<Vec<usize>>, Vec<Volume>) {
    let len: usize = DIMS.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut groups = Vec::new();
    let mut vols = Vec::new();
    for _ in 0..classes {
        let base: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let mut g = Vec::new();
        for _ in 0..per_class {
            let data = base.iter().map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)).collect();
            g.push(vols.len());
            vols.push(Volume::from_vec(DIMS, data).unwrap());
        }
        groups.push(g);
    }
    (groups, vols)
}

fn small_backbone(seed: u64) -> Backbone {
    Backbone::new(BackboneConfig::reduced(DIMS, 4, 2), seed).unwrap()
}

fn head_model(input_dim: usize, classes: usize, arc: (f64, f64)) -> HeadModel {
    let cfg = HeadConfig { input_dim, fc1_units: 64, fc2_units: 32 };
    let arc = ArcConfig { margin: arc.0, scale: arc.1, num_classes: classes };
    HeadModel { head: Head::new(cfg, 5), arc: ArcFaceLayer::new(32, arc, 6).unwrap() }
}

fn spec() -> BatchSpec {
    BatchSpec { persons_per_batch: 8, images_per_person: 4, batches_per_epoch: 20 }
}

fn opt(lr: f64) -> OptimizerSpec {
    OptimizerSpec { learning_rate: lr, max_epochs: 5, ..Default::default() }
}

#[test]
fn sampler_marginals_are_uniform() {
    let groups: Vec<Vec<usize>> = (0..20).map(|s| (s * 10..s * 10 + 10).collect()).collect();
    let mut counts = [0usize; 20];
    let batches = 10_000;
    for b in 0..batches {
        let batch = sample_indexed(&groups, &spec(), batch_seed(3, 0, b)).unwrap();
        for class in batch.labels.chunks(4) {
            counts[class[0]] += 1;
        }
    }
    let expected = batches as f64 * 8.0 / 20.0;
    for (s, &c) in counts.iter().enumerate() {
        let rel = (c as f64 - expected).abs() / expected;
        assert!(rel < 0.05, "subject {s}: {c} vs {expected}");
    }
}

#[test]
fn zero_learning_rate_leaves_backbone_unchanged() {
    let (groups, vols) = separable_set(10, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    let mut net = small_backbone(1);
    let before = net.params.clone();
    let spec = BatchSpec { batches_per_epoch: 3, ..spec() };
    let state = train_backbone(
        &set,
        &mut net,
        &TripletConfig::default(),
        &opt(0.0),
        &spec,
        TrainState::new(Stage::Backbone, 1),
        1,
        &StageOutputs::default(),
    )
    .unwrap();
    assert_eq!(net.params, before);
    assert_eq!(state.step, 3);
}

#[test]
fn batch_without_triplets_changes_nothing() {
    let (groups, vols) = separable_set(2, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    let mut net = small_backbone(2);
    let before = net.params.clone();
    let mut adam = Adam::new(opt(1e-3), &net.params);
    // One class only: no label-valid negative exists.
    let batch = Batch { items: vec![0, 1, 2, 3], labels: vec![0; 4] };
    let out = backbone_step(&set, &mut net, &mut adam, &TripletConfig::default(), 0.5, &batch).unwrap();
    assert!(!out.updated);
    assert_eq!(out.triplets, 0);
    assert_eq!(adam.steps(), 0);
    assert_eq!(net.params, before);
}

#[test]
fn triplet_stage_reduces_loss_on_separable_set() {
    let (groups, vols) = separable_set(20, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    let mut net = small_backbone(3);
    let state = train_backbone(
        &set,
        &mut net,
        &TripletConfig::default(),
        &opt(1e-3),
        &spec(),
        TrainState::new(Stage::Backbone, 3),
        5,
        &StageOutputs::default(),
    )
    .unwrap();
    println!("epoch losses {:?}", state.epoch_losses);
    assert!(state.epoch_losses[4] < state.epoch_losses[0]);
}

#[test]
fn head_stage_beats_chance_on_separable_set() {
    let (groups, vols) = separable_set(20, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    // Stage 2 runs on a triplet-trained backbone, as in the pipeline.
    let mut net = small_backbone(4);
    train_backbone(
        &set,
        &mut net,
        &TripletConfig::default(),
        &opt(1e-3),
        &spec(),
        TrainState::new(Stage::Backbone, 4),
        5,
        &StageOutputs::default(),
    )
    .unwrap();
    let mut model = head_model(net.embedding_dim(), 20, (0.5, 30.0));
    let state = train_head(
        &set,
        BackboneMode::Frozen(&net),
        &mut model,
        &opt(1e-3),
        &spec(),
        TrainState::new(Stage::Head, 4),
        5,
        &StageOutputs::default(),
    )
    .unwrap();
    println!("epoch accuracy {:?}", state.epoch_accuracy);
    assert!(state.epoch_accuracy[4] > 1.0 / 20.0);
}

/// Plain cosine-softmax classifier on the head output, trained step by step
/// with its own gradient code; returns the per-step mean loss.
fn plain_classifier_run(set: &TrainingSet, net: &Backbone, mut model: HeadModel, lr: f64, epochs: usize, seed: u64) -> Vec<f64> {
    let cached: Vec<Vec<f64>> = (0..set.source.len())
        .map(|i| net.forward(&set.source.volume(i).unwrap()).unwrap().embedding.values)
        .collect();
    let c = model.arc.config.num_classes;
    let dim = model.arc.dim;
    let mut head_adam = Adam::new(opt(lr), &model.head.params);
    let mut arc_adam = Adam::new(opt(lr), &model.arc.params);
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        for b in 0..spec().batches_per_epoch {
            let batch = sample_indexed(&set.groups, &spec(), batch_seed(seed, epoch, b)).unwrap();
            let mut head_g = model.head.params.zeros_like();
            let mut arc_g = vec![0.0; dim * c];
            let mut loss = 0.0;
            let w = &model.arc.params.params[0].data;
            let norms: Vec<f64> = (0..c).map(|j| (0..dim).map(|k| w[k * c + j].powi(2)).sum::<f64>().sqrt()).collect();
            for (&item, &label) in batch.items.iter().zip(&batch.labels) {
                let (out, tape) = model.head.forward_train(&cached[item]).unwrap();
                let x = &out.values;
                let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos: Vec<f64> = (0..c)
                    .map(|j| (0..dim).map(|k| x[k] * w[k * c + j]).sum::<f64>() / (xn * norms[j]))
                    .collect();
                let (l, dl) = softmax_cross_entropy_grad(&cos, label);
                loss += l;
                let mut dx = vec![0.0; dim];
                for j in 0..c {
                    for k in 0..dim {
                        let (xu, wu) = (x[k] / xn, w[k * c + j] / norms[j]);
                        dx[k] += dl[j] * (wu - cos[j] * xu) / xn;
                        arc_g[k * c + j] += dl[j] * (xu - cos[j] * wu) / norms[j];
                    }
                }
                model.head.backward(&tape, &dx, &mut head_g);
            }
            let n = batch.items.len() as f64;
            head_g.scale(1.0 / n);
            arc_g.iter_mut().for_each(|g| *g /= n);
            head_adam.step(&mut model.head.params, &head_g);
            arc_adam.step(&mut model.arc.params, &Grads(vec![arc_g]));
            losses.push(loss / n);
        }
    }
    losses
}

#[test]
fn zero_margin_unit_scale_matches_plain_classifier() {
    let (groups, vols) = separable_set(10, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    let net = small_backbone(8);
    let model = head_model(net.embedding_dim(), 10, (0.0, 1.0));
    let reference = plain_classifier_run(&set, &net, model.clone(), 1e-3, 2, 8);
    let mut trained = model;
    let state = train_head(
        &set,
        BackboneMode::Frozen(&net),
        &mut trained,
        &opt(1e-3),
        &spec(),
        TrainState::new(Stage::Head, 8),
        2,
        &StageOutputs::default(),
    )
    .unwrap();
    assert_eq!(state.loss_history.len(), reference.len());
    for (step, (a, b)) in state.loss_history.iter().zip(&reference).enumerate() {
        assert!((a - b).abs() < 1e-6, "step {step}: {a} vs {b}");
    }
}

#[test]
fn finetune_updates_the_backbone_and_frozen_does_not() {
    let (groups, vols) = separable_set(10, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    let spec = BatchSpec { batches_per_epoch: 2, ..spec() };
    let mut net = small_backbone(9);
    let before = net.params.clone();
    let mut model = head_model(net.embedding_dim(), 10, (0.5, 30.0));
    train_head(&set, BackboneMode::Frozen(&net), &mut model, &opt(1e-3), &spec, TrainState::new(Stage::Head, 9), 1, &StageOutputs::default())
        .unwrap();
    assert_eq!(net.params, before);
    let mut model = head_model(net.embedding_dim(), 10, (0.5, 30.0));
    train_head(&set, BackboneMode::Finetune(&mut net), &mut model, &opt(1e-3), &spec, TrainState::new(Stage::Head, 9), 1, &StageOutputs::default())
        .unwrap();
    assert_ne!(net.params, before);
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let (groups, vols) = separable_set(10, 4);
    let set = TrainingSet::new(groups, &vols).unwrap();
    let spec = BatchSpec { batches_per_epoch: 2, ..spec() };
    let run = || {
        let mut net = small_backbone(10);
        train_backbone(&set, &mut net, &TripletConfig::default(), &opt(1e-3), &spec, TrainState::new(Stage::Backbone, 10), 1, &StageOutputs::default())
            .unwrap();
        net.params
    };
    let parallel = run();
    creasenet::par::set_enabled(false);
    let sequential = run();
    creasenet::par::set_enabled(true);
    assert_eq!(parallel, sequential);
}
