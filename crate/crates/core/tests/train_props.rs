use protomotif::model::{Model, ModelConfig};
use protomotif::oracles::nearest_patch_brute;
use protomotif::rng::rng_from_seed;
use protomotif::synthgen::{generate_dataset, DatasetSplit, SynthConfig};
use protomotif::train::{
    encode_all, finish, push_prototypes, run_epoch, train_head, verify_push, TrainConfig, TrainState,
};
use rand::Rng;

fn small_data(seed: u64) -> DatasetSplit {
    let cfg = SynthConfig {
        n_samples: 40,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, seed).unwrap()
}

fn short_config(epochs: usize, push_interval: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        push_interval,
        ..TrainConfig::default()
    }
}

#[test]
fn push_matches_exhaustive_search() {
    let data = small_data(1);
    let train = &data.train[..10];
    let mut model = Model::new(ModelConfig::default(), 4).unwrap();
    let before = model.clone();
    let latents = encode_all(&model, train).unwrap();
    let report = push_prototypes(&mut model, train).unwrap();
    for e in &report.entries {
        let (d, i, r, c) = nearest_patch_brute(before.prototypes.vector(e.prototype), &latents).unwrap();
        let p = e.provenance;
        assert_eq!((p.sample, p.row, p.col), (train[i].id, r, c));
        assert_eq!(p.distance_before, d);
    }
}

#[test]
fn second_push_is_a_fixed_point() {
    let data = small_data(2);
    let mut model = Model::new(ModelConfig::default(), 2).unwrap();
    let first = push_prototypes(&mut model, &data.train).unwrap();
    let pushed = model.prototypes.clone();
    let second = push_prototypes(&mut model, &data.train).unwrap();
    assert_eq!(model.prototypes.vectors, pushed.vectors);
    for (a, b) in first.entries.iter().zip(&second.entries) {
        assert_eq!(b.provenance.distance_before, 0.0);
        assert_eq!(b.provenance.sample, a.provenance.sample);
    }
    verify_push(&model, &data).unwrap();
}

#[test]
fn head_fit_reaches_the_same_optimum_from_any_start() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let mut rng = rng_from_seed(17);
    let m = model.n_prototypes();
    let scores: Vec<Vec<f64>> = (0..40).map(|_| (0..m).map(|_| rng.gen::<f64>()).collect()).collect();
    let labels: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
    let mut a = model.clone();
    let mut b = model.clone();
    b.head.weight.data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-3.0..3.0));
    b.head.bias.data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    let fa = train_head(&mut a, &scores, &labels, 3000, 0.05).unwrap();
    let fb = train_head(&mut b, &scores, &labels, 3000, 0.05).unwrap();
    assert!(fa.final_loss <= fa.initial_loss && fb.final_loss <= fb.initial_loss);
    assert!((fa.final_loss - fb.final_loss).abs() < 1e-4, "{fa:?} {fb:?}");
}

#[test]
fn loss_drops_over_the_first_epochs() {
    let cfg = short_config(3, 10);
    let mut drops = 0;
    for seed in 0..5 {
        let data = small_data(seed);
        let model = Model::new(ModelConfig::default(), seed).unwrap();
        let mut state = TrainState::start(model, &data, seed).unwrap();
        while !state.is_finished(&cfg) {
            run_epoch(&mut state, &data, &cfg).unwrap();
        }
        let losses: Vec<f64> = state.records.iter().map(|r| r.train_loss).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        drops += usize::from(losses[2] < losses[0]);
    }
    assert!(drops >= 4, "{drops} of 5 seeds");
}

#[test]
fn every_push_satisfies_the_invariant() {
    let data = small_data(3);
    let cfg = short_config(3, 1);
    let mut state = TrainState::start(Model::new(ModelConfig::default(), 3).unwrap(), &data, 3).unwrap();
    verify_push(&state.model, &data).unwrap();
    while !state.is_finished(&cfg) {
        run_epoch(&mut state, &data, &cfg).unwrap();
        verify_push(&state.model, &data).unwrap();
    }
    assert_eq!(state.pushes.len(), 4);
    assert!(state.records.iter().all(|r| r.pushed));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_data(5);
    let cfg = short_config(4, 2);
    let start = TrainState::start(Model::new(ModelConfig::default(), 5).unwrap(), &data, 5).unwrap();

    let mut straight = start.clone();
    while !straight.is_finished(&cfg) {
        run_epoch(&mut straight, &data, &cfg).unwrap();
    }

    let mut first = start;
    for _ in 0..2 {
        run_epoch(&mut first, &data, &cfg).unwrap();
    }
    let mut resumed = TrainState {
        seed: first.seed,
        epoch: first.epoch,
        model: first.model.clone(),
        optimizer: first.optimizer.clone(),
        best: first.best.clone(),
        records: first.records.clone(),
        pushes: first.pushes.clone(),
    };
    drop(first);
    while !resumed.is_finished(&cfg) {
        run_epoch(&mut resumed, &data, &cfg).unwrap();
    }
    assert_eq!(resumed, straight);
    assert_eq!(finish(&resumed, &data, &cfg).unwrap(), finish(&straight, &data, &cfg).unwrap());
}
