use fsq::data::{compute_channel_means, AugmentConfig, Dataset};
use fsq::train::{argmax, evaluate, fit, prepare_batch, train_epoch, History, TrainConfig};
use fsq::{Model, ModelConfig};
use fsq_oracle::synthetic;

fn with_means(mut ds: Dataset) -> Dataset {
    ds.channel_means = compute_channel_means(&ds).unwrap();
    ds
}

/// The tiny network's 2-channel squeeze layers see only non-negative inputs,
/// so some seeds start with every squeeze unit dead. The recipe is pinned to
/// the default seed, which trains for every class count used here.
fn overfit_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        batch_size: 4,
        epochs: 15,
        seed: 42,
        augment: AugmentConfig::disabled(),
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn run(classes: usize, config: &TrainConfig) -> (Model, Dataset, History) {
    let train = with_means(synthetic::dataset(classes, 40 / classes, 32, 1));
    let mut model = Model::build(ModelConfig::tiny(classes), config.seed).unwrap();
    let mut history = History::new();
    fit(&mut model, &train, &train, config, &mut history, |_, _, _| Ok(())).unwrap();
    (model, train, history)
}

#[test]
fn tiny_model_overfits_red_versus_blue() {
    let (model, train, history) = run(2, &overfit_config());
    let accs: Vec<f64> = history.epochs().iter().map(|m| m.train_accuracy).collect();
    assert_eq!(history.len(), 15);
    assert!(accs.contains(&1.0), "train accuracy never reached 1.0: {accs:?}");
    assert!(accs.last() > accs.first(), "{accs:?}");
    assert!(evaluate(&model, &train).unwrap().accuracy() >= 0.95);
}

#[test]
fn tiny_model_overfits_three_and_four_colours() {
    for classes in [3, 4] {
        let (_, _, history) = run(classes, &overfit_config());
        let last = history.last().unwrap();
        assert!(last.train_accuracy >= 0.95, "{classes} classes: {:?}", history.epochs());
    }
}

#[test]
fn deterministic_runs_are_bit_identical() {
    let mut config = overfit_config();
    config.epochs = 3;
    config.augment = AugmentConfig {
        horizontal_flip: true,
        ..AugmentConfig::default()
    };
    config.dropout_on = true;
    let (a, _, ha) = run(2, &config);
    let (b, _, hb) = run(2, &config);
    assert_eq!(ha, hb);
    assert_eq!(serde_json::to_string(&ha).unwrap(), serde_json::to_string(&hb).unwrap());
    for (p, q) in a.parameters().iter().zip(b.parameters()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn prefetching_does_not_change_results() {
    let mut config = overfit_config();
    config.epochs = 2;
    let (a, _, ha) = run(2, &config);
    config.deterministic = false;
    let (b, _, hb) = run(2, &config);
    for (x, y) in ha.epochs().iter().zip(hb.epochs()) {
        assert_eq!(
            (x.train_loss, x.train_accuracy, x.val_accuracy),
            (y.train_loss, y.train_accuracy, y.val_accuracy)
        );
    }
    for (p, q) in a.parameters().iter().zip(b.parameters()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let train = with_means(synthetic::dataset(2, 6, 32, 3));
    let mut model = Model::build(ModelConfig::tiny(2), 4).unwrap();
    let before: Vec<_> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let config = TrainConfig {
        learning_rate: 0.0,
        batch_size: 4,
        ..overfit_config()
    };
    let m = train_epoch(&mut model, &train, &train, &config, 1).unwrap();
    assert_eq!(m.epoch, 1);
    for (p, b) in model.parameters().iter().zip(&before) {
        assert_eq!(&p.value, b, "{}", p.name);
    }
}

#[test]
fn evaluate_agrees_with_a_naive_recount() {
    let ds = with_means(synthetic::dataset(3, 7, 32, 5));
    let model = Model::build(ModelConfig::tiny(3), 11).unwrap();
    let confusion = evaluate(&model, &ds).unwrap();
    assert_eq!(confusion.total(), ds.len() as u64);

    let mut hits = 0;
    for (i, s) in ds.samples.iter().enumerate() {
        let (x, _) = prepare_batch(&ds, &[i], 32, None).unwrap();
        let p = model.predict(&x).unwrap();
        let pred = argmax(p.row(0));
        hits += usize::from(pred == s.label);
        assert!(confusion.counts()[s.label][pred] > 0);
    }
    assert_eq!(confusion.accuracy(), hits as f64 / ds.len() as f64);
    for (c, &n) in ds.class_counts().iter().enumerate() {
        assert_eq!(confusion.counts()[c].iter().sum::<u64>(), n as u64);
    }
}

#[test]
fn epochs_continue_numbering_after_history() {
    let train = with_means(synthetic::dataset(2, 4, 32, 6));
    let mut model = Model::build(ModelConfig::tiny(2), 1).unwrap();
    let mut history = History::new();
    let config = TrainConfig {
        epochs: 2,
        ..overfit_config()
    };
    fit(&mut model, &train, &train, &config, &mut history, |_, _, _| Ok(())).unwrap();
    fit(&mut model, &train, &train, &config, &mut history, |_, _, _| Ok(())).unwrap();
    let idx: Vec<usize> = history.epochs().iter().map(|m| m.epoch).collect();
    assert_eq!(idx, [1, 2, 3, 4]);
}
