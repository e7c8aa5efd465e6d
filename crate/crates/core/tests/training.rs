use spikeformer::autodiff::{NormMode, Tape};
use spikeformer::blocks::Shortcut;
use spikeformer::config::TrainConfig;
use spikeformer::model::{build_model, Model, ModelConfig};
use spikeformer::neuron::SpikeFn;
use spikeformer::train::{
    blobs, evaluate, finetune_timesteps, linear_probe_accuracy, train_toy, Dataset, EpochMetrics,
};
use spikeformer::{DenseTensor, Error};

fn toy_data() -> Dataset<f32> {
    blobs::<f32>(64, 2, [3, 16, 16], 0.5, 7).unwrap()
}

fn fresh(cfg: &ModelConfig) -> Model<f32> {
    let mut m = build_model::<f32>(cfg).unwrap();
    m.zero_residual_branches().unwrap();
    m
}

fn window_means(h: &[EpochMetrics], w: usize) -> Vec<f64> {
    h.chunks(w)
        .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

#[test]
fn separable_blobs_are_learned_and_survive_more_timesteps() {
    let ds = toy_data();
    assert_eq!(
        linear_probe_accuracy(&ds, 1000),
        1.0,
        "blobs must be linearly separable"
    );
    let cfg = TrainConfig::default();
    let mut m = fresh(&ModelConfig::toy());
    let hist = train_toy(&mut m, &ds, &cfg).unwrap();
    assert_eq!(hist.len(), 20);
    let base = hist.last().unwrap().accuracy;
    assert!(
        base >= 0.95,
        "{}",
        hist.iter()
            .map(|h| h.to_line())
            .collect::<Vec<_>>()
            .join("\n")
    );
    let w = window_means(&hist, 5);
    assert!(w.windows(2).all(|p| p[1] <= p[0]), "windowed losses {w:?}");

    let ft = finetune_timesteps(&mut m, &ds, &cfg, 1, 4, 5).unwrap();
    assert_eq!(ft.len(), 5);
    assert!(ft.iter().all(|e| e.timesteps == 4 && e.split == "finetune"));
    let (_, acc4) = evaluate(&m, &ds, 4).unwrap();
    assert!(acc4 >= base - 0.05, "T=4 accuracy {acc4} vs T=1 {base}");
    let (_, acc2) = evaluate(&m, &ds, 2).unwrap();
    assert!((0.0..=1.0).contains(&acc2));
}

#[test]
fn same_seed_same_history() {
    let ds = toy_data();
    let cfg = TrainConfig {
        epochs: 3,
        flip: true,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = fresh(&ModelConfig::toy());
        let h = train_toy(&mut m, &ds, &cfg).unwrap();
        (
            h,
            m.store
                .iter()
                .map(|(_, p)| p.value.clone())
                .collect::<Vec<_>>(),
        )
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let (h3, _) = {
        let mut m = fresh(&ModelConfig::toy());
        (
            train_toy(
                &mut m,
                &ds,
                &TrainConfig {
                    seed: 1,
                    ..cfg.clone()
                },
            )
            .unwrap(),
            (),
        )
    };
    assert_ne!(h1, h3);
}

#[test]
fn shuffled_labels_generalize_at_chance() {
    let all = blobs::<f32>(264, 2, [3, 16, 16], 0.5, 7)
        .unwrap()
        .with_shuffled_labels(3);
    let train = all.subset(&(0..64).collect::<Vec<_>>());
    let held_out = all.subset(&(64..264).collect::<Vec<_>>());
    let mut m = fresh(&ModelConfig::toy());
    train_toy(&mut m, &train, &TrainConfig::default()).unwrap();
    let (_, acc) = evaluate(&m, &held_out, 1).unwrap();
    assert!((acc - 0.5).abs() <= 0.10, "held-out accuracy {acc}");
}

#[test]
fn ablation_shortcuts_train() {
    let ds = toy_data();
    for shortcut in [Shortcut::Sew, Shortcut::Vs] {
        let mut m = fresh(&ModelConfig {
            shortcut,
            ..ModelConfig::toy()
        });
        let h = train_toy(
            &mut m,
            &ds,
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(h.len(), 2, "{shortcut:?}");
        assert!(h.iter().all(|e| e.loss.is_finite()), "{shortcut:?}");
    }
}

#[test]
fn timestep_schedule_edges() {
    let ds = toy_data();
    let cfg = TrainConfig::default();
    let mut m = fresh(&ModelConfig::toy());
    let before: Vec<_> = m.store.iter().map(|(_, p)| p.value.clone()).collect();
    assert!(finetune_timesteps(&mut m, &ds, &cfg, 1, 1, 5)
        .unwrap()
        .is_empty());
    let after: Vec<_> = m.store.iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
    assert!(matches!(
        finetune_timesteps(&mut m, &ds, &cfg, 1, 0, 5),
        Err(Error::Arg(_))
    ));
    let h = finetune_timesteps(&mut m, &ds, &cfg, 1, 2, 1).unwrap();
    assert_eq!(h[0].timesteps, 2);
}

#[test]
fn dataset_must_fit_the_model() {
    let cfg = TrainConfig::default();
    let mut m = fresh(&ModelConfig::toy());
    for ds in [
        blobs::<f32>(8, 3, [3, 16, 16], 0.5, 1).unwrap(),
        blobs::<f32>(8, 2, [1, 16, 16], 0.5, 1).unwrap(),
        blobs::<f32>(8, 2, [3, 32, 32], 0.5, 1).unwrap(),
    ] {
        assert!(matches!(
            train_toy(&mut m, &ds, &cfg),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn saturated_prediction_has_zero_gradient() {
    let mut m = build_model::<f64>(&ModelConfig::toy()).unwrap();
    let bias = m.head.bias.unwrap();
    m.store
        .set(bias, DenseTensor::new(vec![2], vec![1000.0, 0.0]).unwrap())
        .unwrap();
    let w = m.head.weight;
    let zeros = DenseTensor::zeros(m.store.get(w).shape());
    m.store.set(w, zeros).unwrap();
    let x = blobs::<f64>(4, 2, [3, 16, 16], 0.5, 2).unwrap().images;
    let mut tape = Tape::with_modes(SpikeFn::ClampLinear, NormMode::Train);
    let logits = m.forward_tape(&mut tape, &x, 2).unwrap();
    let l = tape.cross_entropy(logits, &[0, 0, 0, 0], 0.0).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}
