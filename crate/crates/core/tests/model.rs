use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeformer::autodiff::{NormMode, Tape};
use spikeformer::blocks::Shortcut;
use spikeformer::model::{build_model, count_params, ModelConfig};
use spikeformer::neuron::SpikeFn;
use spikeformer::DenseTensor;

fn image(seed: u64, shape: &[usize]) -> DenseTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    DenseTensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
    )
    .unwrap()
}

#[test]
fn preset_parameter_counts() {
    for (c, want) in [(32, 15.1e6), (48, 31.3e6), (64, 55.4e6)] {
        let m = build_model::<f32>(&ModelConfig::preset(c).unwrap()).unwrap();
        let got = count_params(&m) as f64;
        assert!((got - want).abs() / want < 0.03, "C={c}: {got}");
    }
}

#[test]
fn tape_and_compiled_paths_agree() {
    for shortcut in [Shortcut::Ms, Shortcut::Sew, Shortcut::Vs] {
        let cfg = ModelConfig {
            shortcut,
            ..ModelConfig::toy()
        };
        let mut m = build_model::<f64>(&cfg).unwrap();
        let x = image(1, &[3, 3, 16, 16]);
        m.calibrate_norms(&x, 3).unwrap();
        let mut tape = Tape::with_modes(SpikeFn::Heaviside, NormMode::Eval);
        let y = m.forward_tape(&mut tape, &x, 3).unwrap();
        let via_tape = tape.value(y).clone().reshape(&[3, 2]).unwrap();
        let net = m.compile().unwrap();
        let event = net.forward(&x, 3).unwrap();
        let dense = net.forward_dense(&x, 3).unwrap();
        assert!(event.max_abs_diff(&dense).unwrap() < 1e-9, "{shortcut:?}");
        assert!(
            event.max_abs_diff(&via_tape).unwrap() < 1e-9,
            "{shortcut:?}: {event:?} vs {via_tape:?}"
        );
    }
}

#[test]
fn same_seed_same_weights() {
    let a = build_model::<f32>(&ModelConfig::toy()).unwrap();
    let b = build_model::<f32>(&ModelConfig::toy()).unwrap();
    let c = build_model::<f32>(&ModelConfig {
        seed: 1,
        ..ModelConfig::toy()
    })
    .unwrap();
    let vals = |m: &spikeformer::model::Model<f32>| {
        m.store
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

#[test]
fn other_resolutions_and_timesteps_run() {
    let cfg = ModelConfig {
        resolution: 32,
        num_classes: 5,
        ..ModelConfig::toy()
    };
    assert_eq!(cfg.tokens(), [256, 64, 16, 4, 4]);
    let m = build_model::<f32>(&cfg).unwrap();
    let x = image(3, &[2, 3, 32, 32]).cast::<f32>();
    for t in [1, 2, 4] {
        assert_eq!(m.forward(&x, t).unwrap().shape(), &[2, 5]);
    }
    assert!(m
        .forward(&image(3, &[2, 3, 16, 16]).cast::<f32>(), 1)
        .is_err());
}

#[test]
fn silent_head_gives_zero_logits() {
    let mut m = build_model::<f64>(&ModelConfig::toy()).unwrap();
    let w = m.head.weight;
    let zeros = DenseTensor::zeros(m.store.get(w).shape());
    m.store.set(w, zeros).unwrap();
    let y = m.forward(&image(4, &[3, 3, 16, 16]), 2).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0), "{y:?}");
}
