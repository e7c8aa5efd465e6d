//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::time::Instant;

use spikeformer::config::TrainConfig;
use spikeformer::model::{build_model, count_params, ModelConfig};
use spikeformer::train::{blobs, evaluate, finetune_timesteps, linear_probe_accuracy, train_toy};
use spikeformer::verify::*;

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: Vec<Check>) -> Outcome {
    Outcome {
        passed: checks.iter().all(|c| c.passed),
        detail: checks
            .iter()
            .map(|c| format!("[{}] {}", c.name, c.detail))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn parameter_counts() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (c, want) in [(32, 15.1e6), (48, 31.3e6), (64, 55.4e6)] {
        let m = build_model::<f32>(&ModelConfig::preset(c).expect("preset")).expect("build");
        let got = count_params(&m) as f64;
        let dev = (got - want) / want;
        passed &= dev.abs() <= 0.03;
        parts.push(format!(
            "C={c}: {:.2}M vs {:.1}M ({:+.1}%)",
            got / 1e6,
            want / 1e6,
            dev * 100.0
        ));
    }
    Outcome {
        passed,
        detail: parts.join(", "),
    }
}

fn toy_training() -> Outcome {
    let ds = blobs::<f32>(64, 2, [3, 16, 16], 0.5, 7).expect("blobs");
    let probe = linear_probe_accuracy(&ds, 1000);
    let cfg = TrainConfig::default();
    let run = || {
        let mut m = build_model::<f32>(&ModelConfig::toy()).expect("build");
        m.zero_residual_branches().expect("zero");
        let h = train_toy(&mut m, &ds, &cfg).expect("train");
        (m, h)
    };
    let (mut m, h1) = run();
    let (_, h2) = run();
    let best_epoch = h1.iter().find(|e| e.accuracy >= 0.95).map(|e| e.epoch);
    let base = h1.last().map_or(0.0, |e| e.accuracy);
    finetune_timesteps(&mut m, &ds, &cfg, 1, 4, cfg.finetune_epochs).expect("finetune");
    let (_, acc4) = evaluate(&m, &ds, 4).expect("evaluate");
    let passed = probe == 1.0 && base >= 0.95 && h1 == h2 && acc4 >= base - 0.05;
    Outcome {
        passed,
        detail: format!(
            "linear probe {probe:.2}; T=1 accuracy {base:.4} after {} epochs (first >= 0.95 at epoch {}); \
             rerun identical: {}; after finetune to T=4: {acc4:.4}",
            h1.len(),
            best_epoch.map_or("-".into(), |e| e.to_string()),
            h1 == h2
        ),
    }
}

fn main() {
    let seed = 2024;
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("parameter counts", Box::new(parameter_counts)),
        (
            "energy model",
            Box::new(|| from_checks(vec![check_energy_fixture(), check_flops_formulas()])),
        ),
        (
            "kernel equivalence",
            Box::new(move || {
                from_checks(vec![
                    check_event_matmul(1000, seed, None),
                    check_event_conv(1000, seed, None),
                ])
            }),
        ),
        (
            "attention properties",
            Box::new(move || {
                from_checks(vec![
                    check_sdsa3_associativity(500, seed),
                    check_sdsa_exhaustive(),
                    check_sdsa_random(200, seed),
                ])
            }),
        ),
        (
            "column-sum identity",
            Box::new(move || from_checks(vec![check_hydra_identity(1000, seed)])),
        ),
        (
            "re-parameterized conv fold",
            Box::new(move || {
                from_checks(vec![
                    check_repconv_fold(100, seed),
                    check_repconv_layer_fold(100, seed),
                ])
            }),
        ),
        (
            "identity mapping and shortcut kinds",
            Box::new(move || {
                from_checks(vec![
                    check_identity_mapping(seed),
                    check_sew_integer(seed),
                    check_vs_non_binary(seed),
                ])
            }),
        ),
        (
            "gradient check",
            Box::new(move || from_checks(vec![check_gradients(100, seed, None)])),
        ),
        ("toy training", Box::new(toy_training)),
        (
            "spike-path audit",
            Box::new(move || from_checks(vec![check_spike_path_audit(seed)])),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        failed += usize::from(!out.passed);
        println!(
            "{} criterion {} ({name}): {} [{:.1}s]",
            if out.passed { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
