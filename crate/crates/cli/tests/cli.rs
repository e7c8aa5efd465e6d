use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikeformer::config::ConfigFile;
use spikeformer::energy::{estimate_energy, measure_random_rates, FiringRateReport};
use spikeformer::model::{build_model, ModelConfig};
use spikeformer::train::{blobs, train_toy, Dataset};

const FIXTURE: &str = "../core/tests/fixtures/firing_rates_c48_t4.txt";

fn msf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msf"))
        .args(args)
        .output()
        .expect("run msf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn total_mj(out: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix("total_mj="))
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .expect("total_mj line")
}

const TOY: &str = "[model]\nbase_channels = 8\nblocks = [1, 1, 1, 1, 1]\nresolution = 16\nnum_classes = 2\n\n[train]\nepochs = 3\n";

#[test]
fn info_reports_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let c48 = write(dir.path(), "c48.toml", "[model]\nbase_channels = 48\n");
    let o = msf(&["info", "--config", s(&c48)]);
    assert_eq!(code(&o), 0);
    let params: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("params="))
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((params - 31.3e6).abs() / 31.3e6 < 0.03);

    let toy = write(dir.path(), "toy.toml", TOY);
    let o = msf(&["info", "--config", s(&toy)]);
    let cfg = ConfigFile::parse(TOY).unwrap().model_config().unwrap();
    let n = spikeformer::model::count_params(&build_model::<f32>(&cfg).unwrap());
    assert!(stdout(&o).contains(&format!("params={n} ")));

    assert_eq!(
        code(&msf(&[
            "info",
            "--config",
            s(&dir.path().join("missing.toml"))
        ])),
        2
    );
    let bad = write(dir.path(), "bad.toml", "[model]\nwidth = 3\n");
    assert_eq!(code(&msf(&["info", "--config", s(&bad)])), 2);
    assert_eq!(code(&msf(&["info"])), 2);
}

#[test]
fn profile_from_rate_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "c48.toml", "[model]\nbase_channels = 48\n");
    let out = dir.path().join("out");
    let o = msf(&[
        "profile",
        "--config",
        s(&cfg_path),
        "--rates",
        FIXTURE,
        "-T",
        "4",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let total = total_mj(&stdout(&o));
    assert!((total - 32.8).abs() / 32.8 <= 0.25);

    let cfg = ModelConfig::preset(48).unwrap();
    let rates = FiringRateReport::parse(&std::fs::read_to_string(FIXTURE).unwrap()).unwrap();
    let lib = estimate_energy(&cfg, &rates, 4).unwrap();
    assert_eq!(
        std::fs::read_to_string(out.join("energy.csv")).unwrap(),
        lib.to_csv()
    );
    assert_eq!(
        std::fs::read_to_string(out.join("energy.txt")).unwrap(),
        lib.to_text()
    );

    let zero = write(dir.path(), "zero.txt", &rates.filled(0.0).to_text());
    let o = msf(&[
        "profile",
        "--config",
        s(&cfg_path),
        "--rates",
        s(&zero),
        "-T",
        "4",
        "--out-dir",
        s(&out),
    ]);
    let enc = lib.layers[0].flops as f64 * 4.0 * spikeformer::energy::E_MAC_PJ * 1e-9;
    assert!((total_mj(&stdout(&o)) - enc).abs() < 1e-3);

    let partial: String = rates
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("head."))
        .map(|l| format!("{l}\n"))
        .collect();
    let partial = write(dir.path(), "partial.txt", &partial);
    let o = msf(&[
        "profile",
        "--config",
        s(&cfg_path),
        "--rates",
        s(&partial),
        "-T",
        "4",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
    let garbage = write(dir.path(), "garbage.txt", "stage1 one 0.5\n");
    assert_eq!(
        code(&msf(&[
            "profile",
            "--config",
            s(&cfg_path),
            "--rates",
            s(&garbage),
            "--out-dir",
            s(&out)
        ])),
        3
    );
}

#[test]
fn profile_measure_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("m");
    let o = msf(&[
        "profile",
        "--config",
        s(&cfg_path),
        "--measure",
        "-T",
        "3",
        "--seed",
        "4",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = ConfigFile::parse(TOY).unwrap().model_config().unwrap();
    let rates = measure_random_rates(&cfg, 3, 2, 4).unwrap();
    let lib = estimate_energy(&cfg, &rates, 3).unwrap();
    assert_eq!(
        std::fs::read_to_string(out.join("energy.csv")).unwrap(),
        lib.to_csv()
    );
    assert_eq!(
        std::fs::read_to_string(out.join("rates.txt")).unwrap(),
        rates.to_text()
    );
    assert!(stdout(&o).starts_with(&format!("total_mj={:.3}", lib.total_mj())));
}

#[test]
fn train_writes_reloadable_checkpoint_and_deterministic_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "toy.toml", TOY);
    let data = dir.path().join("blobs.txt");
    assert_eq!(
        code(&msf(&["gen-blobs", "--out", s(&data), "--samples", "32"])),
        0
    );
    let ds = Dataset::<f32>::load(&data).unwrap();
    assert_eq!(ds, blobs::<f32>(32, 2, [3, 16, 16], 0.5, 7).unwrap());

    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = msf(&[
            "train",
            "--config",
            s(&cfg_path),
            "--data",
            s(&data),
            "--epochs",
            "3",
            "-T",
            "1",
            "--seed",
            "5",
            "--out-dir",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let metrics = std::fs::read_to_string(a.join("metrics.txt")).unwrap();
    assert_eq!(
        metrics,
        std::fs::read_to_string(b.join("metrics.txt")).unwrap()
    );
    assert_eq!(metrics.lines().count(), 3);

    let file = ConfigFile::parse(TOY).unwrap();
    let tc = spikeformer::config::TrainConfig {
        seed: 5,
        ..file.train.clone()
    };
    let mut model = build_model::<f32>(&ModelConfig {
        seed: 5,
        ..file.model_config().unwrap()
    })
    .unwrap();
    model.zero_residual_branches().unwrap();
    let hist = train_toy(&mut model, &ds, &tc).unwrap();
    let lib: String = hist.iter().map(|m| m.to_line() + "\n").collect();
    assert_eq!(metrics, lib);

    let ckpt = a.join("model.ckpt");
    let back = spikeformer::checkpoint::load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(
        back.forward(&ds.images, 1).unwrap(),
        model.forward(&ds.images, 1).unwrap()
    );
    let o = msf(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&o), 0);
    let (_, acc) = spikeformer::train::evaluate(&model, &ds, 1).unwrap();
    assert!(stdout(&o).contains(&format!("accuracy={acc:.4}")));

    let missing = dir.path().join("nope.txt");
    assert_eq!(
        code(&msf(&[
            "train",
            "--config",
            s(&cfg_path),
            "--data",
            s(&missing),
            "--out-dir",
            s(&a)
        ])),
        2
    );
    let garbled = write(
        dir.path(),
        "garbled.txt",
        "classes 2\nshape 3 16 16\n0 1 2\n",
    );
    assert_eq!(
        code(&msf(&[
            "train",
            "--config",
            s(&cfg_path),
            "--data",
            s(&garbled),
            "--out-dir",
            s(&a)
        ])),
        3
    );
    let wide = dir.path().join("wide.txt");
    msf(&[
        "gen-blobs",
        "--out",
        s(&wide),
        "--samples",
        "4",
        "--resolution",
        "32",
    ]);
    assert_eq!(
        code(&msf(&[
            "train",
            "--config",
            s(&cfg_path),
            "--data",
            s(&wide),
            "--out-dir",
            s(&a)
        ])),
        2
    );
}

#[test]
fn verify_suites_and_fault_injection() {
    let o = msf(&["verify", "--suite", "kernels"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = msf(&["verify", "--suite", "kernels", "--inject-fault", "kernel"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&msf(&["verify", "--suite", "sideways"])), 2);

    let o = msf(&["verify", "--suite", "gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    let err: f64 = out
        .split("max relative error ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .expect("max relative error");
    assert!(err <= 1e-4);
    assert_eq!(
        code(&msf(&[
            "verify",
            "--suite",
            "gradcheck",
            "--inject-fault",
            "gradient"
        ])),
        1
    );

    let o = msf(&["verify", "--suite", "all"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn convert_events_bins_frames() {
    let dir = tempfile::tempdir().unwrap();
    let ev = write(dir.path(), "ev.csv", "0,0,0,1\n5,1,0,0\n9,1,1,1\n");
    let out = dir.path().join("frames.txt");
    let o = msf(&[
        "convert-events",
        "--input",
        s(&ev),
        "--out",
        s(&out),
        "-T",
        "2",
        "--height",
        "2",
        "--width",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "frames 2 1 2 2\n1 0\n0 0\n0 1\n0 1\n"
    );
    assert!(stdout(&o).contains("active_pixels_per_bin=1,2"));

    let o = msf(&[
        "convert-events",
        "--input",
        s(&ev),
        "--out",
        s(&out),
        "-T",
        "1",
        "--height",
        "2",
        "--width",
        "2",
        "--split-polarity",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "frames 1 2 2 2\n0 1\n0 0\n1 0\n0 1\n"
    );

    let off = write(dir.path(), "off.csv", "0,5,0,1\n");
    assert_eq!(
        code(&msf(&[
            "convert-events",
            "--input",
            s(&off),
            "--out",
            s(&out),
            "-T",
            "1",
            "--height",
            "2",
            "--width",
            "2"
        ])),
        3
    );
    let missing = dir.path().join("none.csv");
    assert_eq!(
        code(&msf(&[
            "convert-events",
            "--input",
            s(&missing),
            "--out",
            s(&out),
            "-T",
            "1",
            "--height",
            "2",
            "--width",
            "2"
        ])),
        2
    );
    assert_eq!(
        code(&msf(&[
            "convert-events",
            "--input",
            s(&ev),
            "--out",
            s(&out),
            "-T",
            "0",
            "--height",
            "2",
            "--width",
            "2"
        ])),
        2
    );
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write(dir.path(), "toy.toml", TOY);
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_msf"))
            .env("MSF_THREADS", v)
            .args(["info", "--config", s(&toy)])
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    assert_eq!(code(&run("zero")), 2);
}
