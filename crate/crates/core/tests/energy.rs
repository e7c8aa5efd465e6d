use spikeformer::energy::*;
use spikeformer::model::ModelConfig;

const FIXTURE: &str = include_str!("fixtures/firing_rates_c48_t4.txt");

#[test]
fn fixture_energy_c48() {
    let rates = FiringRateReport::parse(FIXTURE).unwrap();
    let cfg = ModelConfig::preset(48).unwrap();
    let rep = estimate_energy(&cfg, &rates, 4).unwrap();
    println!("{}", rep.to_text());
    let total = rep.total_mj();
    assert!((total - 32.8).abs() / 32.8 <= 0.25, "{total}");
}

fn toy_input(n: usize) -> spikeformer::DenseTensor<f64> {
    let ds = spikeformer::train::blobs::<f64>(n, 2, [3, 16, 16], 0.3, 5).unwrap();
    ds.images
}

#[test]
fn zero_rates_leave_only_the_encoding_charge() {
    let cfg = ModelConfig::preset(48).unwrap();
    let rates = FiringRateReport::parse(FIXTURE).unwrap().filled(0.0);
    let rep = estimate_energy(&cfg, &rates, 4).unwrap();
    let mac: Vec<_> = rep
        .layers
        .iter()
        .filter(|l| l.op_kind == OpKind::Mac)
        .collect();
    assert_eq!(mac.len(), 1);
    let enc = mac[0].flops as f64 * 4.0 * E_MAC_PJ;
    assert!(
        (rep.total_pj() - enc).abs() < 1e-6 * enc,
        "{} vs {enc}",
        rep.total_pj()
    );
    assert!(rep
        .layers
        .iter()
        .filter(|l| l.op_kind == OpKind::Ac)
        .all(|l| l.energy_pj == 0.0));
}

#[test]
fn missing_layer_is_a_report_error() {
    let cfg = ModelConfig::preset(48).unwrap();
    let text: String = FIXTURE
        .lines()
        .filter(|l| !l.starts_with("head.linear"))
        .map(|l| format!("{l}\n"))
        .collect();
    let rates = FiringRateReport::parse(&text).unwrap();
    let err = estimate_energy(&cfg, &rates, 4).unwrap_err();
    assert!(matches!(err, spikeformer::Error::Report(_)), "{err}");
    // Asking for more timesteps than recorded is missing data too.
    let full = FiringRateReport::parse(FIXTURE).unwrap();
    assert!(matches!(
        estimate_energy(&cfg, &full, 5),
        Err(spikeformer::Error::Report(_))
    ));
}

#[test]
fn rate_file_roundtrips() {
    let rates = FiringRateReport::parse(FIXTURE).unwrap();
    assert_eq!(FiringRateReport::parse(&rates.to_text()).unwrap(), rates);
}

#[test]
fn report_formats_agree() {
    let cfg = ModelConfig::preset(32).unwrap();
    let rates = FiringRateReport::parse(FIXTURE).unwrap();
    let rep = estimate_energy(&cfg, &rates, 4).unwrap();
    let csv = rep.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("name,flops,rate,op_kind,energy_pj,integer_driven")
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), rep.layers.len() + 1);
    let summed: f64 = rows[..rep.layers.len()]
        .iter()
        .map(|r| r.split(',').nth(4).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((summed - rep.total_pj()).abs() <= 1e-6 * rep.total_pj());
    let text = rep.to_text();
    assert!(text
        .lines()
        .last()
        .unwrap()
        .starts_with(&format!("total_mj={:.3}", rep.total_mj())));
}

#[test]
fn silent_input_measures_zero_rates() {
    let cfg = ModelConfig::toy();
    let model = spikeformer::model::build_model::<f64>(&cfg).unwrap();
    let net = model.compile().unwrap();
    let zeros = spikeformer::DenseTensor::zeros(&[2, 3, 16, 16]);
    let rates = record_rates(&net, &zeros, 2).unwrap();
    let rep = estimate_energy(&cfg, &rates, 2).unwrap();
    // Norm shifts may still fire some neurons; the encoding layer is charged regardless.
    assert!(
        rep.total_pj()
            >= rep
                .layers
                .iter()
                .filter(|l| l.op_kind == OpKind::Mac)
                .map(|l| l.energy_pj)
                .sum::<f64>()
    );
    for e in &rates.entries {
        assert!((0.0..=1.0).contains(&e.rate));
    }
}

#[test]
fn measured_rates_cover_the_inventory_and_match_dense_recount() {
    let cfg = ModelConfig::toy();
    let mut model = spikeformer::model::build_model::<f64>(&cfg).unwrap();
    let x = toy_input(4);
    model.calibrate_norms(&x, 3).unwrap();
    let net = model.compile().unwrap();
    let measured = record_rates(&net, &x, 3).unwrap();
    let (_, probe) = net.run(&spikeformer::blocks::DenseBackend, &x, 3).unwrap();
    let recount = FiringRateReport::from_probe(&probe).unwrap();
    assert_eq!(measured, recount);
    let rep = estimate_energy(&cfg, &measured, 3).unwrap();
    assert!(rep.total_pj() > 0.0);
    let sat = estimate_energy(&cfg, &saturated_rates(&cfg, 3).unwrap(), 3).unwrap();
    assert!(rep.total_pj() <= sat.total_pj());
}

#[test]
fn spiking_beats_dense_at_fixture_rates() {
    let cfg = ModelConfig::preset(48).unwrap();
    let snn = estimate_energy(&cfg, &FiringRateReport::parse(FIXTURE).unwrap(), 4).unwrap();
    let ann = ann_energy(&cfg, 4).unwrap();
    assert!(snn.total_pj() < ann.total_pj());
}
