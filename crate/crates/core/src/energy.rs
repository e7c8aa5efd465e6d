//! FLOPs accounting, firing-rate reports and the theoretical energy estimate.
//!
//! A spike-driven layer costs `E_AC * sum_t R_t * FLOPs`, where `R_t` is the firing
//! rate of its input at timestep `t` and FLOPs are those of the equivalent dense layer.
//! The encoding conv sees real-valued pixels and is charged `E_MAC * T * FLOPs`.
//! Masks cost nothing.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SdsaVariant;
use crate::blocks::{EventBackend, InputKind, Probe};
use crate::error::{Error, Result};
use crate::model::{build_model, InferenceNet, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Energy of one multiply-accumulate, pJ (45nm).
pub const E_MAC_PJ: f64 = 4.6;
/// Energy of one accumulate, pJ (45nm).
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyCosts {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        Self {
            e_mac: E_MAC_PJ,
            e_ac: E_AC_PJ,
        }
    }
}

fn positive(vals: &[usize]) -> Result<()> {
    if vals.iter().any(|&v| v == 0) {
        return Err(Error::Arg(format!(
            "FLOPs arguments must be positive, got {vals:?}"
        )));
    }
    Ok(())
}

/// `k^2 * h * w * c_in * c_out` for a `k x k` conv producing an `h x w` map.
pub fn flops_conv(k: usize, h: usize, w: usize, c_in: usize, c_out: usize) -> Result<u64> {
    positive(&[k, h, w, c_in, c_out])?;
    Ok((k * k) as u64 * h as u64 * w as u64 * c_in as u64 * c_out as u64)
}

/// `i * o` for one token through a linear layer.
pub fn flops_mlp(i: usize, o: usize) -> Result<u64> {
    positive(&[i, o])?;
    Ok(i as u64 * o as u64)
}

/// Rate-free operator FLOPs: `N*D` for the mask forms, `N*D^2` for the linear forms.
pub fn sdsa_base_flops(variant: SdsaVariant, n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    if variant.is_matmul() {
        n * d * d
    } else {
        n * d
    }
}

/// `T * R * N * D` (mask forms) or `T * R * N * D^2` (linear forms).
pub fn sdsa_flops(variant: SdsaVariant, n: usize, d: usize, t: usize, r_hat: f64) -> f64 {
    t as f64 * r_hat * sdsa_base_flops(variant, n, d) as f64
}

/// Q/K/V generation: two convs when the key is unused, otherwise three.
pub fn qkv_flops(variant: SdsaVariant, fl_conv: u64) -> u64 {
    if variant.uses_key() {
        3 * fl_conv
    } else {
        2 * fl_conv
    }
}

/// Softmax attention: projections `3ND^2`, scores and mixing `2N^2 D`, scale/softmax `3N^2`.
pub fn vsa_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    3 * n * d * d + 2 * n * n * d + 3 * n * n
}

/// Output projection of softmax attention, `N * D^2`.
pub fn vsa_linear_flops(n: usize, d: usize) -> u64 {
    n as u64 * d as u64 * d as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateEntry {
    pub layer: String,
    /// 1-based timestep.
    pub t: usize,
    pub rate: f64,
}

/// Input firing rate of every instrumented layer at every timestep.
///
/// Text form: `<layer> <t> <rate>` per line, `#` comments, and `@integer <layer>` for
/// layers whose operand carried integer counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FiringRateReport {
    pub entries: Vec<RateEntry>,
    pub integer_layers: Vec<String>,
}

impl FiringRateReport {
    pub fn push(&mut self, layer: &str, t: usize, rate: f64) -> Result<()> {
        if t == 0 {
            return Err(Error::Report(format!("{layer}: timesteps are 1-based")));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Report(format!(
                "{layer} t={t}: rate {rate} outside [0, 1]"
            )));
        }
        if self.entries.iter().any(|e| e.layer == layer && e.t == t) {
            return Err(Error::Report(format!("{layer} t={t}: duplicate entry")));
        }
        self.entries.push(RateEntry {
            layer: layer.to_string(),
            t,
            rate,
        });
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rep = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "@integer" {
                if fields.len() != 2 {
                    return Err(perr("expected `@integer <layer>`".into()));
                }
                rep.integer_layers.push(fields[1].to_string());
                continue;
            }
            if fields.len() != 3 {
                return Err(perr(format!(
                    "expected `<layer> <t> <rate>`, got {} fields",
                    fields.len()
                )));
            }
            let t: usize = fields[1]
                .parse()
                .map_err(|e| perr(format!("bad timestep: {e}")))?;
            let rate: f64 = fields[2]
                .parse()
                .map_err(|e| perr(format!("bad rate: {e}")))?;
            rep.push(fields[0], t, rate)
                .map_err(|e| perr(e.to_string()))?;
        }
        Ok(rep)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.integer_layers {
            let _ = writeln!(s, "@integer {l}");
        }
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {}", e.layer, e.t, e.rate);
        }
        s
    }

    pub fn from_probe(probe: &Probe) -> Result<Self> {
        let mut rep = Self::default();
        for (layer, per_t) in &probe.rates {
            for (t, &r) in per_t.iter().enumerate() {
                rep.push(layer, t + 1, r)?;
            }
        }
        let mut seen = HashSet::new();
        for a in &probe.audit {
            if a.input == InputKind::Counts && seen.insert(a.layer.clone()) {
                rep.integer_layers.push(a.layer.clone());
            }
        }
        Ok(rep)
    }

    /// Rates for `t = 1..=steps`; errors if any is missing.
    pub fn rates(&self, layer: &str, steps: usize) -> Result<Vec<f64>> {
        (1..=steps)
            .map(|t| {
                self.entries
                    .iter()
                    .find(|e| e.layer == layer && e.t == t)
                    .map(|e| e.rate)
                    .ok_or_else(|| Error::Report(format!("no rate for layer `{layer}` at t={t}")))
            })
            .collect()
    }

    /// Every rate replaced by `value`, same layers and timesteps.
    pub fn filled(&self, value: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| RateEntry {
                    rate: value,
                    ..e.clone()
                })
                .collect(),
            integer_layers: self.integer_layers.clone(),
        }
    }

    /// Mean rate per layer, in first-seen order.
    pub fn layer_means(&self) -> Vec<(String, f64)> {
        let mut order = Vec::new();
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let slot = acc.entry(e.layer.clone()).or_insert_with(|| {
                order.push(e.layer.clone());
                (0.0, 0)
            });
            slot.0 += e.rate;
            slot.1 += 1;
        }
        order
            .into_iter()
            .map(|l| {
                let (s, n) = acc[&l];
                (l, s / n as f64)
            })
            .collect()
    }
}

/// Measure per-layer input rates with the event backend.
pub fn record_rates<S: Scalar>(
    net: &InferenceNet<S>,
    input: &DenseTensor<S>,
    steps: usize,
) -> Result<FiringRateReport> {
    let (_, probe) = net.run(&EventBackend, input, steps)?;
    FiringRateReport::from_probe(&probe)
}

/// Rates of a freshly initialized model on uniform random images in `[0, 1)`.
///
/// Normalization statistics are first calibrated on the same batch so that an untrained
/// network fires at realistic rates.
pub fn measure_random_rates(
    cfg: &ModelConfig,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<FiringRateReport> {
    if batch == 0 || steps == 0 {
        return Err(Error::Arg("batch and timesteps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.resolution;
    let n = batch * cfg.in_channels * r * r;
    let x = DenseTensor::new(
        vec![batch, cfg.in_channels, r, r],
        (0..n).map(|_| rng.gen::<f32>()).collect(),
    )?;
    let mut model = build_model::<f32>(cfg)?;
    model.calibrate_norms(&x, steps)?;
    record_rates(&model.compile()?, &x, steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Ac,
    Mac,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Ac => "AC",
            OpKind::Mac => "MAC",
        }
    }
}

/// How a layer's rate is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum Charge {
    /// Raw input, MAC at rate 1.
    Encoding,
    /// Sum of the listed layers' rates.
    Rates(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostItem {
    pub name: String,
    /// Dense FLOPs for one timestep.
    pub flops: u64,
    pub charge: Charge,
}

/// Every charged operation of the folded network, in execution order.
pub fn inventory(cfg: &ModelConfig) -> Result<Vec<CostItem>> {
    cfg.validate()?;
    let dims = cfg.dims();
    let sp = cfg.spatial();
    let mut items = Vec::new();
    let mut push = |name: String, flops: u64, charge: Charge| {
        items.push(CostItem {
            name,
            flops,
            charge,
        })
    };
    let one = |n: &str| Charge::Rates(vec![n.to_string()]);
    let conv_block =
        |push: &mut dyn FnMut(String, u64, Charge), name: &str, c: usize, s: usize| -> Result<()> {
            for (suffix, k, ci, co) in [
                ("sepconv.pw1", 1, c, 2 * c),
                ("sepconv.dw_pw2", 7, 2 * c, c),
                ("channel_conv.conv1", 3, c, 4 * c),
                ("channel_conv.conv2", 3, 4 * c, c),
            ] {
                let n = format!("{name}.{suffix}");
                push(n.clone(), flops_conv(k, s, s, ci, co)?, one(&n));
            }
            Ok(())
        };
    let variant = cfg.sdsa_variant;
    let transformer =
        |push: &mut dyn FnMut(String, u64, Charge), name: &str, d: usize, s: usize| -> Result<()> {
            let fl = flops_conv(3, s, s, d, d)?;
            let qkv = format!("{name}.sdsa.repconv_qkv");
            push(qkv.clone(), qkv_flops(variant, fl), one(&qkv));
            let keys = match variant {
                SdsaVariant::Mask1 => vec![format!("{name}.sdsa.kv")],
                SdsaVariant::Mask2 => vec![format!("{name}.sdsa.q")],
                _ => vec![format!("{name}.sdsa.q"), format!("{name}.sdsa.k")],
            };
            push(
                format!("{name}.sdsa.op"),
                sdsa_base_flops(variant, s * s, d),
                Charge::Rates(keys),
            );
            let p = format!("{name}.sdsa.repconv4");
            push(p.clone(), fl, one(&p));
            let n = s * s;
            let l1 = format!("{name}.mlp.linear1");
            push(l1.clone(), n as u64 * flops_mlp(d, 4 * d)?, one(&l1));
            let l2 = format!("{name}.mlp.linear2");
            push(l2.clone(), n as u64 * flops_mlp(4 * d, d)?, one(&l2));
            Ok(())
        };
    push(
        "stage1.downsample1.conv".into(),
        flops_conv(7, sp[0], sp[0], cfg.in_channels, dims[0])?,
        Charge::Encoding,
    );
    let mut b = 0;
    for _ in 0..cfg.blocks[0] {
        b += 1;
        conv_block(&mut push, &format!("stage1.block{b}"), dims[0], sp[0])?;
    }
    push(
        "stage1.downsample2.conv".into(),
        flops_conv(3, sp[1], sp[1], dims[0], dims[1])?,
        one("stage1.downsample2.conv"),
    );
    for _ in 0..cfg.blocks[1] {
        b += 1;
        conv_block(&mut push, &format!("stage1.block{b}"), dims[1], sp[1])?;
    }
    push(
        "stage2.downsample.conv".into(),
        flops_conv(3, sp[2], sp[2], dims[1], dims[2])?,
        one("stage2.downsample.conv"),
    );
    for i in 1..=cfg.blocks[2] {
        conv_block(&mut push, &format!("stage2.block{i}"), dims[2], sp[2])?;
    }
    push(
        "stage3.downsample.conv".into(),
        flops_conv(3, sp[3], sp[3], dims[2], dims[3])?,
        one("stage3.downsample.conv"),
    );
    for i in 1..=cfg.blocks[3] {
        transformer(&mut push, &format!("stage3.block{i}"), dims[3], sp[3])?;
    }
    push(
        "stage4.downsample.conv".into(),
        flops_conv(3, sp[4], sp[4], dims[3], dims[4])?,
        one("stage4.downsample.conv"),
    );
    for i in 1..=cfg.blocks[4] {
        transformer(&mut push, &format!("stage4.block{i}"), dims[4], sp[4])?;
    }
    push(
        "head.linear".into(),
        flops_mlp(dims[4], cfg.num_classes)?,
        one("head.linear"),
    );
    Ok(items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub flops: u64,
    /// Mean over timesteps of the charged rate.
    pub rate: f64,
    pub op_kind: OpKind,
    pub energy_pj: f64,
    pub integer_driven: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub timesteps: usize,
}

impl EnergyReport {
    pub fn total_pj(&self) -> f64 {
        self.layers.iter().map(|l| l.energy_pj).sum()
    }

    pub fn total_mj(&self) -> f64 {
        self.total_pj() * 1e-9
    }

    /// One `key=value` record per layer and a totals line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer={} flops={} rate={:.6} op_kind={} energy_pj={:.3}{}",
                l.name,
                l.flops,
                l.rate,
                l.op_kind.as_str(),
                l.energy_pj,
                if l.integer_driven {
                    " integer_driven=1"
                } else {
                    ""
                }
            );
        }
        let _ = writeln!(
            s,
            "total_mj={:.3} timesteps={}",
            self.total_mj(),
            self.timesteps
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,flops,rate,op_kind,energy_pj,integer_driven\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{:.3},{}",
                l.name,
                l.flops,
                l.rate,
                l.op_kind.as_str(),
                l.energy_pj,
                l.integer_driven as u8
            );
        }
        let _ = writeln!(s, "total_mj,,,,{:.3},", self.total_mj());
        s
    }
}

pub fn estimate_energy(
    cfg: &ModelConfig,
    rates: &FiringRateReport,
    steps: usize,
) -> Result<EnergyReport> {
    estimate_energy_with(cfg, rates, steps, EnergyCosts::default())
}

pub fn estimate_energy_with(
    cfg: &ModelConfig,
    rates: &FiringRateReport,
    steps: usize,
    costs: EnergyCosts,
) -> Result<EnergyReport> {
    if steps == 0 {
        return Err(Error::Arg("timesteps must be >= 1".into()));
    }
    let integer: HashSet<&str> = rates.integer_layers.iter().map(String::as_str).collect();
    let mut layers = Vec::new();
    for item in inventory(cfg)? {
        let (op_kind, rate_sum, integer_driven) = match &item.charge {
            Charge::Encoding => (OpKind::Mac, steps as f64, false),
            Charge::Rates(keys) => {
                let mut sum = 0.0;
                for k in keys {
                    sum += rates.rates(k, steps)?.iter().sum::<f64>();
                }
                (
                    OpKind::Ac,
                    sum,
                    keys.iter().any(|k| integer.contains(k.as_str())),
                )
            }
        };
        let e = match op_kind {
            OpKind::Mac => costs.e_mac,
            OpKind::Ac => costs.e_ac,
        };
        layers.push(LayerEnergy {
            name: item.name,
            flops: item.flops,
            rate: rate_sum / steps as f64,
            op_kind,
            energy_pj: e * rate_sum * item.flops as f64,
            integer_driven,
        });
    }
    Ok(EnergyReport {
        layers,
        timesteps: steps,
    })
}

/// Rates of 1 for every charged layer at every timestep.
pub fn saturated_rates(cfg: &ModelConfig, steps: usize) -> Result<FiringRateReport> {
    let mut rep = FiringRateReport::default();
    let mut seen = HashSet::new();
    for item in inventory(cfg)? {
        if let Charge::Rates(keys) = item.charge {
            for k in keys {
                if seen.insert(k.clone()) {
                    for t in 1..=steps {
                        rep.push(&k, t, 1.0)?;
                    }
                }
            }
        }
    }
    Ok(rep)
}

/// Dense counterpart: every operation charged as a MAC at full rate.
pub fn ann_energy(cfg: &ModelConfig, steps: usize) -> Result<EnergyReport> {
    let costs = EnergyCosts {
        e_mac: E_MAC_PJ,
        e_ac: E_MAC_PJ,
    };
    estimate_energy_with(cfg, &saturated_rates(cfg, steps)?, steps, costs)
}
