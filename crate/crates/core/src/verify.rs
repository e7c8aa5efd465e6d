//! Property suites run by the `verify` command and the acceptance tests. Every check
//! compares an implementation against an independent oracle.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    linear_accumulate, sdsa1, sdsa2, sdsa3, sdsa4, ProductOrder, SdsaConfig, SdsaVariant,
};
use crate::autodiff::{NormMode, Tape};
use crate::blocks::{
    repconv_fold, Act, ConvBlockParams, EventBackend, InputKind, Runner, Shortcut,
    TransformerBlockParams,
};
use crate::energy::{
    ann_energy, estimate_energy, flops_conv, flops_mlp, inventory, sdsa_flops, vsa_flops, Charge,
    FiringRateReport, E_AC_PJ, E_MAC_PJ,
};
use crate::error::{Error, Result};
use crate::kernels::{
    binary_matmul, dense_conv2d, dense_matmul, event_conv2d, event_matmul, hadamard_mask,
    sum_columns, ConvKernel, OpCounter,
};
use crate::layers::RepConv;
use crate::model::{build_model, ModelConfig};
use crate::neuron::{LifParams, SpikeFn};
use crate::params::ParamStore;
use crate::tensor::{DenseTensor, SpikeTensor};
use crate::train::{blobs, gradcheck_with};

/// Firing rates of the C=48 network at T=4, one line per layer and timestep.
pub const FIXTURE_C48_T4: &str = include_str!("../tests/fixtures/firing_rates_c48_t4.txt");
/// Published total for the C=48, T=4 configuration, mJ.
pub const PUBLISHED_C48_T4_MJ: f64 = 32.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Kernels,
    Sdsa,
    Blocks,
    Energy,
    Gradcheck,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kernels" => Ok(Self::Kernels),
            "sdsa" => Ok(Self::Sdsa),
            "blocks" => Ok(Self::Blocks),
            "energy" => Ok(Self::Energy),
            "gradcheck" => Ok(Self::Gradcheck),
            "all" => Ok(Self::All),
            _ => Err(Error::Arg(format!(
                "unknown suite `{s}` (kernels, sdsa, blocks, energy, gradcheck, all)"
            ))),
        }
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Event kernels return one extra unit in their first output.
    Kernel,
    /// Analytic gradients are scaled by 1.01.
    Gradient,
}

impl Fault {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(Self::Kernel),
            "gradient" => Ok(Self::Gradient),
            _ => Err(Error::Arg(format!(
                "unknown fault `{s}` (kernel, gradient)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.checks.len());
        s
    }
}

/// Errors inside a check count as a failure of that check.
fn guarded(name: &str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
}

pub fn run_suite(suite: Suite, fault: Option<Fault>, seed: u64) -> Report {
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Kernels {
        checks.push(check_event_matmul(1000, seed, fault));
        checks.push(check_event_conv(1000, seed, fault));
    }
    if all || suite == Suite::Sdsa {
        checks.push(check_sdsa3_associativity(500, seed));
        checks.push(check_sdsa_exhaustive());
        checks.push(check_sdsa_random(200, seed));
        checks.push(check_hydra_identity(1000, seed));
    }
    if all || suite == Suite::Blocks {
        checks.push(check_repconv_fold(100, seed));
        checks.push(check_repconv_layer_fold(100, seed));
        checks.push(check_identity_mapping(seed));
        checks.push(check_sew_integer(seed));
        checks.push(check_vs_non_binary(seed));
        checks.push(check_spike_path_audit(seed));
    }
    if all || suite == Suite::Energy {
        checks.push(check_flops_formulas());
        checks.push(check_energy_fixture());
        checks.push(check_energy_properties());
    }
    if all || suite == Suite::Gradcheck {
        checks.push(check_gradients(100, seed, fault));
    }
    Report { checks }
}

fn random_spikes(rng: &mut impl Rng, shape: &[usize], density: f64) -> SpikeTensor {
    let n = shape.iter().product();
    SpikeTensor::from_bools(shape.to_vec(), (0..n).map(|_| rng.gen_bool(density)))
        .expect("shape matches data")
}

fn random_weights(rng: &mut impl Rng, shape: &[usize], integer: bool) -> DenseTensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if integer {
                rng.gen_range(-8i32..=8) as f64
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    DenseTensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn inject(fault: Option<Fault>, mut y: DenseTensor<f32>) -> DenseTensor<f32> {
    if fault == Some(Fault::Kernel) {
        if let Some(v) = y.data_mut().first_mut() {
            *v += 1.0;
        }
    }
    y
}

/// Event matmul in `f32` against an `f64` dense product: exact with integer weights,
/// within 1e-5 otherwise.
pub fn check_event_matmul(cases: usize, seed: u64, fault: Option<Fault>) -> Check {
    let name = "kernels.event_matmul";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut max_int, mut max_float) = (0f64, 0f64);
        for case in 0..cases {
            let (n, d, m) = (
                rng.gen_range(1..12),
                rng.gen_range(1..33),
                rng.gen_range(1..12),
            );
            let p = rng.gen_range(0.0..1.0);
            let s = random_spikes(&mut rng, &[n, d], p);
            let integer = case % 2 == 0;
            let w = random_weights(&mut rng, &[d, m], integer);
            let got = inject(fault, event_matmul(&s, &w.cast::<f32>())?);
            let want = dense_matmul(&s.to_dense::<f64>(), &w)?;
            let err = got.cast::<f64>().max_abs_diff(&want)?;
            if integer {
                max_int = max_int.max(err);
            } else {
                max_float = max_float.max(err);
            }
        }
        Ok(Check::new(
            name,
            max_int == 0.0 && max_float <= 1e-5,
            format!("{cases} cases, integer max err {max_int:e}, float max err {max_float:e}"),
        ))
    })
}

/// Event convolution against the dense convolution over random geometry.
pub fn check_event_conv(cases: usize, seed: u64, fault: Option<Fault>) -> Check {
    let name = "kernels.event_conv2d";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let (mut max_int, mut max_float) = (0f64, 0f64);
        for case in 0..cases {
            let groups = [1, 1, 2, 3][rng.gen_range(0..4)];
            let c_in = groups * rng.gen_range(1..4);
            let c_out = groups * rng.gen_range(1..4);
            let k: usize = [1, 3, 5, 7][rng.gen_range(0..4)];
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..=k / 2);
            let h = rng.gen_range(k.saturating_sub(2 * padding).max(1)..12);
            let w = rng.gen_range(k.saturating_sub(2 * padding).max(1)..12);
            let integer = case % 2 == 0;
            let weights = random_weights(&mut rng, &[c_out, c_in / groups, k, k], integer);
            let bias = random_weights(&mut rng, &[c_out], integer).into_data();
            let kern = ConvKernel::with_groups(weights, bias, stride, padding, groups)?;
            let p = rng.gen_range(0.0..1.0);
            let s = random_spikes(&mut rng, &[c_in, h, w], p);
            let got = inject(fault, event_conv2d(&s, &kern.cast::<f32>())?);
            let want = dense_conv2d(&s.to_dense::<f64>(), &kern)?;
            let err = got.cast::<f64>().max_abs_diff(&want)?;
            if integer {
                max_int = max_int.max(err);
            } else {
                max_float = max_float.max(err);
            }
        }
        Ok(Check::new(
            name,
            max_int == 0.0 && max_float <= 1e-5,
            format!("{cases} cases, integer max err {max_int:e}, float max err {max_float:e}"),
        ))
    })
}

/// `Q (Kᵀ V)` and `(Q Kᵀ) V` agree exactly on binary operands.
pub fn check_sdsa3_associativity(cases: usize, seed: u64) -> Check {
    let name = "sdsa.associativity";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut mismatches = 0;
        for _ in 0..cases {
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let d = heads * rng.gen_range(1..5);
            let n = rng.gen_range(1..17);
            let p = rng.gen_range(0.0..1.0);
            let [q, k, v] = [0, 1, 2].map(|_| random_spikes(&mut rng, &[n, d], p));
            let mut ops = OpCounter::default();
            let (a, _) =
                linear_accumulate(&q, &k, &v, heads, ProductOrder::KeyValueFirst, &mut ops)?;
            let (b, _) =
                linear_accumulate(&q, &k, &v, heads, ProductOrder::QueryKeyFirst, &mut ops)?;
            if a != b {
                mismatches += 1;
            }
        }
        Ok(Check::new(
            name,
            mismatches == 0,
            format!("{cases} triples, {mismatches} mismatches"),
        ))
    })
}

/// Reference neuron: `U = H + X`, fire iff `U >= th`, `H = v_r` on a spike else `beta*U`.
fn lif_oracle(seq: &[Vec<f64>], th: f64, beta: f64, v_r: f64) -> Vec<Vec<u8>> {
    let mut h = vec![v_r; seq.first().map_or(0, |x| x.len())];
    seq.iter()
        .map(|x| {
            x.iter()
                .zip(h.iter_mut())
                .map(|(&xi, hi)| {
                    let u = *hi + xi;
                    let s = u >= th;
                    *hi = if s { v_r } else { beta * u };
                    s as u8
                })
                .collect()
        })
        .collect()
}

fn bit(s: &SpikeTensor, t: usize, i: usize, j: usize) -> f64 {
    let (n, d) = (s.shape()[1], s.shape()[2]);
    s.data()[(t * n + i) * d + j] as f64
}

/// Brute-force formula for every variant; `th` is the linear variants' threshold.
fn sdsa_oracle(
    variant: SdsaVariant,
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    lif: &LifParams<f64>,
    th: f64,
) -> Vec<u8> {
    let (t_len, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut out = vec![0u8; t_len * n * d];
    match variant {
        SdsaVariant::Mask1 | SdsaVariant::Mask2 => {
            let cols: Vec<Vec<f64>> = (0..t_len)
                .map(|t| {
                    (0..d)
                        .map(|j| {
                            (0..n)
                                .map(|i| match variant {
                                    SdsaVariant::Mask1 => bit(k, t, i, j) * bit(v, t, i, j),
                                    _ => bit(q, t, i, j),
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect();
            let gate = lif_oracle(&cols, lif.threshold, lif.decay, lif.reset);
            let masked = if variant == SdsaVariant::Mask1 { q } else { v };
            for t in 0..t_len {
                for i in 0..n {
                    for j in 0..d {
                        out[(t * n + i) * d + j] = (bit(masked, t, i, j) as u8) & gate[t][j];
                    }
                }
            }
        }
        SdsaVariant::Linear3 | SdsaVariant::Learnable4 => {
            let dh = d / heads;
            // Scores first: (Q Kᵀ) V within each head.
            let acc: Vec<Vec<f64>> = (0..t_len)
                .map(|t| {
                    let mut a = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let h = j / dh;
                            let mut sum = 0.0;
                            for m in 0..n {
                                let score: f64 = (h * dh..(h + 1) * dh)
                                    .map(|c| bit(q, t, i, c) * bit(k, t, m, c))
                                    .sum();
                                sum += score * bit(v, t, m, j);
                            }
                            a[i * d + j] = sum;
                        }
                    }
                    a
                })
                .collect();
            let fired = lif_oracle(&acc, th, lif.decay, lif.reset);
            for (t, row) in fired.iter().enumerate() {
                out[t * n * d..(t + 1) * n * d].copy_from_slice(row);
            }
        }
    }
    out
}

fn run_variant(
    variant: SdsaVariant,
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    lif: &LifParams<f64>,
    th: f64,
) -> Result<SpikeTensor> {
    match variant {
        SdsaVariant::Mask1 => sdsa1(q, k, v, lif),
        SdsaVariant::Mask2 => sdsa2(q, v, lif),
        SdsaVariant::Linear3 => sdsa3(
            q,
            k,
            v,
            heads,
            &LifParams {
                threshold_scale: th / lif.threshold,
                ..*lif
            },
        ),
        SdsaVariant::Learnable4 => sdsa4(q, k, v, heads, lif, th),
    }
}

const VARIANTS: [SdsaVariant; 4] = [
    SdsaVariant::Mask1,
    SdsaVariant::Mask2,
    SdsaVariant::Linear3,
    SdsaVariant::Learnable4,
];

/// All `2^12` binary triples at `N = D = 2`, every variant, three thresholds.
pub fn check_sdsa_exhaustive() -> Check {
    let name = "sdsa.exhaustive_n2_d2";
    guarded(name, || {
        let lif = LifParams::<f64>::default();
        let mut mismatches = 0;
        let mut cases = 0;
        for code in 0u32..4096 {
            let bits = |shift: u32| {
                SpikeTensor::from_bools(vec![1, 2, 2], (0..4).map(|b| code >> (shift + b) & 1 == 1))
                    .expect("4 bits")
            };
            let (q, k, v) = (bits(0), bits(4), bits(8));
            for variant in VARIANTS {
                for th in [0.125, 1.0, 2.0] {
                    for heads in [1, 2] {
                        cases += 1;
                        let got = run_variant(variant, &q, &k, &v, heads, &lif, th)?;
                        if got.data()
                            != sdsa_oracle(variant, &q, &k, &v, heads, &lif, th).as_slice()
                        {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
        Ok(Check::new(
            name,
            mismatches == 0,
            format!("4096 triples, {cases} cases, {mismatches} mismatches"),
        ))
    })
}

/// Larger random operands over several timesteps (stateful neurons).
pub fn check_sdsa_random(cases: usize, seed: u64) -> Check {
    let name = "sdsa.random";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let mut mismatches = 0;
        for _ in 0..cases {
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let d = heads * rng.gen_range(1..5);
            let (t, n) = (rng.gen_range(1..5), rng.gen_range(1..13));
            let p = rng.gen_range(0.05..0.9);
            let [q, k, v] = [0, 1, 2].map(|_| random_spikes(&mut rng, &[t, n, d], p));
            let lif = LifParams {
                decay: rng.gen_range(0.1..0.9),
                ..LifParams::<f64>::default()
            };
            let th = [0.125, 0.5, 1.0, 3.0][rng.gen_range(0..4)];
            for variant in VARIANTS {
                let got = run_variant(variant, &q, &k, &v, heads, &lif, th)?;
                if got.data() != sdsa_oracle(variant, &q, &k, &v, heads, &lif, th).as_slice() {
                    mismatches += 1;
                }
            }
        }
        Ok(Check::new(
            name,
            mismatches == 0,
            format!("{cases} cases x 4 variants, {mismatches} mismatches"),
        ))
    })
}

/// `SUM_c(a ⊗ b) == aᵀ b` for binary columns.
pub fn check_hydra_identity(cases: usize, seed: u64) -> Check {
    let name = "sdsa.hydra_identity";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
        let mut mismatches = 0;
        for _ in 0..cases {
            let n = rng.gen_range(1..65);
            let p = rng.gen_range(0.0..1.0);
            let a = random_spikes(&mut rng, &[n, 1], p);
            let b = random_spikes(&mut rng, &[n, 1], p);
            let lhs = sum_columns(&hadamard_mask(&a, &b)?)?.data()[0];
            let rhs = binary_matmul(&a.transpose_last2(), &b)?.data()[0];
            if lhs != rhs {
                mismatches += 1;
            }
        }
        Ok(Check::new(
            name,
            mismatches == 0,
            format!("{cases} column pairs, {mismatches} mismatches"),
        ))
    })
}

/// Multi-branch outputs (3x3, 1x1 and identity branches run separately and summed)
/// against the single folded kernel, for four branch configurations.
pub fn check_repconv_fold(inputs: usize, seed: u64) -> Check {
    let name = "blocks.repconv_fold";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
        let c = 4;
        let k3 = ConvKernel::with_groups(
            random_weights(&mut rng, &[c, c, 3, 3], false),
            random_weights(&mut rng, &[c], false).into_data(),
            1,
            1,
            1,
        )?;
        let k1 = ConvKernel::with_groups(
            random_weights(&mut rng, &[c, c, 1, 1], false),
            random_weights(&mut rng, &[c], false).into_data(),
            1,
            0,
            1,
        )?;
        let scales = [0.7, -1.3, 0.4];
        let configs: [(bool, bool, bool); 4] = [
            (true, false, false),
            (true, true, false),
            (true, true, true),
            (false, true, true),
        ];
        let mut max_err = 0f64;
        for (use3, use1, ident) in configs {
            let folded = repconv_fold(use3.then_some(&k3), use1.then_some(&k1), ident, scales)?;
            for _ in 0..inputs {
                let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
                let x = random_weights(&mut rng, &[c, h, w], false);
                let mut want = DenseTensor::zeros(&[c, h, w]);
                if use3 {
                    want = want.add(&dense_conv2d(&x, &k3)?.map(|v| v * scales[0]))?;
                }
                if use1 {
                    want = want.add(&dense_conv2d(&x, &k1)?.map(|v| v * scales[1]))?;
                }
                if ident {
                    want = want.add(&x.map(|v| v * scales[2]))?;
                }
                max_err = max_err.max(dense_conv2d(&x, &folded)?.max_abs_diff(&want)?);
            }
        }
        Ok(Check::new(
            name,
            max_err <= 1e-5,
            format!("4 configurations x {inputs} inputs, max err {max_err:e}"),
        ))
    })
}

/// The trainable pointwise/depthwise/pointwise + norm stack against its folded 3x3 kernel.
pub fn check_repconv_layer_fold(inputs: usize, seed: u64) -> Check {
    let name = "blocks.repconv_layer_fold";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));
        let dim = 6;
        let eps = 1e-5;
        let mut store = ParamStore::<f64>::new();
        let rc = RepConv::new(&mut store, &mut rng, "rc", dim);
        for id in [rc.norm.gamma, rc.norm.beta, rc.norm.mean] {
            store.set(id, random_weights(&mut rng, &[dim], false))?;
        }
        store.set(
            rc.norm.var,
            random_weights(&mut rng, &[dim], false).map(|v| v.abs() + 0.1),
        )?;
        let folded = rc.fold(&store, eps)?;
        let mut max_err = 0f64;
        for _ in 0..inputs {
            let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let x = random_weights(&mut rng, &[1, dim, h, w], false);
            let mut tape = Tape::with_modes(SpikeFn::Heaviside, NormMode::Eval);
            let xn = tape.constant(x.clone());
            let y = rc.tape(&mut tape, &store, xn, eps)?;
            let want = tape.value(y).clone().reshape(&[dim, h, w])?;
            let got = dense_conv2d(&x.reshape(&[dim, h, w])?, &folded)?;
            max_err = max_err.max(got.max_abs_diff(&want)?);
        }
        Ok(Check::new(
            name,
            max_err <= 1e-5,
            format!("{inputs} inputs, max err {max_err:e}"),
        ))
    })
}

fn zero_gamma(store: &mut ParamStore<f64>, id: crate::params::ParamId) -> Result<()> {
    let n = store.get(id).len();
    store.set(id, DenseTensor::zeros(&[n]))
}

/// MS blocks whose branch-terminal norm scales are zero reproduce their input bit for bit.
pub fn check_identity_mapping(seed: u64) -> Check {
    let name = "blocks.identity_mapping";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let lif = LifParams::<f64>::default();
        let steps = 2;
        let mut store = ParamStore::<f64>::new();
        let conv = ConvBlockParams::new(&mut store, &mut rng, "conv", 4)?;
        for l in [&conv.pw2, &conv.conv2] {
            if let Some(n) = &l.norm {
                zero_gamma(&mut store, n.gamma)?;
            }
        }
        let dim = 8;
        let mut exact = true;
        let mut detail = String::new();
        let u = random_weights(&mut rng, &[steps * 2, 4, 5, 5], false).map(|v| 2.0 * v);
        let ck = conv.compile(&store, 1e-5)?;
        let mut r = Runner::new(&EventBackend, lif, steps, Shortcut::Ms);
        match ck.forward(&mut r, "conv", &Act::Potential(u.clone()))? {
            Act::Potential(y) => exact &= y == u,
            other => return Err(Error::Kind(format!("MS block returned {}", other.kind()))),
        }
        let _ = write!(detail, "conv_block exact={exact}");
        for variant in VARIANTS {
            let sdsa = SdsaConfig {
                variant,
                heads: 2,
                dim,
                threshold_scale: 0.125,
            };
            let blk = TransformerBlockParams::new(
                &mut store,
                &mut rng,
                &format!("t{}", variant.index()),
                dim,
                &sdsa,
                &lif,
            )?;
            zero_gamma(&mut store, blk.proj.norm.gamma)?;
            if let Some(n) = &blk.fc2.norm {
                zero_gamma(&mut store, n.gamma)?;
            }
            let tk = blk.compile(&store, 1e-5, &sdsa)?;
            let u = random_weights(&mut rng, &[steps * 2, dim, 3, 3], false).map(|v| 2.0 * v);
            let mut r = Runner::new(&EventBackend, lif, steps, Shortcut::Ms);
            let ok = match tk.forward(&mut r, "t", &Act::Potential(u.clone()))? {
                Act::Potential(y) => y == u,
                _ => false,
            };
            exact &= ok;
            let _ = write!(
                detail,
                ", transformer_block(sdsa{}) exact={ok}",
                variant.index()
            );
        }
        Ok(Check::new(name, exact, detail))
    })
}

/// A SEW block whose branches always fire emits counts above one on an all-ones input.
pub fn check_sew_integer(seed: u64) -> Check {
    let name = "blocks.sew_integer";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(8));
        let mut store = ParamStore::<f64>::new();
        let c = 4;
        let blk = ConvBlockParams::new(&mut store, &mut rng, "sew", c)?;
        for l in [&blk.pw2, &blk.conv2] {
            if let Some(n) = &l.norm {
                zero_gamma(&mut store, n.gamma)?;
                store.set(n.beta, DenseTensor::full(&[c], 2.0))?;
            }
        }
        let k = blk.compile(&store, 1e-5)?;
        let mut r = Runner::new(&EventBackend, LifParams::default(), 1, Shortcut::Sew);
        let out = k.forward(
            &mut r,
            "sew",
            &Act::Spikes(SpikeTensor::ones(&[1, c, 4, 4])),
        )?;
        let max = match &out {
            Act::Counts(x) => x.max(),
            other => return Err(Error::Kind(format!("SEW block returned {}", other.kind()))),
        };
        let count_operand = r
            .probe
            .audit
            .iter()
            .any(|e| e.input == InputKind::Counts && e.max_value > 1);
        Ok(Check::new(
            name,
            max > 1 && count_operand,
            format!("max output {max}, integer operand reached a conv: {count_operand}"),
        ))
    })
}

/// The VS shortcut adds spikes to real potentials, so its stream is not binary.
pub fn check_vs_non_binary(seed: u64) -> Check {
    let name = "blocks.vs_non_binary";
    guarded(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(9));
        let mut store = ParamStore::<f64>::new();
        let blk = ConvBlockParams::new(&mut store, &mut rng, "vs", 4)?;
        let k = blk.compile(&store, 1e-5)?;
        let u = random_weights(&mut rng, &[2, 4, 5, 5], false).map(|v| 3.0 * v);
        let mut r = Runner::new(&EventBackend, LifParams::default(), 1, Shortcut::Vs);
        let out = k.forward(&mut r, "vs", &Act::Potential(u))?.to_dense();
        let non_binary = out.data().iter().filter(|&&v| v != 0.0 && v != 1.0).count();
        Ok(Check::new(
            name,
            non_binary > 0,
            format!("{non_binary} of {} outputs outside {{0, 1}}", out.len()),
        ))
    })
}

/// Every conv and attention operand of a running network is binary (or integer counts
/// under SEW); only the encoding layer sees real values.
pub fn check_spike_path_audit(seed: u64) -> Check {
    let name = "blocks.spike_path_audit";
    guarded(name, || {
        let mut ok = true;
        let mut detail = Vec::new();
        for shortcut in [Shortcut::Ms, Shortcut::Sew, Shortcut::Vs] {
            for variant in VARIANTS {
                let cfg = ModelConfig {
                    shortcut,
                    sdsa_variant: variant,
                    seed,
                    ..ModelConfig::toy()
                };
                let mut model = build_model::<f64>(&cfg)?;
                let data = blobs::<f64>(2, 2, [3, 16, 16], 0.3, seed)?;
                model.calibrate_norms(&data.images, 2)?;
                let (_, probe) = model.compile()?.run(&EventBackend, &data.images, 2)?;
                let pixels = probe
                    .audit
                    .iter()
                    .filter(|e| e.input == InputKind::Pixels)
                    .count();
                let counts = probe
                    .audit
                    .iter()
                    .filter(|e| e.input == InputKind::Counts)
                    .count();
                let good = probe.spike_path_ok(shortcut == Shortcut::Sew)
                    && pixels == 1
                    && !probe.audit.is_empty();
                ok &= good;
                detail.push(format!(
                    "{}/sdsa{}: {} operands, {counts} integer",
                    shortcut.as_str(),
                    variant.index(),
                    probe.audit.len()
                ));
            }
        }
        Ok(Check::new(name, ok, detail.join("; ")))
    })
}

/// Hand-evaluated FLOPs of single layers and operator formulas.
pub fn check_flops_formulas() -> Check {
    let name = "energy.flops_formulas";
    guarded(name, || {
        let checks = [
            flops_conv(3, 4, 4, 2, 4)? == 1152,
            flops_conv(1, 1, 1, 1, 1)? == 1,
            flops_conv(7, 112, 112, 3, 32)? == 59_006_976,
            flops_mlp(1, 1)? == 1,
            flops_mlp(384, 1536)? == 589_824,
            flops_mlp(0, 4).is_err(),
            sdsa_flops(SdsaVariant::Linear3, 196, 384, 1, 1.0) == 28_901_376.0,
            VARIANTS
                .iter()
                .all(|&v| sdsa_flops(v, 10, 8, 2, 0.0) == 0.0),
            sdsa_flops(SdsaVariant::Linear3, 7, 12, 3, 0.4)
                / sdsa_flops(SdsaVariant::Mask1, 7, 12, 3, 0.4)
                == 12.0,
            sdsa_flops(SdsaVariant::Mask1, 9, 5, 2, 0.3)
                == sdsa_flops(SdsaVariant::Mask2, 9, 5, 2, 0.3),
            sdsa_flops(SdsaVariant::Linear3, 9, 5, 2, 0.3)
                == sdsa_flops(SdsaVariant::Learnable4, 9, 5, 2, 0.3),
            vsa_flops(1, 1) == 8,
            vsa_flops(0, 7) == 0,
            {
                let r = |n| vsa_flops(n, 8) as f64 / sdsa_flops(SdsaVariant::Linear3, n, 8, 1, 1.0);
                r(4096) > r(512)
            },
        ];
        let failed: Vec<usize> = checks
            .iter()
            .enumerate()
            .filter(|(_, &ok)| !ok)
            .map(|(i, _)| i)
            .collect();
        Ok(Check::new(
            name,
            failed.is_empty(),
            format!(
                "{} formula checks, failing indices {failed:?}",
                checks.len()
            ),
        ))
    })
}

/// Total energy from the shipped firing-rate fixture against the published figure.
pub fn check_energy_fixture() -> Check {
    let name = "energy.c48_t4_fixture";
    guarded(name, || {
        let rates = FiringRateReport::parse(FIXTURE_C48_T4)?;
        let total = estimate_energy(&ModelConfig::preset(48)?, &rates, 4)?.total_mj();
        let rel = (total - PUBLISHED_C48_T4_MJ).abs() / PUBLISHED_C48_T4_MJ;
        Ok(Check::new(
            name,
            rel <= 0.25,
            format!(
                "total {total:.3} mJ vs {PUBLISHED_C48_T4_MJ} mJ, deviation {:.1}%",
                rel * 100.0
            ),
        ))
    })
}

/// Single-layer product, zero rates, monotonicity and the dense-cost consistency.
pub fn check_energy_properties() -> Check {
    let name = "energy.properties";
    guarded(name, || {
        let single = E_AC_PJ * 0.5 * 1e9 * 1e-9;
        let mut ok = (single - 0.45).abs() < 1e-12;
        let cfg = ModelConfig::preset(48)?;
        let steps = 4;
        let fixture = FiringRateReport::parse(FIXTURE_C48_T4)?;
        let zero = estimate_energy(&cfg, &fixture.filled(0.0), steps)?;
        let items = inventory(&cfg)?;
        let enc: f64 = items
            .iter()
            .filter(|i| i.charge == Charge::Encoding)
            .map(|i| E_MAC_PJ * steps as f64 * i.flops as f64)
            .sum();
        ok &= (zero.total_pj() - enc).abs() <= 1e-6 * enc;
        let base = estimate_energy(&cfg, &fixture, steps)?.total_pj();
        let mut monotone = true;
        for i in (0..fixture.entries.len()).step_by(7) {
            let mut raised = fixture.clone();
            raised.entries[i].rate = (raised.entries[i].rate + 0.1).min(1.0);
            monotone &= estimate_energy(&cfg, &raised, steps)?.total_pj() >= base;
        }
        ok &= monotone;
        let dense = E_MAC_PJ * steps as f64 * dense_graph_flops(&cfg) as f64;
        let ann = ann_energy(&cfg, steps)?.total_pj();
        let consistent = (ann - dense).abs() <= 1e-9 * ann;
        ok &= consistent;
        Ok(Check::new(
            name,
            ok,
            format!(
                "single layer {single:.3} mJ, zero-rate total {:.3} mJ (encoding only), monotone {monotone}, dense-cost consistent {consistent}",
                zero.total_mj()
            ),
        ))
    })
}

/// FLOPs of the whole network run densely for one timestep, counted stage by stage.
/// Linear attention is two matrix products, `Kᵀ V` then `Q (Kᵀ V)`.
fn dense_graph_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.dims().map(|x| x as u64);
    let s = cfg.spatial().map(|x| (x * x) as u64);
    let conv_block = |c: u64, n: u64| n * c * c * (2 + 49 * 2 + 9 * 4 + 9 * 4);
    let key = if cfg.sdsa_variant.uses_key() { 3 } else { 2 };
    let transformer = |c: u64, n: u64| {
        let op = if cfg.sdsa_variant.is_matmul() {
            2 * n * c * c
        } else {
            n * c
        };
        key * 9 * n * c * c + op + 9 * n * c * c + 8 * n * c * c
    };
    let b = cfg.blocks.map(|x| x as u64);
    49 * s[0] * cfg.in_channels as u64 * d[0]
        + b[0] * conv_block(d[0], s[0])
        + 9 * s[1] * d[0] * d[1]
        + b[1] * conv_block(d[1], s[1])
        + 9 * s[2] * d[1] * d[2]
        + b[2] * conv_block(d[2], s[2])
        + 9 * s[3] * d[2] * d[3]
        + b[3] * transformer(d[3], s[3])
        + 9 * s[4] * d[3] * d[4]
        + b[4] * transformer(d[4], s[4])
        + d[4] * cfg.num_classes as u64
}

/// Backward against central differences with spikes relaxed to the clamped-linear function.
pub fn check_gradients(samples: usize, seed: u64, fault: Option<Fault>) -> Check {
    let name = "gradcheck.toy_model";
    guarded(name, || {
        let scale = if fault == Some(Fault::Gradient) {
            1.01
        } else {
            1.0
        };
        let r = gradcheck_with(&ModelConfig::toy(), samples, seed, |_, g| g * scale)?;
        Ok(Check::new(
            name,
            r.checked >= samples && r.max_rel_err <= 1e-4,
            format!(
                "{} parameters checked ({} with nonzero gradient), {} skipped at kinks, max relative error {:e} ({})",
                r.checked, r.nonzero, r.skipped, r.max_rel_err, r.worst
            ),
        ))
    })
}
