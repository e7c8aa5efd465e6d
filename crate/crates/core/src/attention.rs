//! Spike-driven self-attention operators (mask forms SDSA-1/2, linear forms SDSA-3/4),
//! Q/K/V generation, and the vanilla softmax attention reference.
//!
//! Operators take `(T, N, D)` spike tensors. The spiking neuron that closes each
//! operator carries membrane state across the `T` axis.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{
    binary_matmul_counted, event_conv2d, hadamard_mask, spike_int_matmul, sum_columns_counted,
    ConvKernel, OpCounter,
};
use crate::neuron::{lif_scalar, sn_forward, LifParams};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, IntTensor, SpikeTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SdsaVariant {
    /// `Q ⊗ SN(SUM_c(K ⊗ V))`
    Mask1,
    /// `SN(SUM_c(Q)) ⊗ V`
    Mask2,
    /// `SN_s(Q (Kᵀ V))`
    #[default]
    Linear3,
    /// SDSA-3 with a learnable threshold.
    Learnable4,
}

impl SdsaVariant {
    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            1 => Ok(Self::Mask1),
            2 => Ok(Self::Mask2),
            3 => Ok(Self::Linear3),
            4 => Ok(Self::Learnable4),
            _ => Err(Error::Arg(format!("unknown SDSA variant {i}"))),
        }
    }

    pub fn index(self) -> u32 {
        match self {
            Self::Mask1 => 1,
            Self::Mask2 => 2,
            Self::Linear3 => 3,
            Self::Learnable4 => 4,
        }
    }

    pub fn uses_key(self) -> bool {
        !matches!(self, Self::Mask2)
    }

    pub fn is_matmul(self) -> bool {
        matches!(self, Self::Linear3 | Self::Learnable4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdsaConfig<S> {
    pub variant: SdsaVariant,
    pub heads: usize,
    pub dim: usize,
    pub threshold_scale: S,
}

impl<S: Scalar> SdsaConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.threshold_scale > S::zero()) {
            return Err(Error::Config("threshold scale must be > 0".into()));
        }
        Ok(())
    }

    /// Heads used by the operator; mask variants are channelwise and run full width.
    pub fn effective_heads(&self) -> usize {
        if self.variant.is_matmul() {
            self.heads
        } else {
            1
        }
    }
}

/// Order of the two products in the linear variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProductOrder {
    /// `Q (Kᵀ V)`: linear in N.
    KeyValueFirst,
    /// `(Q Kᵀ) V`: quadratic in N.
    QueryKeyFirst,
}

/// Per-timestep measurements taken while an operator runs.
#[derive(Clone, Debug, Default)]
pub struct SdsaStats {
    /// Nonzero fraction of `Kᵀ V` (linear variants) or `K ⊗ V` (SDSA-1).
    pub kv_rate: Vec<f64>,
    /// Nonzero fraction of the pre-threshold accumulation.
    pub product_rate: Vec<f64>,
    pub ops: OpCounter,
}

fn check_tnd(a: &SpikeTensor, b: &SpikeTensor) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 3 {
        return shape_err(format!(
            "attention operands are (T, N, D), got {:?}",
            a.shape()
        ));
    }
    if a.shape() != b.shape() {
        return shape_err(format!("operands {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
}

/// Stateful spiking neuron over a sequence of integer accumulations.
fn sn_over_ints<S: Scalar>(
    acc: &[IntTensor],
    lif: &LifParams<S>,
    threshold: S,
) -> Vec<SpikeTensor> {
    let slice = acc.first().map(|a| a.len()).unwrap_or(0);
    let mut h = vec![lif.reset; slice];
    acc.iter()
        .map(|a| {
            let bits = a
                .data()
                .iter()
                .zip(h.iter_mut())
                .map(|(&v, hh)| {
                    let (s, hn) = lif_scalar(*hh, S::of(v as f64), threshold, lif.decay, lif.reset);
                    *hh = hn;
                    s as u8
                })
                .collect();
            SpikeTensor::from_parts(a.shape().to_vec(), bits)
        })
        .collect()
}

fn head_slice(s: &SpikeTensor, head: usize, d_head: usize) -> SpikeTensor {
    let (n, d) = (s.shape()[0], s.shape()[1]);
    let mut out = Vec::with_capacity(n * d_head);
    for i in 0..n {
        out.extend_from_slice(&s.data()[i * d + head * d_head..i * d + (head + 1) * d_head]);
    }
    SpikeTensor::from_parts(vec![n, d_head], out)
}

/// Pre-threshold accumulation of the linear variants for one `(N, D)` timestep.
pub fn linear_accumulate(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    order: ProductOrder,
    ops: &mut OpCounter,
) -> Result<(IntTensor, f64)> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err("linear attention operands must share an (N, D) shape");
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return shape_err(format!("dim {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let mut out = vec![0u32; n * d];
    let mut kv_nonzero = 0usize;
    for h in 0..heads {
        let (qh, kh, vh) = (
            head_slice(q, h, dh),
            head_slice(k, h, dh),
            head_slice(v, h, dh),
        );
        let prod = match order {
            ProductOrder::KeyValueFirst => {
                let kv = binary_matmul_counted(&kh.transpose_last2(), &vh, ops)?;
                kv_nonzero += kv.data().iter().filter(|&&x| x != 0).count();
                spike_int_matmul(&qh, &kv, ops)?
            }
            ProductOrder::QueryKeyFirst => {
                let qk = binary_matmul_counted(&qh, &kh.transpose_last2(), ops)?;
                // (N, N) integer scores times binary V: gather by V's nonzeros
                let mut p = vec![0u32; n * dh];
                for i in 0..n {
                    for j in 0..n {
                        let w = qk.data()[i * n + j];
                        if w == 0 {
                            continue;
                        }
                        for c in 0..dh {
                            if vh.data()[j * dh + c] == 1 {
                                p[i * dh + c] += w;
                            }
                        }
                    }
                }
                IntTensor::from_parts(vec![n, dh], p)
            }
        };
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh]
                .copy_from_slice(&prod.data()[i * dh..(i + 1) * dh]);
        }
    }
    let kv_rate = kv_nonzero as f64 / (heads * dh * dh) as f64;
    Ok((IntTensor::from_parts(vec![n, d], out), kv_rate))
}

fn timesteps(s: &SpikeTensor) -> Vec<SpikeTensor> {
    (0..s.shape()[0]).map(|t| s.outer(t)).collect()
}

/// SDSA-1 with stats.
pub fn sdsa1_traced<S: Scalar>(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    lif: &LifParams<S>,
    stats: &mut SdsaStats,
) -> Result<SpikeTensor> {
    let (_, n, d) = check_tnd(q, k)?;
    check_tnd(k, v)?;
    let mut sums = Vec::new();
    for (kt, vt) in timesteps(k).iter().zip(timesteps(v).iter()) {
        let kv = hadamard_mask(kt, vt)?;
        stats
            .kv_rate
            .push(kv.count_ones() as f64 / kv.len().max(1) as f64);
        let col = sum_columns_counted(&kv, &mut stats.ops)?;
        stats
            .product_rate
            .push(col.data().iter().filter(|&&x| x != 0).count() as f64 / d.max(1) as f64);
        sums.push(col);
    }
    let gates = sn_over_ints(&sums, lif, lif.threshold);
    let mut parts = Vec::with_capacity(gates.len());
    for (qt, gate) in timesteps(q).iter().zip(&gates) {
        let bits = (0..n * d)
            .map(|i| qt.data()[i] & gate.data()[i % d])
            .collect();
        parts.push(SpikeTensor::from_parts(vec![n, d], bits));
    }
    SpikeTensor::stack(&parts)
}

pub fn sdsa1<S: Scalar>(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    lif: &LifParams<S>,
) -> Result<SpikeTensor> {
    sdsa1_traced(q, k, v, lif, &mut SdsaStats::default())
}

pub fn sdsa2_traced<S: Scalar>(
    q: &SpikeTensor,
    v: &SpikeTensor,
    lif: &LifParams<S>,
    stats: &mut SdsaStats,
) -> Result<SpikeTensor> {
    let (_, n, d) = check_tnd(q, v)?;
    let mut sums = Vec::new();
    for qt in timesteps(q) {
        let col = sum_columns_counted(&qt, &mut stats.ops)?;
        stats
            .product_rate
            .push(col.data().iter().filter(|&&x| x != 0).count() as f64 / d.max(1) as f64);
        sums.push(col);
    }
    let gates = sn_over_ints(&sums, lif, lif.threshold);
    let mut parts = Vec::with_capacity(gates.len());
    for (vt, gate) in timesteps(v).iter().zip(&gates) {
        let bits = (0..n * d)
            .map(|i| vt.data()[i] & gate.data()[i % d])
            .collect();
        parts.push(SpikeTensor::from_parts(vec![n, d], bits));
    }
    SpikeTensor::stack(&parts)
}

pub fn sdsa2<S: Scalar>(
    q: &SpikeTensor,
    v: &SpikeTensor,
    lif: &LifParams<S>,
) -> Result<SpikeTensor> {
    sdsa2_traced(q, v, lif, &mut SdsaStats::default())
}

/// Linear variant against an explicit firing threshold.
#[allow(clippy::too_many_arguments)]
pub fn sdsa_linear_traced<S: Scalar>(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    lif: &LifParams<S>,
    threshold: S,
    order: ProductOrder,
    stats: &mut SdsaStats,
) -> Result<SpikeTensor> {
    check_tnd(q, k)?;
    check_tnd(k, v)?;
    let mut acc = Vec::new();
    for ((qt, kt), vt) in timesteps(q)
        .iter()
        .zip(timesteps(k).iter())
        .zip(timesteps(v).iter())
    {
        let (prod, kv_rate) = linear_accumulate(qt, kt, vt, heads, order, &mut stats.ops)?;
        stats.kv_rate.push(kv_rate);
        stats.product_rate.push(prod.nonzero_fraction()?);
        acc.push(prod);
    }
    SpikeTensor::stack(&sn_over_ints(&acc, lif, threshold))
}

/// SDSA-3: threshold `s * u_th` taken from `lif`.
pub fn sdsa3<S: Scalar>(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    lif: &LifParams<S>,
) -> Result<SpikeTensor> {
    sdsa_linear_traced(
        q,
        k,
        v,
        heads,
        lif,
        lif.effective_threshold(),
        ProductOrder::KeyValueFirst,
        &mut SdsaStats::default(),
    )
}

/// SDSA-4: the firing threshold is a trained scalar (initialized to `s * u_th`).
pub fn sdsa4<S: Scalar>(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    heads: usize,
    lif: &LifParams<S>,
    learned_threshold: S,
) -> Result<SpikeTensor> {
    sdsa_linear_traced(
        q,
        k,
        v,
        heads,
        lif,
        learned_threshold,
        ProductOrder::KeyValueFirst,
        &mut SdsaStats::default(),
    )
}

/// Dispatch on the configured variant. `learned_threshold` is used only by SDSA-4.
pub fn sdsa_forward<S: Scalar>(
    cfg: &SdsaConfig<S>,
    lif: &LifParams<S>,
    learned_threshold: Option<S>,
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    stats: &mut SdsaStats,
) -> Result<SpikeTensor> {
    let scaled = lif.with_scale(cfg.threshold_scale);
    match cfg.variant {
        SdsaVariant::Mask1 => sdsa1_traced(q, k, v, lif, stats),
        SdsaVariant::Mask2 => sdsa2_traced(q, v, lif, stats),
        SdsaVariant::Linear3 => sdsa_linear_traced(
            q,
            k,
            v,
            cfg.heads,
            &scaled,
            scaled.effective_threshold(),
            ProductOrder::KeyValueFirst,
            stats,
        ),
        SdsaVariant::Learnable4 => sdsa_linear_traced(
            q,
            k,
            v,
            cfg.heads,
            &scaled,
            learned_threshold.unwrap_or_else(|| scaled.effective_threshold()),
            ProductOrder::KeyValueFirst,
            stats,
        ),
    }
}

/// Q/K/V spikes from a `(T, B, C, H, W)` membrane tensor: `SN(conv_i(SN(U)))`, reshaped to
/// `(T, B, N, D)` tokens with `N = H*W`, `D = C_out`.
pub fn gen_qkv<S: Scalar>(
    u: &DenseTensor<S>,
    convs: [&ConvKernel<S>; 3],
    lif: &LifParams<S>,
) -> Result<(SpikeTensor, SpikeTensor, SpikeTensor)> {
    let sh = u.shape();
    if sh.len() != 5 {
        return shape_err(format!("gen_qkv expects (T, B, C, H, W), got {sh:?}"));
    }
    let (t, b) = (sh[0], sh[1]);
    let s_in = sn_forward(lif, u)?;
    let per = s_in.len() / (t * b).max(1);
    let frame_shape = sh[2..].to_vec();
    let mut outs = Vec::with_capacity(3);
    for conv in convs {
        let mut maps = Vec::with_capacity(t * b);
        for i in 0..t * b {
            let frame = SpikeTensor::from_parts(
                frame_shape.clone(),
                s_in.data()[i * per..(i + 1) * per].to_vec(),
            );
            maps.push(event_conv2d(&frame, conv)?);
        }
        let m_shape = maps[0].shape().to_vec();
        let stacked = DenseTensor::stack(&maps)?;
        let mut seq_shape = vec![t, b];
        seq_shape.extend_from_slice(&m_shape);
        let spikes = sn_forward(lif, &stacked.reshape(&seq_shape)?)?;
        let (c, n) = (m_shape[0], m_shape[1] * m_shape[2]);
        let tokens = spikes.reshape(&[t, b, c, n])?.transpose_last2();
        outs.push(tokens);
    }
    let v = outs.pop().unwrap_or_else(|| SpikeTensor::zeros(&[0]));
    let k = outs.pop().unwrap_or_else(|| SpikeTensor::zeros(&[0]));
    let q = outs.pop().unwrap_or_else(|| SpikeTensor::zeros(&[0]));
    Ok((q, k, v))
}

/// `softmax(Q Kᵀ / sqrt(d)) V` per head over `(N, D)` real inputs, heads concatenated.
pub fn vsa_reference<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    v: &DenseTensor<S>,
    heads: usize,
) -> Result<DenseTensor<S>> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err("VSA operands must share an (N, D) shape");
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return shape_err(format!("dim {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let at = |t: &DenseTensor<S>, i: usize, j: usize| t.data()[i * d + j].as_f64();
    let mut out = vec![S::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| at(q, i, off + c) * at(k, j, off + c))
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for c in 0..dh {
                let val: f64 = (0..n).map(|j| ex[j] / z * at(v, j, off + c)).sum();
                out[i * d + off + c] = S::of(val);
            }
        }
    }
    Ok(DenseTensor::from_parts(vec![n, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lif() -> LifParams<f64> {
        LifParams::default()
    }

    fn t1(n: usize, d: usize, bits: &[u8]) -> SpikeTensor {
        SpikeTensor::new(vec![1, n, d], bits.to_vec()).unwrap()
    }

    #[test]
    fn sdsa1_zero_value_gives_zero() {
        let q = SpikeTensor::ones(&[1, 3, 4]);
        let out = sdsa1(&q, &q, &SpikeTensor::zeros(&[1, 3, 4]), &lif()).unwrap();
        assert_eq!(out.count_ones(), 0);
    }

    #[test]
    fn sdsa1_saturated_mask_is_identity() {
        let q = t1(3, 2, &[1, 0, 0, 1, 1, 1]);
        let ones = SpikeTensor::ones(&[1, 3, 2]);
        assert_eq!(sdsa1(&q, &ones, &ones, &lif()).unwrap(), q);
    }

    #[test]
    fn sdsa2_cases() {
        let v = t1(2, 2, &[1, 0, 1, 1]);
        assert_eq!(
            sdsa2(&SpikeTensor::zeros(&[1, 2, 2]), &v, &lif())
                .unwrap()
                .count_ones(),
            0
        );
        assert_eq!(
            sdsa2(&SpikeTensor::ones(&[1, 2, 2]), &v, &lif()).unwrap(),
            v
        );
    }

    #[test]
    fn sdsa3_identity_and_zero_key() {
        let eye = t1(2, 2, &[1, 0, 0, 1]);
        let p = lif().with_scale(0.125);
        assert_eq!(sdsa3(&eye, &eye, &eye, 1, &p).unwrap(), eye);
        let z = SpikeTensor::zeros(&[1, 2, 2]);
        assert_eq!(sdsa3(&eye, &z, &eye, 1, &p).unwrap().count_ones(), 0);
    }

    #[test]
    fn sdsa4_threshold_behaviour() {
        let q = SpikeTensor::ones(&[1, 3, 4]);
        let p = lif().with_scale(0.125);
        assert_eq!(
            sdsa4(&q, &q, &q, 2, &p, p.effective_threshold()).unwrap(),
            sdsa3(&q, &q, &q, 2, &p).unwrap()
        );
        assert_eq!(
            sdsa4(&q, &q, &q, 2, &p, f64::INFINITY)
                .unwrap()
                .count_ones(),
            0
        );
    }

    #[test]
    fn vsa_single_token_and_uniform_keys() {
        let q = DenseTensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap();
        let v = DenseTensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap();
        assert_eq!(vsa_reference(&q, &q, &v, 1).unwrap(), v);

        let q = DenseTensor::new(vec![3, 2], vec![0.1, 0.2, -0.5, 0.9, 1.0, 1.0]).unwrap();
        let k = DenseTensor::new(vec![3, 2], vec![0.4, 0.4, 0.4, 0.4, 0.4, 0.4]).unwrap();
        let v = DenseTensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let out: DenseTensor<f64> = vsa_reference(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            assert!((out.data()[i * 2] - 3.0).abs() < 1e-12);
            assert!((out.data()[i * 2 + 1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let a = SpikeTensor::zeros(&[1, 2, 2]);
        let b = SpikeTensor::zeros(&[1, 3, 2]);
        assert!(sdsa1(&a, &b, &a, &lif()).is_err());
        assert!(sdsa3(&a, &a, &a, 3, &lif()).is_err());
    }
}
