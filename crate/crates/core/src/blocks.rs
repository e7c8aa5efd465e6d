//! Conv and Transformer SNN blocks, downsampling, shortcut schemes and RepConv folding.
//!
//! Every block exists twice: a trainable form (`*Params`) recorded on a [`Tape`], and a
//! compiled form (`*Kernels`) with all linear stacks folded into single kernels, executed
//! by a [`Runner`] over a [`SpikeBackend`]. Activations are time-major `(T*B, C, H, W)`.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{sdsa_forward, SdsaConfig, SdsaStats, SdsaVariant};
use crate::autodiff::{NodeId, Tape, Threshold};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{
    dense_conv2d, dense_matmul, event_conv2d_counted, int_conv2d_counted, ConvKernel, OpCounter,
};
use crate::layers::{compose_depthwise_pointwise, fold_affine, ConvLayer, ConvSpec, RepConv};
use crate::neuron::{sn_forward_threshold, LifParams};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, IntTensor, SpikeTensor};

/// Residual scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Shortcut {
    /// Membrane shortcut: potentials are added, branches start with a spiking layer.
    #[default]
    Ms,
    /// Spike-element-wise: spikes are added, the stream carries integer counts.
    Sew,
    /// Spike of the stream plus the branch potential.
    Vs,
}

impl Shortcut {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms" => Ok(Self::Ms),
            "sew" => Ok(Self::Sew),
            "vs" => Ok(Self::Vs),
            _ => Err(Error::Config(format!(
                "unknown shortcut `{s}` (ms, sew, vs)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ms => "ms",
            Self::Sew => "sew",
            Self::Vs => "vs",
        }
    }
}

/// An activation on the inference path.
#[derive(Clone, Debug, PartialEq)]
pub enum Act<S> {
    Potential(DenseTensor<S>),
    Spikes(SpikeTensor),
    Counts(IntTensor),
}

impl<S: Scalar> Act<S> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Act::Potential(t) => t.shape(),
            Act::Spikes(t) => t.shape(),
            Act::Counts(t) => t.shape(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Act::Potential(_) => "potential",
            Act::Spikes(_) => "spikes",
            Act::Counts(_) => "counts",
        }
    }

    pub fn to_dense(&self) -> DenseTensor<S> {
        match self {
            Act::Potential(t) => t.clone(),
            Act::Spikes(t) => t.to_dense(),
            Act::Counts(t) => t.to_dense(),
        }
    }

    fn outer(&self, i: usize) -> Self {
        match self {
            Act::Potential(t) => Act::Potential(t.outer(i)),
            Act::Spikes(t) => Act::Spikes(t.outer(i)),
            Act::Counts(t) => Act::Counts(t.outer(i)),
        }
    }
}

/// Residual addition `x + branch` under a shortcut scheme.
///
/// MS adds two potentials. SEW adds spikes (or counts) to spikes, giving counts. VS adds a
/// spike tensor and a potential in either order.
pub fn apply_shortcut<S: Scalar>(kind: Shortcut, x: &Act<S>, branch: &Act<S>) -> Result<Act<S>> {
    if x.shape() != branch.shape() {
        return shape_err(format!("shortcut {:?} vs {:?}", x.shape(), branch.shape()));
    }
    let kind_err = || {
        Err(Error::Kind(format!(
            "{} shortcut cannot add {} to {}",
            kind.as_str(),
            branch.kind(),
            x.kind()
        )))
    };
    match (kind, x, branch) {
        (Shortcut::Ms, Act::Potential(a), Act::Potential(b)) => Ok(Act::Potential(a.add(b)?)),
        (Shortcut::Sew, Act::Spikes(a), Act::Spikes(b)) => {
            Ok(Act::Counts(a.to_int().add(&b.to_int())?))
        }
        (Shortcut::Sew, Act::Counts(a), Act::Spikes(b)) => Ok(Act::Counts(a.add(&b.to_int())?)),
        (Shortcut::Vs, Act::Spikes(s), Act::Potential(p))
        | (Shortcut::Vs, Act::Potential(p), Act::Spikes(s)) => {
            Ok(Act::Potential(s.to_dense::<S>().add(p)?))
        }
        _ => kind_err(),
    }
}

/// Fold a 3x3 branch, a 1x1 branch and an identity branch, each scaled, into one 3x3 kernel.
pub fn repconv_fold<S: Scalar>(
    branch3x3: Option<&ConvKernel<S>>,
    branch1x1: Option<&ConvKernel<S>>,
    identity: bool,
    scales: [S; 3],
) -> Result<ConvKernel<S>> {
    let dims = branch3x3
        .map(|k| (k.c_out(), k.c_in()))
        .or_else(|| branch1x1.map(|k| (k.c_out(), k.c_in())));
    let (co, ci) = match (dims, identity) {
        (Some(d), _) => d,
        (None, true) => {
            return Err(Error::Fold(
                "identity-only fold needs a channel count; use repconv_identity".into(),
            ))
        }
        (None, false) => return Err(Error::Fold("no branches to fold".into())),
    };
    if let Some(k) = branch3x3 {
        if k.k() != 3 || k.stride != 1 || k.padding != 1 || k.groups != 1 {
            return Err(Error::Fold(
                "3x3 branch must be dense, stride 1, padding 1".into(),
            ));
        }
    }
    if let Some(k) = branch1x1 {
        if k.k() != 1
            || k.stride != 1
            || k.padding != 0
            || k.groups != 1
            || (k.c_out(), k.c_in()) != (co, ci)
        {
            return Err(Error::Fold(
                "1x1 branch must be dense, stride 1, unpadded, same channels".into(),
            ));
        }
    }
    if identity && co != ci {
        return Err(Error::Fold(format!(
            "identity branch needs equal channels, got {ci} -> {co}"
        )));
    }
    let mut w = vec![S::zero(); co * ci * 9];
    let mut bias = vec![S::zero(); co];
    if let Some(k) = branch3x3 {
        for (d, &v) in w.iter_mut().zip(k.weights.data()) {
            *d += scales[0] * v;
        }
        for (b, &v) in bias.iter_mut().zip(&k.bias) {
            *b += scales[0] * v;
        }
    }
    if let Some(k) = branch1x1 {
        for o in 0..co {
            for i in 0..ci {
                w[(o * ci + i) * 9 + 4] += scales[1] * k.weights.data()[o * ci + i];
            }
            bias[o] += scales[1] * k.bias[o];
        }
    }
    if identity {
        for o in 0..co {
            w[(o * ci + o) * 9 + 4] += scales[2];
        }
    }
    ConvKernel::with_groups(
        DenseTensor::from_parts(vec![co, ci, 3, 3], w),
        bias,
        1,
        1,
        1,
    )
}

/// Center-tap delta kernel: the folded form of an identity-only branch.
pub fn repconv_identity<S: Scalar>(channels: usize, scale: S) -> Result<ConvKernel<S>> {
    let mut w = vec![S::zero(); channels * channels * 9];
    for o in 0..channels {
        w[(o * channels + o) * 9 + 4] = scale;
    }
    ConvKernel::with_groups(
        DenseTensor::from_parts(vec![channels, channels, 3, 3], w),
        vec![S::zero(); channels],
        1,
        1,
        1,
    )
}

// ---------------------------------------------------------------------------------------
// Trainable blocks

/// Shared settings for recording blocks on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeCtx<S> {
    pub steps: usize,
    pub lif: LifParams<S>,
    pub shortcut: Shortcut,
    pub sdsa: SdsaConfig<S>,
    pub eps: S,
}

impl<S: Scalar> TapeCtx<S> {
    pub fn sn(&self, tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
        tape.lif(
            x,
            self.steps,
            Threshold::Const(self.lif.effective_threshold()),
            &self.lif,
        )
    }

    fn branch_input(&self, tape: &mut Tape<S>, x: NodeId) -> Result<(NodeId, NodeId)> {
        match self.shortcut {
            Shortcut::Ms => Ok((self.sn(tape, x)?, x)),
            Shortcut::Vs => {
                let s = self.sn(tape, x)?;
                Ok((s, s))
            }
            Shortcut::Sew => Ok((x, x)),
        }
    }

    fn merge(&self, tape: &mut Tape<S>, identity: NodeId, out: NodeId) -> Result<NodeId> {
        match self.shortcut {
            Shortcut::Ms | Shortcut::Vs => tape.add(identity, out),
            Shortcut::Sew => {
                let s = self.sn(tape, out)?;
                tape.add(identity, s)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct DownsampleParams {
    pub conv: ConvLayer,
    /// Takes raw input (no spiking layer in front).
    pub encoding: bool,
}

impl DownsampleParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        encoding: bool,
    ) -> Result<Self> {
        let spec = ConvSpec::new(c_in, c_out, k).stride(stride).bias(true);
        Ok(Self {
            conv: ConvLayer::new(store, rng, &format!("{name}.conv"), spec)?,
            encoding,
        })
    }

    pub fn tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ctx: &TapeCtx<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        match (ctx.shortcut, self.encoding) {
            (Shortcut::Sew, _) => {
                let y = self.conv.tape(tape, store, x, ctx.eps)?;
                ctx.sn(tape, y)
            }
            (_, true) => self.conv.tape(tape, store, x, ctx.eps),
            (_, false) => {
                let s = ctx.sn(tape, x)?;
                self.conv.tape(tape, store, s, ctx.eps)
            }
        }
    }

    pub fn compile<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        eps: S,
    ) -> Result<DownsampleKernels<S>> {
        Ok(DownsampleKernels {
            conv: self.conv.fold(store, eps)?,
            encoding: self.encoding,
        })
    }
}

/// SepConv (`pw1 -> SN -> dw 7x7 -> pw2`) then ChannelConv (`3x3 -> SN -> 3x3`).
#[derive(Clone, Debug)]
pub struct ConvBlockParams {
    pub pw1: ConvLayer,
    pub dw: ConvLayer,
    pub pw2: ConvLayer,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ConvBlockParams {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c: usize,
    ) -> Result<Self> {
        let mut layer = |n: &str, spec| ConvLayer::new(store, rng, &format!("{name}.{n}"), spec);
        Ok(Self {
            pw1: layer("sepconv.pw1", ConvSpec::new(c, 2 * c, 1))?,
            dw: layer(
                "sepconv.dw",
                ConvSpec::new(2 * c, 2 * c, 7).groups(2 * c).norm(false),
            )?,
            pw2: layer("sepconv.pw2", ConvSpec::new(2 * c, c, 1))?,
            conv1: layer("channel_conv.conv1", ConvSpec::new(c, 4 * c, 3))?,
            conv2: layer("channel_conv.conv2", ConvSpec::new(4 * c, c, 3))?,
        })
    }

    pub fn tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ctx: &TapeCtx<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (inp, id) = ctx.branch_input(tape, x)?;
        let a = self.pw1.tape(tape, store, inp, ctx.eps)?;
        let a = ctx.sn(tape, a)?;
        let a = self.dw.tape(tape, store, a, ctx.eps)?;
        let a = self.pw2.tape(tape, store, a, ctx.eps)?;
        let x = ctx.merge(tape, id, a)?;
        let (inp, id) = ctx.branch_input(tape, x)?;
        let a = self.conv1.tape(tape, store, inp, ctx.eps)?;
        let a = ctx.sn(tape, a)?;
        let a = self.conv2.tape(tape, store, a, ctx.eps)?;
        ctx.merge(tape, id, a)
    }

    pub fn compile<S: Scalar>(&self, store: &ParamStore<S>, eps: S) -> Result<ConvBlockKernels<S>> {
        let fused = compose_depthwise_pointwise(&self.dw.kernel(store)?, &self.pw2.kernel(store)?)?;
        let dw_pw2 = match &self.pw2.norm {
            Some(n) => {
                let (a, b) = n.scale_shift(store, eps);
                fold_affine(fused, &a, &b)?
            }
            None => fused,
        };
        Ok(ConvBlockKernels {
            pw1: self.pw1.fold(store, eps)?,
            dw_pw2,
            conv1: self.conv1.fold(store, eps)?,
            conv2: self.conv2.fold(store, eps)?,
        })
    }
}

/// Spike-driven self-attention with RepConv projections, then the channel MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlockParams {
    pub dim: usize,
    pub q: RepConv,
    pub k: Option<RepConv>,
    pub v: RepConv,
    pub proj: RepConv,
    pub threshold: Option<ParamId>,
    pub fc1: ConvLayer,
    pub fc2: ConvLayer,
}

impl TransformerBlockParams {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        sdsa: &SdsaConfig<S>,
        lif: &LifParams<S>,
    ) -> Result<Self> {
        let q = RepConv::new(store, rng, &format!("{name}.sdsa.q"), dim);
        let k = sdsa
            .variant
            .uses_key()
            .then(|| RepConv::new(store, rng, &format!("{name}.sdsa.k"), dim));
        let v = RepConv::new(store, rng, &format!("{name}.sdsa.v"), dim);
        let proj = RepConv::new(store, rng, &format!("{name}.sdsa.proj"), dim);
        let threshold = (sdsa.variant == SdsaVariant::Learnable4).then(|| {
            store.add(
                format!("{name}.sdsa.threshold"),
                ParamRole::Threshold,
                DenseTensor::scalar(sdsa.threshold_scale * lif.threshold),
            )
        });
        let fc1 = ConvLayer::new(
            store,
            rng,
            &format!("{name}.mlp.linear1"),
            ConvSpec::new(dim, 4 * dim, 1).bias(true),
        )?;
        let fc2 = ConvLayer::new(
            store,
            rng,
            &format!("{name}.mlp.linear2"),
            ConvSpec::new(4 * dim, dim, 1).bias(true),
        )?;
        Ok(Self {
            dim,
            q,
            k,
            v,
            proj,
            threshold,
            fc1,
            fc2,
        })
    }

    pub fn tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ctx: &TapeCtx<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (inp, id) = ctx.branch_input(tape, x)?;
        let attn = self.sdsa_tape(tape, store, ctx, inp)?;
        let out = self.proj.tape(tape, store, attn, ctx.eps)?;
        let x = ctx.merge(tape, id, out)?;
        let (inp, id) = ctx.branch_input(tape, x)?;
        let h = self.fc1.tape(tape, store, inp, ctx.eps)?;
        let h = ctx.sn(tape, h)?;
        let out = self.fc2.tape(tape, store, h, ctx.eps)?;
        ctx.merge(tape, id, out)
    }

    fn sdsa_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ctx: &TapeCtx<S>,
        inp: NodeId,
    ) -> Result<NodeId> {
        let lif = ctx.lif;
        let q = self.q.tape(tape, store, inp, ctx.eps)?;
        let q = ctx.sn(tape, q)?;
        let v = self.v.tape(tape, store, inp, ctx.eps)?;
        let v = ctx.sn(tape, v)?;
        let k = match &self.k {
            Some(k) => {
                let k = k.tape(tape, store, inp, ctx.eps)?;
                Some(ctx.sn(tape, k)?)
            }
            None => None,
        };
        let need_k = || Error::Config("SDSA variant needs a key projection".into());
        let plain = Threshold::Const(lif.threshold);
        match ctx.sdsa.variant {
            SdsaVariant::Mask1 => {
                let kv = tape.mul(k.ok_or_else(need_k)?, v)?;
                let col = tape.sum_tokens(kv)?;
                let gate = tape.lif(col, ctx.steps, plain, &lif)?;
                tape.mul_bcast(q, gate)
            }
            SdsaVariant::Mask2 => {
                let col = tape.sum_tokens(q)?;
                let gate = tape.lif(col, ctx.steps, plain, &lif)?;
                tape.mul_bcast(v, gate)
            }
            SdsaVariant::Linear3 | SdsaVariant::Learnable4 => {
                let acc = tape.linear_attn(q, k.ok_or_else(need_k)?, v, ctx.sdsa.heads)?;
                let scaled = lif.with_scale(ctx.sdsa.threshold_scale);
                let th = match self.threshold {
                    Some(id) => Threshold::Node(tape.param(store, id)),
                    None => Threshold::Const(scaled.effective_threshold()),
                };
                tape.lif(acc, ctx.steps, th, &scaled)
            }
        }
    }

    pub fn compile<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        eps: S,
        sdsa: &SdsaConfig<S>,
    ) -> Result<TransformerBlockKernels<S>> {
        Ok(TransformerBlockKernels {
            q: self.q.fold(store, eps)?,
            k: self.k.as_ref().map(|k| k.fold(store, eps)).transpose()?,
            v: self.v.fold(store, eps)?,
            proj: self.proj.fold(store, eps)?,
            fc1: self.fc1.fold(store, eps)?,
            fc2: self.fc2.fold(store, eps)?,
            sdsa: SdsaConfig {
                dim: self.dim,
                ..*sdsa
            },
            learned_threshold: self.threshold.map(|id| store.get(id).data()[0]),
        })
    }
}

// ---------------------------------------------------------------------------------------
// Inference

/// Executes the convolutions and attention operators of the inference path.
pub trait SpikeBackend<S: Scalar>: Sync {
    fn name(&self) -> &'static str;

    /// `(C, H, W)` binary map.
    fn conv_spikes(
        &self,
        s: &SpikeTensor,
        k: &ConvKernel<S>,
        ops: &mut OpCounter,
    ) -> Result<DenseTensor<S>>;

    /// `(C, H, W)` integer map.
    fn conv_counts(
        &self,
        s: &IntTensor,
        k: &ConvKernel<S>,
        ops: &mut OpCounter,
    ) -> Result<DenseTensor<S>>;

    /// Attention over `(T, N, D)` spikes.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        cfg: &SdsaConfig<S>,
        lif: &LifParams<S>,
        learned: Option<S>,
        q: &SpikeTensor,
        k: &SpikeTensor,
        v: &SpikeTensor,
        stats: &mut SdsaStats,
    ) -> Result<SpikeTensor>;
}

/// Addition-only scatter kernels.
#[derive(Clone, Copy, Debug, Default)]
pub struct EventBackend;

impl<S: Scalar> SpikeBackend<S> for EventBackend {
    fn name(&self) -> &'static str {
        "event"
    }

    fn conv_spikes(
        &self,
        s: &SpikeTensor,
        k: &ConvKernel<S>,
        ops: &mut OpCounter,
    ) -> Result<DenseTensor<S>> {
        event_conv2d_counted(s, k, ops)
    }

    fn conv_counts(
        &self,
        s: &IntTensor,
        k: &ConvKernel<S>,
        ops: &mut OpCounter,
    ) -> Result<DenseTensor<S>> {
        int_conv2d_counted(s, k, ops)
    }

    fn attention(
        &self,
        cfg: &SdsaConfig<S>,
        lif: &LifParams<S>,
        learned: Option<S>,
        q: &SpikeTensor,
        k: &SpikeTensor,
        v: &SpikeTensor,
        stats: &mut SdsaStats,
    ) -> Result<SpikeTensor> {
        sdsa_forward(cfg, lif, learned, q, k, v, stats)
    }
}

/// Floating-point reference: spikes are cast to reals and multiplied.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseBackend;

fn spikes_from_reals<S: Scalar>(t: &DenseTensor<S>) -> Result<SpikeTensor> {
    SpikeTensor::from_bools(
        t.shape().to_vec(),
        t.data().iter().map(|&v| v != S::zero()).collect::<Vec<_>>(),
    )
}

fn nonzero_fraction<S: Scalar>(v: &[S]) -> f64 {
    v.iter().filter(|&&x| x != S::zero()).count() as f64 / v.len().max(1) as f64
}

impl<S: Scalar> SpikeBackend<S> for DenseBackend {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn conv_spikes(
        &self,
        s: &SpikeTensor,
        k: &ConvKernel<S>,
        _ops: &mut OpCounter,
    ) -> Result<DenseTensor<S>> {
        dense_conv2d(&s.to_dense(), k)
    }

    fn conv_counts(
        &self,
        s: &IntTensor,
        k: &ConvKernel<S>,
        _ops: &mut OpCounter,
    ) -> Result<DenseTensor<S>> {
        dense_conv2d(&s.to_dense(), k)
    }

    fn attention(
        &self,
        cfg: &SdsaConfig<S>,
        lif: &LifParams<S>,
        learned: Option<S>,
        q: &SpikeTensor,
        k: &SpikeTensor,
        v: &SpikeTensor,
        stats: &mut SdsaStats,
    ) -> Result<SpikeTensor> {
        let sh = q.shape();
        if sh.len() != 3 || k.shape() != sh || v.shape() != sh {
            return shape_err("attention operands must share a (T, N, D) shape");
        }
        let (steps, n, d) = (sh[0], sh[1], sh[2]);
        let (qd, kd, vd) = (
            q.to_dense::<f64>(),
            k.to_dense::<f64>(),
            v.to_dense::<f64>(),
        );
        match cfg.variant {
            SdsaVariant::Mask1 | SdsaVariant::Mask2 => {
                let mut cols = Vec::with_capacity(steps * d);
                for t in 0..steps {
                    let (qt, kt, vt) = (qd.outer(t), kd.outer(t), vd.outer(t));
                    let src: Vec<f64> = if cfg.variant == SdsaVariant::Mask1 {
                        let kv: Vec<f64> = kt
                            .data()
                            .iter()
                            .zip(vt.data())
                            .map(|(a, b)| a * b)
                            .collect();
                        stats.kv_rate.push(nonzero_fraction(&kv));
                        kv
                    } else {
                        qt.data().to_vec()
                    };
                    let col: Vec<f64> = (0..d)
                        .map(|j| (0..n).map(|i| src[i * d + j]).sum())
                        .collect();
                    stats.product_rate.push(nonzero_fraction(&col));
                    cols.extend(col.into_iter().map(S::of));
                }
                let gate = sn_forward_threshold(
                    lif,
                    lif.threshold,
                    &DenseTensor::from_parts(vec![steps, d], cols),
                )?;
                let masked = if cfg.variant == SdsaVariant::Mask1 {
                    &qd
                } else {
                    &vd
                };
                let out: Vec<f64> = (0..steps * n * d)
                    .map(|i| {
                        masked.data()[i]
                            * if gate.get((i / (n * d)) * d + i % d) {
                                1.0
                            } else {
                                0.0
                            }
                    })
                    .collect();
                spikes_from_reals(&DenseTensor::from_parts(vec![steps, n, d], out))
            }
            SdsaVariant::Linear3 | SdsaVariant::Learnable4 => {
                let heads = cfg.heads;
                if heads == 0 || d % heads != 0 {
                    return shape_err(format!("dim {d} not divisible by {heads} heads"));
                }
                let dh = d / heads;
                let mut acc = vec![S::zero(); steps * n * d];
                for t in 0..steps {
                    let mut kv_nonzero = 0usize;
                    for h in 0..heads {
                        let cols = |m: &DenseTensor<f64>| {
                            let data = (0..n)
                                .flat_map(|i| (0..dh).map(move |j| (i, j)))
                                .map(|(i, j)| m.data()[(t * n + i) * d + h * dh + j])
                                .collect();
                            DenseTensor::from_parts(vec![n, dh], data)
                        };
                        let (qh, kh, vh) = (cols(&qd), cols(&kd), cols(&vd));
                        let kt = DenseTensor::from_parts(
                            vec![dh, n],
                            (0..dh * n)
                                .map(|i| kh.data()[(i % n) * dh + i / n])
                                .collect(),
                        );
                        let kv = dense_matmul(&kt, &vh)?;
                        kv_nonzero += kv.data().iter().filter(|&&x| x != 0.0).count();
                        let p = dense_matmul(&qh, &kv)?;
                        for i in 0..n {
                            for j in 0..dh {
                                acc[(t * n + i) * d + h * dh + j] = S::of(p.data()[i * dh + j]);
                            }
                        }
                    }
                    stats
                        .kv_rate
                        .push(kv_nonzero as f64 / (heads * dh * dh) as f64);
                    stats
                        .product_rate
                        .push(nonzero_fraction(&acc[t * n * d..(t + 1) * n * d]));
                }
                let scaled = lif.with_scale(cfg.threshold_scale);
                let th = match (cfg.variant, learned) {
                    (SdsaVariant::Learnable4, Some(th)) => th,
                    _ => scaled.effective_threshold(),
                };
                sn_forward_threshold(
                    &scaled,
                    th,
                    &DenseTensor::from_parts(vec![steps, n, d], acc),
                )
            }
        }
    }
}

/// Where a convolution's operand came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Pixels,
    Spikes,
    Counts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub layer: String,
    pub input: InputKind,
    /// Every operand element was checked to be 0 or 1.
    pub binary: bool,
    /// Largest operand value (counts), 1 for binary inputs.
    pub max_value: u32,
    pub encoding: bool,
}

/// Per-layer input firing rates (per timestep), operand audit, and addition counts.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub rates: Vec<(String, Vec<f64>)>,
    pub audit: Vec<AuditEntry>,
    pub ops: OpCounter,
}

impl Probe {
    pub fn record_rate(&mut self, layer: impl Into<String>, per_t: Vec<f64>) {
        self.rates.push((layer.into(), per_t));
    }

    /// True if every non-encoding operand was binary, or integer counts when allowed.
    pub fn spike_path_ok(&self, allow_counts: bool) -> bool {
        self.audit.iter().all(|e| match e.input {
            InputKind::Pixels => e.encoding,
            InputKind::Spikes => e.binary,
            InputKind::Counts => allow_counts,
        })
    }

    fn add_ops(&mut self, ops: OpCounter) {
        self.ops.additions += ops.additions;
        self.ops.events += ops.events;
    }
}

/// Nonzero fraction of each timestep slice of a time-major activation.
pub fn rates_per_t<S: Scalar>(act: &Act<S>, steps: usize) -> Vec<f64> {
    let nonzero: Box<dyn Fn(usize) -> bool + '_> = match act {
        Act::Potential(_) => return vec![1.0; steps],
        Act::Spikes(s) => Box::new(move |i| s.data()[i] != 0),
        Act::Counts(c) => Box::new(move |i| c.data()[i] != 0),
    };
    let len: usize = act.shape().iter().product();
    let slice = len / steps.max(1);
    (0..steps)
        .map(|t| {
            (t * slice..(t + 1) * slice).filter(|&i| nonzero(i)).count() as f64
                / slice.max(1) as f64
        })
        .collect()
}

/// Runs compiled blocks on one backend and records a [`Probe`].
pub struct Runner<'a, S: Scalar, B: SpikeBackend<S> + ?Sized> {
    pub backend: &'a B,
    pub lif: LifParams<S>,
    pub steps: usize,
    pub shortcut: Shortcut,
    pub probe: Probe,
}

impl<'a, S: Scalar, B: SpikeBackend<S> + ?Sized> Runner<'a, S, B> {
    pub fn new(backend: &'a B, lif: LifParams<S>, steps: usize, shortcut: Shortcut) -> Self {
        Self {
            backend,
            lif,
            steps,
            shortcut,
            probe: Probe::default(),
        }
    }

    /// Spiking layer over a time-major activation.
    pub fn sn(&self, u: &DenseTensor<S>) -> Result<SpikeTensor> {
        self.sn_threshold(u, self.lif.effective_threshold())
    }

    fn sn_threshold(&self, u: &DenseTensor<S>, th: S) -> Result<SpikeTensor> {
        let shape = u.shape().to_vec();
        let lead = *shape.first().unwrap_or(&0);
        if self.steps == 0 || lead % self.steps != 0 {
            return shape_err(format!(
                "leading axis {lead} not divisible by {} timesteps",
                self.steps
            ));
        }
        let seq = u.clone().reshape(&[self.steps, u.len() / self.steps])?;
        sn_forward_threshold(&self.lif, th, &seq)?.reshape(&shape)
    }

    /// Convolve every sample of `x`, recording the operand in the audit and, if `layer`
    /// is given, its per-timestep rate.
    pub fn conv(
        &mut self,
        layer: &str,
        record: bool,
        x: &Act<S>,
        k: &ConvKernel<S>,
        encoding: bool,
    ) -> Result<DenseTensor<S>> {
        let (input, binary, max_value) = match x {
            Act::Potential(_) if !encoding => {
                return Err(Error::Kind(format!(
                    "{layer}: real-valued operand on the spike path"
                )));
            }
            Act::Potential(_) => (InputKind::Pixels, false, 0),
            Act::Spikes(s) => (InputKind::Spikes, s.data().iter().all(|&v| v <= 1), 1),
            Act::Counts(c) => (InputKind::Counts, c.max() <= 1, c.max()),
        };
        self.probe.audit.push(AuditEntry {
            layer: layer.to_string(),
            input,
            binary,
            max_value,
            encoding,
        });
        if record {
            self.probe.record_rate(layer, rates_per_t(x, self.steps));
        }
        let n = *x.shape().first().ok_or(Error::EmptyTensor)?;
        let backend = self.backend;
        let parts: Vec<(DenseTensor<S>, OpCounter)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut ops = OpCounter::default();
                let y = match x.outer(i) {
                    Act::Potential(p) => dense_conv2d(&p, k)?,
                    Act::Spikes(s) => backend.conv_spikes(&s, k, &mut ops)?,
                    Act::Counts(c) => backend.conv_counts(&c, k, &mut ops)?,
                };
                Ok((y, ops))
            })
            .collect::<Result<_>>()?;
        let mut outs = Vec::with_capacity(n);
        for (y, ops) in parts {
            self.probe.add_ops(ops);
            outs.push(y);
        }
        DenseTensor::stack(&outs)
    }

    fn branch_input(&self, x: &Act<S>) -> Result<(Act<S>, Act<S>)> {
        match (self.shortcut, x) {
            (Shortcut::Ms, Act::Potential(u)) => Ok((Act::Spikes(self.sn(u)?), x.clone())),
            (Shortcut::Vs, Act::Potential(u)) => {
                let s = Act::Spikes(self.sn(u)?);
                Ok((s.clone(), s))
            }
            (Shortcut::Sew, Act::Spikes(_) | Act::Counts(_)) => Ok((x.clone(), x.clone())),
            _ => Err(Error::Kind(format!(
                "{} stream cannot carry {}",
                self.shortcut.as_str(),
                x.kind()
            ))),
        }
    }

    fn merge(&self, identity: &Act<S>, out: DenseTensor<S>) -> Result<Act<S>> {
        match self.shortcut {
            Shortcut::Ms | Shortcut::Vs => {
                apply_shortcut(self.shortcut, identity, &Act::Potential(out))
            }
            Shortcut::Sew => apply_shortcut(self.shortcut, identity, &Act::Spikes(self.sn(&out)?)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DownsampleKernels<S> {
    pub conv: ConvKernel<S>,
    pub encoding: bool,
}

impl<S: Scalar> DownsampleKernels<S> {
    pub fn forward<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        x: &Act<S>,
    ) -> Result<Act<S>> {
        let layer = format!("{name}.conv");
        let operand = match (r.shortcut, x) {
            (_, Act::Potential(_)) if self.encoding => x.clone(),
            (Shortcut::Sew, _) => x.clone(),
            (_, Act::Potential(u)) => Act::Spikes(r.sn(u)?),
            _ => {
                return Err(Error::Kind(format!(
                    "{layer}: unexpected {} stream",
                    x.kind()
                )))
            }
        };
        let y = r.conv(&layer, true, &operand, &self.conv, self.encoding)?;
        Ok(match r.shortcut {
            Shortcut::Sew => Act::Spikes(r.sn(&y)?),
            _ => Act::Potential(y),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlockKernels<S> {
    pub pw1: ConvKernel<S>,
    /// Depthwise 7x7 and pointwise contraction fused into one dense 7x7 kernel.
    pub dw_pw2: ConvKernel<S>,
    pub conv1: ConvKernel<S>,
    pub conv2: ConvKernel<S>,
}

impl<S: Scalar> ConvBlockKernels<S> {
    fn sepconv_from<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        inp: &Act<S>,
    ) -> Result<DenseTensor<S>> {
        let a = r.conv(&format!("{name}.sepconv.pw1"), true, inp, &self.pw1, false)?;
        let a = Act::Spikes(r.sn(&a)?);
        r.conv(
            &format!("{name}.sepconv.dw_pw2"),
            true,
            &a,
            &self.dw_pw2,
            false,
        )
    }

    fn channel_conv_from<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        inp: &Act<S>,
    ) -> Result<DenseTensor<S>> {
        let a = r.conv(
            &format!("{name}.channel_conv.conv1"),
            true,
            inp,
            &self.conv1,
            false,
        )?;
        let a = Act::Spikes(r.sn(&a)?);
        r.conv(
            &format!("{name}.channel_conv.conv2"),
            true,
            &a,
            &self.conv2,
            false,
        )
    }

    /// SepConv branch on membrane potentials `u`.
    pub fn sepconv<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        u: &DenseTensor<S>,
    ) -> Result<DenseTensor<S>> {
        let s = Act::Spikes(r.sn(u)?);
        self.sepconv_from(r, "sepconv", &s)
    }

    /// ChannelConv branch on membrane potentials `u`.
    pub fn channel_conv<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        u: &DenseTensor<S>,
    ) -> Result<DenseTensor<S>> {
        let s = Act::Spikes(r.sn(u)?);
        self.channel_conv_from(r, "channel_conv", &s)
    }

    pub fn forward<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        x: &Act<S>,
    ) -> Result<Act<S>> {
        let (inp, id) = r.branch_input(x)?;
        let out = self.sepconv_from(r, name, &inp)?;
        let x = r.merge(&id, out)?;
        let (inp, id) = r.branch_input(&x)?;
        let out = self.channel_conv_from(r, name, &inp)?;
        r.merge(&id, out)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlockKernels<S> {
    pub q: ConvKernel<S>,
    pub k: Option<ConvKernel<S>>,
    pub v: ConvKernel<S>,
    pub proj: ConvKernel<S>,
    pub fc1: ConvKernel<S>,
    pub fc2: ConvKernel<S>,
    pub sdsa: SdsaConfig<S>,
    pub learned_threshold: Option<S>,
}

/// `(T*B, D, H, W)` spikes to per-sample `(T, N, D)` token matrices.
fn to_tokens(s: &SpikeTensor, steps: usize) -> Vec<SpikeTensor> {
    let sh = s.shape();
    let (tb, d, n) = (sh[0], sh[1], sh[2] * sh[3]);
    let b = tb / steps;
    (0..b)
        .map(|bi| {
            let mut data = vec![0u8; steps * n * d];
            for t in 0..steps {
                let src = &s.data()[(t * b + bi) * d * n..(t * b + bi + 1) * d * n];
                for c in 0..d {
                    for i in 0..n {
                        data[(t * n + i) * d + c] = src[c * n + i];
                    }
                }
            }
            SpikeTensor::from_parts(vec![steps, n, d], data)
        })
        .collect()
}

fn from_tokens(parts: &[SpikeTensor], shape: &[usize]) -> SpikeTensor {
    let (tb, d, n) = (shape[0], shape[1], shape[2] * shape[3]);
    let b = parts.len();
    let steps = tb / b.max(1);
    let mut data = vec![0u8; tb * d * n];
    for (bi, p) in parts.iter().enumerate() {
        for t in 0..steps {
            let dst = &mut data[(t * b + bi) * d * n..(t * b + bi + 1) * d * n];
            for i in 0..n {
                for c in 0..d {
                    dst[c * n + i] = p.data()[(t * n + i) * d + c];
                }
            }
        }
    }
    SpikeTensor::from_parts(shape.to_vec(), data)
}

fn mean_over_samples(per_sample: &[Vec<f64>]) -> Vec<f64> {
    let len = per_sample.first().map_or(0, |v| v.len());
    (0..len)
        .map(|t| per_sample.iter().map(|v| v[t]).sum::<f64>() / per_sample.len() as f64)
        .collect()
}

impl<S: Scalar> TransformerBlockKernels<S> {
    fn sdsa_from<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        inp: &Act<S>,
    ) -> Result<SpikeTensor> {
        let qkv_name = format!("{name}.sdsa.repconv_qkv");
        let q = r.conv(&qkv_name, true, inp, &self.q, false)?;
        let q = r.sn(&q)?;
        let k = match &self.k {
            Some(k) => {
                let y = r.conv(&qkv_name, false, inp, k, false)?;
                Some(r.sn(&y)?)
            }
            None => None,
        };
        let v = r.conv(&qkv_name, false, inp, &self.v, false)?;
        let v = r.sn(&v)?;
        let steps = r.steps;
        r.probe.record_rate(
            format!("{name}.sdsa.q"),
            rates_per_t(&Act::<S>::Spikes(q.clone()), steps),
        );
        if let Some(k) = &k {
            r.probe.record_rate(
                format!("{name}.sdsa.k"),
                rates_per_t(&Act::<S>::Spikes(k.clone()), steps),
            );
        }
        r.probe.record_rate(
            format!("{name}.sdsa.v"),
            rates_per_t(&Act::<S>::Spikes(v.clone()), steps),
        );
        let shape = q.shape().to_vec();
        let qt = to_tokens(&q, steps);
        let vt = to_tokens(&v, steps);
        let kt = match &k {
            Some(k) => to_tokens(k, steps),
            None => qt.clone(),
        };
        let backend = r.backend;
        let lif = r.lif;
        let results: Vec<(SpikeTensor, SdsaStats)> = (0..qt.len())
            .into_par_iter()
            .map(|b| {
                let mut stats = SdsaStats::default();
                let out = backend.attention(
                    &self.sdsa,
                    &lif,
                    self.learned_threshold,
                    &qt[b],
                    &kt[b],
                    &vt[b],
                    &mut stats,
                )?;
                Ok((out, stats))
            })
            .collect::<Result<_>>()?;
        let mut outs = Vec::with_capacity(results.len());
        let mut kv = Vec::new();
        let mut prod = Vec::new();
        for (o, st) in results {
            r.probe.add_ops(st.ops);
            if !st.kv_rate.is_empty() {
                kv.push(st.kv_rate);
            }
            prod.push(st.product_rate);
            outs.push(o);
        }
        if !kv.is_empty() {
            r.probe
                .record_rate(format!("{name}.sdsa.kv"), mean_over_samples(&kv));
        }
        r.probe
            .record_rate(format!("{name}.sdsa.qkv"), mean_over_samples(&prod));
        for (tag, binary) in [("q", true), ("v", true)] {
            r.probe.audit.push(AuditEntry {
                layer: format!("{name}.sdsa.{tag}"),
                input: InputKind::Spikes,
                binary: binary && q.data().iter().chain(v.data()).all(|&x| x <= 1),
                max_value: 1,
                encoding: false,
            });
        }
        Ok(from_tokens(&outs, &shape))
    }

    fn mlp_from<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        inp: &Act<S>,
    ) -> Result<DenseTensor<S>> {
        let h = r.conv(&format!("{name}.mlp.linear1"), true, inp, &self.fc1, false)?;
        let h = Act::Spikes(r.sn(&h)?);
        r.conv(&format!("{name}.mlp.linear2"), true, &h, &self.fc2, false)
    }

    /// Attention branch `RepConv4(SDSA(Q, K, V))` on membrane potentials `u`.
    pub fn attention_branch<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        u: &DenseTensor<S>,
    ) -> Result<DenseTensor<S>> {
        let s = Act::Spikes(r.sn(u)?);
        let a = Act::Spikes(self.sdsa_from(r, "attn", &s)?);
        r.conv("attn.sdsa.repconv4", true, &a, &self.proj, false)
    }

    /// Channel MLP branch `W2(SN(W1(SN(u))))`.
    pub fn channel_mlp<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        u: &DenseTensor<S>,
    ) -> Result<DenseTensor<S>> {
        let s = Act::Spikes(r.sn(u)?);
        self.mlp_from(r, "mlp", &s)
    }

    pub fn forward<B: SpikeBackend<S> + ?Sized>(
        &self,
        r: &mut Runner<S, B>,
        name: &str,
        x: &Act<S>,
    ) -> Result<Act<S>> {
        let (inp, id) = r.branch_input(x)?;
        let a = Act::Spikes(self.sdsa_from(r, name, &inp)?);
        let out = r.conv(
            &format!("{name}.sdsa.repconv4"),
            true,
            &a,
            &self.proj,
            false,
        )?;
        let x = r.merge(&id, out)?;
        let (inp, id) = r.branch_input(&x)?;
        let out = self.mlp_from(r, name, &inp)?;
        r.merge(&id, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shortcut_examples() {
        let u = DenseTensor::new(vec![1, 2], vec![0.5f64, -1.0]).unwrap();
        let zero = Act::Potential(DenseTensor::zeros(&[1, 2]));
        assert_eq!(
            apply_shortcut(Shortcut::Ms, &Act::Potential(u.clone()), &zero).unwrap(),
            Act::Potential(u)
        );

        let ones = Act::<f64>::Spikes(SpikeTensor::ones(&[2, 2]));
        match apply_shortcut(Shortcut::Sew, &ones, &ones).unwrap() {
            Act::Counts(c) => assert!(c.data().iter().all(|&v| v == 2)),
            other => panic!("expected counts, got {other:?}"),
        }
        assert!(matches!(
            apply_shortcut(Shortcut::Ms, &ones, &ones),
            Err(Error::Kind(_))
        ));

        let s = Act::<f64>::Spikes(SpikeTensor::ones(&[1]));
        let p = Act::Potential(DenseTensor::new(vec![1], vec![0.3]).unwrap());
        match apply_shortcut(Shortcut::Vs, &s, &p).unwrap() {
            Act::Potential(t) => assert!((t.data()[0] - 1.3).abs() < 1e-15),
            other => panic!("expected potential, got {other:?}"),
        }
    }

    #[test]
    fn identity_only_fold_is_delta() {
        let k = repconv_identity::<f64>(3, 1.0).unwrap();
        let x = DenseTensor::new(vec![3, 4, 4], (0..48).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(dense_conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn one_by_one_branch_lands_on_center_tap() {
        let w = DenseTensor::new(vec![1, 1, 1, 1], vec![2.5f64]).unwrap();
        let k1 = ConvKernel::with_groups(w, vec![0.0], 1, 0, 1).unwrap();
        let f = repconv_fold(None, Some(&k1), false, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(
            f.weights.data(),
            &[0.0, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn token_layout_roundtrip() {
        let s =
            SpikeTensor::from_bools(vec![6, 4, 2, 3], (0..144).map(|i| (i * 7) % 5 < 2)).unwrap();
        let parts = to_tokens(&s, 3);
        assert_eq!(parts.len(), 2);
        assert_eq!(from_tokens(&parts, s.shape()), s);
    }
}
