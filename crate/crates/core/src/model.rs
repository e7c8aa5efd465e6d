//! Four-stage network assembly, parameter counting, and the forward passes.
//!
//! Stage 1: 7x7/2 encoding conv, Conv block(s), 3x3/2 conv, Conv block(s).
//! Stage 2: 3x3/2 conv, Conv blocks. Stage 3: 3x3/2 conv, Transformer blocks.
//! Stage 4: 3x3/1 conv, Transformer blocks. Head: pool, SN, linear, mean over time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{SdsaConfig, SdsaVariant};
use crate::autodiff::{NodeId, NormBatchStats, NormMode, Tape};
use crate::blocks::{
    Act, ConvBlockKernels, ConvBlockParams, DenseBackend, DownsampleKernels, DownsampleParams,
    EventBackend, Probe, Runner, Shortcut, SpikeBackend, TapeCtx, TransformerBlockKernels,
    TransformerBlockParams,
};
use crate::error::{shape_err, Error, Result};
use crate::kernels::ConvKernel;
use crate::layers::{ConvLayer, ConvSpec};
use crate::neuron::LifParams;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `C`; stage widths are `C, 2C, 4C, 8C` and `stage4_dim`.
    pub base_channels: usize,
    pub stage4_dim: usize,
    /// Blocks in stage 1 (first half), stage 1 (second half), stage 2, 3, 4.
    pub blocks: [usize; 5],
    pub in_channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub sdsa_variant: SdsaVariant,
    pub heads: usize,
    pub threshold_scale: f64,
    pub shortcut: Shortcut,
    pub lif: LifParams<f64>,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_channels(48)
    }
}

impl ModelConfig {
    /// ImageNet-scale layout with stage-4 width `10C`.
    pub fn with_channels(c: usize) -> Self {
        Self {
            base_channels: c,
            stage4_dim: 10 * c,
            blocks: [1, 1, 2, 6, 2],
            in_channels: 3,
            resolution: 224,
            num_classes: 1000,
            timesteps: 1,
            sdsa_variant: SdsaVariant::Linear3,
            heads: 8,
            threshold_scale: 0.125,
            shortcut: Shortcut::Ms,
            lif: LifParams::default(),
            norm_eps: 1e-5,
            seed: 0,
        }
    }

    /// The three published sizes, `C` in {32, 48, 64}.
    pub fn preset(c: usize) -> Result<Self> {
        let stage4_dim = match c {
            32 => 360,
            48 => 480,
            64 => 640,
            _ => return Err(Error::Config(format!("no preset for C={c} (32, 48, 64)"))),
        };
        Ok(Self {
            stage4_dim,
            ..Self::with_channels(c)
        })
    }

    /// Small two-class model for desk-scale training.
    pub fn toy() -> Self {
        Self {
            blocks: [1, 1, 1, 1, 1],
            resolution: 16,
            num_classes: 2,
            ..Self::with_channels(8)
        }
    }

    pub fn dims(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, self.stage4_dim]
    }

    /// Spatial side after each downsampling conv.
    pub fn spatial(&self) -> [usize; 5] {
        let down = |h: usize, k: usize, s: usize| (h + 2 * (k / 2)).saturating_sub(k) / s + 1;
        let a = down(self.resolution, 7, 2);
        let b = down(a, 3, 2);
        let c = down(b, 3, 2);
        let d = down(c, 3, 2);
        [a, b, c, d, down(d, 3, 1)]
    }

    pub fn tokens(&self) -> [usize; 5] {
        self.spatial().map(|s| s * s)
    }

    pub fn sdsa<S: Scalar>(&self, dim: usize) -> SdsaConfig<S> {
        SdsaConfig {
            variant: self.sdsa_variant,
            heads: self.heads,
            dim,
            threshold_scale: S::of(self.threshold_scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.stage4_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.blocks[0] == 0 && self.blocks[1] == 0 {
            return bad("stage 1 needs at least one block".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.timesteps == 0 {
            return bad("in_channels, num_classes and timesteps must be positive".into());
        }
        if self.resolution < 16 {
            return bad(format!(
                "resolution {} below the minimum of 16",
                self.resolution
            ));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be > 0".into());
        }
        self.lif.validate()?;
        let dims = self.dims();
        for &d in &dims[3..] {
            self.sdsa::<f64>(d).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Unit {
    Downsample(DownsampleParams),
    Conv(ConvBlockParams),
    Transformer(TransformerBlockParams),
}

/// Trainable network: parameters plus structure.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub units: Vec<(String, Unit)>,
    pub head: ConvLayer,
}

pub fn build_model<S: Scalar>(cfg: &ModelConfig) -> Result<Model<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let mut units = Vec::new();
    let [d1, d2, d3, d4, d5] = cfg.dims();
    let sdsa = cfg.sdsa::<S>(d4);
    let lif = cfg.lif.cast::<S>();
    let ds = |store: &mut ParamStore<S>,
              rng: &mut ChaCha8Rng,
              name: &str,
              ci,
              co,
              k,
              s,
              enc|
     -> Result<(String, Unit)> {
        Ok((
            name.to_string(),
            Unit::Downsample(DownsampleParams::new(store, rng, name, ci, co, k, s, enc)?),
        ))
    };
    units.push(ds(
        &mut store,
        &mut rng,
        "stage1.downsample1",
        cfg.in_channels,
        d1,
        7,
        2,
        true,
    )?);
    let mut n = 0;
    for _ in 0..cfg.blocks[0] {
        n += 1;
        let name = format!("stage1.block{n}");
        units.push((
            name.clone(),
            Unit::Conv(ConvBlockParams::new(&mut store, &mut rng, &name, d1)?),
        ));
    }
    units.push(ds(
        &mut store,
        &mut rng,
        "stage1.downsample2",
        d1,
        d2,
        3,
        2,
        false,
    )?);
    for _ in 0..cfg.blocks[1] {
        n += 1;
        let name = format!("stage1.block{n}");
        units.push((
            name.clone(),
            Unit::Conv(ConvBlockParams::new(&mut store, &mut rng, &name, d2)?),
        ));
    }
    units.push(ds(
        &mut store,
        &mut rng,
        "stage2.downsample",
        d2,
        d3,
        3,
        2,
        false,
    )?);
    for i in 1..=cfg.blocks[2] {
        let name = format!("stage2.block{i}");
        units.push((
            name.clone(),
            Unit::Conv(ConvBlockParams::new(&mut store, &mut rng, &name, d3)?),
        ));
    }
    units.push(ds(
        &mut store,
        &mut rng,
        "stage3.downsample",
        d3,
        d4,
        3,
        2,
        false,
    )?);
    for i in 1..=cfg.blocks[3] {
        let name = format!("stage3.block{i}");
        let blk = TransformerBlockParams::new(&mut store, &mut rng, &name, d4, &sdsa, &lif)?;
        units.push((name, Unit::Transformer(blk)));
    }
    units.push(ds(
        &mut store,
        &mut rng,
        "stage4.downsample",
        d4,
        d5,
        3,
        1,
        false,
    )?);
    let sdsa5 = cfg.sdsa::<S>(d5);
    for i in 1..=cfg.blocks[4] {
        let name = format!("stage4.block{i}");
        let blk = TransformerBlockParams::new(&mut store, &mut rng, &name, d5, &sdsa5, &lif)?;
        units.push((name, Unit::Transformer(blk)));
    }
    let head = ConvLayer::new(
        &mut store,
        &mut rng,
        "head.linear",
        ConvSpec::new(d5, cfg.num_classes, 1).bias(true).norm(false),
    )?;
    Ok(Model {
        cfg: cfg.clone(),
        store,
        units,
        head,
    })
}

/// Trainable scalars (running statistics excluded).
pub fn count_params<S: Scalar>(model: &Model<S>) -> usize {
    model.store.count_trainable()
}

/// Time-major `(T*B, C, H, W)` input: a static `(B, C, H, W)` batch is repeated `steps`
/// times; a `(T, B, C, H, W)` frame sequence is used as is. Returns the timestep count.
pub fn time_major_input<S: Scalar>(
    x: &DenseTensor<S>,
    steps: usize,
) -> Result<(DenseTensor<S>, usize)> {
    match *x.shape() {
        [b, c, h, w] => {
            if steps == 0 {
                return Err(Error::Arg("timesteps must be >= 1".into()));
            }
            let mut data = Vec::with_capacity(x.len() * steps);
            for _ in 0..steps {
                data.extend_from_slice(x.data());
            }
            Ok((
                DenseTensor::from_parts(vec![steps * b, c, h, w], data),
                steps,
            ))
        }
        [t, b, c, h, w] => Ok((x.clone().reshape(&[t * b, c, h, w])?, t)),
        ref s => shape_err(format!(
            "input must be (B, C, H, W) or (T, B, C, H, W), got {s:?}"
        )),
    }
}

impl<S: Scalar> Model<S> {
    pub fn tape_ctx(&self, steps: usize) -> TapeCtx<S> {
        TapeCtx {
            steps,
            lif: self.cfg.lif.cast(),
            shortcut: self.cfg.shortcut,
            sdsa: self.cfg.sdsa(self.cfg.dims()[3]),
            eps: S::of(self.cfg.norm_eps),
        }
    }

    fn check_input(&self, x: &DenseTensor<S>) -> Result<()> {
        let sh = x.shape();
        let (c, h, w) = (sh[sh.len() - 3], sh[sh.len() - 2], sh[sh.len() - 1]);
        if c != self.cfg.in_channels || h != self.cfg.resolution || w != self.cfg.resolution {
            return shape_err(format!(
                "input {sh:?} does not match {} channels at {}x{}",
                self.cfg.in_channels, self.cfg.resolution, self.cfg.resolution
            ));
        }
        Ok(())
    }

    /// Record the network on `tape`; returns time-averaged logits `(B, classes, 1, 1)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        input: &DenseTensor<S>,
        steps: usize,
    ) -> Result<NodeId> {
        let (x, steps) = time_major_input(input, steps)?;
        self.check_input(&x)?;
        let ctx = self.tape_ctx(steps);
        let mut h = tape.constant(x);
        for (_, unit) in &self.units {
            h = match unit {
                Unit::Downsample(d) => d.tape(tape, &self.store, &ctx, h)?,
                Unit::Conv(c) => c.tape(tape, &self.store, &ctx, h)?,
                Unit::Transformer(t) => t.tape(tape, &self.store, &ctx, h)?,
            };
        }
        let pooled = tape.mean_tokens(h)?;
        let s = ctx.sn(tape, pooled)?;
        let y = self.head.tape(tape, &self.store, s, ctx.eps)?;
        tape.time_mean(y, steps)
    }

    /// Normalization scale of the last layer of every residual branch (both branches of
    /// each Conv and Transformer block).
    pub fn residual_branch_gammas(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (_, unit) in &self.units {
            match unit {
                Unit::Downsample(_) => {}
                Unit::Conv(c) => ids.extend(
                    [&c.pw2, &c.conv2]
                        .iter()
                        .filter_map(|l| l.norm.as_ref().map(|n| n.gamma)),
                ),
                Unit::Transformer(t) => {
                    ids.push(t.proj.norm.gamma);
                    ids.extend(t.fc2.norm.as_ref().map(|n| n.gamma));
                }
            }
        }
        ids
    }

    /// Zero every residual-branch output scale so each block starts as an identity map.
    /// Used before training from scratch.
    pub fn zero_residual_branches(&mut self) -> Result<()> {
        for id in self.residual_branch_gammas() {
            let n = self.store.get(id).len();
            self.store.set(id, DenseTensor::zeros(&[n]))?;
        }
        Ok(())
    }

    /// Blend batch statistics into the running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn absorb_norm_stats(&mut self, stats: &[NormBatchStats<S>], momentum: S) -> Result<()> {
        let keep = S::one() - momentum;
        for st in stats {
            for (id, batch) in [(st.running_mean, &st.mean), (st.running_var, &st.var)] {
                let cur = self.store.get_mut(id).data_mut();
                if cur.len() != batch.len() {
                    return shape_err("normalization statistics length mismatch");
                }
                for (c, &b) in cur.iter_mut().zip(batch) {
                    *c = keep * *c + momentum * b;
                }
            }
        }
        Ok(())
    }

    /// Set every running statistic to the batch statistics of `input`.
    pub fn calibrate_norms(&mut self, input: &DenseTensor<S>, steps: usize) -> Result<()> {
        let mut tape = Tape::with_modes(crate::neuron::SpikeFn::Heaviside, NormMode::Train);
        self.forward_tape(&mut tape, input, steps)?;
        let stats = tape.norm_stats().to_vec();
        self.absorb_norm_stats(&stats, S::one())
    }

    /// Fold every linear stack into inference kernels using running statistics.
    pub fn compile(&self) -> Result<InferenceNet<S>> {
        let eps = S::of(self.cfg.norm_eps);
        let mut units = Vec::with_capacity(self.units.len());
        for (name, unit) in &self.units {
            let k = match unit {
                Unit::Downsample(d) => CompiledUnit::Downsample(d.compile(&self.store, eps)?),
                Unit::Conv(c) => CompiledUnit::Conv(c.compile(&self.store, eps)?),
                Unit::Transformer(t) => {
                    CompiledUnit::Transformer(t.compile(&self.store, eps, &self.cfg.sdsa(t.dim))?)
                }
            };
            units.push((name.clone(), k));
        }
        Ok(InferenceNet {
            cfg: self.cfg.clone(),
            units,
            head: self.head.fold(&self.store, eps)?,
        })
    }

    /// Event-driven inference logits `(B, classes)`.
    pub fn forward(&self, input: &DenseTensor<S>, steps: usize) -> Result<DenseTensor<S>> {
        self.compile()?.forward(input, steps)
    }
}

#[derive(Clone, Debug)]
pub enum CompiledUnit<S> {
    Downsample(DownsampleKernels<S>),
    Conv(ConvBlockKernels<S>),
    Transformer(TransformerBlockKernels<S>),
}

/// Folded network for inference and profiling.
#[derive(Clone, Debug)]
pub struct InferenceNet<S> {
    pub cfg: ModelConfig,
    pub units: Vec<(String, CompiledUnit<S>)>,
    pub head: ConvKernel<S>,
}

impl<S: Scalar> InferenceNet<S> {
    /// Logits `(B, classes)` and the probe recorded on the way.
    pub fn run<B: SpikeBackend<S> + ?Sized>(
        &self,
        backend: &B,
        input: &DenseTensor<S>,
        steps: usize,
    ) -> Result<(DenseTensor<S>, Probe)> {
        let (x, steps) = time_major_input(input, steps)?;
        let sh = x.shape().to_vec();
        if sh[1] != self.cfg.in_channels
            || sh[2] != self.cfg.resolution
            || sh[3] != self.cfg.resolution
        {
            return shape_err(format!(
                "input {:?} does not match the configured input",
                input.shape()
            ));
        }
        let mut r = Runner::new(backend, self.cfg.lif.cast(), steps, self.cfg.shortcut);
        let mut h = Act::Potential(x);
        for (name, unit) in &self.units {
            h = match unit {
                CompiledUnit::Downsample(d) => d.forward(&mut r, name, &h)?,
                CompiledUnit::Conv(c) => c.forward(&mut r, name, &h)?,
                CompiledUnit::Transformer(t) => t.forward(&mut r, name, &h)?,
            };
        }
        let dense = h.to_dense();
        let [n, d, hh, ww] = [
            dense.shape()[0],
            dense.shape()[1],
            dense.shape()[2],
            dense.shape()[3],
        ];
        let inv = S::one() / S::of_usize(hh * ww);
        let pooled: Vec<S> = dense
            .data()
            .chunks(hh * ww)
            .map(|c| c.iter().copied().sum::<S>() * inv)
            .collect();
        let pooled = DenseTensor::from_parts(vec![n, d, 1, 1], pooled);
        let s = Act::Spikes(r.sn(&pooled)?);
        let y = r.conv("head.linear", true, &s, &self.head, false)?;
        let b = n / steps;
        let k = self.head.c_out();
        let inv_t = S::one() / S::of_usize(steps);
        let mut logits = vec![S::zero(); b * k];
        for t in 0..steps {
            for (o, &v) in logits.iter_mut().zip(&y.data()[t * b * k..(t + 1) * b * k]) {
                *o += v;
            }
        }
        logits.iter_mut().for_each(|v| *v *= inv_t);
        Ok((DenseTensor::from_parts(vec![b, k], logits), r.probe))
    }

    pub fn forward(&self, input: &DenseTensor<S>, steps: usize) -> Result<DenseTensor<S>> {
        Ok(self.run(&EventBackend, input, steps)?.0)
    }

    /// Floating-point reference path (spikes cast to reals, dense products).
    pub fn forward_dense(&self, input: &DenseTensor<S>, steps: usize) -> Result<DenseTensor<S>> {
        Ok(self.run(&DenseBackend, input, steps)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_dims_and_tokens() {
        assert_eq!(
            ModelConfig::preset(32).unwrap().dims(),
            [32, 64, 128, 256, 360]
        );
        assert_eq!(
            ModelConfig::preset(48).unwrap().dims(),
            [48, 96, 192, 384, 480]
        );
        assert_eq!(
            ModelConfig::preset(48).unwrap().spatial(),
            [112, 56, 28, 14, 14]
        );
        assert!(ModelConfig::preset(40).is_err());
    }

    #[test]
    fn toy_builds_and_runs() {
        let cfg = ModelConfig::toy();
        let m = build_model::<f64>(&cfg).unwrap();
        let x = DenseTensor::full(&[2, 3, 16, 16], 0.7);
        let y = m.forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
    }
}
