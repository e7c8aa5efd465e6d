//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! Activations are `(N, C, H, W)` tensors where `N = T * B` is time-major
//! (`index = t * B + b`). Spiking layers are recorded as whole-sequence ops so that
//! backward runs through time. Heaviside layers use the rectangular surrogate as their
//! local derivative; [`SpikeFn::ClampLinear`] swaps in a relaxation whose true derivative
//! is that same surrogate.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::neuron::{surrogate_at, LifParams, SpikeFn};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Normalization statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Batch statistics; running averages are updated after the step.
    #[default]
    Train,
    /// Running statistics, as in inference.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub enum Threshold<S> {
    Const(S),
    /// One-element node holding a learnable threshold.
    Node(NodeId),
}

/// Batch statistics gathered by a training-mode normalization, for the running averages.
#[derive(Clone, Debug)]
pub struct NormBatchStats<S> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<S>,
    /// Unbiased variance.
    pub var: Vec<S>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    stride: usize,
    pad: usize,
    groups: usize,
}

enum Op<S> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulBcast {
        x: NodeId,
        gate: NodeId,
    },
    SumTokens(NodeId),
    MeanTokens(NodeId),
    Lif {
        x: NodeId,
        steps: usize,
        threshold: Threshold<S>,
        params: LifParams<S>,
        u: Vec<S>,
        s: Vec<S>,
        theta: S,
    },
    LinearAttn {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    TimeMean {
        x: NodeId,
        steps: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<S>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: DenseTensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<ParamId, NodeId>,
    pub spike_fn: SpikeFn,
    pub norm_mode: NormMode,
    norm_stats: Vec<NormBatchStats<S>>,
    region_signature: u64,
    consumed: bool,
}

/// Gradients of the loss with respect to every parameter that reached it.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    by_param: HashMap<ParamId, DenseTensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&DenseTensor<S>> {
        self.by_param.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: DenseTensor<S>) {
        self.by_param.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &DenseTensor<S>)> {
        self.by_param.iter()
    }

    pub fn max_abs(&self) -> S {
        self.by_param
            .values()
            .flat_map(|g| g.data().iter().map(|v| v.abs()))
            .fold(S::zero(), S::max)
    }
}

fn dims4(t: &DenseTensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => shape_err(format!("expected an (N, C, H, W) tensor, got {s:?}")),
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            spike_fn: SpikeFn::Heaviside,
            norm_mode: NormMode::Train,
            norm_stats: Vec::new(),
            region_signature: 0xcbf2_9ce4_8422_2325,
            consumed: false,
        }
    }

    pub fn with_modes(spike_fn: SpikeFn, norm_mode: NormMode) -> Self {
        Self {
            spike_fn,
            norm_mode,
            ..Self::new()
        }
    }

    fn push(&mut self, value: DenseTensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor<S> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: DenseTensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Leaf);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn norm_stats(&self) -> &[NormBatchStats<S>] {
        &self.norm_stats
    }

    /// Hash of which side of each relaxation kink every neuron sat on. Two
    /// [`SpikeFn::ClampLinear`] passes with equal signatures lie on the same linear piece.
    pub fn region_signature(&self) -> u64 {
        self.region_signature
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom {
            stride,
            pad,
            groups,
        };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let [n, c, h, wd] = dims4(xv)?;
        let [co, cig, k, k2] = dims4(wv)?;
        if k != k2 || groups == 0 || stride == 0 || c != cig * groups || co % groups != 0 {
            return shape_err(format!(
                "conv input {:?} incompatible with weights {:?} (groups {groups})",
                xv.shape(),
                wv.shape()
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv input smaller than kernel");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let bias = match b {
            Some(bid) => {
                let bv = &self.nodes[bid.0].value;
                if bv.len() != co {
                    return shape_err("conv bias length mismatch");
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let xd = xv.data();
        let wdt = wv.data();
        let per_in = c * h * wd;
        let per_out = co * ho * wo;
        let mut out = vec![S::zero(); n * per_out];
        out.par_chunks_mut(per_out).enumerate().for_each(|(i, o)| {
            conv_fwd_sample(
                &xd[i * per_in..(i + 1) * per_in],
                wdt,
                o,
                [c, h, wd],
                [co, cig, k],
                [ho, wo],
                geom,
            );
            if let Some(bias) = &bias {
                for (oc, chunk) in o.chunks_mut(ho * wo).enumerate() {
                    for v in chunk {
                        *v += bias[oc];
                    }
                }
            }
        });
        let value = DenseTensor::from_parts(vec![n, co, ho, wo], out);
        Ok(self.push(value, Op::Conv { x, w, b, geom }))
    }

    /// Per-channel normalization with affine `gamma`, `beta`.
    pub fn norm(
        &mut self,
        store: &ParamStore<S>,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: S,
    ) -> Result<NodeId> {
        let g = self.param(store, gamma);
        let bt = self.param(store, beta);
        let [n, c, h, w] = dims4(&self.nodes[x.0].value)?;
        if self.nodes[g.0].value.len() != c {
            return shape_err("norm scale length mismatch");
        }
        let hw = h * w;
        let m = n * hw;
        let xd = self.nodes[x.0].value.data();
        let (mean, var_b, batch_stats) = match self.norm_mode {
            NormMode::Train => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut acc = 0f64;
                    for i in 0..n {
                        for v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            acc += v.as_f64();
                        }
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0f64;
                    for i in 0..n {
                        for v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            let d = v.as_f64() - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = S::of(mu);
                    var[ch] = S::of(sq / m as f64);
                }
                (mean, var, true)
            }
            NormMode::Eval => (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
                false,
            ),
        };
        let inv_std: Vec<S> = var_b.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gv = self.nodes[g.0].value.data();
        let bv = self.nodes[bt.0].value.data();
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        if batch_stats {
            let corr = if m > 1 {
                m as f64 / (m - 1) as f64
            } else {
                1.0
            };
            self.norm_stats.push(NormBatchStats {
                running_mean,
                running_var,
                var: var_b.iter().map(|&v| S::of(v.as_f64() * corr)).collect(),
                mean,
            });
        }
        let value = DenseTensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma: g,
                beta: bt,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return shape_err(format!("mul {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let d = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = DenseTensor::from_parts(av.shape().to_vec(), d);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x (N, C, H, W)` scaled per channel by `gate (N, C, 1, 1)`.
    pub fn mul_bcast(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4(&self.nodes[x.0].value)?;
        if self.nodes[gate.0].value.shape() != [n, c, 1, 1] {
            return shape_err("broadcast gate must be (N, C, 1, 1)");
        }
        let hw = h * w;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gate.0].value.data();
        let d = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i / hw])
            .collect();
        let v = DenseTensor::from_parts(vec![n, c, h, w], d);
        Ok(self.push(v, Op::MulBcast { x, gate }))
    }

    pub fn sum_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.token_reduce(x, false)?;
        Ok(self.push(v, Op::SumTokens(x)))
    }

    pub fn mean_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.token_reduce(x, true)?;
        Ok(self.push(v, Op::MeanTokens(x)))
    }

    fn token_reduce(&self, x: NodeId, mean: bool) -> Result<DenseTensor<S>> {
        let [n, c, h, w] = dims4(&self.nodes[x.0].value)?;
        let hw = h * w;
        let scale = if mean {
            S::one() / S::of_usize(hw)
        } else {
            S::one()
        };
        let d = self.nodes[x.0]
            .value
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<S>() * scale)
            .collect();
        Ok(DenseTensor::from_parts(vec![n, c, 1, 1], d))
    }

    /// Spiking layer over a time-major `(T*B, ...)` input.
    pub fn lif(
        &mut self,
        x: NodeId,
        steps: usize,
        threshold: Threshold<S>,
        params: &LifParams<S>,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let lead = *xv.shape().first().unwrap_or(&0);
        if steps == 0 || lead % steps != 0 {
            return shape_err(format!(
                "leading axis {lead} not divisible by {steps} timesteps"
            ));
        }
        let theta = match threshold {
            Threshold::Const(v) => v,
            Threshold::Node(id) => {
                let t = &self.nodes[id.0].value;
                if t.len() != 1 {
                    return shape_err("threshold node must hold one value");
                }
                t.data()[0]
            }
        };
        let slice = xv.len() / steps;
        let xd = xv.data();
        let mut h = vec![params.reset; slice];
        let mut u = vec![S::zero(); xd.len()];
        let mut s = vec![S::zero(); xd.len()];
        let width = params.surrogate_width;
        let mut sig = self.region_signature;
        for t in 0..steps {
            for i in 0..slice {
                let j = t * slice + i;
                let uu = h[i] + xd[j];
                let centered = uu - theta;
                let ss = self.spike_fn.apply(centered, width);
                if self.spike_fn == SpikeFn::ClampLinear {
                    let region: u64 = if centered <= -width {
                        0
                    } else if centered >= width {
                        2
                    } else {
                        1
                    };
                    sig = (sig ^ region).wrapping_mul(0x0100_0000_01b3);
                }
                u[j] = uu;
                s[j] = ss;
                h[i] = params.reset * ss + params.decay * uu * (S::one() - ss);
            }
        }
        self.region_signature = sig;
        let value = DenseTensor::from_parts(xv.shape().to_vec(), s.clone());
        Ok(self.push(
            value,
            Op::Lif {
                x,
                steps,
                threshold,
                params: *params,
                u,
                s,
                theta,
            },
        ))
    }

    /// Per-sample `Q (Kᵀ V)` with tokens `H*W` and channels split into `heads`.
    pub fn linear_attn(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let sh = dims4(&self.nodes[q.0].value)?;
        if self.nodes[k.0].value.shape() != self.nodes[q.0].value.shape()
            || self.nodes[v.0].value.shape() != self.nodes[q.0].value.shape()
        {
            return shape_err("attention operands must share a shape");
        }
        let [n, c, h, w] = sh;
        if heads == 0 || c % heads != 0 {
            return shape_err(format!("{c} channels not divisible by {heads} heads"));
        }
        let per = c * h * w;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut out = vec![S::zero(); n * per];
        out.par_chunks_mut(per).enumerate().for_each(|(i, o)| {
            let r = i * per..(i + 1) * per;
            attn_fwd_sample(&qd[r.clone()], &kd[r.clone()], &vd[r], o, c, h * w, heads);
        });
        let value = DenseTensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(value, Op::LinearAttn { q, k, v, heads }))
    }

    /// Average over the time-major leading axis: `(T*B, ...) -> (B, ...)`.
    pub fn time_mean(&mut self, x: NodeId, steps: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let lead = *xv.shape().first().unwrap_or(&0);
        if steps == 0 || lead % steps != 0 {
            return shape_err("time_mean: leading axis not divisible by timesteps");
        }
        let per_t = xv.len() / steps;
        let inv = S::one() / S::of_usize(steps);
        let mut out = vec![S::zero(); per_t];
        for t in 0..steps {
            for (o, &v) in out.iter_mut().zip(&xv.data()[t * per_t..(t + 1) * per_t]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xv.shape().to_vec();
        shape[0] = lead / steps;
        let value = DenseTensor::from_parts(shape, out);
        Ok(self.push(value, Op::TimeMean { x, steps }))
    }

    /// Mean label-smoothed cross-entropy over a batch of logits `(B, K, ...)`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        smoothing: S,
    ) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let b = *lv.shape().first().unwrap_or(&0);
        if b == 0 || b != labels.len() {
            return shape_err(format!("{} labels for a batch of {b}", labels.len()));
        }
        let k = lv.len() / b;
        let mut targets = vec![smoothing / S::of_usize(k); b * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Arg(format!(
                    "label {l} out of range for {k} classes"
                )));
            }
            targets[i * k + l] += S::one() - smoothing;
        }
        let (probs, loss) = softmax_ce(lv.data(), &targets, b, k);
        let value = DenseTensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar node. A tape can be consumed once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::Tape(
                "tape already consumed by a backward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape("backward needs a scalar loss node".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contribs = self.local_backward(node, &g)?;
            for (target, delta) in contribs {
                accumulate(&mut grads[target.0], delta);
            }
            // leaves keep their gradient for collection below
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let mut out = Gradients::default();
        for (&pid, &nid) in &self.param_nodes {
            let shape = self.nodes[nid.0].value.shape().to_vec();
            let g = grads[nid.0]
                .take()
                .unwrap_or_else(|| vec![S::zero(); self.nodes[nid.0].value.len()]);
            out.by_param.insert(pid, DenseTensor::from_parts(shape, g));
        }
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        Ok(out)
    }

    fn local_backward(&self, node: &Node<S>, g: &[S]) -> Result<Vec<(NodeId, Vec<S>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, geom } => {
                let [n, c, h, wd] = dims4(val(*x))?;
                let [co, cig, k, _] = dims4(val(*w))?;
                let [_, _, ho, wo] = dims4(&node.value)?;
                let (dx, dw) = conv_backward(
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    n,
                    [c, h, wd],
                    [co, cig, k],
                    [ho, wo],
                    *geom,
                );
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(bid) = b {
                    let mut db = vec![S::zero(); co];
                    for (i, chunk) in g.chunks(ho * wo).enumerate() {
                        db[i % co] += chunk.iter().copied().sum::<S>();
                    }
                    v.push((*bid, db));
                }
                v
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = dims4(&node.value)?;
                let hw = h * w;
                let m = S::of_usize(n * hw);
                let gv = val(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let mut dx = vec![S::zero(); g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let scale = gv[ch] * inv_std[ch];
                        for j in base..base + hw {
                            dx[j] = if *batch_stats {
                                scale / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            } else {
                                scale * g[j]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect()),
                    (*b, g.iter().zip(av).map(|(&gg, &x)| gg * x).collect()),
                ]
            }
            Op::MulBcast { x, gate } => {
                let [_, _, h, w] = dims4(val(*x))?;
                let hw = h * w;
                let (xd, gd) = (val(*x).data(), val(*gate).data());
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gg)| gg * gd[i / hw])
                    .collect();
                let mut dg = vec![S::zero(); gd.len()];
                for (i, (&gg, &xv)) in g.iter().zip(xd).enumerate() {
                    dg[i / hw] += gg * xv;
                }
                vec![(*x, dx), (*gate, dg)]
            }
            Op::SumTokens(x) | Op::MeanTokens(x) => {
                let [_, _, h, w] = dims4(val(*x))?;
                let hw = h * w;
                let scale = if matches!(node.op, Op::MeanTokens(_)) {
                    S::one() / S::of_usize(hw)
                } else {
                    S::one()
                };
                let dx = (0..val(*x).len()).map(|i| g[i / hw] * scale).collect();
                vec![(*x, dx)]
            }
            Op::Lif {
                x,
                steps,
                threshold,
                params,
                u,
                s,
                theta,
            } => {
                let slice = u.len() / steps;
                let mut dx = vec![S::zero(); u.len()];
                let mut gh = vec![S::zero(); slice];
                let mut dtheta = S::zero();
                let (beta, reset, width) = (params.decay, params.reset, params.surrogate_width);
                for t in (0..*steps).rev() {
                    for i in 0..slice {
                        let j = t * slice + i;
                        let fp = surrogate_at(u[j] - *theta, width);
                        let g_s = g[j] + gh[i] * (reset - beta * u[j]);
                        let g_u = g_s * fp + gh[i] * beta * (S::one() - s[j]);
                        dx[j] = g_u;
                        gh[i] = g_u;
                        dtheta -= g_s * fp;
                    }
                }
                let mut v = vec![(*x, dx)];
                if let Threshold::Node(tid) = threshold {
                    v.push((*tid, vec![dtheta]));
                }
                v
            }
            Op::LinearAttn { q, k, v, heads } => {
                let [n, c, h, w] = dims4(val(*q))?;
                let per = c * h * w;
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let parts: Vec<(Vec<S>, Vec<S>, Vec<S>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let r = i * per..(i + 1) * per;
                        attn_bwd_sample(
                            &qd[r.clone()],
                            &kd[r.clone()],
                            &vd[r.clone()],
                            &g[r],
                            c,
                            h * w,
                            *heads,
                        )
                    })
                    .collect();
                let mut dq = Vec::with_capacity(n * per);
                let mut dk = Vec::with_capacity(n * per);
                let mut dv = Vec::with_capacity(n * per);
                for (a, b, cc) in parts {
                    dq.extend(a);
                    dk.extend(b);
                    dv.extend(cc);
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::TimeMean { x, steps } => {
                let inv = S::one() / S::of_usize(*steps);
                let per_t = g.len();
                let dx = (0..per_t * steps).map(|i| g[i % per_t] * inv).collect();
                vec![(*x, dx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = val(*logits).shape()[0];
                let scale = g[0] / S::of_usize(b);
                let dl = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                vec![(*logits, dl)]
            }
        })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, delta: Vec<S>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Softmax probabilities and mean cross-entropy against soft targets.
pub(crate) fn softmax_ce<S: Scalar>(
    logits: &[S],
    targets: &[S],
    b: usize,
    k: usize,
) -> (Vec<S>, S) {
    let mut probs = vec![S::zero(); b * k];
    let mut loss = 0f64;
    for i in 0..b {
        let row = &logits[i * k..(i + 1) * k];
        let mx = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
        let log_z = z.ln() + mx;
        for j in 0..k {
            let lp = row[j].as_f64() - log_z;
            probs[i * k + j] = S::of(lp.exp());
            loss -= targets[i * k + j].as_f64() * lp;
        }
    }
    (probs, S::of(loss / b as f64))
}

fn conv_fwd_sample<S: Scalar>(
    x: &[S],
    w: &[S],
    out: &mut [S],
    [c, h, wd]: [usize; 3],
    [co, cig, k]: [usize; 3],
    [ho, wo]: [usize; 2],
    geom: ConvGeom,
) {
    let cog = co / geom.groups;
    for o in 0..co {
        let g = o / cog;
        let orow = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for ci in 0..cig {
            let ch = g * cig + ci;
            debug_assert!(ch < c);
            let xin = &x[ch * h * wd..(ch + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * cig + ci) * k + ky) * k + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow2 = &mut orow[oy * wo..(oy + 1) * wo];
                        for (ox, ov) in orow2.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    g: &[S],
    n: usize,
    [c, h, wd]: [usize; 3],
    [co, cig, k]: [usize; 3],
    [ho, wo]: [usize; 2],
    geom: ConvGeom,
) -> (Vec<S>, Vec<S>) {
    let per_in = c * h * wd;
    let per_out = co * ho * wo;
    let cog = co / geom.groups;
    let parts: Vec<(Vec<S>, Vec<S>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = &x[i * per_in..(i + 1) * per_in];
            let gs = &g[i * per_out..(i + 1) * per_out];
            let mut dx = vec![S::zero(); per_in];
            let mut dw = vec![S::zero(); w.len()];
            for o in 0..co {
                let grp = o / cog;
                let grow = &gs[o * ho * wo..(o + 1) * ho * wo];
                for ci in 0..cig {
                    let ch = grp * cig + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((o * cig + ci) * k + ky) * k + kx;
                            let wv = w[widx];
                            let mut acc = S::zero();
                            for oy in 0..ho {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = (ch * h + iy as usize) * wd;
                                for ox in 0..wo {
                                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let gv = grow[oy * wo + ox];
                                    acc += gv * xs[base + ix as usize];
                                    dx[base + ix as usize] += gv * wv;
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(n * per_in);
    let mut dw = vec![S::zero(); w.len()];
    for (a, b) in parts {
        dx.extend(a);
        dw.iter_mut().zip(b).for_each(|(d, v)| *d += v);
    }
    (dx, dw)
}

/// Channel-major maps `(C, N)`: token `t` of channel `d` lives at `d * n + t`.
fn attn_fwd_sample<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    out: &mut [S],
    c: usize,
    n: usize,
    heads: usize,
) {
    let dh = c / heads;
    for hd in 0..heads {
        let off = hd * dh;
        // m[a][b] = sum_t k[off+a, t] * v[off+b, t]
        let mut m = vec![S::zero(); dh * dh];
        for a in 0..dh {
            let kr = &k[(off + a) * n..(off + a + 1) * n];
            for b in 0..dh {
                let vr = &v[(off + b) * n..(off + b + 1) * n];
                m[a * dh + b] = kr.iter().zip(vr).map(|(&x, &y)| x * y).sum();
            }
        }
        for b in 0..dh {
            let orow = &mut out[(off + b) * n..(off + b + 1) * n];
            for a in 0..dh {
                let mv = m[a * dh + b];
                if mv == S::zero() {
                    continue;
                }
                let qr = &q[(off + a) * n..(off + a + 1) * n];
                for (o, &qv) in orow.iter_mut().zip(qr) {
                    *o += qv * mv;
                }
            }
        }
    }
}

fn attn_bwd_sample<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    g: &[S],
    c: usize,
    n: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = c / heads;
    let mut dq = vec![S::zero(); c * n];
    let mut dk = vec![S::zero(); c * n];
    let mut dv = vec![S::zero(); c * n];
    let dot = |a: &[S], b: &[S]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>();
    for hd in 0..heads {
        let off = hd * dh;
        let row =
            |buf: &[S], ch: usize| -> Vec<S> { buf[(off + ch) * n..(off + ch + 1) * n].to_vec() };
        let mut m = vec![S::zero(); dh * dh];
        let mut dm = vec![S::zero(); dh * dh];
        for a in 0..dh {
            for b in 0..dh {
                m[a * dh + b] = dot(&row(k, a), &row(v, b));
                dm[a * dh + b] = dot(&row(q, a), &row(g, b));
            }
        }
        for a in 0..dh {
            for b in 0..dh {
                let (mv, dmv) = (m[a * dh + b], dm[a * dh + b]);
                for t in 0..n {
                    dq[(off + a) * n + t] += g[(off + b) * n + t] * mv;
                    dk[(off + a) * n + t] += dmv * v[(off + b) * n + t];
                    dv[(off + b) * n + t] += dmv * k[(off + a) * n + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(DenseTensor::new(vec![1, 2, 1, 1], vec![0.3, -0.2]).unwrap());
        let loss = tape.cross_entropy(x, &[0], 0.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn linear_logits_gradient_matches_closed_form() {
        // logits = W x + b; dL/dW = (p - y) x^T, dL/db = p - y
        let mut store = ParamStore::<f64>::new();
        let w = store.add(
            "w",
            ParamRole::Weight,
            DenseTensor::new(vec![2, 3, 1, 1], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6]).unwrap(),
        );
        let b = store.add(
            "b",
            ParamRole::Bias,
            DenseTensor::new(vec![2], vec![0.05, -0.1]).unwrap(),
        );
        let xv = [1.0, 2.0, -1.0];
        let mut tape = Tape::new();
        let x = tape.constant(DenseTensor::new(vec![1, 3, 1, 1], xv.to_vec()).unwrap());
        let (wn, bn) = (tape.param(&store, w), tape.param(&store, b));
        let logits = tape.conv(x, wn, Some(bn), 1, 0, 1).unwrap();
        let loss = tape.cross_entropy(logits, &[1], 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();

        let wd = store.get(w).data();
        let z: Vec<f64> = (0..2)
            .map(|o| (0..3).map(|i| wd[o * 3 + i] * xv[i]).sum::<f64>() + store.get(b).data()[o])
            .collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let p: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
        let y = [0.0, 1.0];
        for o in 0..2 {
            assert!((grads.get(b).unwrap().data()[o] - (p[o] - y[o])).abs() < 1e-12);
            for i in 0..3 {
                let expect = (p[o] - y[o]) * xv[i];
                assert!((grads.get(w).unwrap().data()[o * 3 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(DenseTensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(
            tape.cross_entropy(x, &[2], 0.0),
            Err(Error::Arg(_))
        ));
    }
}
