//! Trainable convolution layers backed by a [`ParamStore`], each usable on a
//! [`Tape`] (unfolded, for training) or folded into a single [`ConvKernel`] with its
//! normalization absorbed (for inference and energy profiling).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::kernels::ConvKernel;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// He-normal weights for a layer with `fan_in` inputs per output.
pub fn he_normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> DenseTensor<S> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    DenseTensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| S::of(dist.sample(rng))).collect(),
    )
}

/// Per-channel normalization with affine scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamRole::NormScale,
                DenseTensor::full(&[c], S::one()),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamRole::NormShift,
                DenseTensor::zeros(&[c]),
            ),
            mean: store.add(
                format!("{name}.running_mean"),
                ParamRole::RunningMean,
                DenseTensor::zeros(&[c]),
            ),
            var: store.add(
                format!("{name}.running_var"),
                ParamRole::RunningVar,
                DenseTensor::full(&[c], S::one()),
            ),
        }
    }

    pub fn tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
        eps: S,
    ) -> Result<NodeId> {
        tape.norm(store, x, self.gamma, self.beta, self.mean, self.var, eps)
    }

    /// Inference form `y = a * x + b` from the running statistics.
    pub fn scale_shift<S: Scalar>(&self, store: &ParamStore<S>, eps: S) -> (Vec<S>, Vec<S>) {
        let g = store.get(self.gamma).data();
        let bt = store.get(self.beta).data();
        let m = store.get(self.mean).data();
        let v = store.get(self.var).data();
        let a: Vec<S> = g
            .iter()
            .zip(v)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let b = bt
            .iter()
            .zip(m)
            .zip(&a)
            .map(|((&bt, &m), &a)| bt - m * a)
            .collect();
        (a, b)
    }
}

/// Absorb `y = a * conv(x) + b` into the kernel.
pub fn fold_affine<S: Scalar>(mut kern: ConvKernel<S>, a: &[S], b: &[S]) -> Result<ConvKernel<S>> {
    let co = kern.c_out();
    if a.len() != co || b.len() != co {
        return Err(Error::Fold(format!(
            "affine of length {} for {co} outputs",
            a.len()
        )));
    }
    let per = kern.weights.len() / co;
    for (i, w) in kern.weights.data_mut().iter_mut().enumerate() {
        *w *= a[i / per];
    }
    for (o, bias) in kern.bias.iter_mut().enumerate() {
        *bias = *bias * a[o] + b[o];
    }
    Ok(kern)
}

/// Depthwise `k x k` followed by pointwise `1 x 1`, as one dense `k x k` kernel.
pub fn compose_depthwise_pointwise<S: Scalar>(
    dw: &ConvKernel<S>,
    pw: &ConvKernel<S>,
) -> Result<ConvKernel<S>> {
    let c = dw.c_out();
    if dw.groups != c
        || dw.c_in() != c
        || pw.k() != 1
        || pw.c_in() != c
        || pw.groups != 1
        || pw.stride != 1
    {
        return Err(Error::Fold(
            "expected a depthwise kernel followed by a pointwise kernel".into(),
        ));
    }
    let (k, co) = (dw.k(), pw.c_out());
    let mut w = vec![S::zero(); co * c * k * k];
    for o in 0..co {
        for ci in 0..c {
            let p = pw.weights.data()[o * c + ci];
            for t in 0..k * k {
                w[(o * c + ci) * k * k + t] = p * dw.weights.data()[ci * k * k + t];
            }
        }
    }
    let bias = (0..co)
        .map(|o| {
            pw.bias[o]
                + (0..c)
                    .map(|ci| pw.weights.data()[o * c + ci] * dw.bias[ci])
                    .sum::<S>()
        })
        .collect();
    ConvKernel::with_groups(
        DenseTensor::from_parts(vec![co, c, k, k], w),
        bias,
        dw.stride,
        dw.padding,
        1,
    )
}

/// Convolution with optional bias and optional trailing normalization.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub norm: Option<Norm>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
    pub norm: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            groups: 1,
            bias: false,
            norm: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn norm(mut self, n: bool) -> Self {
        self.norm = n;
        self
    }
}

impl ConvLayer {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        if spec.groups == 0
            || spec.c_in % spec.groups != 0
            || spec.c_out % spec.groups != 0
            || spec.k == 0
        {
            return shape_err(format!("bad conv spec for {name}: {spec:?}"));
        }
        let cig = spec.c_in / spec.groups;
        let fan_in = cig * spec.k * spec.k;
        let w = he_normal(rng, &[spec.c_out, cig, spec.k, spec.k], fan_in);
        let weight = store.add(format!("{name}.weight"), ParamRole::Weight, w);
        let bias = spec.bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamRole::Bias,
                DenseTensor::zeros(&[spec.c_out]),
            )
        });
        let norm = spec
            .norm
            .then(|| Norm::new(store, &format!("{name}.norm"), spec.c_out));
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.k / 2,
            groups: spec.groups,
            norm,
        })
    }

    pub fn tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
        eps: S,
    ) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        let y = tape.conv(x, w, b, self.stride, self.padding, self.groups)?;
        match &self.norm {
            Some(n) => n.tape(tape, store, y, eps),
            None => Ok(y),
        }
    }

    /// The raw convolution, normalization not applied.
    pub fn kernel<S: Scalar>(&self, store: &ParamStore<S>) -> Result<ConvKernel<S>> {
        let w = store.get(self.weight).clone();
        let co = w.shape()[0];
        let bias = match self.bias {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![S::zero(); co],
        };
        ConvKernel::with_groups(w, bias, self.stride, self.padding, self.groups)
    }

    pub fn fold<S: Scalar>(&self, store: &ParamStore<S>, eps: S) -> Result<ConvKernel<S>> {
        let kern = self.kernel(store)?;
        match &self.norm {
            Some(n) => {
                let (a, b) = n.scale_shift(store, eps);
                fold_affine(kern, &a, &b)
            }
            None => Ok(kern),
        }
    }
}

/// Pointwise -> depthwise `3 x 3` -> pointwise -> norm; folds into one dense `3 x 3` kernel.
#[derive(Clone, Debug)]
pub struct RepConv {
    pub pw_in: ParamId,
    pub dw: ParamId,
    pub pw_out: ParamId,
    pub norm: Norm,
    pub dim: usize,
}

impl RepConv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Self {
        let pw_in = store.add(
            format!("{name}.pw_in"),
            ParamRole::Weight,
            he_normal(rng, &[dim, dim, 1, 1], dim),
        );
        let dw = store.add(
            format!("{name}.dw"),
            ParamRole::Weight,
            he_normal(rng, &[dim, 1, 3, 3], 9),
        );
        let pw_out = store.add(
            format!("{name}.pw_out"),
            ParamRole::Weight,
            he_normal(rng, &[dim, dim, 1, 1], dim),
        );
        let norm = Norm::new(store, &format!("{name}.norm"), dim);
        Self {
            pw_in,
            dw,
            pw_out,
            norm,
            dim,
        }
    }

    pub fn tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
        eps: S,
    ) -> Result<NodeId> {
        let (a, b, c) = (
            tape.param(store, self.pw_in),
            tape.param(store, self.dw),
            tape.param(store, self.pw_out),
        );
        let y = tape.conv(x, a, None, 1, 0, 1)?;
        let y = tape.conv(y, b, None, 1, 1, self.dim)?;
        let y = tape.conv(y, c, None, 1, 0, 1)?;
        self.norm.tape(tape, store, y, eps)
    }

    /// `W[o, i] = sum_c pw_out[o, c] * dw[c] * pw_in[c, i]`, normalization absorbed.
    pub fn fold<S: Scalar>(&self, store: &ParamStore<S>, eps: S) -> Result<ConvKernel<S>> {
        let d = self.dim;
        let (pi, dw, po) = (
            store.get(self.pw_in).data(),
            store.get(self.dw).data(),
            store.get(self.pw_out).data(),
        );
        let mut w = vec![S::zero(); d * d * 9];
        for o in 0..d {
            for c in 0..d {
                let p = po[o * d + c];
                if p == S::zero() {
                    continue;
                }
                for i in 0..d {
                    let pc = p * pi[c * d + i];
                    for t in 0..9 {
                        w[(o * d + i) * 9 + t] += pc * dw[c * 9 + t];
                    }
                }
            }
        }
        let kern = ConvKernel::with_groups(
            DenseTensor::from_parts(vec![d, d, 3, 3], w),
            vec![S::zero(); d],
            1,
            1,
            1,
        )?;
        let (a, b) = self.norm.scale_shift(store, eps);
        fold_affine(kern, &a, &b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NormMode;
    use crate::kernels::dense_conv2d;
    use crate::neuron::SpikeFn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturb_norm(store: &mut ParamStore<f64>, n: &Norm, rng: &mut ChaCha8Rng) {
        for (id, lo) in [(n.gamma, 0.5), (n.beta, -0.5), (n.mean, -0.5), (n.var, 0.5)] {
            let c = store.get(id).len();
            let v = (0..c).map(|_| lo + rng.gen::<f64>()).collect();
            store
                .set(id, DenseTensor::new(vec![c], v).unwrap())
                .unwrap();
        }
    }

    fn eval_tape(
        x: &DenseTensor<f64>,
        f: impl Fn(&mut Tape<f64>, NodeId) -> NodeId,
    ) -> DenseTensor<f64> {
        let mut tape = Tape::with_modes(SpikeFn::Heaviside, NormMode::Eval);
        let xn = tape.constant(x.clone());
        let y = f(&mut tape, xn);
        tape.value(y).clone()
    }

    #[test]
    fn repconv_fold_matches_unfolded_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let rc = RepConv::new(&mut store, &mut rng, "rc", 6);
        perturb_norm(&mut store, &rc.norm, &mut rng);
        let x = he_normal::<f64, _>(&mut rng, &[1, 6, 5, 4], 1);
        let y = eval_tape(&x, |t, n| rc.tape(t, &store, n, 1e-5).unwrap());
        let k = rc.fold(&store, 1e-5).unwrap();
        let z = dense_conv2d(&x.outer(0), &k).unwrap();
        assert!(y.outer(0).max_abs_diff(&z).unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_pointwise_fold_matches_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let dw = ConvLayer::new(
            &mut store,
            &mut rng,
            "dw",
            ConvSpec::new(4, 4, 7).groups(4).norm(false),
        )
        .unwrap();
        let pw = ConvLayer::new(&mut store, &mut rng, "pw", ConvSpec::new(4, 3, 1)).unwrap();
        perturb_norm(&mut store, pw.norm.as_ref().unwrap(), &mut rng);
        let x = he_normal::<f64, _>(&mut rng, &[1, 4, 6, 6], 1);
        let y = eval_tape(&x, |t, n| {
            let a = dw.tape(t, &store, n, 1e-5).unwrap();
            pw.tape(t, &store, a, 1e-5).unwrap()
        });
        let fused =
            compose_depthwise_pointwise(&dw.kernel(&store).unwrap(), &pw.kernel(&store).unwrap())
                .unwrap();
        let (a, b) = pw.norm.as_ref().unwrap().scale_shift(&store, 1e-5);
        let fused = fold_affine(fused, &a, &b).unwrap();
        let z = dense_conv2d(&x.outer(0), &fused).unwrap();
        assert!(y.outer(0).max_abs_diff(&z).unwrap() < 1e-12);
    }
}
