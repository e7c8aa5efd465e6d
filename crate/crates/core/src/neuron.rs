//! Leaky integrate-and-fire spiking neurons.
//!
//! Per timestep: `U = H[t-1] + X[t]`, `S = Hea(U - s*u_th)`,
//! `H[t] = v_reset*S + beta*U*(1 - S)`, with `Hea(x) = 1` iff `x >= 0`.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, SpikeTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams<S> {
    /// Firing threshold `u_th`.
    pub threshold: S,
    /// Membrane decay `beta`, in (0, 1).
    pub decay: S,
    pub reset: S,
    /// Half-width `w` of the rectangular surrogate window.
    pub surrogate_width: S,
    /// `s`; the effective threshold is `s * u_th`.
    pub threshold_scale: S,
    pub threshold_learnable: bool,
}

impl<S: Scalar> Default for LifParams<S> {
    fn default() -> Self {
        Self {
            threshold: S::one(),
            decay: S::of(0.5),
            reset: S::zero(),
            surrogate_width: S::of(0.5),
            threshold_scale: S::one(),
            threshold_learnable: false,
        }
    }
}

impl<S: Scalar> LifParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > S::zero()) {
            return Err(Error::Config(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if !(self.decay > S::zero() && self.decay < S::one()) {
            return Err(Error::Config(format!(
                "decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.surrogate_width > S::zero()) {
            return Err(Error::Config("surrogate width must be > 0".into()));
        }
        if !(self.threshold_scale > S::zero()) {
            return Err(Error::Config("threshold scale must be > 0".into()));
        }
        if !self.reset.is_finite() {
            return Err(Error::Config("reset potential must be finite".into()));
        }
        Ok(())
    }

    pub fn effective_threshold(&self) -> S {
        self.threshold_scale * self.threshold
    }

    pub fn with_scale(mut self, s: S) -> Self {
        self.threshold_scale = s;
        self
    }

    pub fn cast<T: Scalar>(&self) -> LifParams<T> {
        LifParams {
            threshold: T::of(self.threshold.as_f64()),
            decay: T::of(self.decay.as_f64()),
            reset: T::of(self.reset.as_f64()),
            surrogate_width: T::of(self.surrogate_width.as_f64()),
            threshold_scale: T::of(self.threshold_scale.as_f64()),
            threshold_learnable: self.threshold_learnable,
        }
    }
}

/// Membrane carry-over `H[t-1]` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S> {
    pub h: DenseTensor<S>,
}

impl<S: Scalar> LifState<S> {
    /// Fresh state at the reset potential.
    pub fn new(shape: &[usize], params: &LifParams<S>) -> Self {
        Self {
            h: DenseTensor::full(shape, params.reset),
        }
    }
}

/// Scalar neuron update against an explicit threshold. Returns `(spike, h_next)`.
#[inline]
pub fn lif_scalar<S: Scalar>(h: S, x: S, threshold: S, decay: S, reset: S) -> (bool, S) {
    let u = h + x;
    let fire = u - threshold >= S::zero();
    let h_next = if fire { reset } else { decay * u };
    (fire, h_next)
}

pub fn lif_step<S: Scalar>(
    params: &LifParams<S>,
    state: &LifState<S>,
    x: &DenseTensor<S>,
) -> Result<(SpikeTensor, LifState<S>)> {
    lif_step_threshold(params, params.effective_threshold(), state, x)
}

/// [`lif_step`] against an explicit threshold (learnable-threshold layers).
pub fn lif_step_threshold<S: Scalar>(
    params: &LifParams<S>,
    threshold: S,
    state: &LifState<S>,
    x: &DenseTensor<S>,
) -> Result<(SpikeTensor, LifState<S>)> {
    if state.h.shape() != x.shape() {
        return shape_err(format!(
            "LIF state {:?} vs input {:?}",
            state.h.shape(),
            x.shape()
        ));
    }
    let mut spikes = Vec::with_capacity(x.len());
    let mut h_next = Vec::with_capacity(x.len());
    for (&h, &xi) in state.h.data().iter().zip(x.data()) {
        let (s, hn) = lif_scalar(h, xi, threshold, params.decay, params.reset);
        spikes.push(s as u8);
        h_next.push(hn);
    }
    Ok((
        SpikeTensor::from_parts(x.shape().to_vec(), spikes),
        LifState {
            h: DenseTensor::from_parts(x.shape().to_vec(), h_next),
        },
    ))
}

/// Spiking-neuron layer over a sequence whose leading axis is time.
pub fn sn_forward<S: Scalar>(params: &LifParams<S>, x_seq: &DenseTensor<S>) -> Result<SpikeTensor> {
    sn_forward_threshold(params, params.effective_threshold(), x_seq)
}

pub fn sn_forward_threshold<S: Scalar>(
    params: &LifParams<S>,
    threshold: S,
    x_seq: &DenseTensor<S>,
) -> Result<SpikeTensor> {
    let steps = *x_seq
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("SN input needs a leading time axis".into()))?;
    if steps == 0 {
        return shape_err("SN input has zero timesteps");
    }
    let slice = x_seq.len() / steps;
    let mut h = vec![params.reset; slice];
    let mut out = vec![0u8; x_seq.len()];
    for t in 0..steps {
        let xs = &x_seq.data()[t * slice..(t + 1) * slice];
        let os = &mut out[t * slice..(t + 1) * slice];
        for i in 0..slice {
            let (s, hn) = lif_scalar(h[i], xs[i], threshold, params.decay, params.reset);
            os[i] = s as u8;
            h[i] = hn;
        }
    }
    Ok(SpikeTensor::from_parts(x_seq.shape().to_vec(), out))
}

/// Rectangular surrogate derivative of the Heaviside: `1/(2w)` inside the window.
pub fn surrogate_grad<S: Scalar>(params: &LifParams<S>, u: S) -> S {
    surrogate_at(u - params.effective_threshold(), params.surrogate_width)
}

/// Surrogate evaluated at `u - threshold`.
#[inline]
pub fn surrogate_at<S: Scalar>(centered: S, width: S) -> S {
    if centered.abs() < width {
        S::one() / (width + width)
    } else {
        S::zero()
    }
}

/// Forward nonlinearity of a spiking layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Heaviside spikes with the rectangular surrogate on the backward pass.
    #[default]
    Heaviside,
    /// Piecewise-linear relaxation `clamp((u - th)/(2w) + 1/2, 0, 1)`; its exact derivative
    /// equals the rectangular surrogate, so finite differences can validate backward.
    ClampLinear,
}

impl SpikeFn {
    #[inline]
    pub fn apply<S: Scalar>(self, centered: S, width: S) -> S {
        match self {
            SpikeFn::Heaviside => {
                if centered >= S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            SpikeFn::ClampLinear => {
                let half = S::of(0.5);
                (centered / (width + width) + half)
                    .max(S::zero())
                    .min(S::one())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> LifParams<f64> {
        LifParams::default()
    }

    fn one(x: f64) -> DenseTensor<f64> {
        DenseTensor::new(vec![1], vec![x]).unwrap()
    }

    #[test]
    fn step_fires_and_resets() {
        let st = LifState::new(&[1], &p());
        let (s, n) = lif_step(&p(), &st, &one(1.5)).unwrap();
        assert_eq!(s.data(), &[1]);
        assert_eq!(n.h.data(), &[0.0]);
    }

    #[test]
    fn step_below_threshold_decays() {
        let st = LifState::new(&[1], &p());
        let (s, n) = lif_step(&p(), &st, &one(0.4)).unwrap();
        assert_eq!(s.data(), &[0]);
        assert!((n.h.data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn exactly_at_threshold_fires() {
        let st = LifState::new(&[1], &p());
        let (s, _) = lif_step(&p(), &st, &one(1.0)).unwrap();
        assert_eq!(s.data(), &[1]);
    }

    #[test]
    fn shape_mismatch() {
        let st = LifState::new(&[2], &p());
        assert!(matches!(
            lif_step(&p(), &st, &one(1.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sequence_constant_drive() {
        // 0.6 -> 0.3 + 0.6 = 0.9 -> 0.45 + 0.6 = 1.05 fires
        let x = DenseTensor::new(vec![3, 1], vec![0.6; 3]).unwrap();
        assert_eq!(sn_forward(&p(), &x).unwrap().data(), &[0, 0, 1]);
    }

    #[test]
    fn single_step_is_memoryless_binarization() {
        let x = DenseTensor::new(vec![1, 4], vec![-1.0, 0.5, 1.0, 3.0]).unwrap();
        assert_eq!(sn_forward(&p(), &x).unwrap().data(), &[0, 0, 1, 1]);
    }

    #[test]
    fn zero_input_never_fires() {
        let x = DenseTensor::<f64>::zeros(&[7, 3, 2]);
        assert_eq!(sn_forward(&p(), &x).unwrap().count_ones(), 0);
    }

    #[test]
    fn surrogate_window() {
        let params = p();
        let w = params.surrogate_width;
        assert_eq!(surrogate_grad(&params, 1.0), 1.0 / (2.0 * w));
        assert_eq!(surrogate_grad(&params, 1.0 + 2.0 * w), 0.0);
        for d in [0.01, 0.2, 0.49] {
            assert_eq!(
                surrogate_grad(&params, 1.0 + d),
                surrogate_grad(&params, 1.0 - d)
            );
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut bad = p();
        bad.decay = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = p();
        bad.threshold = 0.0;
        assert!(bad.validate().is_err());
        assert!(p().validate().is_ok());
    }

    #[test]
    fn clamp_linear_matches_heaviside_far_from_threshold() {
        for c in [-3.0, -0.6, 0.6, 2.0] {
            assert_eq!(
                SpikeFn::ClampLinear.apply(c, 0.5),
                SpikeFn::Heaviside.apply(c, 0.5)
            );
        }
        assert_eq!(SpikeFn::ClampLinear.apply(0.0f64, 0.5), 0.5);
    }
}
