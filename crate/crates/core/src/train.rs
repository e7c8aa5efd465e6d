//! Loss, the layerwise-adaptive optimizer, toy datasets, training loops and the
//! finite-difference gradient check.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax_ce, Gradients, NormMode, Tape};
use crate::config::{Schedule, TrainConfig};
use crate::error::{shape_err, Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::neuron::SpikeFn;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Label-smoothed cross-entropy of `(B, K)` logits, averaged over the batch.
pub fn loss<S: Scalar>(logits: &DenseTensor<S>, labels: &[usize], smoothing: S) -> Result<S> {
    let &[b, k] = logits.shape() else {
        return shape_err(format!("logits must be (B, K), got {:?}", logits.shape()));
    };
    if labels.len() != b {
        return shape_err(format!("{} labels for a batch of {b}", labels.len()));
    }
    let mut targets = vec![smoothing / S::of_usize(k); b * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Arg(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        targets[i * k + l] += S::one() - smoothing;
    }
    Ok(softmax_ce(logits.data(), &targets, b, k).1)
}

/// Layerwise-adaptive moment optimizer (LAMB).
///
/// Per tensor: Adam moments with bias correction, update `r = m/(sqrt(v)+eps) + wd*w`
/// (decay on weights only), step `lr * (|w| / |r|) * r`.
#[derive(Clone, Debug)]
pub struct OptimState<S> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            ..Self::new(cfg.lr, cfg.weight_decay)
        }
    }

    /// First and second moments of a parameter, once it has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<(&[S], &[S])> {
        self.moments
            .get(id.0)?
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Update every trainable parameter. A parameter without a gradient sees a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in store.trainable_ids() {
            let n = store.get(id).len();
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return shape_err(format!(
                        "gradient {:?} for `{}` {:?}",
                        g.shape(),
                        store.param(id).name,
                        store.get(id).shape()
                    ));
                }
            }
            let decay = if store.param(id).role.decays() {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) =
                self.moments[id.0].get_or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            let w = store.get(id).data();
            let mut r = vec![0f64; n];
            for i in 0..n {
                let g = grads.get(id).map_or(0.0, |g| g.data()[i].as_f64());
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = S::of(mi);
                v[i] = S::of(vi);
                r[i] = (mi / c1) / ((vi / c2).sqrt() + self.eps) + decay * w[i].as_f64();
            }
            let w_norm = w.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            let r_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let trust = if w_norm > 0.0 && r_norm > 0.0 {
                w_norm / r_norm
            } else {
                1.0
            };
            let scale = self.lr * trust;
            for (wi, ri) in store.get_mut(id).data_mut().iter_mut().zip(&r) {
                *wi = S::of(wi.as_f64() - scale * ri);
            }
        }
        Ok(())
    }
}

/// Labelled images `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub images: DenseTensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(images: DenseTensor<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return shape_err(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Arg(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Gather samples into a batch, optionally mirrored left-right.
    pub fn batch(&self, idx: &[usize], flips: &[bool]) -> (DenseTensor<S>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let len = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for (j, &i) in idx.iter().enumerate() {
            let img = &self.images.data()[i * len..(i + 1) * len];
            if flips.get(j).copied().unwrap_or(false) {
                for row in img.chunks(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (
            DenseTensor::from_parts(vec![idx.len(), c, h, w], data),
            labels,
        )
    }

    /// The samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let (images, labels) = self.batch(idx, &[]);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Same images, labels permuted at random.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            labels,
            ..self.clone()
        }
    }

    /// Text form: `classes K`, `shape C H W`, then one `<label> <values...>` line per sample.
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.image_shape();
        let mut s = format!("classes {}\nshape {c} {h} {w}\n", self.num_classes);
        let len = self.sample_len();
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(s, "{l}");
            for v in &self.images.data()[i * len..(i + 1) * len] {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = None;
        let mut shape = None;
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let mut f = line.split_whitespace();
            let head = f.next().unwrap_or("");
            let nums = |f: std::str::SplitWhitespace| -> Result<Vec<usize>> {
                f.map(|x| x.parse().map_err(|e| perr(format!("{e}"))))
                    .collect()
            };
            match head {
                "classes" => classes = nums(f)?.first().copied(),
                "shape" => {
                    let v = nums(f)?;
                    if v.len() != 3 || v.contains(&0) {
                        return Err(perr("expected `shape C H W`".into()));
                    }
                    shape = Some([v[0], v[1], v[2]]);
                }
                _ => {
                    let [c, h, w] = shape.ok_or_else(|| perr("sample before `shape`".into()))?;
                    labels.push(head.parse().map_err(|e| perr(format!("bad label: {e}")))?);
                    let start = data.len();
                    for x in f {
                        let v: f64 = x.parse().map_err(|e| perr(format!("bad value: {e}")))?;
                        data.push(S::of(v));
                    }
                    if data.len() - start != c * h * w {
                        return Err(perr(format!(
                            "expected {} values, got {}",
                            c * h * w,
                            data.len() - start
                        )));
                    }
                }
            }
        }
        let k = classes.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "missing `classes`".into(),
        })?;
        let [c, h, w] = shape.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "missing `shape`".into(),
        })?;
        let images = DenseTensor::new(vec![labels.len(), c, h, w], data)?;
        Self::new(images, labels, k)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Gaussian blobs: each class has its own random mean image in `[0, 1]`; samples add
/// isotropic noise of standard deviation `noise`.
pub fn blobs<S: Scalar>(
    n: usize,
    classes: usize,
    [c, h, w]: [usize; 3],
    noise: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if classes == 0 || n == 0 {
        return Err(Error::Arg(
            "blobs need at least one sample and one class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = c * h * w;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..len).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Arg(e.to_string()))?;
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(means[k].iter().map(|&m| S::of(m + normal.sample(&mut rng))));
    }
    Dataset::new(DenseTensor::new(vec![n, c, h, w], data)?, labels, classes)
}

/// Training accuracy of a multiclass perceptron on raw pixels; 1.0 certifies the data
/// is linearly separable.
pub fn linear_probe_accuracy<S: Scalar>(ds: &Dataset<S>, max_epochs: usize) -> f64 {
    let len = ds.sample_len() + 1;
    let k = ds.num_classes;
    let mut w = vec![0f64; k * len];
    let sample = |i: usize| -> Vec<f64> {
        let mut x: Vec<f64> = ds.images.data()[i * (len - 1)..(i + 1) * (len - 1)]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        x.push(1.0);
        x
    };
    let predict = |w: &[f64], x: &[f64]| -> usize {
        (0..k)
            .map(|c| {
                w[c * len..(c + 1) * len]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| {
                if s > best.1 {
                    (c, s)
                } else {
                    best
                }
            })
            .0
    };
    let xs: Vec<Vec<f64>> = (0..ds.len()).map(sample).collect();
    for _ in 0..max_epochs {
        let mut mistakes = 0;
        for (x, &y) in xs.iter().zip(&ds.labels) {
            let p = predict(&w, x);
            if p != y {
                mistakes += 1;
                for j in 0..len {
                    w[y * len + j] += x[j];
                    w[p * len + j] -= x[j];
                }
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    let correct = xs
        .iter()
        .zip(&ds.labels)
        .filter(|(x, &y)| predict(&w, x) == y)
        .count();
    correct as f64 / ds.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub timesteps: usize,
    /// Mean training-mode batch loss.
    pub loss: f64,
    /// Inference accuracy after the epoch.
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} split={} timesteps={} loss={:.6} accuracy={:.4}",
            self.epoch, self.split, self.timesteps, self.loss, self.accuracy
        )
    }
}

/// Inference loss (no smoothing) and accuracy on the event-driven path.
pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &Dataset<S>, steps: usize) -> Result<(f64, f64)> {
    let logits = model.forward(&ds.images, steps)?;
    let l = loss(&logits, &ds.labels, S::zero())?.as_f64();
    let k = ds.num_classes;
    let correct = logits
        .data()
        .chunks(k)
        .zip(&ds.labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, S::neg_infinity()),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == y
        })
        .count();
    Ok((l, correct as f64 / ds.len() as f64))
}

fn check_dataset<S: Scalar>(cfg: &ModelConfig, ds: &Dataset<S>) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != cfg.in_channels
        || h != cfg.resolution
        || w != cfg.resolution
        || ds.num_classes != cfg.num_classes
    {
        return Err(Error::Config(format!(
            "dataset ({c}x{h}x{w}, {} classes) does not fit the model ({}x{r}x{r}, {} classes)",
            ds.num_classes,
            cfg.in_channels,
            cfg.num_classes,
            r = cfg.resolution
        )));
    }
    if ds.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    Ok(())
}

fn lr_at(cfg: &TrainConfig, epoch: usize, epochs: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            0.5 * cfg.lr
                * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
        }
    }
}

/// One training-mode step on a batch; returns the batch loss.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut OptimState<S>,
    x: &DenseTensor<S>,
    labels: &[usize],
    steps: usize,
    norm_mode: NormMode,
    smoothing: S,
    bn_momentum: S,
) -> Result<f64> {
    let mut tape = Tape::with_modes(SpikeFn::Heaviside, norm_mode);
    let logits = model.forward_tape(&mut tape, x, steps)?;
    let l = tape.cross_entropy(logits, labels, smoothing)?;
    let value = tape.value(l).data()[0].as_f64();
    let grads = tape.backward(l)?;
    opt.step(&mut model.store, &grads)?;
    if norm_mode == NormMode::Train {
        let stats = tape.norm_stats().to_vec();
        model.absorb_norm_stats(&stats, bn_momentum)?;
    }
    Ok(value)
}

fn run_epochs<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset<S>,
    cfg: &TrainConfig,
    steps: usize,
    epochs: usize,
    norm_mode: NormMode,
    split: &str,
) -> Result<Vec<EpochMetrics>> {
    check_dataset(&model.cfg, ds)?;
    let mut opt = OptimState::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        opt.lr = lr_at(cfg, epoch, epochs);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..ds.len())
            .map(|_| cfg.flip && rng.gen::<bool>())
            .collect();
        let (mut total, mut batches) = (0.0, 0usize);
        // Batches are assembled on a loader thread; the bounded queue keeps it at most
        // two batches ahead of the optimizer.
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(2);
            let order = &order;
            let flips = &flips;
            scope.spawn(move || {
                for chunk in order.chunks(cfg.batch_size) {
                    let f: Vec<bool> = chunk.iter().map(|&i| flips[i]).collect();
                    if tx.send(ds.batch(chunk, &f)).is_err() {
                        break;
                    }
                }
            });
            for (x, labels) in rx {
                total += train_step(
                    model,
                    &mut opt,
                    &x,
                    &labels,
                    steps,
                    norm_mode,
                    S::of(cfg.label_smoothing),
                    S::of(cfg.bn_momentum),
                )?;
                batches += 1;
            }
            Ok(())
        })?;
        let (_, accuracy) = evaluate(model, ds, steps)?;
        history.push(EpochMetrics {
            epoch: epoch + 1,
            split: split.into(),
            timesteps: steps,
            loss: total / batches.max(1) as f64,
            accuracy,
        });
    }
    Ok(history)
}

/// Direct surrogate-gradient training at `cfg.timesteps`.
pub fn train_toy<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    run_epochs(
        model,
        ds,
        cfg,
        cfg.timesteps,
        cfg.epochs,
        NormMode::Train,
        "train",
    )
}

/// Continue training at `t_to` timesteps with normalization statistics frozen.
/// Equal timestep counts make this a no-op.
pub fn finetune_timesteps<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset<S>,
    cfg: &TrainConfig,
    t_from: usize,
    t_to: usize,
    epochs: usize,
) -> Result<Vec<EpochMetrics>> {
    if t_to < 1 || t_from < 1 {
        return Err(Error::Arg("timesteps must be >= 1".into()));
    }
    if t_from == t_to {
        return Ok(Vec::new());
    }
    cfg.validate()?;
    run_epochs(model, ds, cfg, t_to, epochs, NormMode::Eval, "finetune")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Checked entries whose numeric gradient exceeds the denominator floor.
    pub nonzero: usize,
    /// Samples whose perturbation crossed a kink of the relaxed network.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Denominator floor of the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

fn relaxed_loss(
    model: &Model<f64>,
    x: &DenseTensor<f64>,
    labels: &[usize],
    steps: usize,
) -> Result<(f64, u64)> {
    let mut tape = Tape::with_modes(SpikeFn::ClampLinear, NormMode::Train);
    let logits = model.forward_tape(&mut tape, x, steps)?;
    let l = tape.cross_entropy(logits, labels, 0.1)?;
    Ok((tape.value(l).data()[0], tape.region_signature()))
}

/// Compare backward against five-point central differences on `samples` random parameter entries of
/// an `f64` model built from `cfg`, with spikes relaxed to the clamped-linear function.
pub fn gradcheck(cfg: &ModelConfig, samples: usize, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(cfg, samples, seed, |_, g| g)
}

/// [`gradcheck`] with a hook that can alter the analytic gradient before comparison.
pub fn gradcheck_with(
    cfg: &ModelConfig,
    samples: usize,
    seed: u64,
    perturb: impl Fn(usize, f64) -> f64,
) -> Result<GradcheckReport> {
    let steps = 2;
    let mut model = build_model::<f64>(cfg)?;
    let data = blobs::<f64>(
        4,
        cfg.num_classes,
        [cfg.in_channels, cfg.resolution, cfg.resolution],
        0.3,
        seed,
    )?;
    model.calibrate_norms(&data.images, steps)?;
    let x = &data.images;
    let labels = &data.labels;
    let mut tape = Tape::with_modes(SpikeFn::ClampLinear, NormMode::Train);
    let logits = model.forward_tape(&mut tape, x, steps)?;
    let l = tape.cross_entropy(logits, labels, 0.1)?;
    let base_sig = tape.region_signature();
    let grads = tape.backward(l)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut pool: Vec<(ParamId, usize)> = model
        .store
        .trainable_ids()
        .into_iter()
        .flat_map(|id| (0..model.store.get(id).len()).map(move |i| (id, i)))
        .collect();
    pool.shuffle(&mut rng);
    let h = 1e-4;
    let mut report = GradcheckReport {
        checked: 0,
        nonzero: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (id, i) in pool {
        if report.checked >= samples {
            break;
        }
        let orig = model.store.get(id).data()[i];
        // Five-point central stencil; any offset that changes a clamp region is a kink.
        let mut f = [0.0; 4];
        let mut kink = false;
        for (slot, off) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
            model.store.get_mut(id).data_mut()[i] = orig + off * h;
            let (l, sig) = relaxed_loss(&model, x, labels, steps)?;
            f[slot] = l;
            kink |= sig != base_sig;
        }
        model.store.get_mut(id).data_mut()[i] = orig;
        if kink {
            report.skipped += 1;
            continue;
        }
        let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
        let analytic = perturb(report.checked, grads.get(id).map_or(0.0, |g| g.data()[i]));
        let rel =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if rel > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = format!(
                "{}[{i}] analytic={analytic:e} numeric={numeric:e}",
                model.store.param(id).name
            );
        }
        report.checked += 1;
        report.nonzero += usize::from(numeric.abs() > GRADCHECK_FLOOR);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let u = DenseTensor::new(vec![1, 4], vec![0.3; 4]).unwrap();
        assert!((loss(&u, &[2], 0.0).unwrap() - 4f64.ln()).abs() < 1e-12);
        let big = DenseTensor::new(vec![1, 2], vec![50.0, 0.0]).unwrap();
        assert!(loss(&big, &[0], 0.0).unwrap() < 1e-20);
        let l = DenseTensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let lse = (1f64.exp() + 1.0).ln();
        let want = -(0.95 * (1.0 - lse) + 0.05 * (0.0 - lse));
        assert!((loss(&l, &[0], 0.1).unwrap() - want).abs() < 1e-12);
        assert!(matches!(loss(&l, &[2], 0.0), Err(Error::Arg(_))));
    }

    fn one_param(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(
            "w",
            crate::params::ParamRole::Weight,
            DenseTensor::new(vec![1], vec![w]).unwrap(),
        );
        (s, id)
    }

    #[test]
    fn lamb_hand_trace() {
        let (mut s, id) = one_param(1.0);
        let mut opt = OptimState::<f64>::new(0.1, 0.0);
        let mut g = Gradients::default();
        g.insert(id, DenseTensor::new(vec![1], vec![0.5]).unwrap());
        // Step 1: m_hat = 0.5, v_hat = 0.25, r = 0.5/(0.5+eps), trust = 1/r.
        opt.step(&mut s, &g).unwrap();
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-12);
        // Step 2: same gradient, r ~ 1, trust = 0.9/r, w = 0.9 - 0.1*0.9.
        opt.step(&mut s, &g).unwrap();
        assert!((s.get(id).data()[0] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn lamb_zero_and_decay() {
        let (mut s, id) = one_param(2.0);
        let mut opt = OptimState::<f64>::new(0.1, 0.0);
        opt.step(&mut s, &Gradients::default()).unwrap();
        assert_eq!(s.get(id).data()[0], 2.0);
        let mut opt = OptimState::<f64>::new(0.1, 0.5);
        opt.step(&mut s, &Gradients::default()).unwrap();
        assert!(s.get(id).data()[0].abs() < 2.0);
        let mut bad = Gradients::default();
        bad.insert(id, DenseTensor::new(vec![2], vec![0.0; 2]).unwrap());
        assert!(matches!(opt.step(&mut s, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_text_roundtrip() {
        let ds = blobs::<f64>(6, 3, [1, 2, 2], 0.1, 3).unwrap();
        let back = Dataset::<f64>::parse(&ds.to_text()).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(
            Dataset::<f64>::parse("classes 2\nshape 1 1 2\n0 1.0\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn flip_mirrors_rows() {
        let ds = Dataset::new(
            DenseTensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![0],
            1,
        )
        .unwrap();
        let (x, _) = ds.batch(&[0], &[true]);
        assert_eq!(x.data(), &[2.0, 1.0, 4.0, 3.0]);
    }
}
