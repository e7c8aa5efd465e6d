//! Event-driven (addition-only) matmul and convolution over spike inputs, dense
//! floating-point references, and the mask / column-sum primitives used by attention.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, IntTensor, SpikeTensor};

/// Convolution weights `(c_out, c_in/groups, k, k)` with bias, stride and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<S> {
    pub weights: DenseTensor<S>,
    pub bias: Vec<S>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<S: Scalar> ConvKernel<S> {
    /// Kernel with "same" padding `k/2`.
    pub fn new(weights: DenseTensor<S>, bias: Vec<S>, stride: usize) -> Result<Self> {
        let k = weights.shape().get(2).copied().unwrap_or(0);
        Self::with_groups(weights, bias, stride, k / 2, 1)
    }

    pub fn with_groups(
        weights: DenseTensor<S>,
        bias: Vec<S>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let sh = weights.shape();
        if sh.len() != 4 || sh[2] != sh[3] || sh[2] == 0 {
            return shape_err(format!(
                "conv weights must be (c_out, c_in, k, k), got {sh:?}"
            ));
        }
        if stride == 0 || groups == 0 || sh[0] % groups != 0 {
            return shape_err(format!(
                "bad stride {stride} / groups {groups} for {} output channels",
                sh[0]
            ));
        }
        if bias.len() != sh[0] {
            return shape_err(format!("bias length {} vs {} outputs", bias.len(), sh[0]));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1] * self.groups
    }

    pub fn k(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.k();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return shape_err(format!("{h}x{w} input too small for {k}x{k} kernel"));
        }
        Ok((
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        ))
    }

    fn w(&self, o: usize, ci: usize, ky: usize, kx: usize) -> S {
        let sh = self.weights.shape();
        self.weights.data()[((o * sh[1] + ci) * sh[2] + ky) * sh[3] + kx]
    }

    pub fn cast<T: Scalar>(&self) -> ConvKernel<T> {
        ConvKernel {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| T::of(b.as_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 3 || shape[0] != self.c_in() {
            return shape_err(format!(
                "conv expects ({}, H, W) input, got {shape:?}",
                self.c_in()
            ));
        }
        Ok((shape[0], shape[1], shape[2]))
    }
}

/// Addition counter for the event path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub additions: u64,
    pub events: u64,
}

fn check_2d(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => shape_err(format!("{what} must be 2-D, got {shape:?}")),
    }
}

/// Spike matrix `(N, D)` times weights `(D, M)`: every event adds one weight row.
pub fn event_matmul<S: Scalar>(s: &SpikeTensor, w: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    event_matmul_counted(s, w, &mut OpCounter::default())
}

pub fn event_matmul_counted<S: Scalar>(
    s: &SpikeTensor,
    w: &DenseTensor<S>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<S>> {
    let (n, d) = check_2d(s.shape(), "spike operand")?;
    let (d2, m) = check_2d(w.shape(), "weight operand")?;
    if d != d2 {
        return shape_err(format!("inner dims {d} vs {d2}"));
    }
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for k in 0..d {
            if s.data()[i * d + k] == 1 {
                counter.events += 1;
                counter.additions += m as u64;
                for (o, &wv) in row.iter_mut().zip(&w.data()[k * m..(k + 1) * m]) {
                    *o += wv;
                }
            }
        }
    }
    Ok(DenseTensor::from_parts(vec![n, m], out))
}

/// Binary `(N, K)` times binary `(K, M)`: exact integer counts.
pub fn binary_matmul(a: &SpikeTensor, b: &SpikeTensor) -> Result<IntTensor> {
    binary_matmul_counted(a, b, &mut OpCounter::default())
}

pub fn binary_matmul_counted(
    a: &SpikeTensor,
    b: &SpikeTensor,
    counter: &mut OpCounter,
) -> Result<IntTensor> {
    let (n, k) = check_2d(a.shape(), "left operand")?;
    let (k2, m) = check_2d(b.shape(), "right operand")?;
    if k != k2 {
        return shape_err(format!("inner dims {k} vs {k2}"));
    }
    let mut out = vec![0u32; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            if a.data()[i * k + kk] == 1 {
                counter.events += 1;
                counter.additions += m as u64;
                for (o, &bv) in row.iter_mut().zip(&b.data()[kk * m..(kk + 1) * m]) {
                    *o += bv as u32;
                }
            }
        }
    }
    Ok(IntTensor::from_parts(vec![n, m], out))
}

/// Binary `(N, K)` times integer `(K, M)`: each event adds one integer row.
pub fn spike_int_matmul(
    a: &SpikeTensor,
    b: &IntTensor,
    counter: &mut OpCounter,
) -> Result<IntTensor> {
    let (n, k) = check_2d(a.shape(), "left operand")?;
    let (k2, m) = check_2d(b.shape(), "right operand")?;
    if k != k2 {
        return shape_err(format!("inner dims {k} vs {k2}"));
    }
    let mut out = vec![0u32; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            if a.data()[i * k + kk] == 1 {
                counter.events += 1;
                counter.additions += m as u64;
                for (o, &bv) in row.iter_mut().zip(&b.data()[kk * m..(kk + 1) * m]) {
                    *o += bv;
                }
            }
        }
    }
    Ok(IntTensor::from_parts(vec![n, m], out))
}

/// Weights rearranged as `[c_in][ky][kx][o_local]` so one event scatters a contiguous run.
struct ScatterTable<S> {
    taps: Vec<S>,
    cout_pg: usize,
    cin_pg: usize,
    k: usize,
}

impl<S: Scalar> ScatterTable<S> {
    fn new(kern: &ConvKernel<S>) -> Self {
        let k = kern.k();
        let cin_pg = kern.weights.shape()[1];
        let cout_pg = kern.c_out() / kern.groups;
        let c_in = kern.c_in();
        let mut taps = vec![S::zero(); c_in * k * k * cout_pg];
        for c in 0..c_in {
            let g = c / cin_pg;
            for ky in 0..k {
                for kx in 0..k {
                    for ol in 0..cout_pg {
                        taps[((c * k + ky) * k + kx) * cout_pg + ol] =
                            kern.w(g * cout_pg + ol, c % cin_pg, ky, kx);
                    }
                }
            }
        }
        Self {
            taps,
            cout_pg,
            cin_pg,
            k,
        }
    }
}

/// Scatter one input site with multiplicity `count` into an `(H', W', C_out)` buffer.
#[allow(clippy::too_many_arguments)]
fn scatter_site<S: Scalar>(
    table: &ScatterTable<S>,
    kern: &ConvKernel<S>,
    acc: &mut [S],
    c: usize,
    y: usize,
    x: usize,
    count: u32,
    (ho, wo): (usize, usize),
    counter: &mut OpCounter,
) {
    let (k, s, p) = (table.k, kern.stride, kern.padding);
    let c_out = kern.c_out();
    let o0 = (c / table.cin_pg) * table.cout_pg;
    counter.events += 1;
    for ky in 0..k {
        let yy = y + p;
        if yy < ky || (yy - ky) % s != 0 {
            continue;
        }
        let oy = (yy - ky) / s;
        if oy >= ho {
            continue;
        }
        for kx in 0..k {
            let xx = x + p;
            if xx < kx || (xx - kx) % s != 0 {
                continue;
            }
            let ox = (xx - kx) / s;
            if ox >= wo {
                continue;
            }
            let base = (oy * wo + ox) * c_out + o0;
            let taps = &table.taps[((c * k + ky) * k + kx) * table.cout_pg..][..table.cout_pg];
            let dst = &mut acc[base..base + table.cout_pg];
            counter.additions += table.cout_pg as u64 * count as u64;
            if count == 1 {
                for (d, &t) in dst.iter_mut().zip(taps) {
                    *d += t;
                }
            } else {
                let m = S::of(count as f64);
                for (d, &t) in dst.iter_mut().zip(taps) {
                    *d += m * t;
                }
            }
        }
    }
}

fn finish_hwc<S: Scalar>(
    acc: Vec<S>,
    kern: &ConvKernel<S>,
    ho: usize,
    wo: usize,
) -> DenseTensor<S> {
    let c_out = kern.c_out();
    let mut out = vec![S::zero(); c_out * ho * wo];
    for pos in 0..ho * wo {
        for o in 0..c_out {
            out[o * ho * wo + pos] = acc[pos * c_out + o] + kern.bias[o];
        }
    }
    DenseTensor::from_parts(vec![c_out, ho, wo], out)
}

/// Event-driven convolution of a `(C_in, H, W)` spike map.
pub fn event_conv2d<S: Scalar>(s: &SpikeTensor, kern: &ConvKernel<S>) -> Result<DenseTensor<S>> {
    event_conv2d_counted(s, kern, &mut OpCounter::default())
}

pub fn event_conv2d_counted<S: Scalar>(
    s: &SpikeTensor,
    kern: &ConvKernel<S>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<S>> {
    let (_, h, w) = kern.check_input(s.shape())?;
    let (ho, wo) = kern.out_hw(h, w)?;
    let table = ScatterTable::new(kern);
    let mut acc = vec![S::zero(); ho * wo * kern.c_out()];
    for (idx, &v) in s.data().iter().enumerate() {
        if v == 1 {
            let c = idx / (h * w);
            let y = (idx / w) % h;
            let x = idx % w;
            scatter_site(&table, kern, &mut acc, c, y, x, 1, (ho, wo), counter);
        }
    }
    Ok(finish_hwc(acc, kern, ho, wo))
}

/// Convolution driven by integer counts (shortcut sums that exceed 1).
pub fn int_conv2d_counted<S: Scalar>(
    s: &IntTensor,
    kern: &ConvKernel<S>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<S>> {
    let (_, h, w) = kern.check_input(s.shape())?;
    let (ho, wo) = kern.out_hw(h, w)?;
    let table = ScatterTable::new(kern);
    let mut acc = vec![S::zero(); ho * wo * kern.c_out()];
    for (idx, &v) in s.data().iter().enumerate() {
        if v > 0 {
            let c = idx / (h * w);
            let y = (idx / w) % h;
            let x = idx % w;
            scatter_site(&table, kern, &mut acc, c, y, x, v, (ho, wo), counter);
        }
    }
    Ok(finish_hwc(acc, kern, ho, wo))
}

/// Textbook matmul with `f64` accumulation.
pub fn dense_matmul<S: Scalar>(a: &DenseTensor<S>, b: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let (n, k) = check_2d(a.shape(), "left operand")?;
    let (k2, m) = check_2d(b.shape(), "right operand")?;
    if k != k2 {
        return shape_err(format!("inner dims {k} vs {k2}"));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0f64;
            for kk in 0..k {
                acc += a.data()[i * k + kk].as_f64() * b.data()[kk * m + j].as_f64();
            }
            out.push(S::of(acc));
        }
    }
    Ok(DenseTensor::from_parts(vec![n, m], out))
}

/// Direct (gather) convolution of a real `(C_in, H, W)` map with `f64` accumulation.
pub fn dense_conv2d<S: Scalar>(x: &DenseTensor<S>, kern: &ConvKernel<S>) -> Result<DenseTensor<S>> {
    let (_, h, w) = kern.check_input(x.shape())?;
    let (ho, wo) = kern.out_hw(h, w)?;
    let (k, s, p) = (kern.k(), kern.stride, kern.padding);
    let cin_pg = kern.weights.shape()[1];
    let cout_pg = kern.c_out() / kern.groups;
    let mut out = Vec::with_capacity(kern.c_out() * ho * wo);
    for o in 0..kern.c_out() {
        let g = o / cout_pg;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = kern.bias[o].as_f64();
                for ci in 0..cin_pg {
                    let c = g * cin_pg + ci;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * w + ix as usize].as_f64();
                            acc += xv * kern.w(o, ci, ky, kx).as_f64();
                        }
                    }
                }
                out.push(S::of(acc));
            }
        }
    }
    Ok(DenseTensor::from_parts(vec![kern.c_out(), ho, wo], out))
}

/// Elementwise AND of two spike tensors.
pub fn hadamard_mask(a: &SpikeTensor, b: &SpikeTensor) -> Result<SpikeTensor> {
    if a.shape() != b.shape() {
        return shape_err(format!("mask {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(SpikeTensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x & y).collect(),
    ))
}

/// Column sums of an `(N, D)` spike matrix as a `(1, D)` integer row.
pub fn sum_columns(s: &SpikeTensor) -> Result<IntTensor> {
    sum_columns_counted(s, &mut OpCounter::default())
}

pub fn sum_columns_counted(s: &SpikeTensor, counter: &mut OpCounter) -> Result<IntTensor> {
    let (n, d) = check_2d(s.shape(), "column-sum operand")?;
    let mut out = vec![0u32; d];
    for i in 0..n {
        for (j, o) in out.iter_mut().enumerate() {
            if s.data()[i * d + j] == 1 {
                counter.events += 1;
                counter.additions += 1;
                *o += 1;
            }
        }
    }
    Ok(IntTensor::from_parts(vec![1, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spikes(shape: &[usize], d: &[u8]) -> SpikeTensor {
        SpikeTensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn identity_gather() {
        let w = DenseTensor::new(vec![3, 2], vec![1.0f32, 2., 3., 4., 5., 6.]).unwrap();
        let s = spikes(&[3, 3], &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(event_matmul(&s, &w).unwrap(), w);
        let z = event_matmul(&SpikeTensor::zeros(&[3, 3]), &w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_matmul_counts() {
        let i2 = spikes(&[2, 2], &[1, 0, 0, 1]);
        assert_eq!(binary_matmul(&i2, &i2).unwrap().data(), &[1, 0, 0, 1]);
        let r = binary_matmul(&SpikeTensor::ones(&[2, 3]), &SpikeTensor::ones(&[3, 2])).unwrap();
        assert_eq!(r.data(), &[3, 3, 3, 3]);
        assert!(binary_matmul(&i2, &SpikeTensor::ones(&[3, 2])).is_err());
    }

    #[test]
    fn identity_conv_and_bias_only() {
        let k = ConvKernel::new(
            DenseTensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap(),
            vec![0.0],
            1,
        )
        .unwrap();
        let s = spikes(&[1, 2, 3], &[1, 0, 1, 1, 0, 0]);
        assert_eq!(event_conv2d(&s, &k).unwrap(), s.to_dense());

        let k3 = ConvKernel::new(
            DenseTensor::full(&[2, 1, 3, 3], 0.7f32),
            vec![0.25, -1.0],
            1,
        )
        .unwrap();
        let out = event_conv2d(&SpikeTensor::zeros(&[1, 4, 4]), &k3).unwrap();
        assert!(out.data()[..16].iter().all(|&v| v == 0.25));
        assert!(out.data()[16..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn dense_small_cases() {
        let a = DenseTensor::new(vec![1, 1], vec![2.0f64]).unwrap();
        let b = DenseTensor::new(vec![1, 1], vec![3.0f64]).unwrap();
        assert_eq!(dense_matmul(&a, &b).unwrap().data(), &[6.0]);
        let eye = DenseTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = DenseTensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 4.0]).unwrap();
        assert_eq!(dense_matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn mask_and_columns() {
        let a = spikes(&[2, 2], &[1, 0, 1, 1]);
        assert_eq!(
            hadamard_mask(&a, &SpikeTensor::zeros(&[2, 2]))
                .unwrap()
                .count_ones(),
            0
        );
        assert_eq!(hadamard_mask(&a, &SpikeTensor::ones(&[2, 2])).unwrap(), a);
        assert_eq!(
            sum_columns(&SpikeTensor::zeros(&[3, 2])).unwrap().data(),
            &[0, 0]
        );
        assert_eq!(
            sum_columns(&SpikeTensor::ones(&[3, 4])).unwrap().data(),
            &[3, 3, 3, 3]
        );
    }

    #[test]
    fn stride_two_halves() {
        let k = ConvKernel::new(DenseTensor::full(&[1, 1, 3, 3], 1.0f32), vec![0.0], 2).unwrap();
        assert_eq!(k.out_hw(8, 8).unwrap(), (4, 4));
        let k7 = ConvKernel::new(DenseTensor::full(&[1, 1, 7, 7], 1.0f32), vec![0.0], 2).unwrap();
        assert_eq!(k7.out_hw(224, 224).unwrap(), (112, 112));
    }
}
