//! Dense, binary and integer tensors plus the address-event carrier.
//!
//! All tensors are row-major over an explicit shape. Spikes are stored one
//! byte per element; [`EventList`] is the sparse form consumed by the
//! event-driven kernels.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if numel(shape) != len {
        return shape_err(format!(
            "shape {:?} holds {} elements, got {}",
            shape,
            numel(shape),
            len
        ));
    }
    Ok(())
}

/// Real-valued tensor (membrane potentials, input currents, weights).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> DenseTensor<S> {
    /// Checked constructor: element count must match and every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_len(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Arg(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_len(shape, self.data.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<T: Scalar>(&self) -> DenseTensor<T> {
        DenseTensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return shape_err(format!("compare {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    /// Slice along the leading axis.
    pub fn outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyTensor)?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return shape_err("stack of differently shaped tensors");
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }
}

/// Binary activation tensor. Every element is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        check_len(&shape, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Arg(format!(
                "spike tensor value {} at {i} is not binary",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v <= 1));
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![1; numel(shape)])
    }

    /// Binarize by `v >= 0.5`.
    pub fn from_bools(shape: Vec<usize>, bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        Self::new(shape, bits.into_iter().map(u8::from).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, flat: usize) -> bool {
        self.data[flat] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_len(shape, self.data.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_dense<S: Scalar>(&self) -> DenseTensor<S> {
        DenseTensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| if v == 1 { S::one() } else { S::zero() })
                .collect(),
        )
    }

    pub fn to_int(&self) -> IntTensor {
        IntTensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v as u32).collect(),
        )
    }

    pub fn outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyTensor)?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return shape_err("stack of differently shaped spike tensors");
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Swap the last two axes; used to move between channel-major maps and token matrices.
    pub fn transpose_last2(&self) -> Self {
        let r = self.shape.len();
        assert!(r >= 2, "transpose_last2 needs rank >= 2");
        let (a, b) = (self.shape[r - 2], self.shape[r - 1]);
        let outer = self.data.len() / (a * b).max(1);
        let mut data = vec![0u8; self.data.len()];
        for o in 0..outer {
            let base = o * a * b;
            for i in 0..a {
                for j in 0..b {
                    data[base + j * a + i] = self.data[base + i * b + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Self::from_parts(shape, data)
    }
}

/// Non-negative integer tensor: products and sums of spike tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<u32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0; numel(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn nonzero_fraction(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyTensor);
        }
        Ok(self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn to_dense<S: Scalar>(&self) -> DenseTensor<S> {
        DenseTensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| S::of(v as f64)).collect(),
        )
    }

    pub fn outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_len(shape, self.data.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Fraction of ones in a spike tensor.
pub fn firing_rate(s: &SpikeTensor) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::EmptyTensor);
    }
    Ok(s.count_ones() as f64 / s.len() as f64)
}

/// One address event: timestep plus flat position inside that timestep's slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub t: usize,
    pub flat_index: usize,
}

/// Sorted, duplicate-free address events of a spike tensor whose leading axis is time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventList {
    shape: Vec<usize>,
    events: Vec<Event>,
}

impl EventList {
    /// Validates bounds, ordering and uniqueness.
    pub fn new(shape: Vec<usize>, events: Vec<Event>) -> Result<Self> {
        let (steps, slice) = split_time(&shape)?;
        for (i, e) in events.iter().enumerate() {
            if e.t >= steps || e.flat_index >= slice {
                return Err(Error::InvalidEvent(format!(
                    "event ({}, {}) outside {} steps x {} positions",
                    e.t, e.flat_index, steps, slice
                )));
            }
            if i > 0 && events[i - 1] >= *e {
                return Err(Error::InvalidEvent(format!(
                    "events not strictly increasing at record {i}"
                )));
            }
        }
        Ok(Self { shape, events })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

fn split_time(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_first() {
        Some((&t, rest)) => Ok((t, rest.iter().product())),
        None => shape_err("event list needs a shape with a leading time axis"),
    }
}

pub fn to_events(s: &SpikeTensor) -> EventList {
    let slice: usize = s.shape.get(1..).map(|r| r.iter().product()).unwrap_or(1);
    let events = s
        .data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| Event {
            t: i / slice.max(1),
            flat_index: i % slice.max(1),
        })
        .collect();
    EventList {
        shape: s.shape.clone(),
        events,
    }
}

pub fn from_events(e: &EventList) -> Result<SpikeTensor> {
    let (steps, slice) = split_time(&e.shape)?;
    let mut data = vec![0u8; steps * slice];
    for ev in &e.events {
        if ev.t >= steps || ev.flat_index >= slice {
            return Err(Error::InvalidEvent(format!(
                "event ({}, {}) out of bounds",
                ev.t, ev.flat_index
            )));
        }
        data[ev.t * slice + ev.flat_index] = 1;
    }
    Ok(SpikeTensor::from_parts(e.shape.clone(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn firing_rate_edges() {
        assert_eq!(firing_rate(&SpikeTensor::zeros(&[2, 3, 4])).unwrap(), 0.0);
        assert_eq!(firing_rate(&SpikeTensor::ones(&[5])).unwrap(), 1.0);
        let s = SpikeTensor::new(vec![4], vec![1, 0, 1, 0]).unwrap();
        assert_eq!(firing_rate(&s).unwrap(), 0.5);
        assert!(matches!(
            firing_rate(&SpikeTensor::zeros(&[0, 3])),
            Err(Error::EmptyTensor)
        ));
    }

    #[test]
    fn events_basic() {
        assert!(to_events(&SpikeTensor::zeros(&[2, 8])).is_empty());
        let mut d = vec![0u8; 16];
        d[5] = 1;
        let s = SpikeTensor::new(vec![2, 8], d).unwrap();
        assert_eq!(
            to_events(&s).events(),
            &[Event {
                t: 0,
                flat_index: 5
            }]
        );

        let e = EventList::new(vec![1, 4], vec![]).unwrap();
        assert_eq!(from_events(&e).unwrap(), SpikeTensor::zeros(&[1, 4]));
        let e = EventList::new(
            vec![1, 2],
            vec![Event {
                t: 0,
                flat_index: 0,
            }],
        )
        .unwrap();
        assert_eq!(from_events(&e).unwrap().data(), &[1, 0]);
    }

    #[test]
    fn invalid_events_rejected() {
        let bad = EventList::new(
            vec![1, 2],
            vec![Event {
                t: 0,
                flat_index: 2,
            }],
        );
        assert!(matches!(bad, Err(Error::InvalidEvent(_))));
        let dup = EventList::new(
            vec![1, 4],
            vec![
                Event {
                    t: 0,
                    flat_index: 1,
                },
                Event {
                    t: 0,
                    flat_index: 1,
                },
            ],
        );
        assert!(matches!(dup, Err(Error::InvalidEvent(_))));
    }

    #[test]
    fn non_binary_spikes_rejected() {
        assert!(SpikeTensor::new(vec![2], vec![0, 2]).is_err());
        assert!(DenseTensor::<f32>::new(vec![1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let s = SpikeTensor::new(vec![2, 3], vec![1, 0, 0, 1, 1, 0]).unwrap();
        let t = s.transpose_last2();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1, 1, 0, 1, 0, 0]);
        assert_eq!(t.transpose_last2(), s);
    }

    fn spikes() -> impl Strategy<Value = SpikeTensor> {
        (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(t, h, w)| {
            proptest::collection::vec(0u8..2, t * h * w)
                .prop_map(move |d| SpikeTensor::new(vec![t, h, w], d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn events_roundtrip(s in spikes()) {
            let ev = to_events(&s);
            prop_assert_eq!(ev.len(), s.count_ones());
            // re-validating asserts ordering and bounds invariants
            let checked = EventList::new(ev.shape().to_vec(), ev.events().to_vec()).unwrap();
            prop_assert_eq!(from_events(&checked).unwrap(), s.clone());
            let r = firing_rate(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
