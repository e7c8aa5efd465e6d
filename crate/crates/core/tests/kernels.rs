use proptest::prelude::*;
use spikeformer::kernels::{
    binary_matmul, dense_conv2d, dense_matmul, event_conv2d, event_conv2d_counted, event_matmul,
    event_matmul_counted, ConvKernel, OpCounter,
};
use spikeformer::verify::{check_event_conv, check_event_matmul, check_hydra_identity};
use spikeformer::{DenseTensor, SpikeTensor};

fn spikes(shape: Vec<usize>, bits: Vec<u8>) -> SpikeTensor {
    SpikeTensor::new(shape, bits).unwrap()
}

fn int_weights(shape: Vec<usize>, vals: Vec<i32>) -> DenseTensor<f64> {
    DenseTensor::new(shape, vals.into_iter().map(f64::from).collect()).unwrap()
}

prop_compose! {
    fn matmul_case()(n in 1usize..6, d in 1usize..7, m in 1usize..6)
        (bits in prop::collection::vec(0u8..2, n * d),
         w in prop::collection::vec(-9i32..10, d * m),
         n in Just(n), d in Just(d), m in Just(m))
        -> (SpikeTensor, DenseTensor<f64>) {
        (spikes(vec![n, d], bits), int_weights(vec![d, m], w))
    }
}

prop_compose! {
    fn conv_case()(g in 1usize..3, cpg in 1usize..3, opg in 1usize..3, k in prop::sample::select(vec![1usize, 3, 5]),
                   stride in 1usize..3, h in 3usize..8, w in 3usize..8)
        (bits in prop::collection::vec(0u8..2, g * cpg * h * w),
         wts in prop::collection::vec(-5i32..6, g * opg * cpg * k * k),
         bias in prop::collection::vec(-3i32..4, g * opg),
         g in Just(g), cpg in Just(cpg), opg in Just(opg), k in Just(k), stride in Just(stride), h in Just(h), w in Just(w))
        -> (SpikeTensor, ConvKernel<f64>) {
        let kern = ConvKernel::with_groups(
            int_weights(vec![g * opg, cpg, k, k], wts),
            bias.into_iter().map(f64::from).collect(),
            stride,
            k / 2,
            g,
        ).unwrap();
        (spikes(vec![g * cpg, h, w], bits), kern)
    }
}

proptest! {
    #[test]
    fn event_matmul_is_exact_on_integer_weights((s, w) in matmul_case()) {
        let got = event_matmul(&s, &w).unwrap();
        let want = dense_matmul(&s.to_dense(), &w).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn event_matmul_additions_equal_events_times_width((s, w) in matmul_case()) {
        let mut c = OpCounter::default();
        event_matmul_counted(&s, &w, &mut c).unwrap();
        prop_assert_eq!(c.events, s.count_ones() as u64);
        prop_assert_eq!(c.additions, c.events * w.shape()[1] as u64);
    }

    #[test]
    fn event_conv_is_exact_on_integer_weights((s, k) in conv_case()) {
        let got = event_conv2d(&s, &k).unwrap();
        let want = dense_conv2d(&s.to_dense(), &k).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn silent_input_costs_nothing((s, k) in conv_case()) {
        let silent = SpikeTensor::zeros(s.shape());
        let mut c = OpCounter::default();
        let out = event_conv2d_counted(&silent, &k, &mut c).unwrap();
        prop_assert_eq!(c.additions, 0);
        let (ho, wo) = k.out_hw(s.shape()[1], s.shape()[2]).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            prop_assert_eq!(*v, k.bias[i / (ho * wo)]);
        }
    }

    #[test]
    fn binary_matmul_counts_coincidences(n in 1usize..5, k in 1usize..6, m in 1usize..5, seed in any::<u64>()) {
        let bit = |i: usize| ((seed >> (i % 64)) ^ (i as u64 / 64)) & 1;
        let a = spikes(vec![n, k], (0..n * k).map(|i| bit(i) as u8).collect());
        let b = spikes(vec![k, m], (0..k * m).map(|i| bit(i + 7) as u8).collect());
        let c = binary_matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let want = (0..k).filter(|&t| a.get(i * k + t) && b.get(t * m + j)).count() as u32;
                prop_assert_eq!(c.data()[i * m + j], want);
            }
        }
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let s = SpikeTensor::zeros(&[2, 3]);
    let w = DenseTensor::<f32>::zeros(&[4, 2]);
    assert!(event_matmul(&s, &w).is_err());
}

#[test]
fn randomized_equivalence_against_dense_oracles() {
    for check in [
        check_event_matmul(1000, 11, None),
        check_event_conv(1000, 12, None),
        check_hydra_identity(1000, 13),
    ] {
        assert!(check.passed, "{}", check.line());
    }
}
