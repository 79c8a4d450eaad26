//! Property tests for the operator invariants: shift round-trips,
//! convolution translation equivariance, normalization shift invariance,
//! operator linearity, and format round-trips.

use proptest::prelude::*;

use msmlp::bench::{records_from_csv, records_to_csv, ScalingRecord};
use msmlp::mixshift::{
    group_widths, mix_shift_forward, mix_shift_reference_forward, split_channels, AxisMode, ConvType, GroupKernel,
    MixShiftParams, MixShiftSpec, ProjectionMode,
};
use msmlp::ops;
use msmlp::params::{DepthwiseKernel, NormAffine};
use msmlp::{Axis, Tensor4};

fn tensor_strategy(n: usize, h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor4> {
    proptest::collection::vec(-1.0f64..1.0, n * h * w * c)
        .prop_map(move |data| Tensor4::from_vec(n, h, w, c, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // shifting there and back restores the interior
    #[test]
    fn shift_round_trip_restores_interior(
        x in tensor_strategy(1, 7, 7, 2),
        d in 1i64..4,
        vertical in any::<bool>(),
    ) {
        let axis = if vertical { Axis::Vertical } else { Axis::Horizontal };
        let there = ops::shift2d(&x, d, axis).unwrap();
        let back = ops::shift2d(&there, -d, axis).unwrap();
        let du = d as usize;
        for i in 0..7usize {
            for j in 0..7usize {
                let interior = match axis {
                    Axis::Vertical => i < 7 - du,
                    Axis::Horizontal => j < 7 - du,
                };
                if interior {
                    for ch in 0..2 {
                        prop_assert_eq!(back.at(0, i, j, ch), x.at(0, i, j, ch));
                    }
                }
            }
        }
    }

    // depthwise convolution commutes with shifts away from the borders
    #[test]
    fn depthwise_conv_is_translation_equivariant_in_interior(
        x in tensor_strategy(1, 9, 9, 2),
        weights in proptest::collection::vec(-1.0f64..1.0, 2 * 9),
        d in 1i64..3,
    ) {
        let mut k = DepthwiseKernel::zeros(2, 3, true).unwrap();
        k.weight.copy_from_slice(&weights);
        let shift_then_conv = ops::depthwise_conv2d(&ops::shift2d(&x, d, Axis::Vertical).unwrap(), &k).unwrap();
        let conv_then_shift = ops::shift2d(&ops::depthwise_conv2d(&x, &k).unwrap(), d, Axis::Vertical).unwrap();
        let margin = d.unsigned_abs() as usize + 1; // d + (r-1)/2
        for i in margin..9 - margin {
            for j in margin..9 - margin {
                for ch in 0..2 {
                    let a = shift_then_conv.at(0, i, j, ch);
                    let b = conv_then_shift.at(0, i, j, ch);
                    prop_assert!((a - b).abs() < 1e-12, "({i},{j},{ch}): {a} vs {b}");
                }
            }
        }
    }

    // adding a per-position constant across channels does not change the
    // normalized output (gamma = 1, beta = 0)
    #[test]
    fn layer_norm_shift_invariance(
        x in tensor_strategy(1, 4, 4, 5),
        offsets in proptest::collection::vec(-3.0f64..3.0, 16),
    ) {
        let affine = NormAffine::unit(5);
        let base = ops::layer_norm(&x, &affine, 1e-5).unwrap();
        let mut shifted = x.clone();
        for (pos, off) in offsets.iter().enumerate() {
            let (i, j) = (pos / 4, pos % 4);
            for ch in 0..5 {
                *shifted.at_mut(0, i, j, ch) += off;
            }
        }
        let out = ops::layer_norm(&shifted, &affine, 1e-5).unwrap();
        prop_assert!(base.max_abs_diff(&out) < 1e-9);
    }

    // equal split then concat reproduces the input exactly
    #[test]
    fn split_concat_round_trip(x in tensor_strategy(2, 3, 3, 12), s in prop_oneof![Just(1usize), Just(2), Just(3), Just(4), Just(6)]) {
        let parts = split_channels(&x, s).unwrap();
        prop_assert_eq!(parts.len(), s);
        let refs: Vec<&Tensor4> = parts.iter().collect();
        prop_assert_eq!(ops::concat_channels(&refs).unwrap(), x);
    }

    // the operator without biases is linear in its input
    #[test]
    fn mix_shift_is_linear_without_biases(
        x in tensor_strategy(1, 6, 6, 6),
        y in tensor_strategy(1, 6, 6, 6),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
        seed in 0u64..1000,
    ) {
        let spec = MixShiftSpec {
            shifting_size: 3,
            distances: vec![0, 1, 2],
            region_sizes: vec![1, 3, 3],
            axis_mode: AxisMode::DualBranchSum,
            conv_type: ConvType::Dw,
            projection: ProjectionMode::None,
        };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = MixShiftParams::random(&spec, 6, 0.7, &mut rng).unwrap();
        for branch in &mut params.branches {
            for k in &mut branch.kernels {
                if let GroupKernel::Depthwise(k) = k {
                    k.bias = Some(vec![0.0; k.channels]);
                }
            }
        }
        let combo = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = mix_shift_forward(&combo, &spec, &params).unwrap();
        let rhs = mix_shift_forward(&x, &spec, &params).unwrap().scale(alpha)
            .add(&mix_shift_forward(&y, &spec, &params).unwrap().scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    // optimized and reference routes agree on arbitrary small cases
    #[test]
    fn oracle_equivalence_property(
        x in tensor_strategy(1, 5, 6, 8),
        d1 in -4i64..5,
        d2 in -4i64..5,
        r1 in prop_oneof![Just(1usize), Just(3)],
        r2 in prop_oneof![Just(3usize), Just(5)],
        seed in 0u64..1000,
    ) {
        let spec = MixShiftSpec {
            shifting_size: 3,
            distances: vec![0, d1, d2],
            region_sizes: vec![1, r1, r2],
            axis_mode: AxisMode::DualBranchSum,
            conv_type: ConvType::Dw,
            projection: ProjectionMode::None,
        };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = MixShiftParams::random(&spec, 8, 0.8, &mut rng).unwrap();
        let fast = mix_shift_forward(&x, &spec, &params).unwrap();
        let slow = mix_shift_reference_forward(&x, &spec, &params).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) <= 1e-10);
    }

    // chunk widths always cover the channel count with nonempty groups
    #[test]
    fn group_widths_partition_channels(c in 1usize..300, s in 1usize..8) {
        match group_widths(c, s) {
            Ok(widths) => {
                prop_assert_eq!(widths.len(), s);
                prop_assert_eq!(widths.iter().sum::<usize>(), c);
                prop_assert!(widths.iter().all(|&w| w >= 1));
            }
            Err(_) => prop_assert!(c < s || c.div_ceil(s) * (s - 1) >= c),
        }
    }

    // scaling CSV round-trips exactly
    #[test]
    fn scaling_csv_round_trip(
        h in 1usize..500,
        w in 1usize..500,
        c in 1usize..2000,
        reps in 3usize..20,
        time_mantissa in 1.0f64..10.0,
        time_exp in -6i32..2,
        macs in 0u128..u64::MAX as u128,
    ) {
        let records = vec![ScalingRecord {
            op: "mix-shift".to_string(),
            h, w, c, reps,
            median_s: time_mantissa * 10f64.powi(time_exp),
            macs,
        }];
        let csv = records_to_csv(&records);
        let back = records_from_csv(&csv).unwrap();
        prop_assert_eq!(records, back);
    }
}
