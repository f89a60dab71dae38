//! Property-based invariants for the numeric kernels.

use proptest::prelude::*;

use tednet::groundtruth::{render_density, Annotation};
use tednet::tensor::{
    avgpool, conv2d, conv2d_backward, maxpool2, relu, upsample_nearest, ConvSpec, Tensor4,
};

fn tensor(n: usize, c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor4> {
    proptest::collection::vec(-2.0f64..2.0, n * c * h * w)
        .prop_map(move |d| Tensor4::from_vec(n, c, h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // <conv(x), g> == <x, conv_adjoint(g)>: the backward pass is the exact
    // adjoint of the forward map (bias excluded on both sides).
    #[test]
    fn conv_backward_is_adjoint(
        x in tensor(1, 2, 8, 8),
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
        g_seed in proptest::collection::vec(-2.0f64..2.0, 3 * 8 * 8),
    ) {
        let spec = ConvSpec::same(k, 2, 3);
        let nw = 3 * 2 * k * k;
        let wdata: Vec<f64> = (0..nw).map(|i| ((i * 37 % 19) as f64 - 9.0) / 10.0).collect();
        let w = Tensor4::from_vec(3, 2, k, k, wdata).unwrap();
        let y = conv2d(&x, &w, &[0.0; 3], &spec).unwrap();
        let g = Tensor4::from_vec(1, 3, 8, 8, g_seed).unwrap();
        let (gx, _, _) = conv2d_backward(&x, &w, &spec, &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    // avgpool preserves the mean; scaled by k^2 it preserves the sum.
    #[test]
    fn avgpool_preserves_mean(x in tensor(1, 2, 8, 8)) {
        let p = avgpool(&x, 4).unwrap();
        prop_assert!((p.sum() * 16.0 - x.sum()).abs() < 1e-9 * x.sum().abs().max(1.0));
    }

    // every pooled value is the max of its window, and appears in the input.
    #[test]
    fn maxpool_dominates_window(x in tensor(1, 1, 6, 6)) {
        let (p, idx) = maxpool2(&x).unwrap();
        for (v, &i) in p.data().iter().zip(&idx) {
            prop_assert_eq!(*v, x.data()[i]);
        }
        for (w, pv) in x.data().chunks(6).collect::<Vec<_>>().chunks(2).zip(p.data().chunks(3)) {
            for (j, &v) in pv.iter().enumerate() {
                let m = w[0][2 * j].max(w[0][2 * j + 1]).max(w[1][2 * j]).max(w[1][2 * j + 1]);
                prop_assert_eq!(v, m);
            }
        }
    }

    // nearest-neighbor upsampling multiplies the sum by factor^2.
    #[test]
    fn upsample_scales_sum(x in tensor(1, 2, 5, 5)) {
        let u = upsample_nearest(&x, 2).unwrap();
        prop_assert!((u.sum() - 4.0 * x.sum()).abs() < 1e-9 * x.sum().abs().max(1.0));
    }

    // relu output is non-negative and idempotent.
    #[test]
    fn relu_idempotent(x in tensor(1, 1, 4, 4)) {
        let r = relu(&x);
        prop_assert!(r.data().iter().all(|&v| v >= 0.0));
        let rr = relu(&r);
        prop_assert_eq!(rr.data(), r.data());
    }

    // density maps integrate to the head count for any in-bounds point set.
    #[test]
    fn density_integrates_to_count(
        pts in proptest::collection::vec((0.0f64..31.0, 0.0f64..31.0), 1..12),
    ) {
        let n = pts.len() as f64;
        let ann = Annotation {
            image: "p.png".into(),
            size: [32, 32],
            points: pts.into_iter().map(|(x, y)| [x, y]).collect(),
        };
        let map = render_density(&ann, 3.0, 11).unwrap();
        prop_assert!((map.sum() - n).abs() < 1e-6);
        prop_assert!(map.data().iter().all(|&v| v >= 0.0));
    }
}
