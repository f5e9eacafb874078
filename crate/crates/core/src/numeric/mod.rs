//! Dense float64 tensors, reverse-mode gradients, the optimizer, and
//! checkpoint I/O.

mod ops;
mod params;
mod tensor;

pub mod gradcheck;

pub use ops::concat;
pub use params::{file_sha256, ParamEntry, ParamSet};
pub use tensor::{backward, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    // Scalar triple-loop oracle, independent of the op implementation.
    fn matmul_oracle(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a[i * q + k] * b[k * r + j];
                }
                c[i * r + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let c = eye.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::from_vec(vec![2.0], &[1, 1]).unwrap();
        let b = Tensor::from_vec(vec![3.0], &[1, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![6.0]);
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let mut r = rng::rng(7);
        let a: Vec<f64> = (0..12).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
        let ta = Tensor::from_vec(a.clone(), &[3, 4]).unwrap();
        let tb = Tensor::from_vec(b.clone(), &[4, 2]).unwrap();
        let got = ta.matmul(&tb).unwrap().to_vec();
        let want = matmul_oracle(&a, &b, 3, 4, 2);
        for (g, w) in got.iter().zip(&want) {
            assert!(close(*g, *w, 1e-12), "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_matches_per_slice() {
        let mut r = rng::rng(11);
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * 4 * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ta = Tensor::from_vec(a.clone(), &[2, 3, 4]).unwrap();
        let tb = Tensor::from_vec(b.clone(), &[2, 4, 2]).unwrap();
        let got = ta.matmul(&tb).unwrap().to_vec();
        for batch in 0..2 {
            let want = matmul_oracle(&a[batch * 12..batch * 12 + 12], &b[batch * 8..batch * 8 + 8], 3, 4, 2);
            for (g, w) in got[batch * 6..batch * 6 + 6].iter().zip(&want) {
                assert!(close(*g, *w, 1e-12));
            }
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let y = x.softmax_lastdim().unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_masking_limit() {
        let x = Tensor::from_vec(vec![-1e9, 0.0], &[2]).unwrap();
        let y = x.softmax_lastdim().unwrap().to_vec();
        assert!(y[0] < 1e-300);
        assert!(close(y[1], 1.0, 1e-12));
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let vals = [1.0, 2.0, 3.0];
        let x = Tensor::from_vec(vals.to_vec(), &[3]).unwrap();
        let y = x.softmax_lastdim().unwrap().to_vec();
        let z: f64 = vals.iter().map(|v| v.exp()).sum();
        for (yi, vi) in y.iter().zip(&vals) {
            assert!(close(*yi, vi.exp() / z, 1e-12));
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let x = Tensor::scalar(1.0);
        assert!(x.narrow(0, 0, 1).is_ok());
        let empty = Tensor::from_vec(vec![], &[]);
        assert!(empty.is_err() || empty.unwrap().softmax_lastdim().is_err());
    }

    // Quadruple-loop cross-correlation oracle.
    fn conv_oracle(
        x: &[f64],
        k: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    s += x[(ci * h + iy as usize) * w + ix as usize]
                                        * k[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut r = rng::rng(3);
        let x: Vec<f64> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let tx = Tensor::from_vec(x.clone(), &[1, 3, 3]).unwrap();
        let k = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = tx.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = Tensor::full(&[2, 4, 4], 3.5);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&k, 1, 1).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut r = rng::rng(5);
        let x: Vec<f64> = (0..2 * 5 * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let tx = Tensor::from_vec(x.clone(), &[2, 5, 5]).unwrap();
        let tk = Tensor::from_vec(k.clone(), &[3, 2, 3, 3]).unwrap();
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let got = tx.conv2d(&tk, stride, pad).unwrap().to_vec();
            let want = conv_oracle(&x, &k, 2, 5, 5, 3, 3, 3, stride, pad);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!(close(*g, *w, 1e-12), "stride={stride} pad={pad}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_even_kernel() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(x.conv2d(&k, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0], &[2, 3]).unwrap();
        x.set_requires_grad(true);
        let loss = x.sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_sum_is_input() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::from_vec(vals.clone(), &[4]).unwrap();
        x.set_requires_grad(true);
        let loss = x.mul(&x).unwrap().sum_all().scale(0.5);
        backward(&loss).unwrap();
        for (g, v) in x.grad().unwrap().iter().zip(&vals) {
            assert!(close(*g, *v, 1e-12));
        }
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let x = Tensor::from_vec(vec![2.0], &[1]).unwrap();
        x.set_requires_grad(true);
        let loss = x.scale(3.0);
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut r = rng::rng(42);
        for case in 0..4u64 {
            let mut rr = rng::stream_rng(42 + case, 1);
            let x = Tensor::randn(&[2, 3, 3], &mut rr);
            let k = Tensor::randn(&[2, 2, 3, 3], &mut rr);
            let w = Tensor::randn(&[8, 4], &mut rr);
            let leaves = [x, k, w];
            let f = |l: &[Tensor]| -> Tensor {
                let c = l[0].conv2d(&l[1], 1, 1).unwrap(); // [2,3,3]
                let t = c.silu().reshape(&[2, 9]).unwrap().narrow(1, 0, 8).unwrap();
                let m = t.matmul(&l[2]).unwrap(); // [2,4]
                m.softmax_lastdim().unwrap().mul(&m).unwrap().sum_all()
            };
            let coords = gradcheck::all_coords(&leaves);
            let report = gradcheck::check_grads(&leaves, &f, &coords, 1e-5, 1e-6);
            assert!(
                report.max_rel_err < 1e-4,
                "case {case}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst_coord
            );
            let _ = r.gen::<u64>();
        }
    }

    #[test]
    fn permute_roundtrip_and_norm_grads() {
        let mut r = rng::rng(9);
        let x = Tensor::randn(&[4, 3, 2], &mut r);
        let p = x.permute(&[2, 0, 1]).unwrap();
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let xx = Tensor::randn(&[4, 3, 3], &mut r);
        let gamma = Tensor::randn(&[4], &mut r);
        let beta = Tensor::randn(&[4], &mut r);
        let leaves = [xx, gamma, beta];
        let f = |l: &[Tensor]| -> Tensor {
            l[0].group_norm(&l[1], &l[2], 2, 1e-5)
                .unwrap()
                .silu()
                .sum_all()
        };
        let coords = gradcheck::all_coords(&leaves);
        let report = gradcheck::check_grads(&leaves, &f, &coords, 1e-5, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn concat_narrow_upsample_grads() {
        let mut r = rng::rng(13);
        let a = Tensor::randn(&[2, 2, 2], &mut r);
        let b = Tensor::randn(&[2, 3, 2], &mut r);
        let leaves = [a, b];
        let f = |l: &[Tensor]| -> Tensor {
            let c = concat(&[l[0].clone(), l[1].clone()], 1).unwrap(); // [2,5,2]
            let n = c.narrow(1, 1, 3).unwrap();
            n.upsample_nearest2x().unwrap().mul(&n.upsample_nearest2x().unwrap()).unwrap().sum_all()
        };
        let coords = gradcheck::all_coords(&leaves);
        let report = gradcheck::check_grads(&leaves, &f, &coords, 1e-5, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn adamw_skips_frozen_entries() {
        let mut ps = ParamSet::new();
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        ps.insert("w", t.clone()).unwrap();
        ps.set_frozen_prefix("w", true);
        t.accumulate_grad(&[5.0, 5.0]);
        ps.adamw_step(0.1, (0.9, 0.999), 0.01).unwrap();
        assert_eq!(t.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn adamw_first_step_matches_hand_recurrence() {
        let lr = 1e-5;
        let wd = 0.01;
        let (b1, b2) = (0.9, 0.999);
        let p0 = 0.7;
        let g = 1.0;

        let mut ps = ParamSet::new();
        let t = Tensor::from_vec(vec![p0], &[1]).unwrap();
        ps.insert("w", t.clone()).unwrap();
        t.accumulate_grad(&[g]);
        ps.adamw_step(lr, (b1, b2), wd).unwrap();

        // Reference recurrence written out by hand.
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expect = p0 - lr * (m_hat / (v_hat.sqrt() + 1e-8) + wd * p0);
        assert!(close(t.to_vec()[0], expect, 1e-16));
        assert!(t.to_vec()[0] < p0);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut ps = ParamSet::new();
        let t = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        ps.insert("w", t.clone()).unwrap();
        t.accumulate_grad(&[0.0]);
        ps.adamw_step(1e-3, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(t.to_vec(), vec![3.0]);
    }

    #[test]
    fn adamw_missing_grad_is_state_error() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            ps.adamw_step(1e-3, (0.9, 0.999), 0.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let mut ps = ParamSet::new();
        let mut r = rng::rng(21);
        ps.insert("net.conv.weight", Tensor::randn(&[2, 3, 3, 3], &mut r)).unwrap();
        ps.insert("adapter.L1.stage1", Tensor::randn(&[4, 5], &mut r)).unwrap();
        ps.set_frozen_prefix("net.", true);
        ps.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.is_frozen("net.conv.weight"), Some(true));
        assert_eq!(loaded.is_frozen("adapter.L1.stage1"), Some(false));
        assert_eq!(
            loaded.get("net.conv.weight").unwrap().to_vec(),
            ps.get("net.conv.weight").unwrap().to_vec()
        );
        // Serialized bytes are reproducible.
        assert_eq!(ps.to_bytes(), loaded.to_bytes());
    }

    #[test]
    fn checkpoint_truncation_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[8])).unwrap();
        ps.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match ParamSet::load(&path) {
            Err(Error::Io { path: p, .. }) => assert!(p.ends_with("params.ckpt")),
            Err(other) => panic!("expected Io error, got {other:?}"),
            Ok(_) => panic!("expected Io error, got Ok"),
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(ps.insert("w", Tensor::zeros(&[1])), Err(Error::State(_))));
    }

    #[cfg(debug_assertions)]
    #[test]
    #[should_panic(expected = "non-finite")]
    fn debug_scan_catches_overflow() {
        let x = Tensor::full(&[2], 1e308);
        let _ = x.mul(&x);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..4,
            cols in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut r = crate::rng::rng(seed);
            let x = Tensor::rand_uniform(&[rows, cols], -50.0, 50.0, &mut r);
            let y = x.softmax_lastdim().unwrap();
            let data = y.to_vec();
            for row in 0..rows {
                let s: f64 = data[row * cols..(row + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn matmul_matches_oracle_up_to_extent_8(
            p in 1usize..=8, q in 1usize..=8, r in 1usize..=8, seed in 0u64..500,
        ) {
            let mut g = crate::rng::rng(seed);
            let a = Tensor::rand_uniform(&[p, q], -3.0, 3.0, &mut g);
            let b = Tensor::rand_uniform(&[q, r], -3.0, 3.0, &mut g);
            let got = a.matmul(&b).unwrap().to_vec();
            let (da, db) = (a.to_vec(), b.to_vec());
            for i in 0..p {
                for j in 0..r {
                    let mut s = 0.0;
                    for k in 0..q {
                        s += da[i * q + k] * db[k * r + j];
                    }
                    prop_assert!((got[i * r + j] - s).abs() < 1e-12);
                }
            }
        }
    }
}
