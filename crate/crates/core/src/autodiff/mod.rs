//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute. [`Tape::grad`] walks the
//! tape backwards and records the adjoint computation on the same tape, so a
//! gradient can be fed into further operations and differentiated again.
//! This is how `∇ₓq` enters the variational loss and still reaches the
//! network parameters.
//!
//! One tape is meant to live for one optimizer step and is then dropped.

mod tape;
mod tensor;

pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Central finite differences of a scalar function of one tensor.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    /// Gradient of `sum(w * op(x))` via the tape, with a fixed random weighting `w`.
    fn check_unary(name: &str, op: fn(&mut Tape, Var) -> Var, lo: f64, hi: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[3, 4], lo, hi);
        let w = random(&mut rng, &[3, 4], -1.0, 1.0);
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.constant(w.clone());
            let y = op(&mut t, xv);
            let p = t.mul(y, wv).unwrap();
            let s = t.sum(p);
            t.value(s).item().unwrap()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.constant(w.clone());
        let y = op(&mut t, xv);
        let p = t.mul(y, wv).unwrap();
        let s = t.sum(p);
        let g = t.grad_values(s, &[xv]).unwrap();
        let fd = fd_grad(&eval, &x, 1e-5);
        let e = rel_err(g[0].data(), &fd);
        assert!(e < 1e-6, "{name}: rel err {e}");
    }

    #[test]
    fn record_examples() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::row(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);

        let i3 = t.constant(Tensor::identity(3));
        let v = t.leaf(Tensor::column(vec![1.5, -2.0, 0.25]));
        let iv = t.matmul(i3, v).unwrap();
        assert_eq!(t.value(iv).data(), t.value(v).data());

        let z = t.leaf(Tensor::row(vec![0.0]));
        let th = t.tanh(z);
        assert_eq!(t.value(th).data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        let err = t.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![3, 2]
            }
        );
        let err = t.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn grad_requires_scalar_output() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.grad(a, &[a]), Err(AutodiffError::NotScalar { .. })));
    }

    #[test]
    fn power_rule_and_second_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.grad(y, &[x]).unwrap();
        assert_eq!(t.value(g[0]).item().unwrap(), 6.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let x2 = t.square(x);
        let x3 = t.mul(x2, x).unwrap();
        let g = t.grad(x3, &[x]).unwrap();
        let gg = t.grad(g[0], &[x]).unwrap();
        assert!((t.value(gg[0]).item().unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary("tanh", |t, x| t.tanh(x), -2.0, 2.0);
        check_unary("sigmoid", |t, x| t.sigmoid(x), -2.0, 2.0);
        check_unary("exp", |t, x| t.exp(x), -2.0, 2.0);
        check_unary("square", |t, x| t.square(x), -2.0, 2.0);
        check_unary("neg", |t, x| t.neg(x), -2.0, 2.0);
        check_unary("scale", |t, x| t.scale(x, -1.7), -2.0, 2.0);
        check_unary("shift", |t, x| t.shift(x, 0.3), -2.0, 2.0);
        // log and recip need a domain away from zero
        check_unary("log", |t, x| t.log(x), 0.2, 2.0);
        check_unary("recip", |t, x| t.recip(x), 0.2, 2.0);
        check_unary("relu", |t, x| t.relu(x), 0.05, 2.0);
        check_unary("relu-neg", |t, x| t.relu(x), -2.0, -0.05);
        check_unary("swish", |t, x| t.swish(x).unwrap(), -2.0, 2.0);
        check_unary("sum_rows", |t, x| {
            let s = t.sum_rows(x).unwrap();
            let s = t.square(s);
            t.broadcast_rows(s, 3).unwrap()
        }, -2.0, 2.0);
        check_unary("sum_cols", |t, x| {
            let s = t.sum_cols(x).unwrap();
            let s = t.tanh(s);
            t.broadcast_cols(s, 4).unwrap()
        }, -2.0, 2.0);
        check_unary("select_scatter", |t, x| {
            let idx: Rc<[usize]> = Rc::from(vec![3usize, 1]);
            let s = t.select_cols(x, &idx).unwrap();
            let s = t.exp(s);
            t.scatter_cols(s, &idx, 4).unwrap()
        }, -2.0, 2.0);
        check_unary("reshape", |t, x| {
            let r = t.reshape(x, &[4, 3]).unwrap();
            let r = t.square(r);
            t.reshape(r, &[3, 4]).unwrap()
        }, -2.0, 2.0);
        check_unary("broadcast_scalar", |t, x| {
            let s = t.sum(x);
            let s = t.tanh(s);
            t.broadcast_scalar(s, &[3, 4]).unwrap()
        }, -2.0, 2.0);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[3, 5], -2.0, 2.0);
        let b = random(&mut rng, &[5, 2], -2.0, 2.0);
        let c = random(&mut rng, &[3, 5], -2.0, 2.0);
        type Build = fn(&mut Tape, Var, Var, Var) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |t, a, b, _| {
                let m = t.matmul(a, b).unwrap();
                let m = t.tanh(m);
                t.sum(m)
            }),
            ("matmul_tn", |t, a, b, c| {
                // a^T c : [5,5], then times b
                let m = t.matmul_t(a, c, true, false).unwrap();
                let m = t.matmul(m, b).unwrap();
                let m = t.square(m);
                t.sum(m)
            }),
            ("matmul_nt", |t, a, b, c| {
                // a c^T : [3,3]
                let m = t.matmul_t(a, c, false, true).unwrap();
                let m = t.sigmoid(m);
                let s = t.sum(m);
                let bs = t.sum(b);
                t.mul(s, bs).unwrap()
            }),
            ("mul_sub_add", |t, a, _, c| {
                let m = t.mul(a, c).unwrap();
                let s = t.sub(m, c).unwrap();
                let s = t.add(s, a).unwrap();
                let s = t.tanh(s);
                t.sum(s)
            }),
        ];
        for (name, build) in cases {
            let eval_at = |which: usize, x: &Tensor| {
                let mut t = Tape::new();
                let av = t.leaf(if which == 0 { x.clone() } else { a.clone() });
                let bv = t.leaf(if which == 1 { x.clone() } else { b.clone() });
                let cv = t.leaf(if which == 2 { x.clone() } else { c.clone() });
                let s = build(&mut t, av, bv, cv);
                t.value(s).item().unwrap()
            };
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            let cv = t.leaf(c.clone());
            let s = build(&mut t, av, bv, cv);
            let g = t.grad_values(s, &[av, bv, cv]).unwrap();
            for (k, x) in [&a, &b, &c].into_iter().enumerate() {
                let fd = fd_grad(&|x| eval_at(k, x), x, 1e-5);
                let e = rel_err(g[k].data(), &fd);
                let gnorm: f64 = fd.iter().map(|v| v.abs()).sum();
                if gnorm > 0.0 {
                    assert!(e < 1e-6, "{name} operand {k}: rel err {e}");
                }
            }
        }
    }

    #[test]
    fn two_layer_tanh_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w1 = random(&mut rng, &[4, 6], -1.0, 1.0);
        let b1 = random(&mut rng, &[1, 6], -1.0, 1.0);
        let w2 = random(&mut rng, &[6, 1], -1.0, 1.0);
        let x = random(&mut rng, &[1, 4], -2.0, 2.0);
        let net = |t: &mut Tape, x: Var| {
            let w1v = t.constant(w1.clone());
            let b1v = t.constant(b1.clone());
            let w2v = t.constant(w2.clone());
            let h = t.linear(x, w1v, b1v).unwrap();
            let h = t.tanh(h);
            let o = t.matmul(h, w2v).unwrap();
            t.sum(o)
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let o = net(&mut t, xv);
        let g = t.grad_values(o, &[xv]).unwrap();
        let fd = fd_grad(
            &|x| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let o = net(&mut t, xv);
                t.value(o).item().unwrap()
            },
            &x,
            1e-5,
        );
        assert!(rel_err(g[0].data(), &fd) < 1e-6);
    }

    #[test]
    fn nested_gradient_theta_tanh() {
        // f = theta * tanh(x); d/dtheta (df/dx) = sech^2(x)
        for &xv in &[-1.7, -0.3, 0.0, 0.8, 1.9] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::scalar(xv));
            let th = t.leaf(Tensor::scalar(0.7));
            let tx = t.tanh(x);
            let f = t.mul(th, tx).unwrap();
            let dfdx = t.grad(f, &[x]).unwrap()[0];
            let d2 = t.grad(dfdx, &[th]).unwrap()[0];
            let sech2 = 1.0 / xv.cosh().powi(2);
            assert!((t.value(d2).item().unwrap() - sech2).abs() < 1e-10);
        }
    }

    #[test]
    fn unrelated_wrt_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.leaf(Tensor::zeros(&[2, 2]));
        let f = t.exp(x);
        let g = t.grad_values(f, &[y]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[2, 2]));
    }

    proptest! {
        #[test]
        fn grad_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = random(&mut rng, &[2, 3], -2.0, 2.0);
            let build = |t: &mut Tape, x: Var| {
                let f = t.tanh(x);
                let f = t.sum(f);
                let g = t.square(x);
                let g = t.exp(g);
                let g = t.sum(g);
                (f, g)
            };
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let (f, g) = build(&mut t, x);
            let af = t.scale(f, a);
            let bg = t.scale(g, b);
            let h = t.add(af, bg).unwrap();
            let gh = t.grad_values(h, &[x]).unwrap();
            let gf = t.grad_values(f, &[x]).unwrap();
            let gg = t.grad_values(g, &[x]).unwrap();
            for i in 0..6 {
                let lin = a * gf[0].data()[i] + b * gg[0].data()[i];
                prop_assert!((gh[0].data()[i] - lin).abs() <= 1e-10 * (1.0 + lin.abs()));
            }
        }
    }
}
