//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are parameters,
//! inputs (whose gradients attacks need) or constants.

mod tape;
mod tensor;

pub use tape::{Gradients, LeafKind, Precision, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;

use crate::error::Result;

/// Central-difference check of `f`'s gradient at `x`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i| + |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let root = f(&tape, xv);
    let analytic = tape.backward(root)?.wrt(xv);

    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(point);
        f(&tape, xv).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::RngStream;

    fn random(rng: &mut RngStream, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn forward_values() {
        let t = Tape::new();
        let x = t.constant(Tensor::row(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().unwrap().data(), &[0.0, 0.0, 2.0]);
        let z = t.scalar(0.0);
        assert!((z.softplus().item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = t.constant(Tensor::row(vec![1000.0, 1000.0]));
        let lse = big.logsumexp_rows().item().unwrap();
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let sm = big.softmax_rows().value().unwrap();
        assert_eq!(sm.data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_derivative() {
        let t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = x * x;
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let t = Tape::new();
        let logits = t.input(Tensor::row(vec![0.0, 0.0]));
        let ce = logits.logsumexp_rows() - logits.pick(&[0]);
        let g = t.backward(ce.sum()).unwrap().wrt(logits);
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let t = Tape::new();
        let x = t.input(Tensor::row(vec![1.0, 2.0]));
        let c = t.scalar(4.0);
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let t = Tape::new();
        let x = t.input(Tensor::scalar(1.5));
        let y = (x.exp() + x.scale(3.0) + x * x).sum();
        let g = t.backward(y).unwrap().wrt(x).item();
        assert!((g - (1.5f64.exp() + 3.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let t = Tape::new();
        let x = t.input(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x.exp()), Err(Error::Contract(_))));
    }

    #[test]
    fn errors_are_sticky_and_named() {
        let t = Tape::new();
        let x = t.constant(Tensor::row(vec![-1.0, 2.0]));
        let y = x.log().exp().sum();
        match y.value() {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("unexpected {other:?}"),
        }
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(a.matmul(b).value(), Err(Error::Shape { op: "matmul", .. })));
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 2));
        assert!(matches!((a + b).sum().value(), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = RngStream::new(3, 0);
        let w = random(&mut rng, 4, 3, -1.0, 1.0);
        let x = random(&mut rng, 5, 4, -1.0, 1.0);
        let run = || {
            let t = Tape::new();
            let y = t.constant(x.clone()).matmul(t.param(w.clone())).tanh().softmax_rows();
            y.value().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn f32_precision_rounds_values() {
        let t = Tape::with_precision(Precision::F32);
        let v = t.scalar(0.1).exp().item().unwrap();
        assert_eq!(v, v as f32 as f64);
        assert_ne!(v, 0.1f64.exp());
    }

    type Unary = for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>;

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = RngStream::new(11, 0);
        let cases: Vec<(&str, Unary, (f64, f64))> = vec![
            ("exp", |_, x| x.exp().sum(), (-2.0, 2.0)),
            ("log", |_, x| x.log().sum(), (0.2, 3.0)),
            ("softplus", |_, x| x.softplus().sum(), (-3.0, 3.0)),
            ("relu", |_, x| x.relu().square().sum(), (0.1, 2.0)),
            ("tanh", |_, x| x.tanh().sum(), (-2.0, 2.0)),
            ("sqrt", |_, x| x.sqrt().sum(), (0.3, 4.0)),
            ("powf", |_, x| x.powf(2.5).sum(), (0.3, 2.0)),
            ("lgamma", |_, x| x.lgamma().sum(), (0.2, 20.0)),
            ("digamma", |_, x| x.digamma().sum(), (0.2, 20.0)),
            ("neg/scale/offset", |_, x| (-(x * 2.5) + 1.0).square().sum(), (-1.0, 1.0)),
            ("mean", |_, x| x.square().mean(), (-1.0, 1.0)),
            ("row_sums", |_, x| x.row_sums().exp().sum(), (-1.0, 1.0)),
            ("col_sums", |_, x| x.col_sums().square().sum(), (-1.0, 1.0)),
            ("logsumexp", |_, x| x.logsumexp_rows().square().sum(), (-3.0, 3.0)),
            ("softmax", |t, x| {
                let w = t.constant(Tensor::new(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
                (x.softmax_rows() * w).sum().square()
            }, (-2.0, 2.0)),
            ("gather_rows", |_, x| x.gather_rows(&[2, 0, 2]).exp().sum(), (-1.0, 1.0)),
            ("pick", |_, x| x.pick(&[1, 3, 0]).exp().sum(), (-1.0, 1.0)),
            ("reshape", |_, x| {
                let r = x.reshape(4, 3);
                r.row_sums().square().sum()
            }, (-1.0, 1.0)),
            ("div", |t, x| {
                let d = t.constant(Tensor::column(vec![1.5, 2.0, 3.0]));
                (x / d).square().sum() + (d / (x.square() + 1.0)).sum()
            }, (-1.0, 1.0)),
            ("broadcast", |t, x| {
                let row = t.constant(Tensor::row(vec![0.5, -1.0, 2.0, 0.25]));
                let col = x.row_sums();
                ((x + row) * col - row).square().sum()
            }, (-1.0, 1.0)),
            ("matmul", |t, x| {
                let w = t.constant(Tensor::new(4, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, 0.9]).unwrap());
                x.matmul(w).tanh().sum()
            }, (-1.0, 1.0)),
        ];
        for (name, f, (lo, hi)) in cases {
            let x = random(&mut rng, 3, 4, lo, hi);
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn matmul_gradient_wrt_weights() {
        let mut rng = RngStream::new(5, 5);
        let x = random(&mut rng, 6, 3, -1.0, 1.0);
        let w = random(&mut rng, 3, 2, -1.0, 1.0);
        let xc = x.clone();
        let err = grad_check(
            move |t, wv| t.constant(xc.clone()).matmul(wv).softplus().sum(),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn sum_of_squares_check() {
        let mut rng = RngStream::new(2, 2);
        let x = random(&mut rng, 2, 5, -3.0, 3.0);
        assert!(grad_check(|_, x| x.square().sum(), &x, 1e-5).unwrap() <= 1e-6);
    }
}
