//! Named parameter tensors and the dense kernels used by the model.
//!
//! Matrices are row-major; a weight of shape `[in, out]` maps row vectors of
//! width `in` to width `out`.

use serde::{Deserialize, Serialize};
use uavnav_core::Scalar;

/// Which optimizer phase may update a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Trunk, embeddings and the language head.
    Lm,
    /// Waypoint head.
    Wp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(name: impl Into<String>, shape: &[usize], group: Group) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            group: self.group,
            data: self.data.iter().map(|v| T::c(v.f64())).collect(),
        }
    }
}

/// `out[r, o] += Σ_i x[r, i] · w[i, o]`.
pub fn matmul_acc<S: Scalar>(out: &mut [S], x: &[S], w: &[S], rows: usize, din: usize, dout: usize) {
    debug_assert_eq!(x.len(), rows * din);
    debug_assert_eq!(w.len(), din * dout);
    debug_assert_eq!(out.len(), rows * dout);
    for r in 0..rows {
        let o = &mut out[r * dout..(r + 1) * dout];
        for (i, &xi) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            axpy(o, xi, &w[i * dout..(i + 1) * dout]);
        }
    }
}

/// `out[r, o] = b[o] + Σ_i x[r, i] · w[i, o]`.
pub fn linear<S: Scalar>(x: &[S], w: &[S], b: &[S], rows: usize, din: usize, dout: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    matmul_acc(&mut out, x, w, rows, din, dout);
    out
}

/// Backward of [`linear`]: accumulates `dw`, `db` and (if given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    w: &[S],
    dw: &mut [S],
    db: &mut [S],
    dx: Option<&mut [S]>,
    rows: usize,
    din: usize,
    dout: usize,
) {
    for r in 0..rows {
        let g = &dy[r * dout..(r + 1) * dout];
        for (acc, &v) in db.iter_mut().zip(g) {
            *acc += v;
        }
        for (i, &xi) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xi != S::zero() {
                axpy(&mut dw[i * dout..(i + 1) * dout], xi, g);
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let g = &dy[r * dout..(r + 1) * dout];
            for i in 0..din {
                dx[r * din + i] += dot(g, &w[i * dout..(i + 1) * dout]);
            }
        }
    }
}

#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::c(0.5);
    half * x * (S::one() + (S::c(GELU_C) * (x + S::c(0.044715) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::c(0.5);
    let t = (S::c(GELU_C) * (x + S::c(0.044715) * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * S::c(GELU_C) * (S::one() + S::c(3.0 * 0.044715) * x * x)
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<S: Scalar>(v: &mut [S]) {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)`.
pub fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns the output and per-row `(mean, 1/std)`.
pub fn layer_norm<S: Scalar>(x: &[S], g: &[S], b: &[S], rows: usize, d: usize) -> (Vec<S>, Vec<(S, S)>) {
    let mut out = vec![S::zero(); rows * d];
    let mut stats = Vec::with_capacity(rows);
    let n = S::c(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rstd = S::one() / (var + S::c(LN_EPS)).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * rstd * g[i] + b[i];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    stats: &[(S, S)],
    g: &[S],
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
    d: usize,
) {
    let n = S::c(d as f64);
    let mut xhat = vec![S::zero(); d];
    let mut dxhat = vec![S::zero(); d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let (xr, dyr) = (&x[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
        let (mut m1, mut m2) = (S::zero(), S::zero());
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
        }
        m1 /= n;
        m2 /= n;
        for i in 0..d {
            dx[r * d + i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
}
