//! Dense row-major tensors and the small numeric kernels built on them.
//!
//! `TensorBase<T>` is a shape vector plus a flat `Vec<T>`; there are no
//! views or broadcasting. Layout is row-major with the last axis fastest,
//! so a `[N, C, H, W]` tensor indexes as `((n*C + c)*H + h)*W + w`. The
//! heavier ops (convolution, batch norm) live in their own modules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorBase<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorBase { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorBase {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        TensorBase {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// `self += s * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * *b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "sub: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.shape.len(), 2, "row() needs a rank-2 tensor");
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        assert_eq!(self.shape.len(), 2, "row_mut() needs a rank-2 tensor");
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

/// Fully-connected layer: `y[n,o] = sum_d x[n,d]*w[o,d] + b[o]`.
pub fn linear_forward<T: Scalar>(
    x: &TensorBase<T>,
    w: &TensorBase<T>,
    b: &[T],
) -> Result<TensorBase<T>> {
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::shape(format!("linear input must be [N,D], got {:?}", x.shape()))),
    };
    let (o, dw) = match *w.shape() {
        [o, dw] => (o, dw),
        _ => return Err(Error::shape(format!("linear weights must be [O,D], got {:?}", w.shape()))),
    };
    if d != dw || b.len() != o {
        return Err(Error::shape(format!(
            "linear: input {:?} vs weights {:?} vs bias [{}]",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut y = TensorBase::zeros(&[n, o]);
    T::gemm(n, d, o, T::one(), x.data(), false, w.data(), true, T::zero(), y.data_mut());
    for row in 0..n {
        for (v, bv) in y.row_mut(row).iter_mut().zip(b) {
            *v += *bv;
        }
    }
    Ok(y)
}

/// Gradients of `linear_forward`: returns `(dw, db, dx)`.
pub fn linear_backward<T: Scalar>(
    x: &TensorBase<T>,
    w: &TensorBase<T>,
    grad_out: &TensorBase<T>,
) -> Result<(TensorBase<T>, Vec<T>, TensorBase<T>)> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    if grad_out.shape() != [n, o] {
        return Err(Error::shape(format!(
            "linear backward: grad {:?} vs expected [{n}, {o}]",
            grad_out.shape()
        )));
    }
    let mut dw = TensorBase::zeros(w.shape());
    let mut dx = TensorBase::zeros(x.shape());
    T::gemm(o, n, d, T::one(), grad_out.data(), true, x.data(), false, T::zero(), dw.data_mut());
    T::gemm(n, o, d, T::one(), grad_out.data(), false, w.data(), false, T::zero(), dx.data_mut());
    let mut db = vec![T::zero(); o];
    for row in 0..n {
        for (g, dbv) in grad_out.row(row).iter().zip(db.iter_mut()) {
            *dbv += *g;
        }
    }
    Ok((dw, db, dx))
}

/// Numerically stable softmax. Subtracts the max before exponentiating, so
/// inputs with magnitude around 1e3 stay finite and the output sums to 1.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    assert!(!x.is_empty(), "softmax of an empty slice");
    let m = x.iter().cloned().fold(x[0], T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `ln(softmax(x))` computed without forming the softmax, which keeps the
/// result exact even when one logit dominates and the others underflow.
pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    assert!(!x.is_empty(), "log_softmax of an empty slice");
    let m = x.iter().cloned().fold(x[0], T::max);
    let z: T = x.iter().map(|&v| (v - m).exp()).sum();
    let lz = z.ln() + m;
    x.iter().map(|&v| v - lz).collect()
}

/// Index of the maximum element, lowest index winning ties. This exact
/// tie-break is part of the deployment contract: the integer scoreboard and
/// the float network must pick the same action when scores tie.
pub fn argmax_tiebreak<T: PartialOrd + Copy>(x: &[T]) -> usize {
    assert!(!x.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
