//! Scalar abstraction shared by the 32-bit training path and the 64-bit
//! gradient checker, plus a few dense helpers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign, ToPrimitive};

pub trait Real:
    Float + NumAssign + LinalgScalar + ScalarOperand + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn of_f32(v: f32) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn of_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// `c += a^T b`.
pub fn add_at_b<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>, c: ArrayViewMut2<'_, F>) {
    general_mat_mul(F::one(), &a.t(), &b, F::one(), &mut { c });
}

/// `a b^T`.
pub fn a_bt<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    a.dot(&b.t())
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn all_finite<F: Real>(xs: impl IntoIterator<Item = F>) -> bool {
    xs.into_iter().all(|x| x.is_finite())
}

/// Role of a trainable tensor; only `Weight` takes weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Gain,
    Mask,
    Bias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Gain => "gain",
            ParamKind::Mask => "mask",
            ParamKind::Bias => "bias",
        }
    }
}

/// A named view of one tensor's contiguous storage.
#[derive(Debug)]
pub struct TensorRef<'a, F> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

#[derive(Debug)]
pub struct TensorMut<'a, F> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
}

pub(crate) fn push_ref<'a, F, D: ndarray::Dimension>(
    out: &mut Vec<TensorRef<'a, F>>,
    name: String,
    kind: ParamKind,
    a: &'a ndarray::Array<F, D>,
) {
    out.push(TensorRef {
        name,
        kind,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    });
}

pub(crate) fn push_mut<'a, F, D: ndarray::Dimension>(
    out: &mut Vec<TensorMut<'a, F>>,
    name: String,
    kind: ParamKind,
    a: &'a mut ndarray::Array<F, D>,
) {
    let shape = a.shape().to_vec();
    out.push(TensorMut {
        name,
        kind,
        shape,
        data: a.as_slice_mut().expect("standard layout"),
    });
}
