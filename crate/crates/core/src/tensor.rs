//! Dense buffers used by the networks: a scalar abstraction over `f32`/`f64`,
//! 4D feature blocks, and named parameter tensors.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + AddAssign + MulAssign + Sum + 'static
{
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every strided index of the
    /// three operands must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

/// Strided mutable matrix view over a slice.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `c = alpha * a * b + beta * c`, bounds-checked.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(last_index(m, k, a.row_stride, a.col_stride) < a.data.len());
        assert!(last_index(k, n, b.row_stride, b.col_stride) < b.data.len());
    }
    assert!(last_index(m, n, c.row_stride, c.col_stride) < c.data.len());
    // SAFETY: every index touched is bounded by the asserts above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            c.col_stride as isize,
        )
    }
}

/// Multi-channel feature map `(channels, time, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock<T> {
    pub channels: usize,
    pub time: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureBlock<T> {
    pub fn zeros(channels: usize, time: usize, height: usize, width: usize) -> Self {
        FeatureBlock {
            channels,
            time,
            height,
            width,
            data: vec![T::zero(); channels * time * height * width],
        }
    }

    pub fn from_vec(channels: usize, time: usize, height: usize, width: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == channels * time * height * width && channels * time * height * width > 0).then_some(
            FeatureBlock {
                channels,
                time,
                height,
                width,
                data,
            },
        )
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.time, self.height, self.width]
    }

    /// Positions per channel, `time * height * width`.
    pub fn positions(&self) -> usize {
        self.time * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.positions();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }
}

/// Ordered collection of named tensors; order is part of the model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Mutable access to the `i`-th scalar in layout order.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut T {
        for t in &mut self.tensors {
            if i < t.data.len() {
                return &mut t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}
