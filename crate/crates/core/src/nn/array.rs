//! Dense row-major arrays and the scalar element trait.

use std::fmt;

use num_traits::Float;

/// Scalar element type for all network math.
///
/// Training runs at `f32`; gradient checking and the invariant suites run
/// the same code at `f64`, selected once at the entry point.
pub trait Elem:
    Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense array: a shape plus row-major data. `product(shape) == data.len()`
/// always holds; constructors enforce it.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> NdArray<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 2D constructor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<E>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar value of a 0-d (or single-element) array.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on array of len {}", self.data.len());
        self.data[0]
    }

    /// Rows of a 2D array (a 1D array counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} array", self.shape.len()),
        }
    }

    /// Columns of a 2D array (length for 1D).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} array", self.shape.len()),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[E] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise cast between element types (f32 <-> f64).
    pub fn cast<F: Elem>(&self) -> NdArray<F> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}
