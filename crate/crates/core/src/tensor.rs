//! Dense n-dimensional arrays of 64-bit reals.
//!
//! All neural computation in this crate runs on [`Tensor`]: a shape plus a
//! flat row-major buffer. Tensors are immutable after construction; every
//! operation returns a new tensor, which makes them safe to share across
//! threads without locking. All arithmetic is f64 so that finite-difference
//! gradient checks have precision headroom.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("data length {data_len} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        data_len: usize,
    },
    #[error("invalid shape {0:?}: must be non-empty with every dimension >= 1")]
    BadShape(Vec<usize>),
    #[error("matmul requires rank-2 operands, got ranks {0} and {1}")]
    NotRank2(usize, usize),
    #[error("matmul inner dimensions differ: [{m}x{k_left}] * [{k_right}x{n}]")]
    InnerDimMismatch {
        m: usize,
        k_left: usize,
        k_right: usize,
        n: usize,
    },
    #[error("shapes {0:?} and {1:?} differ")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("kernel {kernel} does not fit padded extent {padded} (size {size} + 2*{pad})")]
    KernelTooLarge {
        kernel: usize,
        size: usize,
        pad: usize,
        padded: usize,
    },
    #[error("extent {size} - {kernel} + 2*{pad} = {span} is not divisible by stride {stride}")]
    StrideIndivisible {
        size: usize,
        kernel: usize,
        pad: usize,
        span: usize,
        stride: usize,
    },
    #[error("stride and kernel must be >= 1, got kernel {kernel}, stride {stride}")]
    BadGeometry { kernel: usize, stride: usize },
}

/// Height/width pair for 2-D spatial geometry, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape2D {
    pub height: usize,
    pub width: usize,
}

impl Shape2D {
    pub fn new(height: usize, width: usize) -> Self {
        Shape2D { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::BadShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Dense tensor, row-major, f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct from a shape and matching flat data (row-major).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = checked_len(shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                data_len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor. Panics on an invalid shape (programmer error;
    /// fallible construction goes through [`Tensor::new`]).
    pub fn zeros(shape: &[usize]) -> Self {
        let len = checked_len(shape).expect("valid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = checked_len(shape).expect("valid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        // Shapes with a zero dimension are rejected at construction.
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat offset of a multi-index. Panics when the index rank or
    /// any coordinate is out of range.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected = checked_len(shape)?;
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                data_len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(
                self.shape.clone(),
                other.shape.clone(),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::NotRank2(self.rank(), other.rank()));
        }
        let (m, k_left) = (self.shape[0], self.shape[1]);
        let (k_right, n) = (other.shape[0], other.shape[1]);
        if k_left != k_right {
            return Err(TensorError::InnerDimMismatch {
                m,
                k_left,
                k_right,
                n,
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..k_left {
                let a = self.data[i * k_left + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }
}

/// Output spatial extent of a strided, padded convolution:
/// out = (size - kernel + 2*pad)/stride + 1, applied to both axes.
///
/// The division is required to be exact; a non-divisible stride is a
/// configuration error rather than a silent floor.
pub fn conv_output_shape(
    input: Shape2D,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Shape2D, TensorError> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::BadGeometry { kernel, stride });
    }
    let extent = |size: usize| -> Result<usize, TensorError> {
        let padded = size + 2 * pad;
        if kernel > padded {
            return Err(TensorError::KernelTooLarge {
                kernel,
                size,
                pad,
                padded,
            });
        }
        let span = padded - kernel;
        if !span.is_multiple_of(stride) {
            return Err(TensorError::StrideIndivisible {
                size,
                kernel,
                pad,
                span,
                stride,
            });
        }
        Ok(span / stride + 1)
    };
    Ok(Shape2D {
        height: extent(input.height)?,
        width: extent(input.width)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_accepts_matching_shape_and_data() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[0, 0]), 1.0);
        assert_eq!(t.get(&[1, 1]), 4.0);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(&[3], vec![0.0, 0.0]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LengthMismatch {
                shape: vec![3],
                expected: 3,
                data_len: 2,
            }
        );
    }

    #[test]
    fn scalar_like_tensor() {
        let t = Tensor::new(&[1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(t.get(&[0, 0, 0]), 5.0);
    }

    #[test]
    fn rejects_empty_and_zero_shapes() {
        assert!(matches!(
            Tensor::new(&[], vec![]),
            Err(TensorError::BadShape(_))
        ));
        assert!(matches!(
            Tensor::new(&[2, 0], vec![]),
            Err(TensorError::BadShape(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let id = Tensor::identity(3);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::new(42);
        let a_data: Vec<f64> = (0..5 * 7).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let b_data: Vec<f64> = (0..7 * 3).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let a = Tensor::new(&[5, 7], a_data.clone()).unwrap();
        let b = Tensor::new(&[7, 3], b_data.clone()).unwrap();
        let c = a.matmul(&b).unwrap();

        // Naive triple loop, independent of the implementation's loop order.
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a_data[i * 7 + k] * b_data[k * 3 + j];
                }
                assert!((c.get(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_inner_dim_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::InnerDimMismatch { .. })
        ));
    }

    #[test]
    fn conv_output_shape_demo_cases() {
        // (5 - 3 + 2)/2 + 1 = 3
        let out = conv_output_shape(Shape2D::new(5, 5), 3, 2, 1).unwrap();
        assert_eq!(out, Shape2D::new(3, 3));
        // 3x3 kernel, stride 1, pad 1 preserves extent
        let out = conv_output_shape(Shape2D::new(28, 28), 3, 1, 1).unwrap();
        assert_eq!(out, Shape2D::new(28, 28));
        // kernel covering the input exactly
        let out = conv_output_shape(Shape2D::new(7, 7), 7, 1, 0).unwrap();
        assert_eq!(out, Shape2D::new(1, 1));
    }

    #[test]
    fn conv_output_shape_rejects_bad_geometry() {
        assert!(matches!(
            conv_output_shape(Shape2D::new(3, 3), 5, 1, 0),
            Err(TensorError::KernelTooLarge { .. })
        ));
        assert!(matches!(
            conv_output_shape(Shape2D::new(6, 6), 3, 2, 0),
            Err(TensorError::StrideIndivisible { .. })
        ));
    }

    #[test]
    fn conv_output_shape_matches_placement_counting() {
        // Brute-force count of valid kernel placements over a padded grid.
        for h in 1..=64usize {
            for n in 1..=9usize {
                for s in 1..=4usize {
                    for p in 0..=4usize {
                        let padded = h + 2 * p;
                        if n > padded || (padded - n) % s != 0 {
                            continue;
                        }
                        let mut count = 0usize;
                        let mut start = 0usize;
                        while start + n <= padded {
                            count += 1;
                            start += s;
                        }
                        let got = conv_output_shape(Shape2D::new(h, h), n, s, p).unwrap();
                        assert_eq!(got.height, count, "h={h} n={n} s={s} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
