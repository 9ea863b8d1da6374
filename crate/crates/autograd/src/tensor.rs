//! Dense row-major `f64` tensors and the raw (non-differentiable) kernels the
//! autograd ops are built from.

use std::fmt;

/// A dense, row-major, owned `f64` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise binary op with numpy-style broadcasting.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor {
                shape: self.shape.clone(),
                data,
            };
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                self.shape, other.shape
            )
        });
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let out_strides = contiguous_strides(&out_shape);
        let mut data = vec![0.0; numel(&out_shape)];
        let (dims, strides) = collapse(&out_shape, &[&out_strides, &sa, &sb]);
        strided_loop(&dims, &strides, |[o, a, b]| {
            data[o] = f(self.data[a], other.data[b]);
        });
        Tensor { shape: out_shape, data }
    }

    /// Sum-reduce to `target` (the adjoint of broadcasting to this shape).
    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if target == self.shape.as_slice() {
            return self.clone();
        }
        assert!(
            target.len() <= self.shape.len(),
            "cannot sum {:?} to higher-rank {:?}",
            self.shape,
            target
        );
        let padded = left_pad(target, self.shape.len());
        for (t, s) in padded.iter().zip(&self.shape) {
            assert!(*t == *s || *t == 1, "cannot sum {:?} to {:?}", self.shape, target);
        }
        let out_strides = broadcast_strides(&padded, &self.shape);
        let in_strides = contiguous_strides(&self.shape);
        let mut out = vec![0.0; numel(target)];
        let (dims, strides) = collapse(&self.shape, &[&in_strides, &out_strides]);
        strided_loop(&dims, &strides, |[i, o]| {
            out[o] += self.data[i];
        });
        Tensor {
            shape: target.to_vec(),
            data: out,
        }
    }

    /// Materialize a broadcast of this tensor to `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        if target == self.shape.as_slice() {
            return self.clone();
        }
        let out_shape = broadcast_shape(&self.shape, target)
            .filter(|s| s.as_slice() == target)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape, target));
        let src = broadcast_strides(&self.shape, &out_shape);
        let dst = contiguous_strides(&out_shape);
        let mut data = vec![0.0; numel(&out_shape)];
        let (dims, strides) = collapse(&out_shape, &[&dst, &src]);
        strided_loop(&dims, &strides, |[o, i]| {
            data[o] = self.data[i];
        });
        Tensor { shape: out_shape, data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&self) -> Tensor {
        let nd = self.shape.len();
        assert!(nd >= 2, "transpose_last needs rank >= 2, got {:?}", self.shape);
        let (r, c) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch = self.data.len() / (r * c).max(1);
        let mut data = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * r * c..(b + 1) * r * c];
            let dst = &mut data[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Tensor { shape, data }
    }

    /// Matrix product over the trailing two axes. Supports `(m,k)x(k,n)` and
    /// batched `(b,m,k)x(b,k,n)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        match (self.shape.as_slice(), other.shape.as_slice()) {
            (&[m, k], &[k2, n]) => {
                assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape, other.shape);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
                Tensor::new(&[m, n], out)
            }
            (&[b, m, k], &[b2, k2, n]) => {
                assert!(
                    b == b2 && k == k2,
                    "batched matmul {:?} x {:?}",
                    self.shape,
                    other.shape
                );
                let mut out = vec![0.0; b * m * n];
                for i in 0..b {
                    gemm(
                        m,
                        k,
                        n,
                        &self.data[i * m * k..(i + 1) * m * k],
                        false,
                        &other.data[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                Tensor::new(&[b, m, n], out)
            }
            _ => panic!("unsupported matmul shapes {:?} x {:?}", self.shape, other.shape),
        }
    }
}

/// `c = a·b + beta·c` for row-major operands; `ta`/`tb` read the stored
/// matrix transposed (`a` stored as `(k,m)` when `ta`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn left_pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank.saturating_sub(shape.len())];
    out.extend_from_slice(shape);
    out
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pa = left_pad(a, rank);
    let pb = left_pad(b, rank);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Strides of `shape` viewed as broadcast to `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let padded = left_pad(shape, out.len());
    let base = contiguous_strides(&padded);
    padded
        .iter()
        .zip(&out[..])
        .zip(base)
        .map(|((&d, &o), s)| if d == o && d != 1 { s } else { 0 })
        .collect()
}

/// Merge adjacent axes that are contiguous for every operand and drop unit axes.
fn collapse<const N: usize>(dims: &[usize], strides: &[&Vec<usize>; N]) -> (Vec<usize>, Vec<[usize; N]>) {
    let mut out_dims: Vec<usize> = Vec::new();
    let mut out_strides: Vec<[usize; N]> = Vec::new();
    for (axis, &d) in dims.iter().enumerate() {
        if d == 1 {
            continue;
        }
        let s: [usize; N] = std::array::from_fn(|k| strides[k][axis]);
        if let (Some(pd), Some(ps)) = (out_dims.last_mut(), out_strides.last_mut()) {
            if (0..N).all(|k| ps[k] == s[k] * d) {
                *pd *= d;
                *ps = s;
                continue;
            }
        }
        out_dims.push(d);
        out_strides.push(s);
    }
    if out_dims.is_empty() {
        out_dims.push(1);
        out_strides.push([0; N]);
    }
    (out_dims, out_strides)
}

fn strided_loop<const N: usize>(dims: &[usize], strides: &[[usize; N]], mut f: impl FnMut([usize; N])) {
    let nd = dims.len();
    let inner = dims[nd - 1];
    let inner_stride = strides[nd - 1];
    let outer: usize = dims[..nd - 1].iter().product();
    let mut counter = vec![0usize; nd - 1];
    let mut base = [0usize; N];
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..inner {
            f(off);
            for k in 0..N {
                off[k] += inner_stride[k];
            }
        }
        // odometer increment over the outer axes
        for axis in (0..nd - 1).rev() {
            counter[axis] += 1;
            for k in 0..N {
                base[k] += strides[axis][k];
            }
            if counter[axis] < dims[axis] {
                break;
            }
            for k in 0..N {
                base[k] -= strides[axis][k] * dims[axis];
            }
            counter[axis] = 0;
        }
    }
}
