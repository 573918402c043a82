//! Low-level loops shared by the forward and backward passes.

use crate::error::{Result, TensorError};

/// A strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    /// Contiguous row-major `rows x cols` matrix.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn with_row_stride(self, row_stride: usize) -> Self {
        Self { row_stride, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// `c = a·b + beta·c` on strided views.
pub(crate) fn gemm(
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    c: &mut [f64],
    cv: MatView,
    beta: f64,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(av.rows, cv.rows, "gemm row extent");
    assert_eq!(bv.cols, cv.cols, "gemm column extent");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "gemm lhs out of bounds");
    assert!(bv.last_index() < b.len(), "gemm rhs out of bounds");
    assert!(cv.last_index() < c.len(), "gemm output out of bounds");
    // SAFETY: every index reachable through the three views was bounds-checked
    // above, and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr(),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &extent) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= extent;
    }
    strides
}

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when read through the broadcast `out` shape: zero on
/// broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every element of `out_shape` in row-major order, passing the linear
/// output index and the matching offsets into two strided operands.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut linear = 0;
    while linear < total {
        for k in 0..inner {
            f(linear + k, oa + k * ia_step, ob + k * ib_step);
        }
        linear += inner;
        // Advance the outer counter (all axes but the last).
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            counter[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            oa -= sa[axis] * out_shape[axis];
            ob -= sb[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
}

/// Sums `grad` (shaped `out_shape`) down to `target` under broadcasting rules.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return grad.to_vec();
    }
    let len: usize = target.iter().product();
    let mut acc = vec![0.0; len];
    let st = broadcast_strides(target, out_shape);
    let zero = vec![0; out_shape.len()];
    for_each_broadcast(out_shape, &st, &zero, |o, t, _| acc[t] += grad[o]);
    acc
}
