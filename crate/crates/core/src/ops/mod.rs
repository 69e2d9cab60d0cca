//! Forward and adjoint kernels for every primitive layer. These are plain
//! functions on [`Tensor`](crate::Tensor)s; [`crate::autodiff::Tape`] wires
//! them into the reverse sweep.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, separable_conv3x3};
pub use norm::batchnorm2d;
pub use pointwise::{concat_channels, dropout2d, dropout_scales, global_avg_pool, relu, softmax_channels};
pub use pool::{blurpool2x2_s2, maxpool2x2_s1, replicate_pad};
pub use resize::bilinear_resize;

/// `y += a·x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Sum with the same fixed accumulation order as [`dot`].
#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    for x in ca {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for x in ra {
        s += x;
    }
    s
}
