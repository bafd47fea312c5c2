//! Raw forward/backward kernels on contiguous `f32` buffers.
//!
//! Everything here is shape-checked by the caller ([`super::graph`]).
//! Reductions run in a fixed order so results do not depend on the
//! number of worker threads.

pub mod conv;
pub mod depthwise;
pub mod norm;
pub mod pool;

use std::sync::Once;

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
fn set_flush_to_zero() {
    use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
    const FTZ_DAZ: u32 = 0x8040;
    // SAFETY: only the flush-to-zero and denormals-are-zero bits change.
    unsafe { _mm_setcsr(_mm_getcsr() | FTZ_DAZ) }
}

#[cfg(not(target_arch = "x86_64"))]
fn set_flush_to_zero() {}

/// Treats subnormal floats as zero on this thread and on every worker of
/// the global rayon pool. Subnormals appear once losses saturate and slow
/// arithmetic down by two orders of magnitude.
pub fn flush_denormals() {
    static POOL: Once = Once::new();
    POOL.call_once(|| {
        let _ = rayon::ThreadPoolBuilder::new()
            .start_handler(|_| set_flush_to_zero())
            .build_global();
    });
    set_flush_to_zero();
}

/// `c = a·b (+ c)` where `a` is `m×k` and `b` is `k×n`, both row-major
/// unless the matching `*_t` flag says the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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

/// Output extent of a sliding window, or `None` if it would be empty.
pub fn window_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let at = [1.0, 3.0, 2.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let bt = [5.0, 7.0, 6.0, 8.0];
        let want = [19.0, 22.0, 43.0, 50.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0; 4];
                matmul(2, 2, 2, aa, ta, bb, tb, &mut c, false);
                assert_eq!(c, want);
            }
        }
        let mut c = [1.0; 4];
        matmul(2, 2, 2, &a, false, &b, false, &mut c, true);
        assert_eq!(c, [20.0, 23.0, 44.0, 51.0]);
    }

    #[test]
    fn window_law() {
        assert_eq!(window_out(224, 7, 2, 3), Some(112));
        assert_eq!(window_out(112, 3, 2, 1), Some(56));
        assert_eq!(window_out(56, 2, 2, 0), Some(28));
        assert_eq!(window_out(2, 3, 1, 0), None);
    }
}
