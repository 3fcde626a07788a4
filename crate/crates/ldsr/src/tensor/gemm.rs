//! Deterministic matrix multiply. Work is split over row chunks of fixed
//! size, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::elem::Elem;

/// Borrowed matrix view with row/column strides (in elements). A transposed
/// view is expressed by swapping the strides; no data is copied.
#[derive(Clone, Copy)]
pub struct MatRef<'a, E> {
    pub data: &'a [E],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, E: Elem> MatRef<'a, E> {
    pub fn row_major(data: &'a [E], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// View of `data` as the transpose of a row-major [rows, cols] matrix.
    pub fn transposed(data: &'a [E], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

const PAR_ROW_CHUNK: usize = 32;
const PAR_COL_CHUNK: usize = 2048;
const PAR_K_CHUNK: usize = 4096;
const PAR_MIN_WORK: usize = 1 << 17;

/// Raw pointer that may cross a rayon task boundary. Each task writes a
/// disjoint column block, so no element is shared.
#[derive(Clone, Copy)]
struct SendPtr<E>(*mut E);
unsafe impl<E> Send for SendPtr<E> {}
unsafe impl<E> Sync for SendPtr<E> {}

/// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C, with C row-major contiguous.
///
/// Large products are split over fixed-size row blocks, column blocks or a
/// two-way K split, whichever fits the shape. Splits are a function of the
/// shape only, so results are bit-identical for any thread count.
pub fn gemm<E: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: MatRef<'_, E>,
    b: MatRef<'_, E>,
    beta: E,
    c: &mut [E],
) {
    assert_eq!(c.len(), m * n, "gemm: output buffer size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let a_max = (m - 1) * a.rs + (k - 1) * a.cs;
        let b_max = (k - 1) * b.rs + (n - 1) * b.cs;
        assert!(a_max < a.data.len(), "gemm: A view out of bounds");
        assert!(b_max < b.data.len(), "gemm: B view out of bounds");
    }

    let run = |rows: usize, a_ptr: *const E, c_chunk: &mut [E]| unsafe {
        E::gemm(
            rows,
            k,
            n,
            alpha,
            a_ptr,
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c_chunk.as_mut_ptr(),
            n as isize,
            1,
        )
    };

    if m * n * k < PAR_MIN_WORK {
        run(m, a.data.as_ptr(), c);
        return;
    }

    if m >= 2 * PAR_ROW_CHUNK {
        c.par_chunks_mut(PAR_ROW_CHUNK * n)
            .enumerate()
            .for_each(|(ci, c_chunk)| {
                let i0 = ci * PAR_ROW_CHUNK;
                let rows = c_chunk.len() / n;
                let a_ptr = unsafe { a.data.as_ptr().add(i0 * a.rs) };
                run(rows, a_ptr, c_chunk);
            });
        return;
    }

    if n >= 2 * PAR_COL_CHUNK {
        let c_ptr = SendPtr(c.as_mut_ptr());
        let blocks: Vec<usize> = (0..n).step_by(PAR_COL_CHUNK).collect();
        blocks.par_iter().for_each(|&j0| {
            let cols = PAR_COL_CHUNK.min(n - j0);
            // Rebind the wrapper so the closure captures SendPtr itself,
            // not the raw pointer field (edition-2021 disjoint capture).
            let c_ptr = c_ptr;
            unsafe {
                E::gemm(
                    m,
                    k,
                    cols,
                    alpha,
                    a.data.as_ptr(),
                    a.rs as isize,
                    a.cs as isize,
                    b.data.as_ptr().add(j0 * b.cs),
                    b.rs as isize,
                    b.cs as isize,
                    beta,
                    c_ptr.0.add(j0),
                    n as isize,
                    1,
                );
            }
        });
        return;
    }

    if k >= 2 * PAR_K_CHUNK && m * n <= 1 << 16 {
        // Two fixed K halves computed in parallel, then combined in a
        // fixed order.
        let kh = k / 2;
        let halves: Vec<Vec<E>> = vec![(0usize, kh), (kh, k - kh)]
            .into_par_iter()
            .map(|(k0, klen)| {
                let mut part = vec![E::ZERO; m * n];
                unsafe {
                    E::gemm(
                        m,
                        klen,
                        n,
                        alpha,
                        a.data.as_ptr().add(k0 * a.cs),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr().add(k0 * b.rs),
                        b.rs as isize,
                        b.cs as isize,
                        E::ZERO,
                        part.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                part
            })
            .collect();
        for (i, cv) in c.iter_mut().enumerate() {
            *cv = *cv * beta + halves[0][i] + halves[1][i];
        }
        return;
    }

    run(m, a.data.as_ptr(), c);
}
