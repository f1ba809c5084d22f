//! Dense matrix kernels on row-major slices. Rows of the output are
//! independent, so they are split across threads when the work is large
//! enough to pay for it.

use crate::par;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        out_row.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &ap) in a_row.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += ap * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        par::for_each_chunk_mut(out, n, |i, r| row(i, r));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    }
}

/// `out[m,k] = g[m,n] · b[k,n]ᵀ`
pub fn matmul_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |i: usize, out_row: &mut [f64]| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        par::for_each_chunk_mut(out, k, |i, r| row(i, r));
    } else {
        out.chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    }
}

/// `out[k,n] = a[m,k]ᵀ · g[m,n]`
pub fn matmul_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |p: usize, out_row: &mut [f64]| {
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let ap = a[i * k + p];
            if ap == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += ap * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        par::for_each_chunk_mut(out, n, |p, r| row(p, r));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(p, r)| row(p, r));
    }
}

/// Batched `out[b] = a[b] · x[b]` where either operand may have batch 1.
#[allow(clippy::too_many_arguments)]
pub fn bmm(
    a: &[f64],
    x: &[f64],
    out: &mut [f64],
    batch: usize,
    a_batched: bool,
    x_batched: bool,
    m: usize,
    k: usize,
    n: usize,
) {
    let (sa, sx, so) = (m * k, k * n, m * n);
    let one = |b: usize, o: &mut [f64]| {
        let ab = if a_batched {
            &a[b * sa..(b + 1) * sa]
        } else {
            &a[..sa]
        };
        let xb = if x_batched {
            &x[b * sx..(b + 1) * sx]
        } else {
            &x[..sx]
        };
        o.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let orow = &mut o[i * n..(i + 1) * n];
            for p in 0..k {
                let ap = ab[i * k + p];
                let xrow = &xb[p * n..(p + 1) * n];
                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                    *ov += ap * xv;
                }
            }
        }
    };
    if batch * so * k >= PAR_THRESHOLD && batch > 1 {
        par::for_each_chunk_mut(out, so, |b, o| one(b, o));
    } else {
        out.chunks_mut(so).enumerate().for_each(|(b, o)| one(b, o));
    }
}
