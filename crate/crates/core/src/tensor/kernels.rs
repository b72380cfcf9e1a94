/// `out (+)= op(a) · op(b)` for row-major buffers, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. With `a_t` set, `a` is stored as `k×m`; likewise `b_t`
/// means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index addressed through the
    // given strides lies inside the corresponding slice, and `out` does not
    // alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One of the four bilinear neighbors of a fractional location.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    /// Flat pixel index `row * w + col`.
    pub index: usize,
    pub weight: f64,
    /// Derivatives of `weight` with respect to the sample's x and y.
    pub dx: f64,
    pub dy: f64,
}

impl Corner {
    /// Neighbors of `(x, y)` on an `h×w` grid; out-of-range neighbors are `None`
    /// (they read zero).
    #[inline]
    pub fn around(x: f64, y: f64, h: usize, w: usize) -> [Option<Corner>; 4] {
        let x0 = fast_floor(x);
        let y0 = fast_floor(y);
        let fx = x - x0;
        let fy = y - y0;
        let cell = |cx: f64, cy: f64, weight: f64, dx: f64, dy: f64| {
            let inside = cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64;
            inside.then(|| Corner {
                index: cy as usize * w + cx as usize,
                weight,
                dx,
                dy,
            })
        };
        [
            cell(x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            cell(x0 + 1.0, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
            cell(x0, y0 + 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
            cell(x0 + 1.0, y0 + 1.0, fx * fy, fy, fx),
        ]
    }
}

/// `floor` without the libm call for the values sampling actually sees.
#[inline]
fn fast_floor(x: f64) -> f64 {
    if x.abs() < 1e15 {
        let t = x as i64 as f64;
        if t > x {
            t - 1.0
        } else {
            t
        }
    } else {
        x.floor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let t = |x: &[f64], r: usize, c: usize| {
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = x[i * c + j];
                }
            }
            o
        };
        let at = t(&a, m, k);
        let bt = t(&b, k, n);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut out, false);
                for (x, y) in out.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corner_weights_partition_unity() {
        let cs = Corner::around(1.3, 2.6, 8, 8);
        let total: f64 = cs.iter().flatten().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(cs.iter().flatten().count(), 4);
    }

    #[test]
    fn corners_outside_map_are_dropped() {
        let cs = Corner::around(-0.5, -0.5, 4, 4);
        assert_eq!(cs.iter().flatten().count(), 1);
        assert!(Corner::around(10.0, 10.0, 4, 4).iter().all(Option::is_none));
    }
}
