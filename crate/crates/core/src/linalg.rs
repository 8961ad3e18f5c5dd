//! Small dense helpers for per-cell affine maps. Matrices are row-major.

/// `out = w x + b` for a `rows x cols` matrix `w`.
#[inline]
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (a, v) in row.iter().zip(x) {
            acc += a * v;
        }
        *o = acc;
    }
}

/// `out = w^T g` for a `rows x cols` matrix `w` (`g` has `rows` entries).
#[inline]
pub fn affine_transpose(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// Accumulates the outer product `g x^T` into `dw` and `g` into `db`.
#[inline]
pub fn accumulate_outer(dw: &mut [f64], db: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        db[r] += gr;
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, v) in row.iter_mut().zip(x) {
            *d += gr * v;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_transpose() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        affine(&w, &[0.5, -1.0], &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-1.5, -3.0]);
        let mut t = [0.0; 3];
        affine_transpose(&w, &[1.0, 1.0], &mut t);
        assert_eq!(t, [5.0, 7.0, 9.0]);
    }
}
