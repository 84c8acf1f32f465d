//! Small dense linear-algebra helpers (symmetric positive-definite solves).

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails when a pivot drops below `min_pivot` times the largest diagonal entry.
pub fn cholesky(a: &Tensor, min_pivot: f64) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::shape("cholesky", format!("[{n}, {m}] is not square")));
    }
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > min_pivot * scale) {
            return Err(Error::RankDeficient(format!("pivot {j} is {d:.3e} (scale {scale:.3e})")));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Tensor, b: &Tensor, min_pivot: f64) -> Result<Tensor> {
    let l = cholesky(a, min_pivot)?;
    let (n, _) = l.dims2()?;
    let (bn, bc) = b.dims2()?;
    if bn != n {
        return Err(Error::shape("solve_spd", format!("A is [{n}, {n}], B has {bn} rows")));
    }
    let mut x = b.clone();
    for c in 0..bc {
        // forward: L y = b
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// `XᵀX` for a tall matrix.
pub fn gram(x: &Tensor) -> Tensor {
    let (n, p) = (x.rows(), x.cols());
    let mut g = Tensor::zeros(p, p);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..p {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..p {
                let v = g.get(i, j) + xi * row[j];
                g.set(i, j, v);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            let v = g.get(j, i);
            g.set(i, j, v);
        }
    }
    g
}

/// Ridge least squares `(XᵀX + ridge·I)⁻¹ XᵀY`.
pub fn least_squares(x: &Tensor, y: &Tensor, ridge: f64, min_pivot: f64) -> Result<Tensor> {
    if x.rows() != y.rows() {
        return Err(Error::shape("least_squares", format!("{} vs {} rows", x.rows(), y.rows())));
    }
    let mut g = gram(x);
    for i in 0..g.rows() {
        let v = g.get(i, i) + ridge;
        g.set(i, i, v);
    }
    let xty = x.transpose().matmul(y)?;
    solve_spd(&g, &xty, min_pivot)
}
