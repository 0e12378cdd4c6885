//! Small sparse and iterative linear algebra used by the time steppers and
//! the resolvent solver.

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists; duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in row {
                if cols.len() > start && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `I + c·self`.
    pub fn identity_plus(&self, c: f64) -> Self {
        let rows = (0..self.n)
            .map(|i| {
                let mut r: Vec<(usize, f64)> = self.row(i).map(|(j, v)| (j, c * v)).collect();
                r.push((i, 1.0));
                r
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Sub-, main and super-diagonal if the matrix is tridiagonal.
    pub fn tridiagonal(&self) -> Option<Tridiagonal> {
        let n = self.n;
        let mut t = Tridiagonal { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] };
        for i in 0..n {
            for (j, v) in self.row(i) {
                if j == i {
                    t.diag[i] = v;
                } else if j + 1 == i {
                    t.lower[i] = v;
                } else if j == i + 1 {
                    t.upper[i] = v;
                } else if v != 0.0 {
                    return None;
                }
            }
        }
        Some(t)
    }
}

/// Tridiagonal system; `lower[0]` and `upper[n-1]` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    /// Thomas algorithm. Stable without pivoting for the diagonally dominant
    /// systems the implicit steppers produce.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.diag[0];
        c[0] = self.upper[0] / denom;
        d[0] = rhs[0] / denom;
        for i in 1..n {
            denom = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = self.upper[i] / denom;
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / denom;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterativeSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned BiCGStab for `A x = b`.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x0: &[f64], tol: f64, max_iter: usize) -> IterativeSolution {
    let n = a.n();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return IterativeSolution { x: vec![0.0; n], iterations: 0, relative_residual: 0.0, converged: true };
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| if *d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(a, d)| a * d).collect() };

    let mut x = x0.to_vec();
    let mut r: Vec<f64> = b.iter().zip(a.matvec(&x)).map(|(b, ax)| b - ax).collect();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut rel = norm2(&r) / bnorm;
    if rel <= tol {
        return IterativeSolution { x, iterations: 0, relative_residual: rel, converged: true };
    }
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return IterativeSolution { x, iterations: it, relative_residual: rel, converged: false };
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        a.matvec_into(&p_hat, &mut v);
        alpha = rho / dot(&r_hat, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        if norm2(&s) / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            rel = norm2(&s) / bnorm;
            return IterativeSolution { x, iterations: it, relative_residual: rel, converged: true };
        }
        let s_hat = precond(&s);
        let t = a.matvec(&s_hat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            return IterativeSolution { x, iterations: it, relative_residual: rel, converged: true };
        }
    }
    IterativeSolution { x, iterations: max_iter, relative_residual: rel, converged: false }
}

/// Restarted GMRES(m) for a matrix-free operator. `apply` may fail, in which
/// case its error is returned unchanged. The reported residual is the true
/// residual `‖b − A x‖ / ‖b‖`, recomputed at every restart.
pub fn gmres<E>(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    b: &[f64],
    x0: &[f64],
    restart: usize,
    tol: f64,
    max_iter: usize,
) -> Result<IterativeSolution, E> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(IterativeSolution { x: vec![0.0; n], iterations: 0, relative_residual: 0.0, converged: true });
    }
    let m = restart.max(1).min(n.max(1));
    let mut x = x0.to_vec();
    let mut total = 0;
    loop {
        let ax = apply(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm2(&r);
        let rel = beta / bnorm;
        if rel <= tol || total >= max_iter {
            return Ok(IterativeSolution { x, iterations: total, relative_residual: rel, converged: rel <= tol });
        }
        // Arnoldi with modified Gram–Schmidt and Givens rotations.
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut w = apply(&basis[k])?;
            total += 1;
            for (j, vj) in basis.iter().enumerate() {
                let hjk = dot(&w, vj);
                hess[j][k] = hjk;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= hjk * vi;
                }
            }
            let wn = norm2(&w);
            hess[k + 1][k] = wn;
            for j in 0..k {
                let tmp = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = tmp;
            }
            let denom = hess[k][k].hypot(hess[k + 1][k]);
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = hess[k][k] / denom;
            sn[k] = hess[k + 1][k] / denom;
            hess[k][k] = denom;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() / bnorm <= tol * 0.5 || wn == 0.0 || total >= max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        // Back substitution on the triangular system.
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = ((i + 1)..k_used).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        for (yi, vi) in y.iter().zip(&basis) {
            for (xj, v) in x.iter_mut().zip(vi) {
                *xj += yi * v;
            }
        }
        if k_used == 0 {
            let ax = apply(&x)?;
            let rel = norm2(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
            return Ok(IterativeSolution { x, iterations: total, relative_residual: rel, converged: rel <= tol });
        }
    }
}
