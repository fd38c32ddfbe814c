//! Small dense and banded solvers used by the field fit and the restorers.

/// Least-squares solution of `A x = b` via Householder QR.
///
/// `a` is row-major with `rows x cols`. Returns `None` when a column is
/// numerically dependent on the preceding ones.
pub fn lstsq_qr(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(b.len(), rows);
    if rows < cols {
        return None;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let mut diag = vec![0.0; cols];
    let col_norm0: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j].powi(2)).sum::<f64>().sqrt())
        .collect();

    for k in 0..cols {
        let norm = (k..rows).map(|i| a[i * cols + k].powi(2)).sum::<f64>().sqrt();
        if norm <= 1e-12 * col_norm0[k].max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if a[k * cols + k] > 0.0 { -norm } else { norm };
        // v = x - alpha e1, stored in place of column k
        a[k * cols + k] -= alpha;
        let vnorm2: f64 = (k..rows).map(|i| a[i * cols + k].powi(2)).sum();
        if vnorm2 > 0.0 {
            for j in k + 1..cols {
                let dot: f64 = (k..rows).map(|i| a[i * cols + k] * a[i * cols + j]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..rows {
                    a[i * cols + j] -= f * a[i * cols + k];
                }
            }
            let dot: f64 = (k..rows).map(|i| a[i * cols + k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..rows {
                b[i] -= f * a[i * cols + k];
            }
        }
        diag[k] = alpha;
    }

    let mut x = vec![0.0; cols];
    for k in (0..cols).rev() {
        let mut s = b[k];
        for j in k + 1..cols {
            s -= a[k * cols + j] * x[j];
        }
        x[k] = s / diag[k];
    }
    Some(x)
}

/// Symmetric positive (semi)definite band matrix stored by lower diagonals.
///
/// `bands[k][i]` holds entry `(i + k, i)`; `bands[0]` is the diagonal.
#[derive(Debug, Clone)]
pub struct SymBand {
    n: usize,
    bands: Vec<Vec<f64>>,
}

impl SymBand {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        let bw = bandwidth.min(n.saturating_sub(1));
        SymBand {
            n,
            bands: (0..=bw).map(|k| vec![0.0; n - k]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bands.len() - 1
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        assert!(k < self.bands.len(), "entry ({i},{j}) outside band");
        self.bands[k][lo] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        if k < self.bands.len() {
            self.bands[k][lo]
        } else {
            0.0
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (k, band) in self.bands.iter().enumerate() {
            for (i, &v) in band.iter().enumerate() {
                y[i + k] += v * x[i];
                if k > 0 {
                    y[i] += v * x[i + k];
                }
            }
        }
        y
    }

    /// Root-free Cholesky (`L D Lᵀ`) solve. Returns the indices of pivots
    /// that collapsed below `rel_tol · max(diag)` as the error value.
    pub fn solve_ldlt(&self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, Vec<usize>> {
        let n = self.n;
        let bw = self.bandwidth();
        let scale = self.bands[0].iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let tol = rel_tol * scale.max(f64::MIN_POSITIVE);
        // l[k][j] = L(j + k, j); d[j] = D(j)
        let mut l: Vec<Vec<f64>> = self.bands.clone();
        let mut d = vec![0.0; n];
        let mut bad = Vec::new();
        for j in 0..n {
            let mut dj = l[0][j];
            for (k, lk) in l.iter().enumerate().take(bw.min(j) + 1).skip(1) {
                let p = j - k;
                dj -= lk[p] * lk[p] * d[p];
            }
            if dj <= tol {
                bad.push(j);
                dj = 1.0;
            }
            d[j] = dj;
            for k in 1..=bw.min(n - 1 - j) {
                let i = j + k;
                let mut s = l[k][j];
                for m in 1..=bw.min(j) {
                    let p = j - m;
                    if i - p <= bw {
                        s -= l[i - p][p] * l[m][p] * d[p];
                    }
                }
                l[k][j] = s / dj;
            }
        }
        if !bad.is_empty() {
            return Err(bad);
        }
        let mut x = b.to_vec();
        for i in 0..n {
            for k in 1..=bw.min(i) {
                x[i] -= l[k][i - k] * x[i - k];
            }
        }
        for i in 0..n {
            x[i] /= d[i];
        }
        for i in (0..n).rev() {
            for k in 1..=bw.min(n - 1 - i) {
                x[i] -= l[k][i] * x[i + k];
            }
        }
        Ok(x)
    }
}

/// In-place Cholesky solve of a dense SPD system (row-major `n x n`).
pub fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if s <= 0.0 || !s.is_finite() {
            return None;
        }
        let d = s.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Some(y)
}
