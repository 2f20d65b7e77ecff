//! Sparse and banded linear algebra for the interior systems.

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (i, &xi) in x.iter().enumerate() {
            for (c, v) in self.row(i) {
                y[c] += v * xi;
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(i) {
                row[c] = v;
            }
        }
        out
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(c, _)| i.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.vals.len());
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                t.push((c, i, v));
            }
        }
        Self::from_triplets(self.n, t)
    }
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    p: usize,
    // Row-major lower band: entry (i, j), i - p <= j <= i, at i*(p+1) + j + p - i.
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the lower band of `a`. Entries outside half-bandwidth `p` are
    /// ignored.
    pub fn factor(a: &CsrMatrix, p: usize) -> Result<Self> {
        let n = a.dim();
        let w = p + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i && i - j <= p {
                    l[i * w + j + p - i] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(p);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(p));
                let mut s = l[i * w + j + p - i];
                for k in k0..j {
                    s -= l[i * w + k + p - i] * l[j * w + k + p - j];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Singular(format!(
                            "matrix is not positive definite at row {i} (pivot {s:e})"
                        )));
                    }
                    l[i * w + p] = s.sqrt();
                } else {
                    l[i * w + j + p - i] = s / l[j * w + p];
                }
            }
        }
        Ok(Self { n, p, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, p, w) = (self.n, self.p, self.p + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(p)..i {
                s -= self.l[i * w + k + p - i] * y[k];
            }
            y[i] = s / self.l[i * w + p];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + p + 1).min(n) {
                s -= self.l[k * w + i + p - k] * y[k];
            }
            y[i] = s / self.l[i * w + p];
        }
        y
    }
}

/// LU factorisation with partial pivoting of a general band matrix.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    fn width(kl: usize, ku: usize) -> usize {
        2 * kl + ku + 1
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * Self::width(self.kl, self.ku) + j + self.kl - i
    }

    /// Factors `a` with lower and upper bandwidth `kl` and `ku`.
    ///
    /// Fails with [`Error::Singular`] when a pivot falls below
    /// `rel_tol` times the largest entry.
    pub fn factor(a: &CsrMatrix, kl: usize, ku: usize, rel_tol: f64) -> Result<Self> {
        let n = a.dim();
        let w = Self::width(kl, ku);
        let mut lu = Self { n, kl, ku, a: vec![0.0; n * w], piv: vec![0; n] };
        let mut scale = 0.0_f64;
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j + kl < i || j > i + ku {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) lies outside the declared band"
                    )));
                }
                let k = lu.idx(i, j);
                lu.a[k] = v;
                scale = scale.max(v.abs());
            }
        }
        let tiny = rel_tol * scale;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut piv = k;
            let mut best = lu.a[lu.idx(k, k)].abs();
            for r in k + 1..=last {
                let v = lu.a[lu.idx(r, k)].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if !(best > tiny) {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            lu.piv[k] = piv;
            let jmax = (k + kl + ku).min(n - 1);
            if piv != k {
                for j in k..=jmax {
                    let (x, y) = (lu.idx(k, j), lu.idx(piv, j));
                    lu.a.swap(x, y);
                }
            }
            let d = lu.a[lu.idx(k, k)];
            for r in k + 1..=last {
                let rk = lu.idx(r, k);
                let m = lu.a[rk] / d;
                lu.a[rk] = m;
                if m != 0.0 {
                    for j in k + 1..=jmax {
                        let kj = lu.a[lu.idx(k, j)];
                        let rj = lu.idx(r, j);
                        lu.a[rj] -= m * kj;
                    }
                }
            }
        }
        Ok(lu)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            for r in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                x[r] -= self.a[self.idx(r, k)] * xk;
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + self.kl + self.ku).min(n - 1) {
                s -= self.a[self.idx(i, j)] * x[j];
            }
            x[i] = s / self.a[self.idx(i, i)];
        }
        x
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for SPD `a`.
pub fn pcg(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.dim();
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| 1.0 / d).collect();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, SolveStats::default()));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let ap = a.matvec(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / bnorm;
        if res <= tol {
            return Ok((x, SolveStats { iterations: it, relative_residual: res }));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: norm(&r) / bnorm })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        a.matvec(x).iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0)]);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.transpose().get(1, 0), 3.0);
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplace_1d(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let x = BandedCholesky::factor(&a, 1).unwrap().solve(&b);
        assert!(residual(&a, &x, &b) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(BandedCholesky::factor(&a, 1), Err(Error::Singular(_))));
    }

    #[test]
    fn pcg_matches_direct() {
        let a = laplace_1d(40);
        let b = vec![1.0; 40];
        let direct = BandedCholesky::factor(&a, 1).unwrap().solve(&b);
        let (x, stats) = pcg(&a, &b, 1e-12, 500).unwrap();
        assert!(stats.iterations > 0);
        for (u, v) in x.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!(matches!(pcg(&a, &b, 1e-14, 2), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn lu_needs_pivoting() {
        // Zero leading diagonal forces a row swap.
        let a = CsrMatrix::from_triplets(
            3,
            vec![(0, 1, 1.0), (1, 0, 2.0), (1, 1, 1.0), (1, 2, 1.0), (2, 1, 3.0), (2, 2, 1.0)],
        );
        let b = [1.0, 2.0, 3.0];
        let x = BandedLu::factor(&a, 1, 1, 1e-14).unwrap().solve(&b);
        assert!(residual(&a, &x, &b) < 1e-12);
    }

    #[test]
    fn lu_detects_singular() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(BandedLu::factor(&a, 1, 1, 1e-12), Err(Error::Singular(_))));
    }

    proptest! {
        #[test]
        fn lu_solves_random_band(seed in 0u64..1000, n in 5usize..40, kl in 1usize..4, ku in 1usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = Vec::new();
            for i in 0..n {
                for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push((i, j, if i == j { v + 0.1 } else { v }));
                }
            }
            let a = CsrMatrix::from_triplets(n, t);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(lu) = BandedLu::factor(&a, kl, ku, 1e-12) {
                let x = lu.solve(&b);
                let scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                prop_assert!(residual(&a, &x, &b) < 1e-8 * scale);
            }
        }

        #[test]
        fn cholesky_solves_random_spd(seed in 0u64..1000, n in 3usize..40, p in 1usize..5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = Vec::new();
            for i in 0..n {
                t.push((i, i, 2.0 * p as f64 + 1.0));
                for j in i + 1..(i + p + 1).min(n) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push((i, j, v));
                    t.push((j, i, v));
                }
            }
            let a = CsrMatrix::from_triplets(n, t);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = BandedCholesky::factor(&a, p).unwrap().solve(&b);
            prop_assert!(residual(&a, &x, &b) < 1e-10);
        }
    }
}
