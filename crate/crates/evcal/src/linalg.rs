//! Sparse symmetric normal equations with arrow structure: one banded block
//! per trajectory segment (spline locality), a dense border coupling every
//! block to the intrinsics, and a small dense corner, ordered last.
//!
//! Factorization is a plain Cholesky of the permuted system that never forms
//! the zero blocks: banded Cholesky per segment, forward-substituted border,
//! then the corner.

use nalgebra::DMatrix;

/// Symmetric positive-definite band matrix, lower band stored row-major:
/// `data[i * (bw + 1) + d]` holds element `(i, i - d)`.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    pub dim: usize,
    pub bandwidth: usize,
    pub data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(dim: usize, bandwidth: usize) -> Self {
        Self {
            dim,
            bandwidth,
            data: vec![0.0; dim * (bandwidth + 1)],
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row >= col && row - col <= self.bandwidth);
        self.data[row * (self.bandwidth + 1) + (row - col)] += value;
    }

    #[inline]
    fn get(&self, row: usize, col: usize) -> f64 {
        if row < col {
            return self.get(col, row);
        }
        if row - col > self.bandwidth {
            return 0.0;
        }
        self.data[row * (self.bandwidth + 1) + (row - col)]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[i * (self.bandwidth + 1)]
    }

    pub fn add_diag(&mut self, i: usize, value: f64) {
        self.data[i * (self.bandwidth + 1)] += value;
    }

    /// In-place banded Cholesky, returning false when a pivot is not positive.
    pub fn cholesky_in_place(&mut self) -> bool {
        let bw = self.bandwidth;
        for j in 0..self.dim {
            let lo = j.saturating_sub(bw);
            let mut sum = self.get(j, j);
            for k in lo..j {
                let l = self.get(j, k);
                sum -= l * l;
            }
            if sum <= 0.0 || !sum.is_finite() {
                return false;
            }
            let ljj = sum.sqrt();
            self.data[j * (bw + 1)] = ljj;
            let hi = (j + bw + 1).min(self.dim);
            for i in (j + 1)..hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self.get(i, j);
                for k in lo_i..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                self.data[i * (bw + 1) + (i - j)] = s / ljj;
            }
        }
        true
    }

    /// Solve L y = b in place (after `cholesky_in_place`).
    pub fn forward_solve(&self, b: &mut [f64]) {
        let bw = self.bandwidth;
        for i in 0..self.dim {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.get(i, k) * b[k];
            }
            b[i] = s / self.diag(i);
        }
    }

    /// Solve L^T x = y in place.
    pub fn backward_solve(&self, b: &mut [f64]) {
        let bw = self.bandwidth;
        for i in (0..self.dim).rev() {
            let hi = (i + bw + 1).min(self.dim);
            let mut s = b[i];
            for k in (i + 1)..hi {
                s -= self.get(k, i) * b[k];
            }
            b[i] = s / self.diag(i);
        }
    }
}

/// Arrow-structured normal equations: banded segment blocks, dense borders to
/// the trailing corner block.
#[derive(Debug, Clone)]
pub(crate) struct ArrowSystem {
    pub blocks: Vec<BandMatrix>,
    /// Per block: dim x corner_dim, row-major.
    pub borders: Vec<Vec<f64>>,
    /// corner_dim x corner_dim, row-major, full storage.
    pub corner: Vec<f64>,
    pub corner_dim: usize,
    /// Start of each block in the global parameter vector.
    pub offsets: Vec<usize>,
    pub total_dim: usize,
}

impl ArrowSystem {
    pub fn zeros(block_dims: &[usize], bandwidth: usize, corner_dim: usize) -> Self {
        let mut offsets = Vec::with_capacity(block_dims.len());
        let mut acc = 0usize;
        for &d in block_dims {
            offsets.push(acc);
            acc += d;
        }
        Self {
            blocks: block_dims
                .iter()
                .map(|&d| BandMatrix::zeros(d, bandwidth.min(d.saturating_sub(1))))
                .collect(),
            borders: block_dims.iter().map(|&d| vec![0.0; d * corner_dim]).collect(),
            corner: vec![0.0; corner_dim * corner_dim],
            corner_dim,
            offsets,
            total_dim: acc + corner_dim,
        }
    }

    pub fn set_zero(&mut self) {
        for b in &mut self.blocks {
            b.data.fill(0.0);
        }
        for b in &mut self.borders {
            b.fill(0.0);
        }
        self.corner.fill(0.0);
    }

    #[inline]
    pub fn corner_add(&mut self, r: usize, c: usize, v: f64) {
        self.corner[r * self.corner_dim + c] += v;
    }

    /// Diagonal of the full matrix in global order.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.total_dim);
        for b in &self.blocks {
            for i in 0..b.dim {
                d.push(b.diag(i));
            }
        }
        for i in 0..self.corner_dim {
            d.push(self.corner[i * self.corner_dim + i]);
        }
        d
    }

    /// Solve (H + diag(damping)) x = rhs. Returns None when the damped matrix
    /// is not positive definite.
    pub fn solve_damped(&self, damping: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(damping.len(), self.total_dim);
        assert_eq!(rhs.len(), self.total_dim);
        let m = self.corner_dim;
        let cp_dim = self.total_dim - m;

        // factor each damped block and push it through border and rhs
        let mut corner = DMatrix::<f64>::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                corner[(r, c)] = self.corner[r * m + c];
            }
        }
        for i in 0..m {
            corner[(i, i)] += damping[cp_dim + i];
        }
        let mut z: Vec<f64> = rhs[cp_dim..].to_vec();

        let mut factored: Vec<BandMatrix> = Vec::with_capacity(self.blocks.len());
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(self.blocks.len());
        let mut us: Vec<Vec<f64>> = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let off = self.offsets[bi];
            let mut l = block.clone();
            for i in 0..l.dim {
                l.add_diag(i, damping[off + i]);
            }
            if !l.cholesky_in_place() {
                return None;
            }
            // Y = L^-1 B (column by column), u = L^-1 b
            let mut y = self.borders[bi].clone(); // dim x m row-major
            for col in 0..m {
                let mut colv: Vec<f64> = (0..l.dim).map(|r| y[r * m + col]).collect();
                l.forward_solve(&mut colv);
                for r in 0..l.dim {
                    y[r * m + col] = colv[r];
                }
            }
            let mut u: Vec<f64> = rhs[off..off + l.dim].to_vec();
            l.forward_solve(&mut u);
            // corner' -= Y^T Y ; z -= Y^T u
            for r in 0..m {
                for c in 0..m {
                    let mut s = 0.0;
                    for i in 0..l.dim {
                        s += y[i * m + r] * y[i * m + c];
                    }
                    corner[(r, c)] -= s;
                }
                let mut s = 0.0;
                for i in 0..l.dim {
                    s += y[i * m + r] * u[i];
                }
                z[r] -= s;
            }
            factored.push(l);
            ys.push(y);
            us.push(u);
        }

        let chol = corner.cholesky()?;
        let zv = nalgebra::DVector::from_vec(z);
        let yk = chol.solve(&zv);

        let mut x = vec![0.0; self.total_dim];
        for i in 0..m {
            x[cp_dim + i] = yk[i];
        }
        for (bi, l) in factored.iter().enumerate() {
            let off = self.offsets[bi];
            let y = &ys[bi];
            let mut v = us[bi].clone();
            for r in 0..l.dim {
                let mut s = v[r];
                for c in 0..m {
                    s -= y[r * m + c] * yk[c];
                }
                v[r] = s;
            }
            l.backward_solve(&mut v);
            x[off..off + l.dim].copy_from_slice(&v);
        }
        Some(x)
    }

    /// Dense copy, for tests.
    #[cfg(test)]
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.total_dim;
        let m = self.corner_dim;
        let cp_dim = n - m;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for (bi, b) in self.blocks.iter().enumerate() {
            let off = self.offsets[bi];
            for i in 0..b.dim {
                for j in i.saturating_sub(b.bandwidth)..=i {
                    let v = b.get(i, j);
                    h[(off + i, off + j)] = v;
                    h[(off + j, off + i)] = v;
                }
            }
            for i in 0..b.dim {
                for c in 0..m {
                    let v = self.borders[bi][i * m + c];
                    h[(off + i, cp_dim + c)] = v;
                    h[(cp_dim + c, off + i)] = v;
                }
            }
        }
        for r in 0..m {
            for c in 0..m {
                h[(cp_dim + r, cp_dim + c)] = self.corner[r * m + c];
            }
        }
        h
    }
}
