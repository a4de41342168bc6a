//! Sparse `LDLᵀ` factorisation of symmetric quasi-definite / indefinite
//! matrices with a fixed pattern, a minimum-degree ordering and inertia
//! reporting.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdlError {
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("non-finite pivot at column {0}")]
    NonFinite(usize),
}

const NONE: usize = usize::MAX;

/// Greedy minimum-degree ordering on the explicit elimination graph. Ties break
/// on the smaller index, so the result is deterministic.
pub fn minimum_degree(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(i, j) in edges {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
            for &w in &nbrs {
                if w != u {
                    adj[u].insert(w);
                }
            }
            queue.insert((adj[u].len(), u));
        }
    }
    order
}

/// Pattern analysis shared by every numeric factorisation of the same matrix.
#[derive(Debug, Clone)]
pub struct Symbolic {
    pub n: usize,
    /// `perm[k]` is the original index placed at position `k`.
    perm: Vec<usize>,
    /// Upper-triangular CSC pattern of the permuted matrix.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// Position in `ax` of each input entry, in input order.
    map: Vec<usize>,
    etree: Vec<usize>,
    lnz: Vec<usize>,
}

impl Symbolic {
    /// Analyses the pattern given as `(row, col)` pairs of either triangle.
    /// Every diagonal position is included whether listed or not.
    pub fn new(n: usize, entries: &[(usize, usize)]) -> Self {
        let perm = minimum_degree(n, entries);
        let mut iperm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        let key = |i: usize, j: usize| {
            let (a, b) = (iperm[i], iperm[j]);
            (a.max(b), a.min(b)) // (column, row) with row ≤ column
        };
        let mut cols: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for k in 0..n {
            cols[k].insert(k);
        }
        for &(i, j) in entries {
            let (c, r) = key(i, j);
            cols[c].insert(r);
        }
        let mut ap = vec![0; n + 1];
        let mut ai = Vec::new();
        let mut pos: HashMap<(usize, usize), usize> = HashMap::new();
        for c in 0..n {
            for &r in &cols[c] {
                pos.insert((c, r), ai.len());
                ai.push(r);
            }
            ap[c + 1] = ai.len();
        }
        let map = entries.iter().map(|&(i, j)| pos[&key(i, j)]).collect();

        let mut etree = vec![NONE; n];
        let mut lnz = vec![0; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &i0 in &ai[ap[j]..ap[j + 1]] {
                let mut i = i0;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        Self {
            n,
            perm,
            ap,
            ai,
            map,
            etree,
            lnz,
        }
    }

    pub fn nnz_l(&self) -> usize {
        self.lnz.iter().sum()
    }

    /// Numeric factorisation of values aligned with the analysed entry list;
    /// `diag_shift[i]` is added to the diagonal of original index `i`.
    pub fn factor(&self, values: &[f64], diag_shift: &[f64]) -> Result<Factor, LdlError> {
        self.factor_scaled(values, diag_shift, None)
    }

    /// As [`Symbolic::factor`] but factorises `S·A·S` for a positive diagonal
    /// `S`; [`Factor::solve`] still solves with `A`. Inertia is unaffected.
    pub fn factor_scaled(&self, values: &[f64], diag_shift: &[f64], scale: Option<&[f64]>) -> Result<Factor, LdlError> {
        let n = self.n;
        let mut ax = vec![0.0; self.ai.len()];
        for (k, &v) in values.iter().enumerate() {
            ax[self.map[k]] += v;
        }
        for (k, &orig) in self.perm.iter().enumerate() {
            // Diagonal is the last entry of its column (rows sorted, row ≤ column).
            ax[self.ap[k + 1] - 1] += diag_shift[orig];
        }
        let scale_perm: Option<Vec<f64>> = scale.map(|s| self.perm.iter().map(|&p| s[p]).collect());
        if let Some(sp) = &scale_perm {
            for c in 0..n {
                for p in self.ap[c]..self.ap[c + 1] {
                    ax[p] *= sp[c] * sp[self.ai[p]];
                }
            }
        }

        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + self.lnz[i];
        }
        let mut li = vec![0; lp[n]];
        let mut lx = vec![0.0; lp[n]];
        let mut d = vec![0.0; n];
        let mut dinv = vec![0.0; n];
        let mut next = lp[..n].to_vec();
        let mut y = vec![0.0; n];
        let mut marked = vec![false; n];
        let mut y_idx = Vec::with_capacity(n);
        let mut buf = Vec::with_capacity(n);
        let mut positive = 0;

        for k in 0..n {
            y_idx.clear();
            for p in self.ap[k]..self.ap[k + 1] {
                let b = self.ai[p];
                if b == k {
                    d[k] = ax[p];
                    continue;
                }
                y[b] = ax[p];
                let mut i = b;
                if !marked[i] {
                    marked[i] = true;
                    buf.clear();
                    buf.push(i);
                    i = self.etree[b];
                    while i != NONE && i < k {
                        if marked[i] {
                            break;
                        }
                        marked[i] = true;
                        buf.push(i);
                        i = self.etree[i];
                    }
                    while let Some(e) = buf.pop() {
                        y_idx.push(e);
                    }
                }
            }
            for &c in y_idx.iter().rev() {
                let yc = y[c];
                let end = next[c];
                for j in lp[c]..end {
                    y[li[j]] -= lx[j] * yc;
                }
                li[end] = k;
                lx[end] = yc * dinv[c];
                d[k] -= yc * lx[end];
                next[c] += 1;
                y[c] = 0.0;
                marked[c] = false;
            }
            if !d[k].is_finite() {
                return Err(LdlError::NonFinite(self.perm[k]));
            }
            if d[k] == 0.0 {
                return Err(LdlError::ZeroPivot(self.perm[k]));
            }
            if d[k] > 0.0 {
                positive += 1;
            }
            dinv[k] = 1.0 / d[k];
        }
        Ok(Factor {
            scale: scale_perm,
            perm: self.perm.clone(),
            lp,
            li,
            lx,
            dinv,
            positive,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Factor {
    /// Symmetric scaling in permuted order, if any.
    scale: Option<Vec<f64>>,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    dinv: Vec<f64>,
    positive: usize,
}

impl Factor {
    /// Number of positive and negative pivots.
    pub fn inertia(&self) -> (usize, usize) {
        (self.positive, self.dinv.len() - self.positive)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dinv.len();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        if let Some(sp) = &self.scale {
            for (xi, si) in x.iter_mut().zip(sp) {
                *xi *= si;
            }
        }
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                s -= self.lx[j] * x[self.li[j]];
            }
            x[i] = s;
        }
        if let Some(sp) = &self.scale {
            for (xi, si) in x.iter_mut().zip(sp) {
                *xi *= si;
            }
        }
        let mut out = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

/// Symmetric Ruiz equilibration: a positive diagonal `S` such that every row
/// of `S·A·S` has largest magnitude close to one. `A` is given by one triangle
/// plus a diagonal shift.
pub fn ruiz_scaling(n: usize, entries: &[(usize, usize)], values: &[f64], diag_shift: &[f64], sweeps: usize) -> Vec<f64> {
    let mut s = vec![1.0; n];
    let mut row_max = vec![0.0f64; n];
    for _ in 0..sweeps {
        row_max.iter_mut().for_each(|r| *r = 0.0);
        for (&(i, j), &v) in entries.iter().zip(values) {
            let a = (v * s[i] * s[j]).abs();
            row_max[i] = row_max[i].max(a);
            row_max[j] = row_max[j].max(a);
        }
        for i in 0..n {
            let a = (diag_shift[i] * s[i] * s[i]).abs();
            row_max[i] = row_max[i].max(a);
        }
        let mut done = true;
        for i in 0..n {
            if row_max[i] > 0.0 {
                s[i] /= row_max[i].sqrt();
                if (row_max[i] - 1.0).abs() > 1e-2 {
                    done = false;
                }
            }
        }
        if done {
            break;
        }
    }
    s
}

/// `y = A·x` for a symmetric matrix given by one triangle of triplets.
pub fn sym_mul(n: usize, entries: &[(usize, usize)], values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (&(i, j), &v) in entries.iter().zip(values) {
        y[i] += v * x[j];
        if i != j {
            y[j] += v * x[i];
        }
    }
    y
}
