//! Absorption of high-dimensional fixed effects.
//!
//! An [`Absorber`] projects vectors onto the span of a set of categorical
//! terms (plain factors, or factors with level-specific linear trends) under
//! observation weights. Two interchangeable back ends exist: normal equations
//! on the sparse dummy design ([`FeMethod::Dense`]), and alternating weighted
//! demeaning ([`FeMethod::Demean`]). Both return fitted values and raw,
//! unnormalized coefficients in the same layout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymFactor;

/// Demeaning stops once the largest coefficient update in a sweep is below this.
pub const DEMEAN_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 10_000;
/// Above this many absorbed columns `Auto` switches to demeaning.
pub const DENSE_MAX_COLUMNS: usize = 2_000;
/// Largest absorbed dimension for which hat-matrix blocks are computed.
pub const LEVERAGE_MAX_COLUMNS: usize = 8_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeMethod {
    #[default]
    Auto,
    Dense,
    Demean,
}

/// One absorbed term, described per observation.
#[derive(Debug, Clone)]
pub enum Term {
    Factor {
        name: String,
        levels: Vec<u32>,
        n_levels: usize,
    },
    /// Level intercepts plus level slopes on `time - center`.
    Trend {
        name: String,
        levels: Vec<u32>,
        n_levels: usize,
        time: Vec<f64>,
        center: f64,
    },
}

impl Term {
    pub fn factor(name: impl Into<String>, levels: Vec<u32>, n_levels: usize) -> Self {
        Term::Factor { name: name.into(), levels, n_levels }
    }

    pub fn name(&self) -> &str {
        match self {
            Term::Factor { name, .. } | Term::Trend { name, .. } => name,
        }
    }

    pub fn n_levels(&self) -> usize {
        match self {
            Term::Factor { n_levels, .. } | Term::Trend { n_levels, .. } => *n_levels,
        }
    }

    pub fn levels(&self) -> &[u32] {
        match self {
            Term::Factor { levels, .. } | Term::Trend { levels, .. } => levels,
        }
    }

    fn width(&self) -> usize {
        match self {
            Term::Factor { n_levels, .. } => *n_levels,
            Term::Trend { n_levels, .. } => 2 * n_levels,
        }
    }

    fn len(&self) -> usize {
        self.levels().len()
    }
}

/// Location of a (possibly out-of-sample) row in the absorbed structure:
/// one level per term plus the time value used by trend terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RowKey {
    pub levels: Vec<u32>,
    pub time: f64,
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub fitted: Vec<f64>,
    /// Per term: `n_levels` values for factors; intercepts then slopes for trends.
    pub coefs: Vec<Vec<f64>>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Absorber {
    terms: Vec<Term>,
    weights: Vec<f64>,
    method: FeMethod,
    offsets: Vec<usize>,
    n_cols: usize,
    dense: Option<SymFactor>,
    /// Per term and level: weight sum (factors) or weighted (n, Σs, Σs²) moments (trends).
    moments: Vec<Vec<[f64; 3]>>,
}

impl Absorber {
    pub fn new(terms: Vec<Term>, weights: Vec<f64>, method: FeMethod) -> Result<Self> {
        let n = weights.len();
        if terms.is_empty() {
            return Err(Error::invalid("no absorbed terms"));
        }
        for t in &terms {
            if t.len() != n {
                return Err(Error::invalid(format!("term '{}' has {} rows, expected {n}", t.name(), t.len())));
            }
            if t.levels().iter().any(|&l| l as usize >= t.n_levels()) {
                return Err(Error::invalid(format!("term '{}' has a level out of range", t.name())));
            }
            if let Term::Trend { time, .. } = t {
                if time.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid("non-finite trend time"));
                }
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::invalid("all weights are zero"));
        }
        let mut offsets = Vec::with_capacity(terms.len());
        let mut n_cols = 0;
        for t in &terms {
            offsets.push(n_cols);
            n_cols += t.width();
        }
        let method = match method {
            FeMethod::Auto if n_cols <= DENSE_MAX_COLUMNS => FeMethod::Dense,
            FeMethod::Auto => FeMethod::Demean,
            m => m,
        };
        let moments = terms
            .iter()
            .map(|t| {
                let mut m = vec![[0.0; 3]; t.n_levels()];
                for i in 0..n {
                    let l = t.levels()[i] as usize;
                    let s = match t {
                        Term::Trend { time, center, .. } => time[i] - center,
                        Term::Factor { .. } => 0.0,
                    };
                    m[l][0] += weights[i];
                    m[l][1] += weights[i] * s;
                    m[l][2] += weights[i] * s * s;
                }
                m
            })
            .collect();
        let mut a = Absorber { terms, weights, method, offsets, n_cols, dense: None, moments };
        if method == FeMethod::Dense {
            a.dense = Some(SymFactor::new(&a.gram()));
        }
        Ok(a)
    }

    pub fn method(&self) -> FeMethod {
        self.method
    }

    pub fn n_obs(&self) -> usize {
        self.weights.len()
    }

    pub fn n_columns(&self) -> usize {
        self.n_cols
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total weight on a level of a term.
    pub fn level_weight(&self, term: usize, level: usize) -> f64 {
        self.moments[term][level][0]
    }

    /// Whether a trend level has enough spread in time to pin down a slope.
    pub fn slope_identified(&self, term: usize, level: usize) -> bool {
        let [w, s, ss] = self.moments[term][level];
        w > 0.0 && ss - s * s / w > 1e-9 * ss.max(1.0)
    }

    /// Sparse design row: (column, value) pairs.
    fn row_entries(&self, levels: impl Fn(usize) -> u32, time: impl Fn(usize) -> f64, out: &mut Vec<(usize, f64)>) {
        out.clear();
        for (k, t) in self.terms.iter().enumerate() {
            let l = levels(k) as usize;
            let off = self.offsets[k];
            match t {
                Term::Factor { .. } => out.push((off + l, 1.0)),
                Term::Trend { n_levels, center, .. } => {
                    out.push((off + l, 1.0));
                    out.push((off + n_levels + l, time(k) - center));
                }
            }
        }
    }

    fn obs_entries(&self, i: usize, out: &mut Vec<(usize, f64)>) {
        self.row_entries(
            |k| self.terms[k].levels()[i],
            |k| match &self.terms[k] {
                Term::Trend { time, .. } => time[i],
                Term::Factor { .. } => 0.0,
            },
            out,
        )
    }

    fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n_cols, self.n_cols);
        let mut e = Vec::new();
        for i in 0..self.n_obs() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            self.obs_entries(i, &mut e);
            for &(a, va) in &e {
                for &(b, vb) in &e {
                    g[(a, b)] += w * va * vb;
                }
            }
        }
        g
    }

    fn zt_w(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        let mut e = Vec::new();
        for i in 0..self.n_obs() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            self.obs_entries(i, &mut e);
            for &(a, v) in &e {
                out[a] += w * v * y[i];
            }
        }
        out
    }

    fn z_times(&self, b: &[f64]) -> Vec<f64> {
        let mut e = Vec::new();
        (0..self.n_obs())
            .map(|i| {
                self.obs_entries(i, &mut e);
                e.iter().map(|&(a, v)| v * b[a]).sum()
            })
            .collect()
    }

    fn split_coefs(&self, b: &[f64]) -> Vec<Vec<f64>> {
        self.terms.iter().zip(&self.offsets).map(|(t, &off)| b[off..off + t.width()].to_vec()).collect()
    }

    fn flatten(&self, coefs: &[Vec<f64>]) -> Vec<f64> {
        coefs.iter().flatten().copied().collect()
    }

    /// Weighted projection of `y` onto the absorbed span.
    pub fn project(&self, y: &[f64]) -> Result<Projection> {
        if y.len() != self.n_obs() {
            return Err(Error::invalid("vector length does not match absorber"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite values in projected vector"));
        }
        match &self.dense {
            Some(f) => {
                let mut b = f.solve(&self.zt_w(y));
                // one step of iterative refinement
                let fit = self.z_times(&b);
                let r: Vec<f64> = y.iter().zip(&fit).map(|(a, c)| a - c).collect();
                let db = f.solve(&self.zt_w(&r));
                b.iter_mut().zip(&db).for_each(|(x, d)| *x += d);
                let fitted = self.z_times(&b);
                Ok(Projection { fitted, coefs: self.split_coefs(&b), iterations: 1 })
            }
            None => self.demean(y),
        }
    }

    pub fn residualize(&self, y: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(y)?;
        Ok(y.iter().zip(&p.fitted).map(|(a, b)| a - b).collect())
    }

    fn demean(&self, y: &[f64]) -> Result<Projection> {
        let n = self.n_obs();
        let mut r = y.to_vec();
        let mut coefs: Vec<Vec<f64>> = self.terms.iter().map(|t| vec![0.0; t.width()]).collect();
        let mut sums: Vec<[f64; 2]> = Vec::new();
        for sweep in 1..=MAX_SWEEPS {
            let mut max_update: f64 = 0.0;
            for (k, term) in self.terms.iter().enumerate() {
                let nl = term.n_levels();
                sums.clear();
                sums.resize(nl, [0.0; 2]);
                let levels = term.levels();
                match term {
                    Term::Factor { .. } => {
                        for i in 0..n {
                            sums[levels[i] as usize][0] += self.weights[i] * r[i];
                        }
                        let upd: Vec<f64> = (0..nl)
                            .map(|l| {
                                let w = self.moments[k][l][0];
                                if w > 0.0 {
                                    sums[l][0] / w
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        for i in 0..n {
                            r[i] -= upd[levels[i] as usize];
                        }
                        for l in 0..nl {
                            coefs[k][l] += upd[l];
                            max_update = max_update.max(upd[l].abs());
                        }
                    }
                    Term::Trend { time, center, .. } => {
                        for i in 0..n {
                            let s = time[i] - center;
                            let wr = self.weights[i] * r[i];
                            let e = &mut sums[levels[i] as usize];
                            e[0] += wr;
                            e[1] += wr * s;
                        }
                        let upd: Vec<(f64, f64)> = (0..nl)
                            .map(|l| {
                                let [w, s, ss] = self.moments[k][l];
                                if w <= 0.0 {
                                    return (0.0, 0.0);
                                }
                                if self.slope_identified(k, l) {
                                    let det = w * ss - s * s;
                                    let a = (ss * sums[l][0] - s * sums[l][1]) / det;
                                    let b = (w * sums[l][1] - s * sums[l][0]) / det;
                                    (a, b)
                                } else {
                                    (sums[l][0] / w, 0.0)
                                }
                            })
                            .collect();
                        for i in 0..n {
                            let (a, b) = upd[levels[i] as usize];
                            r[i] -= a + b * (time[i] - center);
                        }
                        for l in 0..nl {
                            coefs[k][l] += upd[l].0;
                            coefs[k][nl + l] += upd[l].1;
                            max_update = max_update.max(upd[l].0.abs()).max(upd[l].1.abs());
                        }
                    }
                }
            }
            if max_update <= DEMEAN_TOL {
                let fitted = y.iter().zip(&r).map(|(a, b)| a - b).collect();
                return Ok(Projection { fitted, coefs, iterations: sweep });
            }
        }
        Err(Error::NotConverged { what: "fixed-effect demeaning".into(), iterations: MAX_SWEEPS })
    }

    /// Linear predictor at an arbitrary row from projection coefficients.
    pub fn predict(&self, coefs: &[Vec<f64>], row: &RowKey) -> f64 {
        let mut e = Vec::new();
        self.row_entries(|k| row.levels[k], |_| row.time, &mut e);
        let flat = self.flatten(coefs);
        e.iter().map(|&(a, v)| v * flat[a]).sum()
    }

    /// Observation weights `v` such that `Σ v_i y_i = -Σ_j c_j ŷ(row_j)` for
    /// every `y`, where `ŷ(row)` is the absorbed-FE prediction at `row` fitted
    /// on this sample. In other words the (negated) influence of each
    /// estimation observation on a weighted sum of out-of-sample predictions.
    pub fn implied_weights(&self, targets: &[(RowKey, f64)]) -> Result<Vec<f64>> {
        let mut rhs = vec![0.0; self.n_cols];
        let mut e = Vec::new();
        for (row, c) in targets {
            self.row_entries(|k| row.levels[k], |_| row.time, &mut e);
            for &(a, v) in &e {
                rhs[a] += c * v;
            }
        }
        let g = match &self.dense {
            Some(f) => f.solve(&rhs),
            None => self.conjugate_gradient(&rhs)?,
        };
        let zg = self.z_times(&g);
        Ok(zg.iter().zip(&self.weights).map(|(z, w)| -w * z).collect())
    }

    /// Diagonal blocks `W½ Z G⁻ Z' W½` of the weighted hat matrix, one per
    /// group of observation indices.
    pub fn hat_blocks(&self, groups: &[Vec<usize>]) -> Result<Vec<DMatrix<f64>>> {
        let built;
        let f = match &self.dense {
            Some(f) => f,
            None if self.n_cols <= LEVERAGE_MAX_COLUMNS => {
                built = SymFactor::new(&self.gram());
                &built
            }
            None => {
                return Err(Error::estimation(format!(
                    "leverage needs the dense normal equations; {} absorbed columns exceed {LEVERAGE_MAX_COLUMNS}",
                    self.n_cols
                )))
            }
        };
        let ginv = f.inverse();
        let mut e = Vec::new();
        let mut out = Vec::with_capacity(groups.len());
        for rows in groups {
            let entries: Vec<Vec<(usize, f64)>> = rows
                .iter()
                .map(|&i| {
                    self.obs_entries(i, &mut e);
                    e.clone()
                })
                .collect();
            let sw: Vec<f64> = rows.iter().map(|&i| self.weights[i].sqrt()).collect();
            let n = rows.len();
            let mut h = DMatrix::zeros(n, n);
            for j in 0..n {
                for k in 0..=j {
                    let mut v = 0.0;
                    for &(a, va) in &entries[j] {
                        for &(b, vb) in &entries[k] {
                            v += va * vb * ginv[(a, b)];
                        }
                    }
                    v *= sw[j] * sw[k];
                    h[(j, k)] = v;
                    h[(k, j)] = v;
                }
            }
            out.push(h);
        }
        Ok(out)
    }

    fn gram_times(&self, g: &[f64]) -> Vec<f64> {
        self.zt_w(&self.z_times(g))
    }

    fn conjugate_gradient(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let norm_b = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut x = vec![0.0; self.n_cols];
        if norm_b == 0.0 {
            return Ok(x);
        }
        let mut r = rhs.to_vec();
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let max_iter = 20 * self.n_cols + 100;
        for _ in 0..max_iter {
            let ap = self.gram_times(&p);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            if rr_new.sqrt() <= 1e-13 * norm_b {
                return Ok(x);
            }
            let beta = rr_new / rr;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
        let resid = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if resid <= 1e-8 * norm_b {
            Ok(x)
        } else {
            Err(Error::NotConverged { what: "conjugate gradient".into(), iterations: max_iter })
        }
    }

    /// Connected components over the levels of all terms, linking levels that
    /// share a positively weighted observation. Returns a component id per
    /// (term, level); levels without weight get `None`.
    pub fn components(&self) -> (usize, Vec<Vec<Option<usize>>>) {
        let mut parent: Vec<usize> = (0..self.n_total_levels()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let base: Vec<usize> = self
            .terms
            .iter()
            .scan(0, |acc, t| {
                let b = *acc;
                *acc += t.n_levels();
                Some(b)
            })
            .collect();
        for i in 0..self.n_obs() {
            if self.weights[i] == 0.0 {
                continue;
            }
            let first = base[0] + self.terms[0].levels()[i] as usize;
            for k in 1..self.terms.len() {
                let other = base[k] + self.terms[k].levels()[i] as usize;
                let (a, b) = (find(&mut parent, first), find(&mut parent, other));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut ids = std::collections::HashMap::new();
        let mut out = Vec::with_capacity(self.terms.len());
        for (k, t) in self.terms.iter().enumerate() {
            let mut v = Vec::with_capacity(t.n_levels());
            for l in 0..t.n_levels() {
                if self.level_weight(k, l) > 0.0 {
                    let root = find(&mut parent, base[k] + l);
                    let next = ids.len();
                    v.push(Some(*ids.entry(root).or_insert(next)));
                } else {
                    v.push(None);
                }
            }
            out.push(v);
        }
        (ids.len(), out)
    }

    fn n_total_levels(&self) -> usize {
        self.terms.iter().map(Term::n_levels).sum()
    }
}
