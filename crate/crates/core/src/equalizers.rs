//! Model-based estimators: LMMSE (normal-equation and diagonal forms), the
//! ordered decision-feedback equalizer and iterative soft interference
//! cancellation.

use crate::error::{Error, Result};
use crate::numerics::{CMatrix, CVector, Cholesky, C64};
use crate::system::{Alphabet, SystemModel};

/// Default diagonal loading relative to `trace(C)/N'`.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// `(M^H·H̃·M + (N'σ_n²/σ_d²)·I)`.
fn normal_matrix(model: &SystemModel, cols: &[usize], sigma_n2: f64, sigma_d2: f64) -> CMatrix {
    let m = model.m();
    let ht = model.h_tilde();
    let load = model.n_prime() as f64 * sigma_n2 / sigma_d2;
    let n = cols.len();
    let mut phi = CMatrix::zeros(n, n);
    for (a, &i) in cols.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate().skip(a) {
            let mut s = C64::new(0.0, 0.0);
            for r in 0..model.n_prime() {
                s += m[(r, i)].conj() * m[(r, j)] * ht[r];
            }
            if a == b {
                s = C64::new(s.re + load, 0.0);
            }
            phi[(a, b)] = s;
            phi[(b, a)] = s.conj();
        }
    }
    phi
}

/// LMMSE filter matrix `G = (M^H·H̃·M + (N'σ_n²/σ_d²)·I)^{-1}·M^H`, fixed for
/// one channel and noise level.
#[derive(Clone, Debug)]
pub struct LmmseFilter {
    g: CMatrix,
}

impl LmmseFilter {
    pub fn new(model: &SystemModel, sigma_n2: f64, sigma_d2: f64) -> Result<Self> {
        let cols: Vec<usize> = (0..model.n_d()).collect();
        let phi = normal_matrix(model, &cols, sigma_n2, sigma_d2);
        let g = Cholesky::factor(&phi)?.solve_mat(&model.m().adjoint())?;
        Ok(Self { g })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.g
    }

    pub fn apply(&self, y: &[C64]) -> Result<CVector> {
        self.g.matvec(y)
    }
}

/// Linear MMSE estimate via the normal equations.
pub fn lmmse(model: &SystemModel, y: &[C64], sigma_n2: f64, sigma_d2: f64) -> Result<CVector> {
    let cols: Vec<usize> = (0..model.n_d()).collect();
    let phi = normal_matrix(model, &cols, sigma_n2, sigma_d2);
    let rhs = model.m().adjoint_matvec(y)?;
    Cholesky::factor(&phi)?.solve_vec(&rhs)
}

/// Diagonal-form LMMSE `(1/N')·M^H·diag(H̃_ii + σ_n²/σ_d²)^{-1}·y`.
///
/// Exact in CP mode; in UW mode it is the approximate estimator that treats
/// the UW as random data and keeps the first `N_d` outputs.
pub fn lmmse_diag(model: &SystemModel, y: &[C64], sigma_n2: f64, sigma_d2: f64) -> Result<CVector> {
    if y.len() != model.n_prime() {
        return Err(Error::Dimension(format!(
            "received vector of length {}, expected {}",
            y.len(),
            model.n_prime()
        )));
    }
    let ratio = sigma_n2 / sigma_d2;
    let scaled: Vec<C64> = y
        .iter()
        .zip(model.h_tilde())
        .map(|(v, h)| v / (h + ratio))
        .collect();
    let mut d = model.m().adjoint_matvec(&scaled)?;
    let inv = 1.0 / model.n_prime() as f64;
    d.iter_mut().for_each(|v| *v *= inv);
    Ok(d)
}

#[derive(Clone, Debug)]
struct DfeStep {
    k: usize,
    filter: Vec<C64>,
    h_k: CVector,
}

/// Ordered decision-feedback equalizer.
///
/// The detection order and the per-step LMMSE filter rows depend only on the
/// channel, so they are computed once and reused for every block.
#[derive(Clone, Debug)]
pub struct Dfe {
    steps: Vec<DfeStep>,
}

impl Dfe {
    pub fn new(model: &SystemModel, sigma_n2: f64, sigma_d2: f64) -> Result<Self> {
        let m = model.m();
        let mut undecided: Vec<usize> = (0..model.n_d()).collect();
        let mut steps = Vec::with_capacity(model.n_d());
        while !undecided.is_empty() {
            let phi = normal_matrix(model, &undecided, sigma_n2, sigma_d2);
            let inv = Cholesky::factor(&phi)?.inverse()?;
            // Error variances are N'σ_n²·[Φ^{-1}]_kk; the common factor does
            // not change the argmin. Φ is Toeplitz, so exact ties are common
            // and are broken toward the lowest index up to rounding.
            let mut best = 0;
            for a in 1..undecided.len() {
                if inv[(a, a)].re < inv[(best, best)].re * (1.0 - 1e-9) {
                    best = a;
                }
            }
            let filter: Vec<C64> = (0..model.n_prime())
                .map(|r| {
                    undecided
                        .iter()
                        .enumerate()
                        .map(|(b, &j)| inv[(best, b)] * m[(r, j)].conj())
                        .sum()
                })
                .collect();
            let k = undecided.remove(best);
            steps.push(DfeStep { k, filter, h_k: model.h_col(k) });
        }
        Ok(Self { steps })
    }

    /// Detection order.
    pub fn order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.k).collect()
    }

    /// Hard symbol decisions for one received vector.
    pub fn equalize(&self, y: &[C64], alphabet: &Alphabet) -> Result<CVector> {
        let n_prime = self.steps.first().map_or(0, |s| s.filter.len());
        if y.len() != n_prime {
            return Err(Error::Dimension(format!(
                "received vector of length {}, expected {n_prime}",
                y.len()
            )));
        }
        let mut r = y.to_vec();
        let mut d = CVector::zeros(self.steps.len());
        for step in &self.steps {
            let z: C64 = step.filter.iter().zip(&r).map(|(g, v)| g * v).sum();
            let s = alphabet.decide(z);
            for (v, h) in r.iter_mut().zip(step.h_k.iter()) {
                *v -= h * s;
            }
            d[step.k] = s;
        }
        Ok(d)
    }
}

/// Decision-feedback equalization of a single vector.
pub fn dfe(
    model: &SystemModel,
    y: &[C64],
    sigma_n2: f64,
    sigma_d2: f64,
    alphabet: &Alphabet,
) -> Result<CVector> {
    Dfe::new(model, sigma_n2, sigma_d2)?.equalize(y, alphabet)
}

/// Soft estimates after an SIC iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftState {
    /// Posterior means `d̂_k`.
    pub d_hat: CVector,
    /// Conditional mean squared errors `e_k`.
    pub e: Vec<f64>,
    /// Posterior PMF over the full symbol set, one row per symbol.
    pub pmf: Option<Vec<Vec<f64>>>,
}

impl SoftState {
    /// Prior state: zero mean, full symbol variance.
    pub fn prior(n_d: usize, sigma_d2: f64) -> Self {
        Self {
            d_hat: CVector::zeros(n_d),
            e: vec![sigma_d2; n_d],
            pmf: None,
        }
    }

    /// Per-component marginals `(P(Re = s'), P(Im = s'))` for symbol `k`.
    pub fn component_pmfs(&self, k: usize, alphabet: &Alphabet) -> Option<(Vec<f64>, Vec<f64>)> {
        let row = self.pmf.as_ref()?.get(k)?;
        let l = alphabet.levels().len();
        let mut re = vec![0.0; l];
        let mut im = vec![0.0; l];
        for (idx, p) in row.iter().enumerate() {
            re[idx / l] += p;
            im[idx % l] += p;
        }
        Some((re, im))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SicConfig {
    /// Number of iterations `Q`.
    pub q: usize,
    /// Diagonal loading relative to `trace(C_vv)/N'`.
    pub jitter: f64,
}

impl Default for SicConfig {
    fn default() -> Self {
        Self { q: 1, jitter: DEFAULT_JITTER }
    }
}

impl SicConfig {
    pub fn new(q: usize) -> Result<Self> {
        let cfg = Self { q, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::InvalidParameter("SIC needs Q >= 1".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidParameter("jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `y_ic,k = y − Σ_{i≠k} h_i·d̂_i`.
pub fn sic_ic_step(model: &SystemModel, y: &[C64], d_hat: &[C64], k: usize) -> Result<CVector> {
    let h = model.h();
    let mut full = CVector(y.to_vec());
    let hd = h.matvec(d_hat)?;
    for i in 0..full.len() {
        full[i] += h[(i, k)] * d_hat[k] - hd[i];
    }
    Ok(full)
}

fn add_jitter(c: &mut CMatrix, jitter: f64) {
    let n = c.rows();
    let tr = c.trace().re / n as f64;
    let load = jitter * if tr > 0.0 { tr } else { 1.0 };
    for i in 0..n {
        c[(i, i)].re += load;
    }
}

/// Interference-plus-noise covariance for symbol `k`.
///
/// On the first iteration all other symbols count with the prior variance
/// `σ_d²`; afterwards with their conditional MSEs `e_i`.
pub fn sic_cvv(
    model: &SystemModel,
    e_prev: &[f64],
    k: usize,
    sigma_n2: f64,
    sigma_d2: f64,
    first_iteration: bool,
    jitter: f64,
) -> CMatrix {
    let n_prime = model.n_prime();
    let weights: Vec<f64> = (0..model.n_d())
        .map(|i| {
            if i == k {
                0.0
            } else if first_iteration {
                sigma_d2
            } else {
                e_prev[i]
            }
        })
        .collect();
    let mut a = interference_gram(model.m(), &weights);
    finish_cvv(&mut a, model.h_tilde(), n_prime as f64 * sigma_n2, jitter);
    a
}

/// `M·diag(w)·M^H`, Hermitian by construction.
fn interference_gram(m: &CMatrix, w: &[f64]) -> CMatrix {
    let n = m.rows();
    let mut a = CMatrix::zeros(n, n);
    for r in 0..n {
        let row_r = m.row(r);
        for c in r..n {
            let row_c = m.row(c);
            let mut s = C64::new(0.0, 0.0);
            for ((x, y), wi) in row_r.iter().zip(row_c).zip(w) {
                if *wi != 0.0 {
                    s += x * y.conj() * *wi;
                }
            }
            if r == c {
                s.im = 0.0;
            }
            a[(r, c)] = s;
            a[(c, r)] = s.conj();
        }
    }
    a
}

/// Turns `A` into `H̃·A·H̃ + noise·H̃ + jitter` in place.
fn finish_cvv(a: &mut CMatrix, ht: &[f64], noise: f64, jitter: f64) {
    let n = a.rows();
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] *= ht[r] * ht[c];
        }
        a[(r, r)].re += noise * ht[r];
    }
    add_jitter(a, jitter);
}

/// Result of the symbol-wise posterior computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    /// PMF over the full symbol set (uniform prior).
    pub pmf: Vec<f64>,
    pub mean: C64,
    pub mse: f64,
}

/// Posterior from the sufficient statistics `β = h^H·C^{-1}·y_ic` and
/// `γ = h^H·C^{-1}·h`.
pub fn posterior_from_stats(beta: C64, gamma: f64, alphabet: &Alphabet) -> Posterior {
    let symbols = alphabet.symbols();
    let logs: Vec<f64> = symbols
        .iter()
        .map(|s| 2.0 * (s.conj() * beta).re - s.norm_sqr() * gamma)
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pmf: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|p| *p /= total);
    let mean: C64 = symbols.iter().zip(&pmf).map(|(s, p)| s * *p).sum();
    let mse = symbols
        .iter()
        .zip(&pmf)
        .map(|(s, p)| (s - mean).norm_sqr() * p)
        .sum::<f64>()
        .max(0.0);
    Posterior { pmf, mean, mse }
}

/// Posterior PMF, mean and conditional MSE of symbol `k` under the Gaussian
/// interference-plus-noise model with covariance `c_vv`.
pub fn sic_posterior(
    model: &SystemModel,
    y_ic: &[C64],
    c_vv: &CMatrix,
    k: usize,
    alphabet: &Alphabet,
) -> Result<Posterior> {
    let chol = Cholesky::factor(c_vv).map_err(|e| {
        Error::Numeric(format!("interference covariance of symbol {k} is ill-conditioned: {e}"))
    })?;
    let h_k = model.h_col(k);
    let ch = chol.solve_vec(&h_k)?;
    let beta = ch.dot(y_ic);
    let gamma = ch.dot(&h_k).re;
    Ok(posterior_from_stats(beta, gamma, alphabet))
}

/// Iterative soft interference cancellation for one channel and noise
/// level, with the first-iteration filters cached across blocks.
#[derive(Clone, Debug)]
pub struct IterativeSic {
    model: SystemModel,
    alphabet: Alphabet,
    sigma_n2: f64,
    sigma_d2: f64,
    cfg: SicConfig,
    /// `C_k^{-1}·h_k` and `h_k^H·C_k^{-1}·h_k` for the first iteration.
    first: Vec<(CVector, f64)>,
}

impl IterativeSic {
    pub fn new(
        model: &SystemModel,
        alphabet: &Alphabet,
        sigma_n2: f64,
        sigma_d2: f64,
        cfg: SicConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = vec![sigma_d2; model.n_d()];
        let first = (0..model.n_d())
            .map(|k| {
                let c = sic_cvv(model, &e, k, sigma_n2, sigma_d2, true, cfg.jitter);
                solve_filter(model, &c, k)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.clone(),
            alphabet: alphabet.clone(),
            sigma_n2,
            sigma_d2,
            cfg,
            first,
        })
    }

    /// Runs all iterations; returns hard decisions and the final soft state.
    pub fn run(&self, y: &[C64]) -> Result<(CVector, SoftState)> {
        let model = &self.model;
        let n_d = model.n_d();
        if y.len() != model.n_prime() {
            return Err(Error::Dimension(format!(
                "received vector of length {}, expected {}",
                y.len(),
                model.n_prime()
            )));
        }
        let mut state = SoftState::prior(n_d, self.sigma_d2);
        let noise = model.n_prime() as f64 * self.sigma_n2;
        for q in 0..self.cfg.q {
            let hd = model.h().matvec(&state.d_hat)?;
            let base: CVector = CVector(y.to_vec()).sub(&hd);
            let a_full = (q > 0).then(|| interference_gram(model.m(), &state.e));
            let mut next = SoftState {
                d_hat: CVector::zeros(n_d),
                e: vec![0.0; n_d],
                pmf: Some(Vec::with_capacity(n_d)),
            };
            for k in 0..n_d {
                let h_k = model.h_col(k);
                let mut y_ic = base.clone();
                y_ic.axpy(state.d_hat[k], &h_k);
                let computed;
                let (ch, gamma) = match &a_full {
                    None => (&self.first[k].0, self.first[k].1),
                    Some(a) => {
                        let mut c = a.clone();
                        let m = model.m();
                        let ek = state.e[k];
                        for r in 0..c.rows() {
                            for s in 0..c.cols() {
                                c[(r, s)] -= m[(r, k)] * m[(s, k)].conj() * ek;
                            }
                            c[(r, r)].im = 0.0;
                        }
                        finish_cvv(&mut c, model.h_tilde(), noise, self.cfg.jitter);
                        computed = solve_filter(model, &c, k)?;
                        (&computed.0, computed.1)
                    }
                };
                let beta = ch.dot(&y_ic);
                let post = posterior_from_stats(beta, gamma, &self.alphabet);
                next.d_hat[k] = post.mean;
                next.e[k] = post.mse;
                if let Some(p) = next.pmf.as_mut() {
                    p.push(post.pmf);
                }
            }
            state = next;
        }
        let hard = CVector(state.d_hat.iter().map(|&z| self.alphabet.decide(z)).collect());
        Ok((hard, state))
    }
}

fn solve_filter(model: &SystemModel, c: &CMatrix, k: usize) -> Result<(CVector, f64)> {
    let chol = Cholesky::factor(c).map_err(|e| {
        Error::Numeric(format!("interference covariance of symbol {k} is ill-conditioned: {e}"))
    })?;
    let h_k = model.h_col(k);
    let ch = chol.solve_vec(&h_k)?;
    let gamma = ch.dot(&h_k).re;
    Ok((ch, gamma))
}

/// Iterative SIC of a single vector.
pub fn iterative_sic(
    model: &SystemModel,
    y: &[C64],
    sigma_n2: f64,
    sigma_d2: f64,
    alphabet: &Alphabet,
    cfg: SicConfig,
) -> Result<(CVector, SoftState)> {
    IterativeSic::new(model, alphabet, sigma_n2, sigma_d2, cfg)?.run(y)
}
