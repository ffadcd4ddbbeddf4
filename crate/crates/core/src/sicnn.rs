//! Unfolded soft interference cancellation networks.
//!
//! Every stage computes soft symbol statistics from the previous stage's
//! PMFs, cancels the interference of all other symbols and estimates new
//! per-component PMFs:
//!
//! * v1 estimates a diagonal precision matrix with FCNN1 from
//!   `g_k = [σ_n², H̃, Re a_k, Im a_k]` and feeds the three sufficient
//!   statistics of the Gaussian likelihood to FCNN2.
//! * v2 feeds the scaled cancelled vector, channel column and symbol MSEs
//!   to a single FCNN.
//!
//! A batch holds `B` received vectors, each with its own channel; rows of
//! the per-stage matrices are laid out as `b·N_d + k`, so batch-norm
//! statistics of a stage are shared over all symbols of all vectors.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{read_u32, read_u64, write_u64, ForwardCache, Gradients, Mode, Network};
use crate::numerics::{dft_matrix, CMatrix, CVector, SimRng, C64};
use crate::system::{Alphabet, GuardMode, Modulation, SystemModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    V1,
    V2,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("sicnn") {
            "v1" | "1" => Ok(Variant::V1),
            "v2" | "2" => Ok(Variant::V2),
            _ => Err(Error::InvalidParameter(format!("unknown SICNN variant `{s}` (v1|v2)"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SicnnConfig {
    pub variant: Variant,
    /// One parameter set reused by every stage.
    pub shared: bool,
    /// Number of stages `Q`.
    pub q: usize,
    /// FCNN1 hidden layers and width (v1).
    pub n_l_c: usize,
    pub n_h_c: usize,
    /// FCNN2 hidden layers and width (v1).
    pub n_l_p: usize,
    pub n_h_p: usize,
    /// Hidden layers and width of the single FCNN (v2).
    pub n_l: usize,
    pub n_h: usize,
    /// Stop gradients between stages.
    pub detach: bool,
}

/// Table of tuned hyperparameters per setup, together with the learning
/// rates for the per-stage and shared variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub config: SicnnConfig,
    pub learning_rate: f64,
}

impl SicnnConfig {
    pub fn v1(q: usize, n_l_c: usize, n_h_c: usize, n_l_p: usize, n_h_p: usize) -> Self {
        Self {
            variant: Variant::V1,
            shared: false,
            q,
            n_l_c,
            n_h_c,
            n_l_p,
            n_h_p,
            n_l: 0,
            n_h: 0,
            detach: false,
        }
    }

    pub fn v2(q: usize, n_l: usize, n_h: usize) -> Self {
        Self {
            variant: Variant::V2,
            shared: false,
            q,
            n_l_c: 0,
            n_h_c: 0,
            n_l_p: 0,
            n_h_p: 0,
            n_l,
            n_h,
            detach: false,
        }
    }

    /// Tuned hyperparameters for a guard mode, alphabet and variant.
    pub fn preset(mode: GuardMode, modulation: Modulation, variant: Variant, shared: bool) -> Result<Preset> {
        use GuardMode::*;
        use Modulation::*;
        let (config, lr, lr_red) = match (mode, modulation, variant) {
            (UniqueWord, Qpsk, Variant::V1) => (Self::v1(7, 3, 70, 2, 10), 6e-4, 3e-5),
            (UniqueWord, Qpsk, Variant::V2) => (Self::v2(7, 4, 200), 5e-4, 1e-4),
            (CyclicPrefix, Qpsk, Variant::V1) => (Self::v1(7, 3, 100, 2, 10), 1e-3, 7e-5),
            (CyclicPrefix, Qpsk, Variant::V2) => (Self::v2(7, 4, 250), 9e-4, 1e-4),
            (UniqueWord, Qam16, Variant::V1) => (Self::v1(7, 3, 70, 3, 20), 9e-4, 4e-5),
            (UniqueWord, Qam16, Variant::V2) => (Self::v2(7, 4, 230), 1e-3, 2.5e-4),
            (CyclicPrefix, Qam16, _) => {
                return Err(Error::InvalidParameter("no tuned hyperparameters for CP with 16-QAM".into()))
            }
        };
        Ok(Preset {
            config: Self { shared, ..config },
            learning_rate: if shared { lr_red } else { lr },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self.variant {
            Variant::V1 => self.n_l_c == 0 || self.n_h_c == 0 || self.n_l_p == 0 || self.n_h_p == 0,
            Variant::V2 => self.n_l == 0 || self.n_h == 0,
        };
        if self.q == 0 || bad {
            return Err(Error::InvalidParameter(format!(
                "SICNN needs Q >= 1 and nonzero layer counts and widths: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Soft statistics of one symbol from its component PMFs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftStats {
    pub d: C64,
    pub e_re: f64,
    pub e_im: f64,
    /// `√(e_re² + e_im²)`.
    pub e: f64,
}

fn component_stats(p: &[f64], levels: &[f64]) -> (f64, f64) {
    let d: f64 = p.iter().zip(levels).map(|(p, s)| p * s).sum();
    let e: f64 = p.iter().zip(levels).map(|(p, s)| p * (s - d) * (s - d)).sum();
    (d, e.max(0.0))
}

/// Posterior mean and MSEs from a `[p_re | p_im]` row.
pub fn soft_stats(p: &[f64], alphabet: &Alphabet) -> SoftStats {
    let levels = alphabet.levels();
    let l = levels.len();
    let (dr, er) = component_stats(&p[..l], levels);
    let (di, ei) = component_stats(&p[l..2 * l], levels);
    SoftStats {
        d: C64::new(dr, di),
        e_re: er,
        e_im: ei,
        e: (er * er + ei * ei).sqrt(),
    }
}

/// `a_k = Σ_{i≠k} e_i·conj(m_i)`.
pub fn build_a_k(e: &[f64], k: usize, m: &CMatrix) -> Result<CVector> {
    if e.len() != m.cols() || k >= m.cols() {
        return Err(Error::Dimension(format!(
            "{} MSEs and symbol {k} for {} columns",
            e.len(),
            m.cols()
        )));
    }
    Ok(CVector(
        (0..m.rows())
            .map(|j| {
                m.row(j)
                    .iter()
                    .zip(e)
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .map(|(_, (v, ei))| v.conj() * *ei)
                    .sum()
            })
            .collect(),
    ))
}

/// Per-component argmax of a `[p_re | p_im]` row (ties to the lowest index).
pub fn decide_row(p: &[f64], alphabet: &Alphabet) -> C64 {
    let levels = alphabet.levels();
    let l = levels.len();
    let argmax = |s: &[f64]| {
        let mut best = 0;
        for i in 1..s.len() {
            if s[i] > s[best] {
                best = i;
            }
        }
        best
    };
    C64::new(levels[argmax(&p[..l])], levels[argmax(&p[l..2 * l])])
}

/// Received vectors with their (already normalized) channels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SicnnBatch {
    pub n_prime: usize,
    /// `B·N'` received samples.
    pub y: Vec<C64>,
    /// `B·N'` channel diagonals.
    pub h_tilde: Vec<f64>,
    pub sigma_n2: Vec<f64>,
}

impl SicnnBatch {
    pub fn new(n_prime: usize) -> Self {
        Self { n_prime, ..Default::default() }
    }

    pub fn push(&mut self, y: &[C64], h_tilde: &[f64], sigma_n2: f64) -> Result<()> {
        if y.len() != self.n_prime || h_tilde.len() != self.n_prime {
            return Err(Error::Dimension(format!(
                "vector of length {} / channel of length {} in a batch of N' = {}",
                y.len(),
                h_tilde.len(),
                self.n_prime
            )));
        }
        self.y.extend_from_slice(y);
        self.h_tilde.extend_from_slice(h_tilde);
        self.sigma_n2.push(sigma_n2);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sigma_n2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_n2.is_empty()
    }
}

#[derive(Clone, Debug)]
enum StageCache {
    V1 {
        p_in: Array2<f64>,
        stats: Vec<SoftStats>,
        y_ic: Vec<C64>,
        o: Array2<f64>,
        norm: Vec<f64>,
        rho2: Vec<f64>,
        beta: Vec<C64>,
        gamma: Vec<f64>,
        c1: ForwardCache,
        c2: ForwardCache,
    },
    V2 {
        p_in: Array2<f64>,
        stats: Vec<SoftStats>,
        y_ic: Vec<C64>,
        norm: Vec<f64>,
        rho: Vec<f64>,
        c: ForwardCache,
    },
}

/// Stage outputs of a forward pass, plus what backpropagation needs in
/// training mode.
#[derive(Clone, Debug)]
pub struct SicnnForward {
    /// One `(B·N_d)×(2|S'|)` PMF matrix per stage.
    pub outputs: Vec<Array2<f64>>,
    caches: Vec<StageCache>,
    /// `H` per vector, `B·N'·N_d`, row-major per vector.
    h: Vec<C64>,
}

/// Per-symbol view of one stage output.
#[derive(Clone, Debug, PartialEq)]
pub struct StageIO {
    pub p_re: Vec<Vec<f64>>,
    pub p_im: Vec<Vec<f64>>,
    pub d_hat: CVector,
    pub e_re: Vec<f64>,
    pub e_im: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SicnnModel {
    cfg: SicnnConfig,
    alphabet: Alphabet,
    mode: GuardMode,
    n_d: usize,
    n_g: usize,
    n_prime: usize,
    m: CMatrix,
    nets: Vec<Network>,
}

impl SicnnModel {
    pub fn new(
        cfg: SicnnConfig,
        alphabet: &Alphabet,
        mode: GuardMode,
        n_d: usize,
        n_g: usize,
        rng: &mut SimRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_prime = match mode {
            GuardMode::UniqueWord => n_d + n_g,
            GuardMode::CyclicPrefix => n_d,
        };
        let m = Self::m_matrix(n_d, n_prime)?;
        let l = alphabet.levels().len();
        let sets = if cfg.shared { 1 } else { cfg.q };
        let mut nets = Vec::new();
        for _ in 0..sets {
            match cfg.variant {
                Variant::V1 => {
                    nets.push(Network::fcnn(3 * n_prime + 1, cfg.n_l_c, cfg.n_h_c, n_prime, 0, None, rng)?);
                    nets.push(Network::fcnn(3, cfg.n_l_p, cfg.n_h_p, 2 * l, 0, Some(vec![l, l]), rng)?);
                }
                Variant::V2 => {
                    nets.push(Network::fcnn(4 * n_prime + 3, cfg.n_l, cfg.n_h, 2 * l, 3, Some(vec![l, l]), rng)?);
                }
            }
        }
        Ok(Self {
            cfg,
            alphabet: alphabet.clone(),
            mode,
            n_d,
            n_g,
            n_prime,
            m,
            nets,
        })
    }

    fn m_matrix(n_d: usize, n_prime: usize) -> Result<CMatrix> {
        Ok(dft_matrix(n_prime)?.select_columns(&(0..n_d).collect::<Vec<_>>()))
    }

    /// Builds a model shaped for `system`.
    pub fn for_system(cfg: SicnnConfig, alphabet: &Alphabet, system: &SystemModel, rng: &mut SimRng) -> Result<Self> {
        Self::new(cfg, alphabet, system.mode(), system.n_d(), system.n_g(), rng)
    }

    pub fn config(&self) -> &SicnnConfig {
        &self.cfg
    }

    pub fn set_detach(&mut self, detach: bool) {
        self.cfg.detach = detach;
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn mode(&self) -> GuardMode {
        self.mode
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn n_g(&self) -> usize {
        self.n_g
    }

    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    pub fn networks(&self) -> &[Network] {
        &self.nets
    }

    fn nets_per_stage(&self) -> usize {
        match self.cfg.variant {
            Variant::V1 => 2,
            Variant::V2 => 1,
        }
    }

    /// Index of the first network used by stage `q`.
    fn stage_net(&self, q: usize) -> usize {
        (if self.cfg.shared { 0 } else { q }) * self.nets_per_stage()
    }

    /// Networks used by stage `q`, for identity checks.
    pub fn stage_networks(&self, q: usize) -> &[Network] {
        let i = self.stage_net(q);
        &self.nets[i..i + self.nets_per_stage()]
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.nets.iter().flat_map(|n| n.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets.iter_mut().flat_map(|n| n.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.param_count()).sum()
    }

    fn channel_columns(&self, batch: &SicnnBatch) -> Vec<C64> {
        let (np, nd) = (self.n_prime, self.n_d);
        let mut h = vec![C64::new(0.0, 0.0); batch.len() * np * nd];
        for b in 0..batch.len() {
            for j in 0..np {
                let ht = batch.h_tilde[b * np + j];
                let row = self.m.row(j);
                for k in 0..nd {
                    h[(b * np + j) * nd + k] = row[k] * ht;
                }
            }
        }
        h
    }

    /// Runs all stages. Training mode records caches for
    /// [`SicnnModel::backward`].
    pub fn forward(&self, batch: &SicnnBatch, mode: Mode) -> Result<SicnnForward> {
        if batch.n_prime != self.n_prime {
            return Err(Error::Dimension(format!(
                "batch has N' = {}, model expects {}",
                batch.n_prime, self.n_prime
            )));
        }
        let (np, nd) = (self.n_prime, self.n_d);
        let bsz = batch.len();
        let rows = bsz * nd;
        let l = self.alphabet.levels().len();
        let h = self.channel_columns(batch);
        let mut p = Array2::from_elem((rows, 2 * l), 1.0 / l as f64);
        let mut outputs = Vec::with_capacity(self.cfg.q);
        let mut caches = Vec::new();
        for q in 0..self.cfg.q {
            let stats: Vec<SoftStats> = p
                .rows()
                .into_iter()
                .map(|r| soft_stats(r.as_slice().expect("standard layout"), &self.alphabet))
                .collect();
            // Interference cancellation.
            let mut y_ic = vec![C64::new(0.0, 0.0); rows * np];
            for b in 0..bsz {
                let mut base: Vec<C64> = batch.y[b * np..(b + 1) * np].to_vec();
                for j in 0..np {
                    let hrow = &h[(b * np + j) * nd..(b * np + j + 1) * nd];
                    for k in 0..nd {
                        base[j] -= hrow[k] * stats[b * nd + k].d;
                    }
                }
                for k in 0..nd {
                    let dk = stats[b * nd + k].d;
                    let dst = &mut y_ic[(b * nd + k) * np..(b * nd + k + 1) * np];
                    for j in 0..np {
                        dst[j] = base[j] + h[(b * np + j) * nd + k] * dk;
                    }
                }
            }
            let norm: Vec<f64> = (0..rows)
                .map(|r| y_ic[r * np..(r + 1) * np].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
                .collect();
            let ni = self.stage_net(q);
            match self.cfg.variant {
                Variant::V1 => {
                    let mut g = Array2::zeros((rows, 3 * np + 1));
                    for b in 0..bsz {
                        let mut full = vec![C64::new(0.0, 0.0); np];
                        for j in 0..np {
                            let mrow = self.m.row(j);
                            for i in 0..nd {
                                full[j] += mrow[i].conj() * stats[b * nd + i].e;
                            }
                        }
                        for k in 0..nd {
                            let r = b * nd + k;
                            let ek = stats[r].e;
                            g[(r, 0)] = batch.sigma_n2[b];
                            for j in 0..np {
                                g[(r, 1 + j)] = batch.h_tilde[b * np + j];
                                let a = full[j] - self.m[(j, k)].conj() * ek;
                                g[(r, 1 + np + j)] = a.re;
                                g[(r, 1 + 2 * np + j)] = a.im;
                            }
                        }
                    }
                    let (o, c1) = self.nets[ni].forward(&g, mode)?;
                    let mut s = Array2::zeros((rows, 3));
                    let mut rho2 = vec![0.0; rows];
                    let mut beta = vec![C64::new(0.0, 0.0); rows];
                    let mut gamma = vec![0.0; rows];
                    for b in 0..bsz {
                        for k in 0..nd {
                            let r = b * nd + k;
                            let yr = &y_ic[r * np..(r + 1) * np];
                            let mut be = C64::new(0.0, 0.0);
                            let mut ga = 0.0;
                            for j in 0..np {
                                let c = o[(r, j)] * o[(r, j)];
                                let hj = h[(b * np + j) * nd + k];
                                be += hj.conj() * yr[j] * c;
                                ga += c * hj.norm_sqr();
                            }
                            let rr = if norm[r] > 0.0 { 1.0 / norm[r] } else { 1.0 };
                            rho2[r] = rr;
                            beta[r] = be;
                            gamma[r] = ga;
                            s[(r, 0)] = rr * be.re;
                            s[(r, 1)] = rr * be.im;
                            s[(r, 2)] = rr * ga;
                        }
                    }
                    let (pout, c2) = self.nets[ni + 1].forward(&s, mode)?;
                    if mode == Mode::Train {
                        caches.push(StageCache::V1 {
                            p_in: p,
                            stats,
                            y_ic,
                            o,
                            norm,
                            rho2,
                            beta,
                            gamma,
                            c1,
                            c2,
                        });
                    }
                    p = pout;
                }
                Variant::V2 => {
                    let mut z = Array2::zeros((rows, 4 * np + 3));
                    let mut rho = vec![0.0; rows];
                    for b in 0..bsz {
                        for k in 0..nd {
                            let r = b * nd + k;
                            let rr = if norm[r] > 0.0 { norm[r].sqrt().recip() } else { 1.0 };
                            rho[r] = rr;
                            for j in 0..np {
                                let y = y_ic[r * np + j];
                                let hj = h[(b * np + j) * nd + k];
                                z[(r, j)] = rr * y.re;
                                z[(r, np + j)] = rr * y.im;
                                z[(r, 2 * np + j)] = rr * hj.re;
                                z[(r, 3 * np + j)] = rr * hj.im;
                            }
                            z[(r, 4 * np)] = stats[r].e_re;
                            z[(r, 4 * np + 1)] = stats[r].e_im;
                            z[(r, 4 * np + 2)] = rr * rr * batch.sigma_n2[b];
                        }
                    }
                    let (pout, c) = self.nets[ni].forward(&z, mode)?;
                    if mode == Mode::Train {
                        caches.push(StageCache::V2 { p_in: p, stats, y_ic, norm, rho, c });
                    }
                    p = pout;
                }
            }
            outputs.push(p.clone());
        }
        Ok(SicnnForward { outputs, caches, h })
    }

    /// Folds the batch statistics of a training pass into every batch-norm
    /// layer, stage by stage.
    pub fn update_running_stats(&mut self, fwd: &SicnnForward) {
        for (q, c) in fwd.caches.iter().enumerate() {
            let ni = self.stage_net(q);
            match c {
                StageCache::V1 { c1, c2, .. } => {
                    self.nets[ni].update_running_stats(c1);
                    self.nets[ni + 1].update_running_stats(c2);
                }
                StageCache::V2 { c, .. } => self.nets[ni].update_running_stats(c),
            }
        }
    }

    /// Gradients of the loss with respect to all parameters, given the loss
    /// gradient at each stage output.
    pub fn backward(&self, batch: &SicnnBatch, fwd: &SicnnForward, stage_grads: &[Array2<f64>]) -> Result<Gradients> {
        if fwd.caches.len() != self.cfg.q || stage_grads.len() != self.cfg.q {
            return Err(Error::InvalidParameter(
                "backward needs a training-mode forward pass and one gradient per stage".into(),
            ));
        }
        let (np, nd) = (self.n_prime, self.n_d);
        let bsz = batch.len();
        let rows = bsz * nd;
        let levels = self.alphabet.levels();
        let l = levels.len();
        let h = &fwd.h;
        let mut net_grads: Vec<Gradients> = self.nets.iter().map(Gradients::zeros_like).collect();
        let mut carry: Option<Array2<f64>> = None;
        for q in (0..self.cfg.q).rev() {
            let mut dp = stage_grads[q].clone();
            if let Some(c) = carry.take() {
                dp += &c;
            }
            let ni = self.stage_net(q);
            let need_input = q > 0 && !self.cfg.detach;
            // Gradients w.r.t. y_ic (complex convention ∂/∂Re + i∂/∂Im), the
            // component MSEs and the combined MSE of each row.
            let mut g_y = vec![C64::new(0.0, 0.0); rows * np];
            let mut de_re = vec![0.0; rows];
            let mut de_im = vec![0.0; rows];
            let mut de = vec![0.0; rows];
            let (stats, p_in) = match &fwd.caches[q] {
                StageCache::V1 { p_in, stats, y_ic, o, norm, rho2, beta, gamma, c1, c2 } => {
                    let (g2, ds) = self.nets[ni + 1].backward(c2, &dp)?;
                    net_grads[ni + 1].add_assign(&g2);
                    let mut d_o = Array2::zeros((rows, np));
                    for b in 0..bsz {
                        for k in 0..nd {
                            let r = b * nd + k;
                            let (ds0, ds1, ds2) = (ds[(r, 0)], ds[(r, 1)], ds[(r, 2)]);
                            let rr = rho2[r];
                            let yr = &y_ic[r * np..(r + 1) * np];
                            let gy = &mut g_y[r * np..(r + 1) * np];
                            for j in 0..np {
                                let c = o[(r, j)] * o[(r, j)];
                                let hj = h[(b * np + j) * nd + k];
                                let hy = hj.conj() * yr[j];
                                gy[j] += hj * C64::new(ds0, ds1) * (rr * c);
                                let dc = rr * (ds0 * hy.re + ds1 * hy.im + ds2 * hj.norm_sqr());
                                d_o[(r, j)] = 2.0 * o[(r, j)] * dc;
                            }
                            if norm[r] > 0.0 {
                                let drho2 = ds0 * beta[r].re + ds1 * beta[r].im + ds2 * gamma[r];
                                let f = -drho2 / (norm[r] * norm[r] * norm[r]);
                                for j in 0..np {
                                    gy[j] += yr[j] * f;
                                }
                            }
                        }
                    }
                    let (g1, dg) = self.nets[ni].backward(c1, &d_o)?;
                    net_grads[ni].add_assign(&g1);
                    if need_input {
                        for b in 0..bsz {
                            let mut w = vec![C64::new(0.0, 0.0); np];
                            for k in 0..nd {
                                let r = b * nd + k;
                                for j in 0..np {
                                    w[j] += C64::new(dg[(r, 1 + np + j)], dg[(r, 1 + 2 * np + j)]);
                                }
                            }
                            for i in 0..nd {
                                let r = b * nd + i;
                                let mut acc = 0.0;
                                for j in 0..np {
                                    let ga = C64::new(dg[(r, 1 + np + j)], dg[(r, 1 + 2 * np + j)]);
                                    acc += ((w[j] - ga).conj() * self.m[(j, i)].conj()).re;
                                }
                                de[r] += acc;
                            }
                        }
                    }
                    (stats, p_in)
                }
                StageCache::V2 { p_in, stats, y_ic, norm, rho, c } => {
                    let (g, dz) = self.nets[ni].backward(c, &dp)?;
                    net_grads[ni].add_assign(&g);
                    for b in 0..bsz {
                        for k in 0..nd {
                            let r = b * nd + k;
                            let rr = rho[r];
                            let yr = &y_ic[r * np..(r + 1) * np];
                            let gy = &mut g_y[r * np..(r + 1) * np];
                            let mut drho = 2.0 * rr * batch.sigma_n2[b] * dz[(r, 4 * np + 2)];
                            for j in 0..np {
                                let hj = h[(b * np + j) * nd + k];
                                let (dyr, dyi) = (dz[(r, j)], dz[(r, np + j)]);
                                gy[j] += C64::new(dyr, dyi) * rr;
                                drho += dyr * yr[j].re
                                    + dyi * yr[j].im
                                    + dz[(r, 2 * np + j)] * hj.re
                                    + dz[(r, 3 * np + j)] * hj.im;
                            }
                            if norm[r] > 0.0 {
                                let n = norm[r];
                                let f = drho * (-0.5) * n.powf(-1.5) / n;
                                for j in 0..np {
                                    gy[j] += yr[j] * f;
                                }
                            }
                            de_re[r] += dz[(r, 4 * np)];
                            de_im[r] += dz[(r, 4 * np + 1)];
                        }
                    }
                    (stats, p_in)
                }
            };
            if !need_input {
                continue;
            }
            // Cancellation: y_ic,k = y − Σ_{i≠k} h_i d_i.
            let mut dd = vec![C64::new(0.0, 0.0); rows];
            for b in 0..bsz {
                let mut v = vec![C64::new(0.0, 0.0); np];
                for k in 0..nd {
                    let r = b * nd + k;
                    for j in 0..np {
                        v[j] += g_y[r * np + j];
                    }
                }
                for i in 0..nd {
                    let r = b * nd + i;
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..np {
                        acc += h[(b * np + j) * nd + i].conj() * (v[j] - g_y[r * np + j]);
                    }
                    dd[r] = -acc;
                }
            }
            let mut dp_in = Array2::zeros((rows, 2 * l));
            for r in 0..rows {
                let st = stats[r];
                if st.e > 0.0 {
                    de_re[r] += de[r] * st.e_re / st.e;
                    de_im[r] += de[r] * st.e_im / st.e;
                }
                for (comp, (d, dd_c, de_c)) in
                    [(st.d.re, dd[r].re, de_re[r]), (st.d.im, dd[r].im, de_im[r])].into_iter().enumerate()
                {
                    let off = comp * l;
                    let centered: f64 = (0..l).map(|j| (levels[j] - d) * p_in[(r, off + j)]).sum();
                    for j in 0..l {
                        let s = levels[j];
                        dp_in[(r, off + j)] = dd_c * s + de_c * ((s - d) * (s - d) - 2.0 * s * centered);
                    }
                }
            }
            carry = Some(dp_in);
        }
        Ok(Gradients(net_grads.into_iter().flat_map(|g| g.0).collect()))
    }

    /// Stage outputs for a single received vector (inference mode).
    pub fn stage_outputs(&self, y: &[C64], h_tilde: &[f64], sigma_n2: f64) -> Result<Vec<StageIO>> {
        let mut batch = SicnnBatch::new(self.n_prime);
        batch.push(y, h_tilde, sigma_n2)?;
        let fwd = self.forward(&batch, Mode::Infer)?;
        let l = self.alphabet.levels().len();
        Ok(fwd
            .outputs
            .iter()
            .map(|p| {
                let mut io = StageIO {
                    p_re: Vec::new(),
                    p_im: Vec::new(),
                    d_hat: CVector::zeros(self.n_d),
                    e_re: Vec::new(),
                    e_im: Vec::new(),
                    e: Vec::new(),
                };
                for (k, row) in p.rows().into_iter().enumerate() {
                    let row = row.as_slice().expect("standard layout");
                    let st = soft_stats(row, &self.alphabet);
                    io.p_re.push(row[..l].to_vec());
                    io.p_im.push(row[l..].to_vec());
                    io.d_hat[k] = st.d;
                    io.e_re.push(st.e_re);
                    io.e_im.push(st.e_im);
                    io.e.push(st.e);
                }
                io
            })
            .collect())
    }

    /// Hard decisions from the last stage for every vector of a batch.
    pub fn decide(&self, batch: &SicnnBatch) -> Result<Vec<CVector>> {
        let fwd = self.forward(batch, Mode::Infer)?;
        let last = fwd.outputs.last().expect("Q >= 1");
        Ok((0..batch.len())
            .map(|b| {
                CVector(
                    (0..self.n_d)
                        .map(|k| {
                            let row = last.row(b * self.n_d + k);
                            decide_row(row.as_slice().expect("standard layout"), &self.alphabet)
                        })
                        .collect(),
                )
            })
            .collect())
    }

    /// Writes a header (variant, sharing, `Q`, alphabet, dimensions and
    /// hyperparameters) followed by every network checkpoint.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SICN")?;
        w.write_all(&1u32.to_le_bytes())?;
        let c = &self.cfg;
        let header = [
            match c.variant {
                Variant::V1 => 1,
                Variant::V2 => 2,
            },
            c.shared as u64,
            c.q as u64,
            match self.alphabet.modulation() {
                Modulation::Qpsk => 1,
                Modulation::Qam16 => 2,
            },
            match self.mode {
                GuardMode::UniqueWord => 1,
                GuardMode::CyclicPrefix => 2,
            },
            self.n_d as u64,
            self.n_g as u64,
            c.n_l_c as u64,
            c.n_h_c as u64,
            c.n_l_p as u64,
            c.n_h_p as u64,
            c.n_l as u64,
            c.n_h as u64,
            c.detach as u64,
        ];
        for v in header {
            write_u64(w, v)?;
        }
        for n in &self.nets {
            n.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SICN" {
            return Err(Error::Numeric("not a SICNN checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Numeric(format!("unsupported SICNN checkpoint version {version}")));
        }
        let mut h = [0u64; 14];
        for v in h.iter_mut() {
            *v = read_u64(r)?;
        }
        let variant = match h[0] {
            1 => Variant::V1,
            2 => Variant::V2,
            v => return Err(Error::Numeric(format!("unknown variant code {v}"))),
        };
        let modulation = match h[3] {
            1 => Modulation::Qpsk,
            2 => Modulation::Qam16,
            v => return Err(Error::Numeric(format!("unknown alphabet code {v}"))),
        };
        let mode = match h[4] {
            1 => GuardMode::UniqueWord,
            2 => GuardMode::CyclicPrefix,
            v => return Err(Error::Numeric(format!("unknown guard mode code {v}"))),
        };
        let cfg = SicnnConfig {
            variant,
            shared: h[1] != 0,
            q: h[2] as usize,
            n_l_c: h[7] as usize,
            n_h_c: h[8] as usize,
            n_l_p: h[9] as usize,
            n_h_p: h[10] as usize,
            n_l: h[11] as usize,
            n_h: h[12] as usize,
            detach: h[13] != 0,
        };
        cfg.validate()?;
        let (n_d, n_g) = (h[5] as usize, h[6] as usize);
        let n_prime = match mode {
            GuardMode::UniqueWord => n_d + n_g,
            GuardMode::CyclicPrefix => n_d,
        };
        let per = match variant {
            Variant::V1 => 2,
            Variant::V2 => 1,
        };
        let sets = if cfg.shared { 1 } else { cfg.q };
        let nets = (0..sets * per).map(|_| Network::read_from(r)).collect::<Result<Vec<_>>>()?;
        let l = Alphabet::new(modulation).levels().len();
        for (i, n) in nets.iter().enumerate() {
            let (input, output) = match (variant, i % per) {
                (Variant::V1, 0) => (3 * n_prime + 1, n_prime),
                (Variant::V1, _) => (3, 2 * l),
                (Variant::V2, _) => (4 * n_prime + 3, 2 * l),
            };
            if n.input_dim() != input || n.output_dim() != output {
                return Err(Error::Numeric("checkpoint networks do not match the header".into()));
            }
        }
        Ok(Self {
            cfg,
            alphabet: Alphabet::new(modulation),
            mode,
            n_d,
            n_g,
            n_prime,
            m: Self::m_matrix(n_d, n_prime)?,
            nets,
        })
    }
}
