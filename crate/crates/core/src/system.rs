//! SC-FDE block transmission model for unique-word (UW) and cyclic-prefix
//! (CP) guard intervals, modulation alphabets and block simulation.
//!
//! Both guard modes reduce to `y = H̃·M·d + w` with a real nonnegative
//! diagonal `H̃` and `w ~ CN(0, N'·σ_n²·H̃)`:
//!
//! * UW: `N' = N_d + N_g`, `M` holds the first `N_d` columns of `F_N` and the
//!   known UW contribution `H̃·M'·u` has already been subtracted.
//! * CP: `N' = N_d` and `M = F_{N_d}`.

use std::fmt;
use std::str::FromStr;

use crate::channel::{composite_diag, sample_channel, ChannelParams, ChannelTaps};
use crate::error::{Error, Result};
use crate::numerics::{dft_matrix, gauss_cn_diag, CMatrix, CVector, SimRng, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuardMode {
    UniqueWord,
    CyclicPrefix,
}

impl fmt::Display for GuardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuardMode::UniqueWord => "uw",
            GuardMode::CyclicPrefix => "cp",
        })
    }
}

impl FromStr for GuardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uw" => Ok(GuardMode::UniqueWord),
            "cp" => Ok(GuardMode::CyclicPrefix),
            _ => Err(Error::InvalidParameter(format!("unknown guard mode `{s}` (uw|cp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modulation {
    Qpsk,
    Qam16,
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "16qam",
        })
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "qpsk" => Ok(Modulation::Qpsk),
            "16qam" | "qam16" => Ok(Modulation::Qam16),
            _ => Err(Error::InvalidParameter(format!(
                "unknown alphabet `{s}` (qpsk|16qam)"
            ))),
        }
    }
}

/// Square QAM alphabet with unit symbol variance and per-component Gray
/// mapping.
///
/// The first half of each symbol's bits selects the real level, the second
/// half the imaginary level. Symbols are numbered `re_index·|S'| + im_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alphabet {
    modulation: Modulation,
    levels: Vec<f64>,
    /// Gray label of each level, most significant bit first.
    labels: Vec<Vec<u8>>,
}

impl Alphabet {
    pub fn new(modulation: Modulation) -> Self {
        match modulation {
            Modulation::Qpsk => {
                let rho = std::f64::consts::FRAC_1_SQRT_2;
                Self {
                    modulation,
                    levels: vec![-rho, rho],
                    labels: vec![vec![0], vec![1]],
                }
            }
            Modulation::Qam16 => {
                let s = 10f64.sqrt().recip();
                Self {
                    modulation,
                    levels: vec![-3.0 * s, -s, s, 3.0 * s],
                    labels: vec![vec![0, 0], vec![0, 1], vec![1, 1], vec![1, 0]],
                }
            }
        }
    }

    pub fn qpsk() -> Self {
        Self::new(Modulation::Qpsk)
    }

    pub fn qam16() -> Self {
        Self::new(Modulation::Qam16)
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    /// Component alphabet `S'`, ascending.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn bits_per_component(&self) -> usize {
        self.labels[0].len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_component()
    }

    pub fn len(&self) -> usize {
        self.levels.len() * self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, index: usize) -> C64 {
        let l = self.levels.len();
        C64::new(self.levels[index / l], self.levels[index % l])
    }

    pub fn symbols(&self) -> Vec<C64> {
        (0..self.len()).map(|i| self.symbol(i)).collect()
    }

    /// `σ_d² = E|d|²`.
    pub fn variance(&self) -> f64 {
        2.0 * self.levels.iter().map(|s| s * s).sum::<f64>() / self.levels.len() as f64
    }

    /// Largest squared distance between two symbols.
    pub fn diameter_sqr(&self) -> f64 {
        let span = self.levels[self.levels.len() - 1] - self.levels[0];
        2.0 * span * span
    }

    /// Level index nearest to `x`; ties go to the lower index.
    pub fn nearest_level(&self, x: f64) -> usize {
        let mut best = 0;
        for (i, &s) in self.levels.iter().enumerate().skip(1) {
            if (x - s).abs() < (x - self.levels[best]).abs() {
                best = i;
            }
        }
        best
    }

    pub fn decide(&self, z: C64) -> C64 {
        C64::new(
            self.levels[self.nearest_level(z.re)],
            self.levels[self.nearest_level(z.im)],
        )
    }

    fn level_from_bits(&self, bits: &[u8]) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l.as_slice() == bits)
            .ok_or_else(|| Error::InvalidParameter(format!("bits {bits:?} are not binary")))
    }

    /// Maps bits to symbols.
    pub fn modulate(&self, bits: &[u8]) -> Result<CVector> {
        let bps = self.bits_per_symbol();
        if bits.len() % bps != 0 {
            return Err(Error::Dimension(format!(
                "{} bits is not a multiple of {bps} bits per symbol",
                bits.len()
            )));
        }
        let half = self.bits_per_component();
        bits.chunks(bps)
            .map(|chunk| {
                let re = self.level_from_bits(&chunk[..half])?;
                let im = self.level_from_bits(&chunk[half..])?;
                Ok(C64::new(self.levels[re], self.levels[im]))
            })
            .collect::<Result<Vec<_>>>()
            .map(CVector)
    }

    /// Nearest-level decision per real/imaginary component, returned as bits.
    pub fn hard_decide(&self, estimates: &[C64]) -> Vec<u8> {
        let mut bits = Vec::with_capacity(estimates.len() * self.bits_per_symbol());
        for z in estimates {
            bits.extend_from_slice(&self.labels[self.nearest_level(z.re)]);
            bits.extend_from_slice(&self.labels[self.nearest_level(z.im)]);
        }
        bits
    }

    /// Bits of component levels given by index.
    pub fn level_bits(&self, level: usize) -> &[u8] {
        &self.labels[level]
    }

    /// Bits of the symbol with the given index.
    pub fn symbol_bits(&self, index: usize) -> Vec<u8> {
        let l = self.levels.len();
        let mut bits = self.labels[index / l].clone();
        bits.extend_from_slice(&self.labels[index % l]);
        bits
    }
}

/// `σ_n² = σ_d² / (log2|S| · 10^(Eb/N0 / 10))`.
pub fn ebn0_to_sigma_n2(ebn0_db: f64, alphabet: &Alphabet) -> f64 {
    alphabet.variance() / (alphabet.bits_per_symbol() as f64 * 10f64.powf(ebn0_db / 10.0))
}

/// Fully assembled system model for one channel realization.
#[derive(Clone, Debug)]
pub struct SystemModel {
    mode: GuardMode,
    n_d: usize,
    n_g: usize,
    n_prime: usize,
    m: CMatrix,
    m_guard: Option<CMatrix>,
    h_tilde: Vec<f64>,
    h: CMatrix,
    uw: Option<CVector>,
}

impl SystemModel {
    /// Builds the model. `uw` defaults to the all-zero word in UW mode and
    /// must be absent (or is ignored) in CP mode.
    pub fn new(
        mode: GuardMode,
        n_d: usize,
        n_g: usize,
        h_tilde: Vec<f64>,
        uw: Option<CVector>,
    ) -> Result<Self> {
        if n_d == 0 {
            return Err(Error::Dimension("N_d must be positive".into()));
        }
        let n_prime = match mode {
            GuardMode::UniqueWord => n_d + n_g,
            GuardMode::CyclicPrefix => n_d,
        };
        if h_tilde.len() != n_prime {
            return Err(Error::Dimension(format!(
                "H̃ has {} entries, expected N' = {n_prime}",
                h_tilde.len()
            )));
        }
        if h_tilde.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("H̃ must be finite and nonnegative".into()));
        }
        let f = dft_matrix(n_prime)?;
        let (m, m_guard, uw) = match mode {
            GuardMode::UniqueWord => {
                let uw = uw.unwrap_or_else(|| CVector::zeros(n_g));
                if uw.len() != n_g {
                    return Err(Error::Dimension(format!(
                        "unique word has length {}, expected N_g = {n_g}",
                        uw.len()
                    )));
                }
                let m = f.select_columns(&(0..n_d).collect::<Vec<_>>());
                let mg = f.select_columns(&(n_d..n_prime).collect::<Vec<_>>());
                (m, Some(mg), Some(uw))
            }
            GuardMode::CyclicPrefix => (f, None, None),
        };
        let h = m.scale_rows(&h_tilde);
        Ok(Self {
            mode,
            n_d,
            n_g,
            n_prime,
            m,
            m_guard,
            h_tilde,
            h,
            uw,
        })
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

    /// `M` (`N'×N_d`).
    pub fn m(&self) -> &CMatrix {
        &self.m
    }

    /// `M'`, the UW columns of `F_N` (UW mode only).
    pub fn m_guard(&self) -> Option<&CMatrix> {
        self.m_guard.as_ref()
    }

    pub fn h_tilde(&self) -> &[f64] {
        &self.h_tilde
    }

    /// `H = H̃·M`.
    pub fn h(&self) -> &CMatrix {
        &self.h
    }

    pub fn uw(&self) -> Option<&CVector> {
        self.uw.as_ref()
    }

    /// Column `h_k` of `H`.
    pub fn h_col(&self, k: usize) -> CVector {
        self.h.column(k)
    }

    /// Noise-free received vector `H·d`.
    pub fn noiseless(&self, d: &[C64]) -> Result<CVector> {
        self.h.matvec(d)
    }

    /// Known UW contribution `H̃·M'·u` (zero in CP mode).
    pub fn uw_term(&self) -> CVector {
        match (&self.m_guard, &self.uw) {
            (Some(mg), Some(u)) => {
                let mut t = mg.matvec(u).expect("UW dimensions checked at construction");
                for (v, h) in t.iter_mut().zip(&self.h_tilde) {
                    *v *= *h;
                }
                t
            }
            _ => CVector::zeros(self.n_prime),
        }
    }

    /// Received vector before UW removal, `y_r = H̃·F·[d; u] + w`.
    pub fn received_raw(&self, d: &[C64], noise: &[C64]) -> Result<CVector> {
        let x: Vec<C64> = match &self.uw {
            Some(u) => d.iter().chain(u.iter()).copied().collect(),
            None => d.to_vec(),
        };
        let f = dft_matrix(self.n_prime)?;
        let mut y = f.matvec(&x)?;
        for ((v, h), w) in y.iter_mut().zip(&self.h_tilde).zip(noise) {
            *v = *v * *h + w;
        }
        Ok(y)
    }

    /// Per-entry noise variances `N'·σ_n²·H̃_ii`.
    pub fn noise_variances(&self, sigma_n2: f64) -> Vec<f64> {
        self.h_tilde
            .iter()
            .map(|h| self.n_prime as f64 * sigma_n2 * h)
            .collect()
    }
}

/// Builds a [`SystemModel`]; see [`SystemModel::new`].
pub fn build_system(
    mode: GuardMode,
    n_d: usize,
    n_g: usize,
    h_tilde: Vec<f64>,
    uw: Option<CVector>,
) -> Result<SystemModel> {
    SystemModel::new(mode, n_d, n_g, h_tilde, uw)
}

/// One simulated block.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub bits: Vec<u8>,
    pub d: CVector,
    pub y: CVector,
    pub sigma_n2: f64,
}

/// Simulates the equalizer input for data vector `d`.
///
/// In UW mode the block is generated with the UW appended and the known UW
/// contribution is removed afterwards.
pub fn transmit(model: &SystemModel, d: &[C64], sigma_n2: f64, rng: &mut SimRng) -> Result<CVector> {
    if d.len() != model.n_d() {
        return Err(Error::Dimension(format!(
            "data vector of length {}, expected {}",
            d.len(),
            model.n_d()
        )));
    }
    let noise = gauss_cn_diag(rng, &model.noise_variances(sigma_n2));
    let y = match model.mode() {
        GuardMode::CyclicPrefix => model.noiseless(d)?.add(&noise),
        GuardMode::UniqueWord => {
            let y_r = model.received_raw(d, &noise)?;
            y_r.sub(&model.uw_term())
        }
    };
    Ok(y)
}

impl Transmission {
    /// Draws uniform random bits, modulates and transmits them.
    pub fn draw(
        model: &SystemModel,
        alphabet: &Alphabet,
        sigma_n2: f64,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let bits: Vec<u8> = (0..model.n_d() * alphabet.bits_per_symbol())
            .map(|_| rng.bit())
            .collect();
        let d = alphabet.modulate(&bits)?;
        let y = transmit(model, &d, sigma_n2, rng)?;
        Ok(Self { bits, d, y, sigma_n2 })
    }
}

/// A complete link configuration: block layout, alphabet and channel
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub mode: GuardMode,
    pub n_d: usize,
    pub n_g: usize,
    pub alphabet: Alphabet,
    pub channel: ChannelParams,
}

impl Setup {
    pub fn new(mode: GuardMode, n_d: usize, n_g: usize, modulation: Modulation, channel: ChannelParams) -> Result<Self> {
        if n_d == 0 || n_g == 0 {
            return Err(Error::Dimension("N_d and N_g must be positive".into()));
        }
        Ok(Self {
            mode,
            n_d,
            n_g,
            alphabet: Alphabet::new(modulation),
            channel,
        })
    }

    /// `N_d + N_g` in UW mode, `N_d` in CP mode.
    pub fn n_prime(&self) -> usize {
        match self.mode {
            GuardMode::UniqueWord => self.n_d + self.n_g,
            GuardMode::CyclicPrefix => self.n_d,
        }
    }

    /// Model for a given composite channel diagonal (zero UW).
    pub fn model(&self, h_tilde: Vec<f64>) -> Result<SystemModel> {
        SystemModel::new(self.mode, self.n_d, self.n_g, h_tilde, None)
    }

    /// Draws a channel realization and its composite diagonal.
    pub fn draw_channel(&self, rng: &mut SimRng) -> Result<(ChannelTaps, Vec<f64>)> {
        let taps = sample_channel(rng, &self.channel);
        let h = composite_diag(&taps, self.n_prime())?;
        Ok((taps, h))
    }
}
