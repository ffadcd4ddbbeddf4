//! BER Monte-Carlo sweeps, the exhaustive bit-wise MAP oracle, analytical
//! multiplication counts and CSV reporting.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use num_rational::Ratio;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::equalizers::{lmmse_diag, Dfe, IterativeSic, LmmseFilter, SicConfig};
use crate::error::{Error, Result};
use crate::numerics::{CVector, SimRng, C64};
use crate::sicnn::{SicnnBatch, SicnnModel};
use crate::system::{ebn0_to_sigma_n2, Alphabet, GuardMode, Modulation, Setup, SystemModel, Transmission};
use crate::training::normalize;

/// Largest number of hypotheses [`map_oracle`] will enumerate.
pub const MAP_LIMIT: u128 = 1_000_000;

/// A roster member of a BER sweep.
#[derive(Clone, Debug)]
pub enum Estimator {
    Lmmse,
    LmmseDiag,
    Dfe,
    /// Iterative SIC with `Q` iterations.
    ItSic(usize),
    /// Exhaustive bit-wise MAP; tiny instances only.
    Map,
    /// A trained network, fed normalized inputs.
    Sicnn { name: String, model: Arc<SicnnModel> },
}

impl Estimator {
    /// Parses `lmmse`, `lmmse_diag`, `dfe`, `map` or `itsic<Q>`.
    pub fn from_tag(tag: &str) -> Result<Self> {
        let t = tag.trim().to_ascii_lowercase();
        match t.as_str() {
            "lmmse" => Ok(Estimator::Lmmse),
            "lmmse_diag" => Ok(Estimator::LmmseDiag),
            "dfe" => Ok(Estimator::Dfe),
            "map" => Ok(Estimator::Map),
            _ => match t.strip_prefix("itsic").and_then(|q| q.parse::<usize>().ok()) {
                Some(q) if q > 0 => Ok(Estimator::ItSic(q)),
                _ => Err(Error::UnknownTag(tag.to_string())),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Estimator::Lmmse => "lmmse".into(),
            Estimator::LmmseDiag => "lmmse_diag".into(),
            Estimator::Dfe => "dfe".into(),
            Estimator::ItSic(q) => format!("itsic{q}"),
            Estimator::Map => "map".into(),
            Estimator::Sicnn { name, .. } => name.clone(),
        }
    }

    /// Hard bit decisions for every block of one burst. A setup failure
    /// fails every block.
    pub fn equalize_burst(&self, model: &SystemModel, alphabet: &Alphabet, ys: &[CVector], sigma_n2: f64) -> Vec<Result<Vec<u8>>> {
        let sd = alphabet.variance();
        let all_err = |e: Error| -> Vec<Result<Vec<u8>>> {
            let msg = e.to_string();
            ys.iter().map(|_| Err(Error::Numeric(msg.clone()))).collect()
        };
        let bits = |d: Result<CVector>| d.map(|d| alphabet.hard_decide(&d));
        match self {
            Estimator::Lmmse => match LmmseFilter::new(model, sigma_n2, sd) {
                Ok(f) => ys.iter().map(|y| bits(f.apply(y))).collect(),
                Err(e) => all_err(e),
            },
            Estimator::LmmseDiag => ys.iter().map(|y| bits(lmmse_diag(model, y, sigma_n2, sd))).collect(),
            Estimator::Dfe => match Dfe::new(model, sigma_n2, sd) {
                Ok(f) => ys.iter().map(|y| bits(f.equalize(y, alphabet))).collect(),
                Err(e) => all_err(e),
            },
            Estimator::ItSic(q) => match SicConfig::new(*q).and_then(|c| IterativeSic::new(model, alphabet, sigma_n2, sd, c)) {
                Ok(s) => ys.iter().map(|y| bits(s.run(y).map(|r| r.0))).collect(),
                Err(e) => all_err(e),
            },
            Estimator::Map => ys.iter().map(|y| map_oracle(model, y, sigma_n2, alphabet)).collect(),
            Estimator::Sicnn { model: net, .. } => match sicnn_burst(net, model, ys, sigma_n2) {
                Ok(d) => d.into_iter().map(|d| Ok(alphabet.hard_decide(&d))).collect(),
                Err(e) => all_err(e),
            },
        }
    }
}

fn sicnn_burst(net: &SicnnModel, model: &SystemModel, ys: &[CVector], sigma_n2: f64) -> Result<Vec<CVector>> {
    if net.mode() != model.mode() || net.n_d() != model.n_d() || net.n_prime() != model.n_prime() {
        return Err(Error::Incompatible("network and system dimensions differ".into()));
    }
    let mut batch = SicnnBatch::new(model.n_prime());
    for y in ys {
        let n = normalize(model.h_tilde(), model.m(), y, sigma_n2)?;
        batch.push(&n.y, &n.h_tilde, n.sigma_n2)?;
    }
    net.decide(&batch)
}

/// Exact bit-wise MAP decisions by enumerating all data vectors.
///
/// Uses the likelihood of `y ~ CN(H·d, N'·σ_n²·H̃)`; coordinates with
/// `H̃_ii = 0` carry no information and are skipped.
pub fn map_oracle(model: &SystemModel, y: &[C64], sigma_n2: f64, alphabet: &Alphabet) -> Result<Vec<u8>> {
    let n_d = model.n_d();
    let s = alphabet.len();
    let hyps = (s as u128).checked_pow(n_d as u32).unwrap_or(u128::MAX);
    if hyps > MAP_LIMIT {
        return Err(Error::TooLarge(hyps));
    }
    if y.len() != model.n_prime() {
        return Err(Error::Dimension(format!(
            "received vector of length {}, expected {}",
            y.len(),
            model.n_prime()
        )));
    }
    let active: Vec<usize> = (0..model.n_prime()).filter(|&i| model.h_tilde()[i] > 0.0).collect();
    let inv_var: Vec<f64> = active
        .iter()
        .map(|&i| 1.0 / (model.n_prime() as f64 * sigma_n2 * model.h_tilde()[i]))
        .collect();
    let yv: Vec<C64> = active.iter().map(|&i| y[i]).collect();
    let contrib: Vec<Vec<Vec<C64>>> = (0..n_d)
        .map(|k| {
            let h = model.h_col(k);
            (0..s)
                .map(|idx| {
                    let sym = alphabet.symbol(idx);
                    active.iter().map(|&i| h[i] * sym).collect()
                })
                .collect()
        })
        .collect();
    let sym_bits: Vec<Vec<u8>> = (0..s).map(|i| alphabet.symbol_bits(i)).collect();
    let bps = alphabet.bits_per_symbol();

    // hypothesis index h = Σ_k idx_k·|S|^(N_d-1-k)
    fn enumerate(depth: usize, partial: &[C64], contrib: &[Vec<Vec<C64>>], yv: &[C64], inv_var: &[f64], out: &mut Vec<f64>) {
        if depth == contrib.len() {
            let m: f64 = partial
                .iter()
                .zip(yv)
                .zip(inv_var)
                .map(|((mu, y), w)| (y - mu).norm_sqr() * w)
                .sum();
            out.push(-m);
            return;
        }
        let mut next = vec![C64::new(0.0, 0.0); partial.len()];
        for c in &contrib[depth] {
            for ((o, a), b) in next.iter_mut().zip(partial).zip(c) {
                *o = a + b;
            }
            enumerate(depth + 1, &next, contrib, yv, inv_var, out);
        }
    }
    let mut metrics = Vec::with_capacity(hyps as usize);
    enumerate(0, &vec![C64::new(0.0, 0.0); yv.len()], &contrib, &yv, &inv_var, &mut metrics);
    let max = metrics.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p1 = vec![0.0; n_d * bps];
    let mut p0 = vec![0.0; n_d * bps];
    for (h, m) in metrics.iter().enumerate() {
        let w = (m - max).exp();
        let mut rest = h;
        for k in (0..n_d).rev() {
            let si = rest % s;
            rest /= s;
            for (b, bit) in sym_bits[si].iter().enumerate() {
                if *bit == 1 {
                    p1[k * bps + b] += w;
                } else {
                    p0[k * bps + b] += w;
                }
            }
        }
    }
    Ok(p1.iter().zip(&p0).map(|(a, b)| u8::from(a > b)).collect())
}

/// BER sweep parameters.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub ebn0_db: Vec<f64>,
    pub n_channels: usize,
    pub blocks_per_burst: usize,
    pub roster: Vec<Estimator>,
    pub seed: u64,
}

/// Counts for one `E_b/N_0` point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BerRow {
    /// Bits per estimator (blocks excluded for all estimators are not
    /// counted).
    pub bits: u64,
    /// Blocks dropped because some estimator failed on them.
    pub excluded: u64,
    pub errors: Vec<u64>,
}

/// BER table, one row per `E_b/N_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BerReport {
    pub names: Vec<String>,
    pub ebn0_db: Vec<f64>,
    pub rows: Vec<BerRow>,
}

/// Wilson score interval for `errors` out of `n` at quantile `z`.
pub fn wilson_interval(errors: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if errors as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

impl BerReport {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn ber(&self, estimator: usize, point: usize) -> f64 {
        let r = &self.rows[point];
        if r.bits == 0 {
            f64::NAN
        } else {
            r.errors[estimator] as f64 / r.bits as f64
        }
    }

    /// 95% Wilson interval.
    pub fn ci95(&self, estimator: usize, point: usize) -> (f64, f64) {
        let r = &self.rows[point];
        wilson_interval(r.errors[estimator], r.bits, Z95)
    }
}

/// Sweep result with per-estimator failure counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub report: BerReport,
    /// Blocks on which each estimator failed, summed over all points.
    pub failures: Vec<u64>,
}

struct CellCounts {
    point: usize,
    bits: u64,
    excluded: u64,
    errors: Vec<u64>,
    failures: Vec<u64>,
}

/// Runs every roster member on the same channels, data and noise.
///
/// Channel `c` comes from stream `(seed, 0, c)` and is shared by all
/// `E_b/N_0` points; the blocks of cell `(c, s)` come from `(seed, 1, c, s)`.
/// Counts are summed, so results do not depend on scheduling.
pub fn ber_sweep(setup: &Setup, cfg: &SweepConfig) -> Result<SweepOutcome> {
    if cfg.roster.is_empty() {
        return Err(Error::EmptyRoster);
    }
    if cfg.ebn0_db.is_empty() || cfg.n_channels == 0 || cfg.blocks_per_burst == 0 {
        return Err(Error::InvalidParameter("sweep grid, channel count and burst length must be non-empty".into()));
    }
    let root = SimRng::new(cfg.seed);
    let cells: Vec<(usize, usize)> = (0..cfg.n_channels)
        .flat_map(|c| (0..cfg.ebn0_db.len()).map(move |s| (c, s)))
        .collect();
    let counts: Vec<Result<CellCounts>> = cells
        .par_iter()
        .map(|&(c, s)| {
            let mut ch_rng = root.substream(&[0, c as u64]);
            let (_, h) = setup.draw_channel(&mut ch_rng)?;
            let model = setup.model(h)?;
            let sn = ebn0_to_sigma_n2(cfg.ebn0_db[s], &setup.alphabet);
            let mut rng = root.substream(&[1, c as u64, s as u64]);
            let txs = (0..cfg.blocks_per_burst)
                .map(|_| Transmission::draw(&model, &setup.alphabet, sn, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let ys: Vec<CVector> = txs.iter().map(|t| t.y.clone()).collect();
            let decisions: Vec<Vec<Result<Vec<u8>>>> = cfg
                .roster
                .iter()
                .map(|e| e.equalize_burst(&model, &setup.alphabet, &ys, sn))
                .collect();
            let n_e = cfg.roster.len();
            let mut out = CellCounts {
                point: s,
                bits: 0,
                excluded: 0,
                errors: vec![0; n_e],
                failures: vec![0; n_e],
            };
            for (b, tx) in txs.iter().enumerate() {
                let mut failed = false;
                for (e, dec) in decisions.iter().enumerate() {
                    if dec[b].is_err() {
                        out.failures[e] += 1;
                        failed = true;
                    }
                }
                if failed {
                    out.excluded += 1;
                    continue;
                }
                out.bits += tx.bits.len() as u64;
                for (e, dec) in decisions.iter().enumerate() {
                    let hat = dec[b].as_ref().expect("checked above");
                    out.errors[e] += hat.iter().zip(&tx.bits).filter(|(a, b)| a != b).count() as u64;
                }
            }
            Ok(out)
        })
        .collect();
    let n_e = cfg.roster.len();
    let mut rows = vec![
        BerRow {
            bits: 0,
            excluded: 0,
            errors: vec![0; n_e],
        };
        cfg.ebn0_db.len()
    ];
    let mut failures = vec![0u64; n_e];
    for c in counts {
        let c = c?;
        let row = &mut rows[c.point];
        row.bits += c.bits;
        row.excluded += c.excluded;
        for e in 0..n_e {
            row.errors[e] += c.errors[e];
            failures[e] += c.failures[e];
        }
    }
    for (e, f) in failures.iter().enumerate() {
        if *f > 0 {
            log::warn!("{} failed on {f} block(s); those blocks were excluded for every estimator", cfg.roster[e].name());
        }
    }
    Ok(SweepOutcome {
        report: BerReport {
            names: cfg.roster.iter().map(|e| e.name()).collect(),
            ebn0_db: cfg.ebn0_db.clone(),
            rows,
        },
        failures,
    })
}

/// `v` rounded to 12 significant digits, printed in shortest form.
pub fn sig12(v: f64) -> String {
    let r: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    format!("{r}")
}

/// Writes `EbN0_dB,ber_<name>,errs_<name>,...,bits,excluded`.
pub fn write_csv(report: &BerReport, path: &Path) -> Result<()> {
    fs::write(path, csv_string(report)?)?;
    Ok(())
}

/// The CSV text written by [`write_csv`].
pub fn csv_string(report: &BerReport) -> Result<String> {
    if report.names.is_empty() {
        return Err(Error::EmptyRoster);
    }
    let mut out = String::from("EbN0_dB");
    for n in &report.names {
        out.push_str(&format!(",ber_{n},errs_{n}"));
    }
    out.push_str(",bits,excluded\n");
    for (p, row) in report.rows.iter().enumerate() {
        out.push_str(&sig12(report.ebn0_db[p]));
        for e in 0..report.names.len() {
            out.push_str(&format!(",{},{}", sig12(report.ber(e, p)), row.errors[e]));
        }
        out.push_str(&format!(",{},{}\n", row.bits, row.excluded));
    }
    Ok(out)
}

/// Reads a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<BerReport> {
    let text = fs::read_to_string(path)?;
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    if header.len() < 3 || header[0] != "EbN0_dB" || header[header.len() - 2..] != ["bits", "excluded"] {
        return Err(bad("unexpected header".into()));
    }
    let cols = &header[1..header.len() - 2];
    if cols.is_empty() {
        return Err(Error::EmptyRoster);
    }
    if cols.len() % 2 != 0 {
        return Err(bad("unpaired estimator columns".into()));
    }
    let mut names = Vec::new();
    for pair in cols.chunks(2) {
        match (pair[0].strip_prefix("ber_"), pair[1].strip_prefix("errs_")) {
            (Some(a), Some(b)) if a == b => names.push(a.to_string()),
            _ => return Err(bad(format!("bad column pair {pair:?}"))),
        }
    }
    let mut report = BerReport {
        names,
        ebn0_db: Vec::new(),
        rows: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad(format!("line {}: {} fields, expected {}", i + 2, f.len(), header.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("line {}: bad number `{s}`", i + 2))) };
        let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| bad(format!("line {}: bad count `{s}`", i + 2))) };
        report.ebn0_db.push(num(f[0])?);
        let bits = int(f[f.len() - 2])?;
        let excluded = int(f[f.len() - 1])?;
        let mut errors = Vec::new();
        for pair in f[1..f.len() - 2].chunks(2) {
            let ber = num(pair[0])?;
            let errs = int(pair[1])?;
            if errs > bits {
                return Err(bad(format!("line {}: more errors than bits", i + 2)));
            }
            let expect = if bits == 0 { f64::NAN } else { errs as f64 / bits as f64 };
            if !(ber.is_nan() && expect.is_nan()) && (ber - expect).abs() > 1e-11 * expect.abs().max(1e-300) {
                return Err(bad(format!("line {}: BER column disagrees with the counts", i + 2)));
            }
            errors.push(errs);
        }
        report.rows.push(BerRow { bits, excluded, errors });
    }
    Ok(report)
}

/// Exact multiplication count and its value rounded to hundreds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Count {
    pub raw: Ratio<i128>,
    pub rounded: i128,
}

impl Count {
    fn new(raw: Ratio<i128>) -> Self {
        let hundred = Ratio::from_integer(100);
        Self {
            raw,
            rounded: ((raw / hundred).round() * hundred).to_integer(),
        }
    }
}

/// Estimators with a complexity formula.
pub const COMPLEXITY_TAGS: [&str; 12] = [
    "SICNNv1",
    "SICNNv2",
    "DetNet",
    "KAFCNN",
    "OAMPNet2",
    "LMMSE_burst",
    "LMMSE_eq",
    "LMMSE_CP_burst",
    "LMMSE_CP_eq",
    "DFE_burst",
    "DFE_eq",
    "itSIC",
];

/// Inputs of the complexity formulas. Fields not used by a tag are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityInput {
    pub tag: String,
    pub n_d: i128,
    pub n_prime: i128,
    pub n_g: i128,
    /// Levels per real dimension `|S'|`.
    pub s_prime: i128,
    /// Stages or iterations.
    pub q: i128,
    pub n_l_c: i128,
    pub n_h_c: i128,
    pub n_l_p: i128,
    pub n_h_p: i128,
    pub n_l: i128,
    pub n_h: i128,
    /// Layer count `L` (DetNet, KAFCNN) or `T` (OAMP-Net2).
    pub layers: i128,
    pub d_h: i128,
    pub d_v: i128,
}

impl ComplexityInput {
    /// Inputs with system dimensions only.
    pub fn new(tag: &str, n_d: usize, n_prime: usize, n_g: usize, s_prime: usize) -> Self {
        Self {
            tag: tag.to_string(),
            n_d: n_d as i128,
            n_prime: n_prime as i128,
            n_g: n_g as i128,
            s_prime: s_prime as i128,
            q: 0,
            n_l_c: 0,
            n_h_c: 0,
            n_l_p: 0,
            n_h_p: 0,
            n_l: 0,
            n_h: 0,
            layers: 0,
            d_h: 0,
            d_v: 0,
        }
    }

    /// Published hyperparameters for a tag and setup; `itSIC` uses three
    /// iterations.
    pub fn published(tag: &str, mode: GuardMode, modulation: Modulation) -> Result<Self> {
        let (n_d, n_g) = match mode {
            GuardMode::UniqueWord => (20, 12),
            GuardMode::CyclicPrefix => (32, 12),
        };
        let n_prime = match mode {
            GuardMode::UniqueWord => n_d + n_g,
            GuardMode::CyclicPrefix => n_d,
        };
        let s_prime = Alphabet::new(modulation).levels().len();
        let mut c = Self::new(tag, n_d, n_prime, n_g, s_prime);
        let setup = match (mode, modulation) {
            (GuardMode::UniqueWord, Modulation::Qpsk) => 0,
            (GuardMode::CyclicPrefix, Modulation::Qpsk) => 1,
            (GuardMode::UniqueWord, Modulation::Qam16) => 2,
            (m, a) => return Err(Error::InvalidParameter(format!("no published setup {m}/{a}"))),
        };
        match tag {
            "SICNNv1" => {
                c.q = 7;
                c.n_l_c = 3;
                c.n_h_c = [70, 100, 70][setup];
                c.n_l_p = [2, 2, 3][setup];
                c.n_h_p = [10, 10, 20][setup];
            }
            "SICNNv2" => {
                c.q = 7;
                c.n_l = 4;
                c.n_h = [200, 250, 230][setup];
            }
            "DetNet" => {
                c.layers = 15;
                c.d_h = [200, 250, 220][setup];
                c.d_v = [20, 30, 25][setup];
            }
            "KAFCNN" => {
                c.n_l = 12;
                c.n_h = [250, 300, 280][setup];
            }
            "OAMPNet2" => c.layers = [8, 10, 8][setup],
            "itSIC" => c.q = 3,
            t if COMPLEXITY_TAGS.contains(&t) => {}
            t => return Err(Error::UnknownTag(t.to_string())),
        }
        Ok(c)
    }
}

/// Number of real-valued multiplications for one received vector (or one
/// burst for the `_burst` tags).
pub fn complexity(input: &ComplexityInput) -> Result<Count> {
    let r = |v: i128| Ratio::from_integer(v);
    let frac = |a: i128, b: i128| Ratio::new(a, b);
    let ComplexityInput {
        n_d: nd,
        n_prime: np,
        n_g: ng,
        s_prime: s,
        q,
        n_l_c,
        n_h_c,
        n_l_p,
        n_h_p,
        n_l,
        n_h,
        layers,
        d_h,
        d_v,
        ..
    } = *input;
    if nd <= 0 || np <= 0 || s <= 0 {
        return Err(Error::InvalidParameter("system dimensions must be positive".into()));
    }
    let normalization = 4 * nd * np + 4 * np + 1;
    let raw = match input.tag.as_str() {
        "SICNNv1" => {
            let kq = n_h_p * n_h_p * (n_l_p - 1)
                + n_h_p * (2 * s + 3)
                + n_h_c * n_h_c * (n_l_c - 1)
                + n_h_c * (4 * np + 1)
                + 19 * np
                + 6 * s
                + 6 * np * nd
                + 11;
            r(q * nd * kq + normalization)
        }
        "SICNNv2" => {
            let kq = (n_l / 3) * (6 * np + 2)
                + n_h * n_h * (n_l - 1)
                + 4 * np * nd
                + 10 * np
                + n_h * (4 * np + 2 * s + 3)
                + 6 * s
                + 6;
            r(q * nd * kq + normalization)
        }
        "DetNet" => {
            let per = 4 * nd * nd + 6 * nd + 2 * d_h * (nd * (s + 1) + d_v) + 2 * nd * s + d_v;
            r(layers * per - 2 * nd * s + normalization + 6 * nd * np + 4 * nd * nd * np + 2 * np)
        }
        "KAFCNN" => r((3 * np + (n_l - 1) * n_h + 2 * np * s + (n_l - 2)) * n_h
            + 4 * np * nd * s
            + 2 * nd * s
            + normalization),
        "OAMPNet2" => {
            let r_t = r(8 * nd * np + 2 * nd);
            let tau = r(4 * nd * nd * (2 * np + 1) + 8 * nd * np + 5);
            let x = frac(14, 3) * r(np * np * np)
                + r(8 * np * np * (2 * nd + 1))
                + r(8 * nd) * (r(np + s) + frac(1, 2))
                + r(2);
            let v = r(2 * nd * (2 * np + 1) + 1);
            r(layers) * (r_t + tau + x + v) + r(normalization)
        }
        "LMMSE_burst" => frac(38, 3) * r(nd * nd * nd) + r(8 * nd * nd * ng + 4 * nd * nd),
        "LMMSE_eq" => r(4 * nd * (nd + ng)),
        "LMMSE_CP_burst" => r(4 * nd),
        "LMMSE_CP_eq" => {
            if nd & (nd - 1) != 0 {
                return Err(Error::InvalidParameter(format!("IDFT count needs a power-of-two N_d, got {nd}")));
            }
            r(4 * nd + 2 * nd * (nd.trailing_zeros() as i128))
        }
        "DFE_burst" => {
            frac(7, 6) * r(nd.pow(4)) + frac(11, 3) * r(nd.pow(3)) + frac(19, 6) * r(nd * nd) + r(6 * nd * nd * np)
                + frac(2, 3) * r(nd)
                + r(2 * nd * np)
                - frac(14, 3)
        }
        "DFE_eq" => r(8 * nd * np),
        "itSIC" => {
            r(q * nd)
                * (frac(14, 3) * r(np * np * np) + r(4 * np * np * nd + 4 * np * np + 2 * np * nd + 14 * np + 6 * s + 6))
        }
        other => return Err(Error::UnknownTag(other.to_string())),
    };
    Ok(Count::new(raw))
}

impl fmt::Display for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.rounded, self.raw)
    }
}

/// SHA-256 over `blob <len>\0<content>`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file's content; see [`content_hash`].
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

/// Ordered `key = value` description of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (k, v) in &self.entries {
            writeln!(w, "{k} = {v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;

    fn setup(mode: GuardMode, n_d: usize, n_g: usize, modulation: Modulation) -> Setup {
        let ch = ChannelParams::with_default_taps(100e-9, 52e-9, n_g).unwrap();
        Setup::new(mode, n_d, n_g, modulation, ch).unwrap()
    }

    fn count(tag: &str, mode: GuardMode, m: Modulation) -> Count {
        complexity(&ComplexityInput::published(tag, mode, m).unwrap()).unwrap()
    }

    #[test]
    fn verified_table_cells() {
        use GuardMode::*;
        use Modulation::*;
        let cells: [(&str, GuardMode, Modulation, i128, i128); 14] = [
            ("SICNNv1", UniqueWord, Qpsk, 3_288_629, 3_288_600),
            ("SICNNv1", CyclicPrefix, Qpsk, 8_929_505, 8_929_500),
            ("SICNNv1", UniqueWord, Qam16, 3_409_309, 3_409_300),
            ("itSIC", UniqueWord, Qpsk, 14_440_760, 14_440_800),
            ("itSIC", CyclicPrefix, Qpsk, 27_897_536, 27_897_500),
            ("LMMSE_burst", UniqueWord, Qpsk, 141_333, 141_300),
            ("LMMSE_eq", UniqueWord, Qpsk, 2_560, 2_600),
            ("LMMSE_CP_burst", CyclicPrefix, Qpsk, 128, 100),
            ("LMMSE_CP_eq", CyclicPrefix, Qpsk, 448, 400),
            ("DFE_burst", UniqueWord, Qpsk, 295_355, 295_400),
            ("DFE_eq", UniqueWord, Qpsk, 5_120, 5_100),
            ("KAFCNN", UniqueWord, Qpsk, 753_889, 753_900),
            ("OAMPNet2", UniqueWord, Qpsk, 4_892_268, 4_892_300),
            ("OAMPNet2", CyclicPrefix, Qpsk, 9_815_078, 9_815_100),
        ];
        for (tag, mode, m, raw, rounded) in cells {
            let c = count(tag, mode, m);
            assert_eq!(c.raw.round().to_integer(), raw, "{tag} {mode} {m}");
            assert_eq!(c.rounded, rounded, "{tag} {mode} {m}");
        }
    }

    #[test]
    fn fractional_terms_stay_exact() {
        let c = count("DFE_burst", GuardMode::UniqueWord, Modulation::Qpsk);
        assert_eq!(c.raw, Ratio::new(886_066, 3));
        let c = count("OAMPNet2", GuardMode::UniqueWord, Modulation::Qpsk);
        assert_eq!(*c.raw.denom(), 3);
    }

    #[test]
    fn sicnn_v2_cp_cell_and_unmatched_rows() {
        let c = count("SICNNv2", GuardMode::CyclicPrefix, Modulation::Qpsk);
        assert_eq!((c.raw.to_integer(), c.rounded), (50_600_897, 50_600_900));
        assert_eq!(count("SICNNv2", GuardMode::UniqueWord, Modulation::Qpsk).raw.to_integer(), 21_015_569);
        assert_eq!(count("DetNet", GuardMode::UniqueWord, Modulation::Qpsk).raw.to_integer(), 565_013);
    }

    #[test]
    fn lmmse_uw_burst_closed_form() {
        for (nd, ng) in [(4, 2), (20, 12), (7, 3)] {
            let c = complexity(&ComplexityInput::new("LMMSE_burst", nd, nd + ng, ng, 2)).unwrap();
            let (nd, ng) = (nd as i128, ng as i128);
            let terms = Ratio::from_integer(4 * nd * nd * (nd + ng)) * 2
                + Ratio::new(14, 3) * Ratio::from_integer(nd.pow(3))
                + Ratio::from_integer(4 * nd * nd);
            assert_eq!(c.raw, terms);
        }
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(Count::new(Ratio::from_integer(150)).rounded, 200);
        assert_eq!(Count::new(Ratio::from_integer(149)).rounded, 100);
        assert_eq!(Count::new(Ratio::new(299, 2)).rounded, 100);
        assert_eq!(Count::new(Ratio::from_integer(-150)).rounded, -200);
    }

    #[test]
    fn unknown_tag_is_rejected() {
        assert!(matches!(complexity(&ComplexityInput::new("ZF", 4, 4, 1, 2)), Err(Error::UnknownTag(_))));
        assert!(matches!(
            ComplexityInput::published("ZF", GuardMode::UniqueWord, Modulation::Qpsk),
            Err(Error::UnknownTag(_))
        ));
        for tag in COMPLEXITY_TAGS {
            let c = ComplexityInput::published(tag, GuardMode::UniqueWord, Modulation::Qpsk).unwrap();
            if tag != "LMMSE_CP_eq" {
                complexity(&c).unwrap();
            }
        }
    }

    #[test]
    fn roster_tags() {
        assert!(matches!(Estimator::from_tag("itsic3").unwrap(), Estimator::ItSic(3)));
        assert_eq!(Estimator::from_tag("LMMSE").unwrap().name(), "lmmse");
        assert!(Estimator::from_tag("itsic0").is_err());
        assert!(Estimator::from_tag("zf").is_err());
    }

    #[test]
    fn symbol_bits_match_modulation() {
        for a in [Alphabet::qpsk(), Alphabet::qam16()] {
            for i in 0..a.len() {
                assert_eq!(a.modulate(&a.symbol_bits(i)).unwrap()[0], a.symbol(i));
            }
        }
    }

    /// Direct summation over all vectors with the full Gaussian density.
    fn brute_force_posteriors(model: &SystemModel, y: &[C64], sn: f64, a: &Alphabet) -> Vec<f64> {
        let n_d = model.n_d();
        let bps = a.bits_per_symbol();
        let mut num = vec![0.0; n_d * bps];
        let mut total = 0.0;
        let hyps = a.len().pow(n_d as u32);
        for h in 0..hyps {
            let mut digits = vec![0; n_d];
            let mut rest = h;
            for k in 0..n_d {
                digits[k] = rest % a.len();
                rest /= a.len();
            }
            let d: Vec<C64> = digits.iter().map(|&i| a.symbol(i)).collect();
            let mean = model.h().matvec(&d).unwrap();
            let mut ll = 0.0;
            for i in 0..model.n_prime() {
                let var = model.n_prime() as f64 * sn * model.h_tilde()[i];
                ll += -(y[i] - mean[i]).norm_sqr() / var;
            }
            let p = ll.exp();
            total += p;
            let bits: Vec<u8> = digits.iter().flat_map(|&i| a.symbol_bits(i)).collect();
            for (j, b) in bits.iter().enumerate() {
                if *b == 1 {
                    num[j] += p;
                }
            }
        }
        num.iter().map(|n| n / total).collect()
    }

    #[test]
    fn map_matches_direct_summation() {
        let s = setup(GuardMode::UniqueWord, 2, 2, Modulation::Qpsk);
        let a = &s.alphabet;
        let mut rng = SimRng::new(12);
        let mut checked = 0;
        for _ in 0..200 {
            let (_, h) = s.draw_channel(&mut rng).unwrap();
            let model = s.model(h).unwrap();
            let sn = ebn0_to_sigma_n2(3.0, a);
            let tx = Transmission::draw(&model, a, sn, &mut rng).unwrap();
            let post = brute_force_posteriors(&model, &tx.y, sn, a);
            let map = map_oracle(&model, &tx.y, sn, a).unwrap();
            for (p, b) in post.iter().zip(&map) {
                if (p - 0.5).abs() > 1e-9 {
                    assert_eq!(*b, u8::from(*p > 0.5));
                    checked += 1;
                }
            }
        }
        assert!(checked > 700);
    }

    #[test]
    fn map_is_exact_without_noise_and_refuses_large_instances() {
        let s = setup(GuardMode::CyclicPrefix, 4, 2, Modulation::Qam16);
        let mut rng = SimRng::new(3);
        let (_, h) = s.draw_channel(&mut rng).unwrap();
        let model = s.model(h).unwrap();
        let tx = Transmission::draw(&model, &s.alphabet, 1e-12, &mut rng).unwrap();
        assert_eq!(map_oracle(&model, &tx.y, 1e-12, &s.alphabet).unwrap(), tx.bits);
        let big = setup(GuardMode::CyclicPrefix, 6, 2, Modulation::Qam16);
        let model = big.model(vec![1.0; 6]).unwrap();
        let y = vec![C64::new(0.0, 0.0); 6];
        assert!(matches!(map_oracle(&model, &y, 0.1, &big.alphabet), Err(Error::TooLarge(16_777_216))));
    }

    fn sweep(s: &Setup, roster: Vec<Estimator>, ebn0: Vec<f64>, n_channels: usize, blocks: usize, seed: u64) -> SweepOutcome {
        ber_sweep(
            s,
            &SweepConfig {
                ebn0_db: ebn0,
                n_channels,
                blocks_per_burst: blocks,
                roster,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn noiseless_flat_sweep_has_no_errors() {
        let ch = ChannelParams::new(52e-9 / 100.0, 52e-9, 1).unwrap();
        let s = Setup::new(GuardMode::CyclicPrefix, 8, 2, Modulation::Qam16, ch).unwrap();
        let roster = vec![Estimator::Lmmse, Estimator::LmmseDiag, Estimator::Dfe, Estimator::ItSic(2)];
        let out = sweep(&s, roster, vec![300.0], 3, 20, 1);
        assert!(out.report.rows[0].errors.iter().all(|e| *e == 0));
        assert_eq!(out.report.rows[0].bits, 3 * 20 * 8 * 4);
    }

    #[test]
    fn lmmse_and_single_iteration_sic_agree() {
        let s = setup(GuardMode::UniqueWord, 8, 4, Modulation::Qpsk);
        let out = sweep(&s, vec![Estimator::Lmmse, Estimator::ItSic(1)], vec![4.0, 10.0], 10, 30, 5);
        for row in &out.report.rows {
            assert_eq!(row.errors[0], row.errors[1]);
        }
        assert!(out.report.rows[0].errors[0] > 0);
    }

    #[test]
    fn map_beats_lmmse_on_tiny_instances() {
        let s = setup(GuardMode::UniqueWord, 3, 2, Modulation::Qpsk);
        let out = sweep(&s, vec![Estimator::Map, Estimator::Lmmse], vec![6.0], 60, 50, 8);
        let r = &out.report;
        assert!(r.ber(0, 0) <= r.ci95(1, 0).1);
        assert!(r.rows[0].errors[0] <= r.rows[0].errors[1] + 5);
    }

    #[test]
    fn wilson_interval_shrinks_with_more_bits() {
        let (lo1, hi1) = wilson_interval(1000, 100_000, Z95);
        let (lo4, hi4) = wilson_interval(4000, 400_000, Z95);
        let ratio = (hi1 - lo1) / (hi4 - lo4);
        assert!((ratio - 2.0).abs() < 0.01);
        assert!(lo1 < 0.01 && 0.01 < hi1);
        assert_eq!(wilson_interval(0, 0, Z95), (0.0, 1.0));
        assert_eq!(wilson_interval(0, 100, Z95).0, 0.0);
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let s = setup(GuardMode::UniqueWord, 4, 2, Modulation::Qpsk);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sweep(&s, vec![Estimator::Lmmse, Estimator::Dfe], vec![2.0, 7.5], 6, 10, 4))
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_csv(&a.report, &pa).unwrap();
        write_csv(&b.report, &pb).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        assert_eq!(read_csv(&pa).unwrap(), a.report);
        let head = fs::read_to_string(&pa).unwrap();
        assert!(head.starts_with("EbN0_dB,ber_lmmse,errs_lmmse,ber_dfe,errs_dfe,bits,excluded\n"));
    }

    #[test]
    fn empty_roster_is_rejected() {
        let s = setup(GuardMode::UniqueWord, 4, 2, Modulation::Qpsk);
        let cfg = SweepConfig {
            ebn0_db: vec![1.0],
            n_channels: 1,
            blocks_per_burst: 1,
            roster: vec![],
            seed: 0,
        };
        assert!(matches!(ber_sweep(&s, &cfg), Err(Error::EmptyRoster)));
        let empty = BerReport {
            names: vec![],
            ebn0_db: vec![],
            rows: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        assert!(matches!(write_csv(&empty, &p), Err(Error::EmptyRoster)));
        fs::write(&p, "EbN0_dB,bits,excluded\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::EmptyRoster)));
    }

    #[test]
    fn sig12_keeps_twelve_digits() {
        assert_eq!(sig12(4.0), "4");
        assert_eq!(sig12(1.0 / 3.0), "0.333333333333");
        assert_eq!(sig12(0.000123456789012345), "0.000123456789012");
    }

    #[test]
    fn content_hash_depends_on_bytes() {
        assert_eq!(content_hash(b"abc"), content_hash(b"abc"));
        assert_ne!(content_hash(b"abc"), content_hash(b"abd"));
        assert_eq!(content_hash(b"").len(), 64);
    }

    #[test]
    fn failed_setup_excludes_blocks_for_everyone() {
        let s = setup(GuardMode::CyclicPrefix, 4, 2, Modulation::Qpsk);
        let model = s.model(vec![1.0; 4]).unwrap();
        let ys = vec![CVector::zeros(4); 3];
        let res = Estimator::Lmmse.equalize_burst(&model, &s.alphabet, &ys, f64::NAN);
        assert!(res.iter().all(|r| r.is_err()));
    }
}
