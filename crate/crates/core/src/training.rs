//! Channel-independent input normalization, error-focused training-set
//! generation and the SICNN training loop with early stopping.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::channel::ChannelParams;
use crate::equalizers::{lmmse_diag, LmmseFilter};
use crate::error::{Error, Result};
use crate::nn::{weighted_ce_loss, Adam, LossSpec, Mode};
use crate::numerics::{CMatrix, CVector, SimRng, C64};
use crate::sicnn::{SicnnBatch, SicnnModel};
use crate::system::{ebn0_to_sigma_n2, GuardMode, Modulation, Setup, SystemModel};

/// `κ = sqrt(tr{H̃} / tr{H̃·M·Mᴴ·H̃})`.
pub fn kappa(h_tilde: &[f64], m: &CMatrix) -> Result<f64> {
    if m.rows() != h_tilde.len() {
        return Err(Error::Dimension(format!(
            "channel of length {} for M with {} rows",
            h_tilde.len(),
            m.rows()
        )));
    }
    let num: f64 = h_tilde.iter().sum();
    let den: f64 = h_tilde
        .iter()
        .enumerate()
        .map(|(i, h)| h * h * m.row(i).iter().map(|v| v.norm_sqr()).sum::<f64>())
        .sum();
    if !(num > 0.0) || !(den > 0.0) {
        return Err(Error::Numeric(format!(
            "cannot normalize a channel with zero trace (tr H = {num:e}, tr HMMH = {den:e})"
        )));
    }
    Ok((num / den).sqrt())
}

/// A received vector and channel scaled by `K = κ·H̃^(-1/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedInstance {
    pub y: CVector,
    /// `K·H̃`, i.e. `κ·sqrt(H̃)`.
    pub h_tilde: Vec<f64>,
    pub kappa: f64,
    /// The unscaled noise variance.
    pub sigma_n2: f64,
    /// Coordinates with `H̃_ii = 0`; these are scaled by 0.
    pub zero_entries: Vec<usize>,
}

/// Diagonal of `K`; zero channel entries map to 0.
pub fn normalizer(h_tilde: &[f64], m: &CMatrix) -> Result<(f64, Vec<f64>)> {
    let k = kappa(h_tilde, m)?;
    Ok((
        k,
        h_tilde
            .iter()
            .map(|&h| if h > 0.0 { k / h.sqrt() } else { 0.0 })
            .collect(),
    ))
}

/// Applies `K` to `y` and `H̃`.
pub fn normalize(h_tilde: &[f64], m: &CMatrix, y: &[C64], sigma_n2: f64) -> Result<NormalizedInstance> {
    if y.len() != h_tilde.len() {
        return Err(Error::Dimension(format!(
            "received vector of length {} for a channel of length {}",
            y.len(),
            h_tilde.len()
        )));
    }
    let (kappa, scale) = normalizer(h_tilde, m)?;
    let zero_entries: Vec<usize> = (0..h_tilde.len()).filter(|&i| !(h_tilde[i] > 0.0)).collect();
    if !zero_entries.is_empty() {
        log::debug!("normalization zeroed {} spectral null(s)", zero_entries.len());
    }
    Ok(NormalizedInstance {
        y: CVector(y.iter().zip(&scale).map(|(v, s)| v * s).collect()),
        h_tilde: h_tilde.iter().zip(&scale).map(|(h, s)| h * s).collect(),
        kappa,
        sigma_n2,
        zero_entries,
    })
}

/// Equalizer used to select training vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Full LMMSE.
    Lmmse,
    /// Diagonal LMMSE (exact in CP mode, an approximation with a UW).
    LmmseDiag,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Lmmse => "lmmse",
            Baseline::LmmseDiag => "lmmse_diag",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lmmse" => Ok(Baseline::Lmmse),
            "lmmse_diag" => Ok(Baseline::LmmseDiag),
            other => Err(Error::UnknownTag(other.to_string())),
        }
    }
}

/// Training-set generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Minimum baseline symbol errors per retained vector.
    pub n_epd: usize,
    /// Vectors per burst, also the per-channel quota.
    pub n_burst: usize,
    /// Bursts after which the retention rate is checked.
    pub n_check: usize,
    /// `E_b/N_0` range in dB.
    pub snr_range_db: (f64, f64),
    /// Number of grid points (one channel each).
    pub n_channels: usize,
    pub baseline: Baseline,
    pub keep_fraction_floor: f64,
    /// Channel redraws per grid point before it is skipped.
    pub max_redraws: usize,
    /// Hard cap on bursts per channel.
    pub max_bursts: usize,
}

impl GenConfig {
    /// Generator settings with the defaults for everything but the
    /// thresholds, range and grid size.
    pub fn new(n_epd: usize, n_burst: usize, snr_range_db: (f64, f64), n_channels: usize, baseline: Baseline) -> Self {
        Self {
            n_epd,
            n_burst,
            n_check: 10,
            snr_range_db,
            n_channels,
            baseline,
            keep_fraction_floor: 0.1,
            max_redraws: 50,
            max_bursts: 200,
        }
    }

    /// Generator presets per setup at desk scale (2000 channels).
    pub fn preset(mode: GuardMode, modulation: Modulation) -> Result<Self> {
        match (mode, modulation) {
            (GuardMode::UniqueWord, Modulation::Qpsk) => Ok(Self::new(3, 100, (2.0, 12.5), 2000, Baseline::Lmmse)),
            (GuardMode::CyclicPrefix, Modulation::Qpsk) => Ok(Self::new(2, 100, (5.0, 18.0), 2000, Baseline::LmmseDiag)),
            (GuardMode::UniqueWord, Modulation::Qam16) => Ok(Self::new(3, 100, (6.0, 19.0), 2000, Baseline::Lmmse)),
            (m, a) => Err(Error::InvalidParameter(format!("no generator preset for {m}/{a}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range_db;
        if self.n_epd == 0 || self.n_burst == 0 || self.n_check == 0 || self.n_channels == 0 {
            return Err(Error::InvalidParameter("generator counts must be positive".into()));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("SNR range [{lo}, {hi}] is empty")));
        }
        if !(self.keep_fraction_floor > 0.0 && self.keep_fraction_floor <= 1.0) {
            return Err(Error::InvalidParameter("keep fraction floor must lie in (0, 1]".into()));
        }
        if self.max_redraws == 0 || self.max_bursts < self.n_check {
            return Err(Error::InvalidParameter("redraw and burst caps too small".into()));
        }
        Ok(())
    }

    /// Grid points in dB, evenly spaced on the linear scale.
    pub fn snr_grid_db(&self) -> Vec<f64> {
        let (lo, hi) = (10f64.powf(self.snr_range_db.0 / 10.0), 10f64.powf(self.snr_range_db.1 / 10.0));
        let n = self.n_channels;
        (0..n)
            .map(|i| {
                let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                10.0 * (lo + t * (hi - lo)).log10()
            })
            .collect()
    }
}

/// One retained data vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub bits: Vec<u8>,
    pub d: CVector,
    pub y: CVector,
    pub h_tilde: Vec<f64>,
    pub sigma_n2: f64,
    /// `grid_index << 16 | redraw`.
    pub channel_id: u64,
    pub grid_index: u64,
}

/// Generator bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenStats {
    pub discarded_channels: usize,
    pub skipped_points: Vec<usize>,
}

/// Retained vectors plus everything needed to regenerate them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub setup: Setup,
    pub config: GenConfig,
    pub seed: u64,
    pub records: Vec<Record>,
    pub stats: GenStats,
}

/// Source of composite channel diagonals.
pub type ChannelSource<'a> = dyn Fn(&Setup, &mut SimRng) -> Result<Vec<f64>> + Sync + 'a;

/// Symbol errors of hard decisions on `estimate` against `d`.
pub fn symbol_errors(setup: &Setup, estimate: &[C64], d: &[C64]) -> usize {
    estimate
        .iter()
        .zip(d)
        .filter(|(e, d)| (setup.alphabet.decide(**e) - **d).norm() > 1e-9)
        .count()
}

/// Baseline estimates for a set of received vectors over one channel.
pub fn baseline_estimates(
    setup: &Setup,
    model: &SystemModel,
    baseline: Baseline,
    ys: &[&[C64]],
    sigma_n2: f64,
) -> Result<Vec<CVector>> {
    let sd = setup.alphabet.variance();
    match baseline {
        Baseline::Lmmse => {
            let f = LmmseFilter::new(model, sigma_n2, sd)?;
            ys.iter().map(|y| f.apply(y)).collect()
        }
        Baseline::LmmseDiag => ys.iter().map(|y| lmmse_diag(model, y, sigma_n2, sd)).collect(),
    }
}

/// Baseline symbol errors of a stored record.
pub fn replay_errors(setup: &Setup, baseline: Baseline, record: &Record) -> Result<usize> {
    let model = setup.model(record.h_tilde.clone())?;
    let est = baseline_estimates(setup, &model, baseline, &[&record.y], record.sigma_n2)?;
    Ok(symbol_errors(setup, &est[0], &record.d))
}

enum PointOutcome {
    Filled(Vec<Record>),
    Discarded,
}

fn fill_channel(
    setup: &Setup,
    cfg: &GenConfig,
    h: Vec<f64>,
    sigma_n2: f64,
    ids: (u64, u64),
    rng: &mut SimRng,
) -> Result<PointOutcome> {
    let model = setup.model(h)?;
    let sd = setup.alphabet.variance();
    let lmmse = match cfg.baseline {
        Baseline::Lmmse => Some(LmmseFilter::new(&model, sigma_n2, sd)?),
        Baseline::LmmseDiag => None,
    };
    let mut kept = Vec::with_capacity(cfg.n_burst);
    for burst in 1..=cfg.max_bursts {
        for _ in 0..cfg.n_burst {
            let tx = crate::system::Transmission::draw(&model, &setup.alphabet, sigma_n2, rng)?;
            let est = match &lmmse {
                Some(f) => f.apply(&tx.y)?,
                None => lmmse_diag(&model, &tx.y, sigma_n2, sd)?,
            };
            if kept.len() < cfg.n_burst && symbol_errors(setup, &est, &tx.d) >= cfg.n_epd {
                kept.push(Record {
                    bits: tx.bits,
                    d: tx.d,
                    y: tx.y,
                    h_tilde: model.h_tilde().to_vec(),
                    sigma_n2,
                    channel_id: ids.0 << 16 | ids.1,
                    grid_index: ids.0,
                });
            }
        }
        if kept.len() >= cfg.n_burst {
            return Ok(PointOutcome::Filled(kept));
        }
        if burst == cfg.n_check && (kept.len() as f64) < cfg.keep_fraction_floor * cfg.n_burst as f64 {
            return Ok(PointOutcome::Discarded);
        }
    }
    Ok(PointOutcome::Discarded)
}

/// Generates a training set with channels from the setup's statistical model.
pub fn generate_training_set(setup: &Setup, cfg: &GenConfig, seed: u64) -> Result<TrainingSet> {
    generate_with_source(setup, cfg, seed, &|s: &Setup, rng: &mut SimRng| Ok(s.draw_channel(rng)?.1))
}

/// Generates a training set drawing channels from `source`.
///
/// Grid points are independent: point `g`, redraw `r` uses the stream
/// `(seed, g, r)`, so the result does not depend on the thread count.
pub fn generate_with_source(setup: &Setup, cfg: &GenConfig, seed: u64, source: &ChannelSource) -> Result<TrainingSet> {
    cfg.validate()?;
    let root = SimRng::new(seed);
    let grid = cfg.snr_grid_db();
    let per_point: Vec<Result<(Option<Vec<Record>>, usize)>> = grid
        .par_iter()
        .enumerate()
        .map(|(g, &snr_db)| {
            let sigma_n2 = ebn0_to_sigma_n2(snr_db, &setup.alphabet);
            let mut discarded = 0;
            for redraw in 0..cfg.max_redraws {
                let mut rng = root.substream(&[g as u64, redraw as u64]);
                let h = source(setup, &mut rng)?;
                if h.iter().sum::<f64>() <= 0.0 {
                    discarded += 1;
                    continue;
                }
                match fill_channel(setup, cfg, h, sigma_n2, (g as u64, redraw as u64), &mut rng)? {
                    PointOutcome::Filled(r) => return Ok((Some(r), discarded)),
                    PointOutcome::Discarded => discarded += 1,
                }
            }
            log::warn!(
                "grid point {g} ({snr_db:.3} dB) skipped after {} channel redraws",
                cfg.max_redraws
            );
            Ok((None, discarded))
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.n_channels * cfg.n_burst);
    let mut stats = GenStats::default();
    for (g, res) in per_point.into_iter().enumerate() {
        let (recs, discarded) = res?;
        stats.discarded_channels += discarded;
        match recs {
            Some(r) => records.extend(r),
            None => stats.skipped_points.push(g),
        }
    }
    Ok(TrainingSet {
        setup: setup.clone(),
        config: cfg.clone(),
        seed,
        records,
        stats,
    })
}

const RECORDS_MAGIC: &[u8; 4] = b"SCTS";
const RECORDS_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const RECORDS: &str = "records.bin";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl TrainingSet {
    /// Manifest lines `key = value`.
    pub fn manifest(&self) -> String {
        let c = &self.config;
        let s = &self.setup;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("format", format!("scfde-training-set {RECORDS_VERSION}"));
        kv("mode", s.mode.to_string());
        kv("n_d", s.n_d.to_string());
        kv("n_g", s.n_g.to_string());
        kv("alphabet", s.alphabet.modulation().to_string());
        kv("tau_rms", format!("{:e}", s.channel.tau_rms));
        kv("t_s", format!("{:e}", s.channel.t_s));
        kv("n_taps", s.channel.n_taps.to_string());
        kv("n_epd", c.n_epd.to_string());
        kv("n_burst", c.n_burst.to_string());
        kv("n_check", c.n_check.to_string());
        kv("snr_lo_db", format!("{:?}", c.snr_range_db.0));
        kv("snr_hi_db", format!("{:?}", c.snr_range_db.1));
        kv("n_channels", c.n_channels.to_string());
        kv("baseline", c.baseline.to_string());
        kv("keep_fraction_floor", format!("{:?}", c.keep_fraction_floor));
        kv("max_redraws", c.max_redraws.to_string());
        kv("max_bursts", c.max_bursts.to_string());
        kv("seed", self.seed.to_string());
        kv("records", self.records.len().to_string());
        kv("discarded_channels", self.stats.discarded_channels.to_string());
        kv(
            "skipped_points",
            self.stats.skipped_points.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
        );
        out
    }

    /// Writes `manifest.txt` and `records.bin` into `dir`.
    ///
    /// `records.bin`: magic `SCTS`, u32 version, u64 record count, u64 `N_d`,
    /// u64 `N'`, u64 bits per vector, then per record: u64 channel id,
    /// u64 grid index, f64 `σ_n²`, the bits as bytes, `d` and `y` as re/im
    /// f64 pairs, `H̃` as f64. Everything little-endian.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), self.manifest())?;
        let mut w = BufWriter::new(File::create(dir.join(RECORDS))?);
        let n_prime = self.setup.n_prime();
        let n_bits = self.setup.n_d * self.setup.alphabet.bits_per_symbol();
        w.write_all(RECORDS_MAGIC)?;
        w.write_all(&RECORDS_VERSION.to_le_bytes())?;
        for v in [self.records.len(), self.setup.n_d, n_prime, n_bits] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for r in &self.records {
            w.write_all(&r.channel_id.to_le_bytes())?;
            w.write_all(&r.grid_index.to_le_bytes())?;
            w.write_all(&r.sigma_n2.to_le_bytes())?;
            w.write_all(&r.bits)?;
            for v in r.d.iter().chain(r.y.iter()) {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
            for h in &r.h_tilde {
                w.write_all(&h.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a directory written by [`TrainingSet::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath)?;
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(&mpath, format!("line {}: expected `key = value`", i + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(|s| s.as_str())
                .ok_or_else(|| format_err(&mpath, format!("missing key `{k}`")))
        };
        fn parse<T: FromStr>(mpath: &Path, k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| format_err(mpath, format!("bad value `{v}` for `{k}`")))
        }
        macro_rules! p {
            ($k:expr) => {
                parse(&mpath, $k, get($k)?)?
            };
        }
        let channel = ChannelParams::new(p!("tau_rms"), p!("t_s"), p!("n_taps"))?;
        let mode: GuardMode = get("mode")?.parse()?;
        let modulation: Modulation = get("alphabet")?.parse()?;
        let setup = Setup::new(mode, p!("n_d"), p!("n_g"), modulation, channel)?;
        let config = GenConfig {
            n_epd: p!("n_epd"),
            n_burst: p!("n_burst"),
            n_check: p!("n_check"),
            snr_range_db: (p!("snr_lo_db"), p!("snr_hi_db")),
            n_channels: p!("n_channels"),
            baseline: get("baseline")?.parse()?,
            keep_fraction_floor: p!("keep_fraction_floor"),
            max_redraws: p!("max_redraws"),
            max_bursts: p!("max_bursts"),
        };
        let seed: u64 = p!("seed");
        let n_records: usize = p!("records");
        let skipped = get("skipped_points")?;
        let stats = GenStats {
            discarded_channels: p!("discarded_channels"),
            skipped_points: if skipped.is_empty() {
                Vec::new()
            } else {
                skipped
                    .split(',')
                    .map(|g| parse(&mpath, "skipped_points", g.trim()))
                    .collect::<Result<_>>()?
            },
        };

        let rpath = dir.join(RECORDS);
        let mut r = BufReader::new(File::open(&rpath)?);
        let bad = |m: &str| format_err(&rpath, m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != RECORDS_MAGIC {
            return Err(bad("not a training-set record file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(b4) != RECORDS_VERSION {
            return Err(bad("unsupported record file version"));
        }
        let mut u64s = [0u64; 4];
        for v in &mut u64s {
            *v = read_u64(&mut r).map_err(|_| bad("truncated header"))?;
        }
        let n_prime = setup.n_prime();
        let n_bits = setup.n_d * setup.alphabet.bits_per_symbol();
        if u64s != [n_records as u64, setup.n_d as u64, n_prime as u64, n_bits as u64] {
            return Err(bad("record header disagrees with the manifest"));
        }
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let mut rec = || -> std::io::Result<Record> {
                let channel_id = read_u64(&mut r)?;
                let grid_index = read_u64(&mut r)?;
                let sigma_n2 = read_f64(&mut r)?;
                let mut bits = vec![0u8; n_bits];
                r.read_exact(&mut bits)?;
                let mut cplx = |n: usize| -> std::io::Result<CVector> {
                    (0..n)
                        .map(|_| Ok(C64::new(read_f64(&mut r)?, read_f64(&mut r)?)))
                        .collect::<std::io::Result<Vec<_>>>()
                        .map(CVector)
                };
                let d = cplx(setup.n_d)?;
                let y = cplx(n_prime)?;
                let h_tilde = (0..n_prime).map(|_| read_f64(&mut r)).collect::<std::io::Result<Vec<_>>>()?;
                Ok(Record {
                    bits,
                    d,
                    y,
                    h_tilde,
                    sigma_n2,
                    channel_id,
                    grid_index,
                })
            };
            records.push(rec().map_err(|_| bad("truncated record"))?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after the last record"));
        }
        Ok(Self {
            setup,
            config,
            seed,
            records,
            stats,
        })
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Optimizer schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stage weight exponent of the loss.
    pub r: f64,
    /// Shuffling seed.
    pub seed: u64,
}

impl Schedule {
    pub fn new(epochs: usize, learning_rate: f64) -> Self {
        Self {
            epochs,
            batch_size: 256,
            learning_rate,
            r: 1.0,
            seed: 0,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ber: f64,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    /// Best snapshot by validation BER.
    pub model: SicnnModel,
    pub history: Vec<EpochStats>,
    /// Validation BER of the initial parameters.
    pub initial_val_ber: f64,
    /// Epoch of the returned snapshot; 0 is the initialization.
    pub best_epoch: usize,
}

/// Index of the first minimum.
pub fn best_index(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] <= *v => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Normalized network inputs with their targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub n_prime: usize,
    pub y: Vec<CVector>,
    pub h_tilde: Vec<Vec<f64>>,
    pub sigma_n2: Vec<f64>,
    pub targets: Vec<Vec<(usize, usize)>>,
    pub bits: Vec<Vec<u8>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Batch of the given record indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(SicnnBatch, Vec<(usize, usize)>)> {
        let mut b = SicnnBatch::new(self.n_prime);
        let mut t = Vec::new();
        for &i in idx {
            b.push(&self.y[i], &self.h_tilde[i], self.sigma_n2[i])?;
            t.extend_from_slice(&self.targets[i]);
        }
        Ok((b, t))
    }
}

/// Normalizes every record of a set.
pub fn prepare(set: &TrainingSet) -> Result<Prepared> {
    let setup = &set.setup;
    let m = setup.model(vec![1.0; setup.n_prime()])?.m().clone();
    let a = &setup.alphabet;
    let mut p = Prepared {
        n_prime: setup.n_prime(),
        y: Vec::with_capacity(set.records.len()),
        h_tilde: Vec::with_capacity(set.records.len()),
        sigma_n2: Vec::with_capacity(set.records.len()),
        targets: Vec::with_capacity(set.records.len()),
        bits: Vec::with_capacity(set.records.len()),
    };
    for r in &set.records {
        let n = normalize(&r.h_tilde, &m, &r.y, r.sigma_n2)?;
        p.y.push(n.y);
        p.h_tilde.push(n.h_tilde);
        p.sigma_n2.push(n.sigma_n2);
        p.targets
            .push(r.d.iter().map(|d| (a.nearest_level(d.re), a.nearest_level(d.im))).collect());
        p.bits.push(r.bits.clone());
    }
    Ok(p)
}

/// Bit error rate of the model's final-stage decisions.
pub fn evaluate_ber(model: &SicnnModel, data: &Prepared) -> Result<f64> {
    const CHUNK: usize = 512;
    let idx: Vec<usize> = (0..data.len()).collect();
    let counts: Vec<Result<(u64, u64)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let (b, _) = data.batch(chunk)?;
            let decisions = model.decide(&b)?;
            let mut errs = 0u64;
            let mut bits = 0u64;
            for (i, d) in chunk.iter().zip(&decisions) {
                let hat = model.alphabet().hard_decide(d);
                errs += hat.iter().zip(&data.bits[*i]).filter(|(a, b)| a != b).count() as u64;
                bits += hat.len() as u64;
            }
            Ok((errs, bits))
        })
        .collect();
    let (mut e, mut n) = (0u64, 0u64);
    for c in counts {
        let (a, b) = c?;
        e += a;
        n += b;
    }
    if n == 0 {
        return Err(Error::InvalidParameter("empty validation set".into()));
    }
    Ok(e as f64 / n as f64)
}

fn check_compatible(model: &SicnnModel, set: &TrainingSet) -> Result<()> {
    let s = &set.setup;
    if model.mode() != s.mode
        || model.n_d() != s.n_d
        || model.n_g() != s.n_g
        || model.alphabet().modulation() != s.alphabet.modulation()
    {
        return Err(Error::Incompatible(format!(
            "model is {}/{} N_d={} N_g={}, data set is {}/{} N_d={} N_g={}",
            model.mode(),
            model.alphabet().modulation(),
            model.n_d(),
            model.n_g(),
            s.mode,
            s.alphabet.modulation(),
            s.n_d,
            s.n_g
        )));
    }
    Ok(())
}

/// Minibatch Adam on the stage-weighted cross entropy with early stopping on
/// validation BER.
///
/// Batches are drawn from a global shuffle of all records each epoch; a
/// trailing batch with a single vector is dropped.
pub fn train(mut model: SicnnModel, train_set: &TrainingSet, val_set: &TrainingSet, schedule: &Schedule) -> Result<Trained> {
    check_compatible(&model, train_set)?;
    check_compatible(&model, val_set)?;
    if train_set.records.is_empty() || val_set.records.is_empty() {
        return Err(Error::InvalidParameter("training and validation sets must be non-empty".into()));
    }
    if schedule.batch_size < 2 || !(schedule.learning_rate > 0.0) {
        return Err(Error::InvalidParameter("batch size must be >= 2 and the learning rate positive".into()));
    }
    let train_data = prepare(train_set)?;
    let val_data = prepare(val_set)?;
    train_prepared(&mut model, &train_data, &val_data, schedule)
}

/// [`train`] on already normalized data.
pub fn train_prepared(model: &mut SicnnModel, train_data: &Prepared, val_data: &Prepared, schedule: &Schedule) -> Result<Trained> {
    let spec = LossSpec {
        q: model.config().q,
        r: schedule.r,
    };
    let initial_val_ber = evaluate_ber(model, val_data)?;
    let mut best = (initial_val_ber, 0usize, model.clone());
    let mut adam = Adam::for_params(&model.params());
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let root = SimRng::new(schedule.seed);
    let mut batch_id = 0usize;
    for epoch in 1..=schedule.epochs {
        let mut rng = root.substream(&[epoch as u64]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for idx in order.chunks(schedule.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            batch_id += 1;
            let (batch, targets) = train_data.batch(idx)?;
            let fwd = model.forward(&batch, Mode::Train)?;
            let lo = weighted_ce_loss(&fwd.outputs, &targets, &spec)?;
            if !lo.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch_id,
                    learning_rate: schedule.learning_rate,
                });
            }
            let grads = model.backward(&batch, &fwd, &lo.grads)?;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch_id,
                    learning_rate: schedule.learning_rate,
                });
            }
            adam.step_params(model.params_mut(), &grads, schedule.learning_rate)?;
            model.update_running_stats(&fwd);
            loss_sum += lo.loss;
            n_batches += 1;
        }
        let val_ber = evaluate_ber(model, val_data)?;
        let train_loss = if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN };
        log::info!("epoch {epoch}: train loss {train_loss:.6}, validation BER {val_ber:.6e}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_ber,
        });
        if val_ber < best.0 {
            best = (val_ber, epoch, model.clone());
        }
    }
    Ok(Trained {
        model: best.2,
        history,
        initial_val_ber,
        best_epoch: best.1,
    })
}

/// Writes `epoch,train_loss,val_ber` rows.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_loss,val_ber")?;
    for h in history {
        writeln!(w, "{},{:.12e},{:.12e}", h.epoch, h.train_loss, h.val_ber)?;
    }
    w.flush()?;
    Ok(())
}

/// Training set stored in `dir`, or an error naming the directory.
pub fn load_dir(dir: &Path) -> Result<TrainingSet> {
    TrainingSet::load(dir).map_err(|e| match e {
        Error::Io(io) => Error::Format {
            path: PathBuf::from(dir),
            message: format!("cannot read training set: {io}"),
        },
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equalizers::lmmse;
    use crate::numerics::{gauss_cn_diag, Cholesky};
    use crate::sicnn::SicnnConfig;
    use crate::system::{Alphabet, Transmission};

    fn uw_setup() -> Setup {
        let ch = ChannelParams::with_default_taps(100e-9, 52e-9, 12).unwrap();
        Setup::new(GuardMode::UniqueWord, 20, 12, Modulation::Qpsk, ch).unwrap()
    }

    fn small_setup(mode: GuardMode) -> Setup {
        let ch = ChannelParams::new(1.0, 1.0, 3).unwrap();
        Setup::new(mode, 6, 3, Modulation::Qpsk, ch).unwrap()
    }

    #[test]
    fn kappa_identity_channel_cp() {
        for n in [4, 8, 32] {
            let model = SystemModel::new(GuardMode::CyclicPrefix, n, 1, vec![1.0; n], None).unwrap();
            let k = kappa(model.h_tilde(), model.m()).unwrap();
            assert!((k - 1.0 / (n as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_rejects_all_fade() {
        let model = SystemModel::new(GuardMode::CyclicPrefix, 4, 1, vec![0.0; 4], None).unwrap();
        assert!(matches!(kappa(model.h_tilde(), model.m()), Err(Error::Numeric(_))));
    }

    #[test]
    fn normalized_noise_is_white() {
        let setup = uw_setup();
        let mut rng = SimRng::new(3);
        let (_, h) = setup.draw_channel(&mut rng).unwrap();
        let model = setup.model(h.clone()).unwrap();
        let sn = 0.05;
        let (k, scale) = normalizer(&h, model.m()).unwrap();
        let n = setup.n_prime();
        let target = k * k * n as f64 * sn;
        let draws = 20_000;
        let mut diag = vec![0.0; n];
        let mut off01 = C64::new(0.0, 0.0);
        for _ in 0..draws {
            let w = gauss_cn_diag(&mut rng, &model.noise_variances(sn));
            let kw: Vec<C64> = w.iter().zip(&scale).map(|(w, s)| w * s).collect();
            for i in 0..n {
                diag[i] += kw[i].norm_sqr();
            }
            off01 += kw[0] * kw[1].conj();
        }
        for d in diag {
            assert!((d / draws as f64 / target - 1.0).abs() < 0.05);
        }
        assert!(off01.norm() / draws as f64 / target < 0.05);
    }

    #[test]
    fn zero_channel_entry_is_flagged() {
        let model = SystemModel::new(GuardMode::CyclicPrefix, 4, 1, vec![1.0, 0.0, 2.0, 0.5], None).unwrap();
        let y = vec![C64::new(1.0, 1.0); 4];
        let n = normalize(model.h_tilde(), model.m(), &y, 0.1).unwrap();
        assert_eq!(n.zero_entries, vec![1]);
        assert_eq!(n.y[1], C64::new(0.0, 0.0));
        assert_eq!(n.h_tilde[1], 0.0);
        assert!((n.h_tilde[2] - n.kappa * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_lmmse_is_invariant_to_normalization() {
        let setup = uw_setup();
        let a = &setup.alphabet;
        let mut rng = SimRng::new(4);
        for _ in 0..5 {
            let (_, h) = setup.draw_channel(&mut rng).unwrap();
            let model = setup.model(h.clone()).unwrap();
            let sn = ebn0_to_sigma_n2(6.0, a);
            let tx = Transmission::draw(&model, a, sn, &mut rng).unwrap();
            let raw = lmmse(&model, &tx.y, sn, a.variance()).unwrap();
            let nz = normalize(&h, model.m(), &tx.y, sn).unwrap();
            let g = model.m().scale_rows(&nz.h_tilde);
            let noise = nz.kappa * nz.kappa * setup.n_prime() as f64 * sn;
            let mut gram = g.adjoint_matmul(&g).unwrap();
            for i in 0..setup.n_d {
                gram[(i, i)] += noise / a.variance();
            }
            let rhs = g.adjoint_matvec(&nz.y).unwrap();
            let est = Cholesky::factor(&gram).unwrap().solve_vec(&rhs).unwrap();
            assert_eq!(a.hard_decide(&raw), a.hard_decide(&est));
        }
    }

    #[test]
    fn snr_grid_is_linear_uniform() {
        let cfg = GenConfig::new(3, 100, (2.0, 12.5), 7, Baseline::Lmmse);
        let lin: Vec<f64> = cfg.snr_grid_db().iter().map(|d| 10f64.powf(d / 10.0)).collect();
        let step = lin[1] - lin[0];
        for w in lin.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-9);
        }
        assert!((cfg.snr_grid_db()[0] - 2.0).abs() < 1e-12);
        assert!((cfg.snr_grid_db()[6] - 12.5).abs() < 1e-12);
    }

    #[test]
    fn presets_follow_the_table() {
        let c = GenConfig::preset(GuardMode::UniqueWord, Modulation::Qpsk).unwrap();
        assert_eq!((c.n_epd, c.n_burst, c.snr_range_db, c.baseline), (3, 100, (2.0, 12.5), Baseline::Lmmse));
        let c = GenConfig::preset(GuardMode::CyclicPrefix, Modulation::Qpsk).unwrap();
        assert_eq!((c.n_epd, c.n_burst, c.snr_range_db, c.baseline), (2, 100, (5.0, 18.0), Baseline::LmmseDiag));
        let c = GenConfig::preset(GuardMode::UniqueWord, Modulation::Qam16).unwrap();
        assert_eq!((c.n_epd, c.snr_range_db), (3, (6.0, 19.0)));
    }

    #[test]
    fn records_replay_with_enough_errors() {
        let setup = uw_setup();
        let cfg = GenConfig::new(3, 10, (2.0, 12.5), 6, Baseline::Lmmse);
        let set = generate_training_set(&setup, &cfg, 11).unwrap();
        assert_eq!(set.records.len() + 10 * set.stats.skipped_points.len(), 60);
        for r in &set.records {
            assert!(replay_errors(&setup, cfg.baseline, r).unwrap() >= 3);
            assert_eq!(setup.alphabet.modulate(&r.bits).unwrap(), r.d);
        }
    }

    #[test]
    fn terrible_snr_fills_quota_in_one_burst() {
        let setup = small_setup(GuardMode::CyclicPrefix);
        let mut cfg = GenConfig::new(1, 20, (-30.0, -29.0), 3, Baseline::LmmseDiag);
        cfg.max_bursts = cfg.n_check;
        let set = generate_training_set(&setup, &cfg, 5).unwrap();
        assert_eq!(set.records.len(), 60);
        assert_eq!(set.stats.discarded_channels, 0);
        for g in 0..3u64 {
            assert_eq!(set.records.iter().filter(|r| r.grid_index == g).count(), 20);
        }
    }

    #[test]
    fn flat_channel_at_high_snr_is_discarded() {
        let setup = small_setup(GuardMode::CyclicPrefix);
        let mut cfg = GenConfig::new(2, 10, (30.0, 31.0), 2, Baseline::LmmseDiag);
        cfg.max_redraws = 3;
        let flat = |s: &Setup, _: &mut SimRng| Ok(vec![1.0; s.n_prime()]);
        let set = generate_with_source(&setup, &cfg, 1, &flat).unwrap();
        assert!(set.records.is_empty());
        assert_eq!(set.stats.skipped_points, vec![0, 1]);
        assert_eq!(set.stats.discarded_channels, 6);
    }

    #[test]
    fn generation_is_independent_of_thread_count() {
        let setup = small_setup(GuardMode::UniqueWord);
        let cfg = GenConfig::new(1, 8, (0.0, 10.0), 5, Baseline::Lmmse);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate_training_set(&setup, &cfg, 9).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn save_load_round_trip() {
        let setup = small_setup(GuardMode::UniqueWord);
        let cfg = GenConfig::new(1, 4, (0.0, 10.0), 3, Baseline::Lmmse);
        let set = generate_training_set(&setup, &cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        assert_eq!(TrainingSet::load(dir.path()).unwrap(), set);
        let bytes = fs::read(dir.path().join(RECORDS)).unwrap();
        fs::write(dir.path().join(RECORDS), &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(TrainingSet::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn best_index_picks_first_minimum() {
        assert_eq!(best_index(&[0.1, 0.05, 0.07]), Some(1));
        assert_eq!(best_index(&[0.2, 0.1, 0.1]), Some(1));
        assert_eq!(best_index(&[]), None);
    }

    fn toy_sets() -> (Setup, TrainingSet, TrainingSet) {
        let setup = small_setup(GuardMode::UniqueWord);
        let cfg = GenConfig::new(1, 16, (2.0, 8.0), 4, Baseline::Lmmse);
        let tr = generate_training_set(&setup, &cfg, 21).unwrap();
        let va = generate_training_set(&setup, &cfg, 22).unwrap();
        (setup, tr, va)
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let (setup, tr, va) = toy_sets();
        let mut rng = SimRng::new(1);
        let model = SicnnModel::new(SicnnConfig::v1(2, 1, 8, 1, 4), &setup.alphabet, setup.mode, setup.n_d, setup.n_g, &mut rng).unwrap();
        let out = train(model.clone(), &tr, &va, &Schedule::new(0, 1e-3)).unwrap();
        assert_eq!(out.model, model);
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn incompatible_alphabet_is_rejected() {
        let (setup, tr, va) = toy_sets();
        let mut rng = SimRng::new(1);
        let model = SicnnModel::new(SicnnConfig::v2(1, 2, 8), &Alphabet::qam16(), setup.mode, setup.n_d, setup.n_g, &mut rng).unwrap();
        assert!(matches!(train(model, &tr, &va, &Schedule::new(1, 1e-3)), Err(Error::Incompatible(_))));
    }

    #[test]
    fn one_batch_overfits() {
        let (setup, tr, _) = toy_sets();
        let data = prepare(&tr).unwrap();
        let mut rng = SimRng::new(2);
        for cfg in [SicnnConfig::v1(2, 2, 16, 1, 8), SicnnConfig::v2(2, 2, 16)] {
            let mut model = SicnnModel::new(cfg, &setup.alphabet, setup.mode, setup.n_d, setup.n_g, &mut rng).unwrap();
            let idx: Vec<usize> = (0..32).collect();
            let (batch, targets) = data.batch(&idx).unwrap();
            let spec = LossSpec { q: 2, r: 1.0 };
            let mut adam = Adam::for_params(&model.params());
            let mut prev = f64::INFINITY;
            for _ in 0..10 {
                let fwd = model.forward(&batch, Mode::Train).unwrap();
                let lo = weighted_ce_loss(&fwd.outputs, &targets, &spec).unwrap();
                assert!(lo.loss < prev, "loss {} after {prev}", lo.loss);
                prev = lo.loss;
                let g = model.backward(&batch, &fwd, &lo.grads).unwrap();
                adam.step_params(model.params_mut(), &g, 1e-3).unwrap();
            }
        }
    }

    #[test]
    fn training_records_history_and_best_snapshot() {
        let (setup, tr, va) = toy_sets();
        let mut rng = SimRng::new(3);
        let model = SicnnModel::new(SicnnConfig::v1(2, 1, 8, 1, 4), &setup.alphabet, setup.mode, setup.n_d, setup.n_g, &mut rng).unwrap();
        let mut s = Schedule::new(3, 2e-3);
        s.batch_size = 16;
        let out = train(model, &tr, &va, &s).unwrap();
        assert_eq!(out.history.len(), 3);
        let mut all = vec![out.initial_val_ber];
        all.extend(out.history.iter().map(|h| h.val_ber));
        assert_eq!(best_index(&all), Some(out.best_epoch));
        let ber = evaluate_ber(&out.model, &prepare(&va).unwrap()).unwrap();
        assert_eq!(ber, all[out.best_epoch]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history_csv(&p, &out.history).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap().lines().count(), 4);
    }
}
