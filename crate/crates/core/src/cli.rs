//! Command-line pipeline: configuration files, dataset generation, training,
//! BER evaluation and complexity tables.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::RngCore;

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::harness::{ber_sweep, complexity, csv_string, file_hash, ComplexityInput, Estimator, RunManifest, SweepConfig};
use crate::numerics::SimRng;
use crate::sicnn::{SicnnConfig, SicnnModel, Variant};
use crate::system::{GuardMode, Modulation, Setup};
use crate::training::{generate_training_set, load_dir, train, write_history_csv, Baseline, GenConfig, Schedule};

/// `[system]`
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSection {
    pub mode: GuardMode,
    pub n_d: usize,
    pub n_g: usize,
    pub alphabet: Modulation,
}

/// `[channel]`; `n_taps` falls back to the 99.9% energy rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSection {
    pub tau_rms: f64,
    pub t_s: f64,
    pub n_taps: Option<usize>,
}

/// `[gen]`
#[derive(Clone, Debug, PartialEq)]
pub struct GenSection {
    pub config: GenConfig,
    /// Grid size of the validation set.
    pub val_channels: usize,
}

/// `[train]`
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub sicnn: SicnnConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub r: f64,
}

/// `[eval]`
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub ebn0_db: Vec<f64>,
    pub n_channels: usize,
    pub blocks_per_burst: usize,
    pub roster: Vec<String>,
}

/// `[complexity]`
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexitySection {
    pub tags: Vec<String>,
    pub itsic_q: usize,
    pub detnet_layers: usize,
    pub detnet_d_h: usize,
    pub detnet_d_v: usize,
    pub kafcnn_layers: usize,
    pub kafcnn_n_h: usize,
    pub oamp_layers: usize,
}

/// A parsed configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemSection,
    pub channel: ChannelSection,
    pub gen: Option<GenSection>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub complexity: Option<ComplexitySection>,
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Sections {
    path: String,
    map: BTreeMap<String, BTreeMap<String, Entry>>,
    lines: BTreeMap<String, usize>,
}

impl Sections {
    fn parse(path: &str, text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut lines = BTreeMap::new();
        let mut current = String::new();
        map.insert(current.clone(), BTreeMap::new());
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config {
                path: path.to_string(),
                line: line_no,
                message,
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                    .trim()
                    .to_string();
                if map.contains_key(&name) {
                    return Err(err(format!("duplicate section [{name}]")));
                }
                map.insert(name.clone(), BTreeMap::new());
                lines.insert(name.clone(), line_no);
                current = name;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let k = k.trim().to_string();
            let sec = map.get_mut(&current).expect("section inserted");
            if sec.contains_key(&k) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            sec.insert(
                k,
                Entry {
                    value: v.trim().to_string(),
                    line: line_no,
                    used: false,
                },
            );
        }
        Ok(Self {
            path: path.to_string(),
            map,
            lines,
        })
    }

    fn has(&self, section: &str) -> bool {
        self.map.contains_key(section)
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.map.get_mut(section)?.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn opt<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| Error::Config {
                path: self.path.clone(),
                line,
                message: format!("invalid value `{v}` for key `{key}`"),
            }),
        }
    }

    fn req<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T> {
        self.opt(section, key)?.ok_or_else(|| Error::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    fn or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.opt(section, key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Vec<T>> {
        let (v, line) = self.raw(section, key).ok_or_else(|| Error::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })?;
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Config {
                    path: self.path.clone(),
                    line,
                    message: format!("invalid list item `{s}` for key `{key}`"),
                })
            })
            .collect()
    }

    fn check_unused(&self) -> Result<()> {
        for (sec, entries) in &self.map {
            for (k, e) in entries {
                if !e.used {
                    let where_ = if sec.is_empty() { String::new() } else { format!(" in section [{sec}]") };
                    return Err(Error::Config {
                        path: self.path.clone(),
                        line: e.line,
                        message: format!("unknown key `{k}`{where_}"),
                    });
                }
            }
        }
        for (sec, line) in &self.lines {
            if !["system", "channel", "gen", "train", "eval", "complexity"].contains(&sec.as_str()) {
                return Err(Error::Config {
                    path: self.path.clone(),
                    line: *line,
                    message: format!("unknown section [{sec}]"),
                });
            }
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses configuration text; `path` is only used in diagnostics.
    pub fn parse(path: &str, text: &str) -> Result<Self> {
        let mut s = Sections::parse(path, text)?;
        let seed = s.or("", "seed", 0u64)?;
        let system = SystemSection {
            mode: s.req("system", "mode")?,
            n_d: s.req("system", "n_d")?,
            n_g: s.req("system", "n_g")?,
            alphabet: s.req("system", "alphabet")?,
        };
        let channel = ChannelSection {
            tau_rms: s.req("channel", "tau_rms")?,
            t_s: s.req("channel", "t_s")?,
            n_taps: s.opt("channel", "n_taps")?,
        };
        let gen = if s.has("gen") {
            let mut c = GenConfig::new(
                s.req("gen", "n_epd")?,
                s.req("gen", "n_burst")?,
                (s.req("gen", "snr_lo_db")?, s.req("gen", "snr_hi_db")?),
                s.req("gen", "n_channels")?,
                s.req::<Baseline>("gen", "baseline")?,
            );
            c.n_check = s.or("gen", "n_check", c.n_check)?;
            c.keep_fraction_floor = s.or("gen", "keep_fraction_floor", c.keep_fraction_floor)?;
            c.max_redraws = s.or("gen", "max_redraws", c.max_redraws)?;
            c.max_bursts = s.or("gen", "max_bursts", c.max_bursts)?;
            Some(GenSection {
                config: c,
                val_channels: s.or("gen", "val_channels", 500)?,
            })
        } else {
            None
        };
        let train = if s.has("train") {
            let variant: Variant = s.req("train", "variant")?;
            let q = s.req("train", "q")?;
            let mut sicnn = match variant {
                Variant::V1 => SicnnConfig::v1(
                    q,
                    s.req("train", "n_l_c")?,
                    s.req("train", "n_h_c")?,
                    s.req("train", "n_l_p")?,
                    s.req("train", "n_h_p")?,
                ),
                Variant::V2 => SicnnConfig::v2(q, s.req("train", "n_l")?, s.req("train", "n_h")?),
            };
            sicnn.shared = s.or("train", "shared", false)?;
            sicnn.detach = s.or("train", "detach", false)?;
            let r = s.or("train", "r", if sicnn.shared { 4.0 } else { 1.0 })?;
            Some(TrainSection {
                sicnn,
                learning_rate: s.req("train", "learning_rate")?,
                epochs: s.req("train", "epochs")?,
                batch_size: s.or("train", "batch_size", 256)?,
                r,
            })
        } else {
            None
        };
        let eval = if s.has("eval") {
            Some(EvalSection {
                ebn0_db: s.list("eval", "ebn0_db")?,
                n_channels: s.req("eval", "n_channels")?,
                blocks_per_burst: s.or("eval", "blocks_per_burst", 1000)?,
                roster: s.list("eval", "roster")?,
            })
        } else {
            None
        };
        let complexity = if s.has("complexity") {
            Some(ComplexitySection {
                tags: s.list("complexity", "tags")?,
                itsic_q: s.or("complexity", "itsic_q", 3)?,
                detnet_layers: s.or("complexity", "detnet_layers", 15)?,
                detnet_d_h: s.or("complexity", "detnet_d_h", 200)?,
                detnet_d_v: s.or("complexity", "detnet_d_v", 20)?,
                kafcnn_layers: s.or("complexity", "kafcnn_layers", 12)?,
                kafcnn_n_h: s.or("complexity", "kafcnn_n_h", 250)?,
                oamp_layers: s.or("complexity", "oamp_layers", 8)?,
            })
        } else {
            None
        };
        s.check_unused()?;
        let cfg = Self {
            seed,
            system,
            channel,
            gen,
            train,
            eval,
            complexity,
        };
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Reads and parses a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text)
    }

    fn validate(&self) -> Result<()> {
        self.setup()?;
        if let Some(g) = &self.gen {
            g.config.validate()?;
            if g.val_channels == 0 {
                return Err(Error::InvalidParameter("val_channels must be positive".into()));
            }
        }
        if let Some(t) = &self.train {
            t.sicnn.validate()?;
            if !(t.learning_rate > 0.0) || t.batch_size < 2 || !(t.r >= 1.0) {
                return Err(Error::InvalidParameter(
                    "training needs learning_rate > 0, batch_size >= 2 and r >= 1".into(),
                ));
            }
        }
        if let Some(e) = &self.eval {
            if e.ebn0_db.is_empty() || e.n_channels == 0 || e.blocks_per_burst == 0 {
                return Err(Error::InvalidParameter("eval grid, channel count and burst length must be non-empty".into()));
            }
            for t in &e.roster {
                Estimator::from_tag(t)?;
            }
        }
        Ok(())
    }

    /// The link described by `[system]` and `[channel]`.
    pub fn setup(&self) -> Result<Setup> {
        let s = &self.system;
        let c = &self.channel;
        let params = match c.n_taps {
            Some(n) => ChannelParams::new(c.tau_rms, c.t_s, n)?,
            None => ChannelParams::with_default_taps(c.tau_rms, c.t_s, s.n_g)?,
        };
        Setup::new(s.mode, s.n_d, s.n_g, s.alphabet, params)
    }

    fn gen(&self) -> Result<&GenSection> {
        self.gen.as_ref().ok_or_else(|| missing("gen", "n_epd"))
    }

    fn train_section(&self) -> Result<&TrainSection> {
        self.train.as_ref().ok_or_else(|| missing("train", "variant"))
    }

    fn eval(&self) -> Result<&EvalSection> {
        self.eval.as_ref().ok_or_else(|| missing("eval", "ebn0_db"))
    }

    fn complexity_section(&self) -> Result<&ComplexitySection> {
        self.complexity.as_ref().ok_or_else(|| missing("complexity", "tags"))
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn serialize(&self) -> String {
        let mut o = String::new();
        let s = &self.system;
        let _ = writeln!(o, "seed = {}\n", self.seed);
        let _ = writeln!(o, "[system]\nmode = {}\nn_d = {}\nn_g = {}\nalphabet = {}\n", s.mode, s.n_d, s.n_g, s.alphabet);
        let c = &self.channel;
        let _ = writeln!(o, "[channel]\ntau_rms = {}\nt_s = {}", fmt_f64(c.tau_rms), fmt_f64(c.t_s));
        if let Some(n) = c.n_taps {
            let _ = writeln!(o, "n_taps = {n}");
        }
        if let Some(g) = &self.gen {
            let c = &g.config;
            let _ = writeln!(
                o,
                "\n[gen]\nn_epd = {}\nn_burst = {}\nn_check = {}\nsnr_lo_db = {}\nsnr_hi_db = {}\nn_channels = {}\nval_channels = {}\nbaseline = {}\nkeep_fraction_floor = {}\nmax_redraws = {}\nmax_bursts = {}",
                c.n_epd,
                c.n_burst,
                c.n_check,
                fmt_f64(c.snr_range_db.0),
                fmt_f64(c.snr_range_db.1),
                c.n_channels,
                g.val_channels,
                c.baseline,
                fmt_f64(c.keep_fraction_floor),
                c.max_redraws,
                c.max_bursts
            );
        }
        if let Some(t) = &self.train {
            let n = &t.sicnn;
            let _ = writeln!(o, "\n[train]\nvariant = {}\nshared = {}\ndetach = {}\nq = {}", n.variant, n.shared, n.detach, n.q);
            match n.variant {
                Variant::V1 => {
                    let _ = writeln!(o, "n_l_c = {}\nn_h_c = {}\nn_l_p = {}\nn_h_p = {}", n.n_l_c, n.n_h_c, n.n_l_p, n.n_h_p);
                }
                Variant::V2 => {
                    let _ = writeln!(o, "n_l = {}\nn_h = {}", n.n_l, n.n_h);
                }
            }
            let _ = writeln!(
                o,
                "learning_rate = {}\nepochs = {}\nbatch_size = {}\nr = {}",
                fmt_f64(t.learning_rate),
                t.epochs,
                t.batch_size,
                fmt_f64(t.r)
            );
        }
        if let Some(e) = &self.eval {
            let grid: Vec<String> = e.ebn0_db.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(
                o,
                "\n[eval]\nebn0_db = {}\nn_channels = {}\nblocks_per_burst = {}\nroster = {}",
                grid.join(", "),
                e.n_channels,
                e.blocks_per_burst,
                join(&e.roster)
            );
        }
        if let Some(c) = &self.complexity {
            let _ = writeln!(
                o,
                "\n[complexity]\ntags = {}\nitsic_q = {}\ndetnet_layers = {}\ndetnet_d_h = {}\ndetnet_d_v = {}\nkafcnn_layers = {}\nkafcnn_n_h = {}\noamp_layers = {}",
                join(&c.tags),
                c.itsic_q,
                c.detnet_layers,
                c.detnet_d_h,
                c.detnet_d_v,
                c.kafcnn_layers,
                c.kafcnn_n_h,
                c.oamp_layers
            );
        }
        o
    }
}

fn missing(section: &str, key: &str) -> Error {
    Error::MissingKey {
        section: section.to_string(),
        key: key.to_string(),
    }
}

/// Seed of an auxiliary stream (validation data, initialisation, shuffling).
pub fn derived_seed(seed: u64, key: u64) -> u64 {
    SimRng::new(seed).substream(&[key]).next_u64()
}

/// Writes `<out>/train` and `<out>/val` training sets.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let setup = cfg.setup()?;
    let g = cfg.gen()?;
    let train_set = generate_training_set(&setup, &g.config, cfg.seed)?;
    let mut val_cfg = g.config.clone();
    val_cfg.n_channels = g.val_channels;
    let val_set = generate_training_set(&setup, &val_cfg, derived_seed(cfg.seed, 1))?;
    log::info!(
        "generated {} training and {} validation vectors ({} + {} channels discarded)",
        train_set.records.len(),
        val_set.records.len(),
        train_set.stats.discarded_channels,
        val_set.stats.discarded_channels
    );
    train_set.save(&out.join("train"))?;
    val_set.save(&out.join("val"))?;
    Ok(())
}

/// Trains on `<data>/train` with early stopping on `<data>/val`; writes
/// `model.sicnn`, `history.csv` and `manifest.txt` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    let setup = cfg.setup()?;
    let t = cfg.train_section()?;
    let train_set = load_dir(&data.join("train"))?;
    let val_set = load_dir(&data.join("val"))?;
    for set in [&train_set, &val_set] {
        if set.setup.mode != setup.mode
            || set.setup.n_d != setup.n_d
            || set.setup.n_g != setup.n_g
            || set.setup.alphabet != setup.alphabet
        {
            return Err(Error::Incompatible(format!(
                "data set is {}/{} N_d={} N_g={}, configuration is {}/{} N_d={} N_g={}",
                set.setup.mode,
                set.setup.alphabet.modulation(),
                set.setup.n_d,
                set.setup.n_g,
                setup.mode,
                setup.alphabet.modulation(),
                setup.n_d,
                setup.n_g
            )));
        }
    }
    let mut init_rng = SimRng::new(derived_seed(cfg.seed, 2));
    let model = SicnnModel::new(t.sicnn, &setup.alphabet, setup.mode, setup.n_d, setup.n_g, &mut init_rng)?;
    let schedule = Schedule {
        epochs: epochs.unwrap_or(t.epochs),
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        r: t.r,
        seed: derived_seed(cfg.seed, 3),
    };
    let trained = train(model, &train_set, &val_set, &schedule)?;
    fs::create_dir_all(out)?;
    let ckpt = out.join("model.sicnn");
    let mut w = BufWriter::new(File::create(&ckpt)?);
    trained.model.write_to(&mut w)?;
    w.flush()?;
    drop(w);
    write_history_csv(&out.join("history.csv"), &trained.history)?;
    let mut m = RunManifest::default();
    m.push("command", "train");
    m.push("seed", cfg.seed);
    m.push("epochs", schedule.epochs);
    m.push("initial_val_ber", format!("{:e}", trained.initial_val_ber));
    m.push("best_epoch", trained.best_epoch);
    m.push("train_manifest", file_hash(&data.join("train").join("manifest.txt"))?);
    m.push("train_records", file_hash(&data.join("train").join("records.bin"))?);
    m.push("val_records", file_hash(&data.join("val").join("records.bin"))?);
    m.push("checkpoint", file_hash(&ckpt)?);
    m.write(&out.join("manifest.txt"))?;
    fs::write(out.join("config.cfg"), cfg.serialize())?;
    Ok(())
}

/// Loads a checkpoint written by `cmd_train`.
pub fn load_checkpoint(path: &Path) -> Result<SicnnModel> {
    let mut r = BufReader::new(File::open(path)?);
    SicnnModel::read_from(&mut r).map_err(|e| match e {
        Error::Io(io) => Error::Format {
            path: path.to_path_buf(),
            message: io.to_string(),
        },
        e => e,
    })
}

/// Sweeps the configured roster plus the given checkpoints; writes
/// `ber.csv` and `manifest.txt` into `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let setup = cfg.setup()?;
    let e = cfg.eval()?;
    let mut roster: Vec<Estimator> = e.roster.iter().map(|t| Estimator::from_tag(t)).collect::<Result<_>>()?;
    let mut m = RunManifest::default();
    m.push("command", "eval");
    m.push("seed", cfg.seed);
    for path in checkpoints {
        let model = load_checkpoint(path)?;
        if model.mode() != setup.mode
            || model.n_d() != setup.n_d
            || model.n_g() != setup.n_g
            || model.alphabet() != &setup.alphabet
        {
            return Err(Error::Incompatible(format!("checkpoint {} does not match the configured system", path.display())));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().replace(',', "_"))
            .unwrap_or_else(|| "sicnn".into());
        m.push(format!("checkpoint.{name}"), file_hash(path)?);
        roster.push(Estimator::Sicnn {
            name,
            model: Arc::new(model),
        });
    }
    let outcome = ber_sweep(
        &setup,
        &SweepConfig {
            ebn0_db: e.ebn0_db.clone(),
            n_channels: e.n_channels,
            blocks_per_burst: e.blocks_per_burst,
            roster,
            seed: cfg.seed,
        },
    )?;
    fs::create_dir_all(out)?;
    let csv = csv_string(&outcome.report)?;
    fs::write(out.join("ber.csv"), &csv)?;
    for (name, f) in outcome.report.names.iter().zip(&outcome.failures) {
        m.push(format!("failures.{name}"), f);
    }
    m.push("ber_csv", crate::harness::content_hash(csv.as_bytes()));
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

/// Complexity inputs for one tag from the configuration.
pub fn complexity_input(cfg: &RunConfig, tag: &str) -> Result<ComplexityInput> {
    let setup = cfg.setup()?;
    let c = cfg.complexity_section()?;
    let mut input = ComplexityInput::new(tag, setup.n_d, setup.n_prime(), setup.n_g, setup.alphabet.levels().len());
    match tag {
        "SICNNv1" | "SICNNv2" => {
            let t = cfg.train_section()?;
            let n = &t.sicnn;
            let want = if tag == "SICNNv1" { Variant::V1 } else { Variant::V2 };
            if n.variant != want {
                return Err(Error::Incompatible(format!("{tag} needs a [train] section with variant = {want}")));
            }
            input.q = n.q as i128;
            input.n_l_c = n.n_l_c as i128;
            input.n_h_c = n.n_h_c as i128;
            input.n_l_p = n.n_l_p as i128;
            input.n_h_p = n.n_h_p as i128;
            input.n_l = n.n_l as i128;
            input.n_h = n.n_h as i128;
        }
        "itSIC" => input.q = c.itsic_q as i128,
        "DetNet" => {
            input.layers = c.detnet_layers as i128;
            input.d_h = c.detnet_d_h as i128;
            input.d_v = c.detnet_d_v as i128;
        }
        "KAFCNN" => {
            input.n_l = c.kafcnn_layers as i128;
            input.n_h = c.kafcnn_n_h as i128;
        }
        "OAMPNet2" => input.layers = c.oamp_layers as i128,
        _ => {}
    }
    Ok(input)
}

/// `tag,raw,rounded` rows; `raw` is exact (a fraction when not integral).
pub fn complexity_table(cfg: &RunConfig) -> Result<String> {
    let c = cfg.complexity_section()?;
    if c.tags.is_empty() {
        return Err(Error::EmptyRoster);
    }
    let mut o = String::from("tag,raw,rounded\n");
    for tag in &c.tags {
        let count = complexity(&complexity_input(cfg, tag)?)?;
        let _ = writeln!(o, "{tag},{},{}", count.raw, count.rounded);
    }
    Ok(o)
}

/// Writes `complexity.csv` into `out`.
pub fn cmd_complexity(cfg: &RunConfig, out: &Path) -> Result<()> {
    let table = complexity_table(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("complexity.csv"), table)?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "scfde", about = "SC-FDE equalizer simulation: data generation, SICNN training, BER and complexity")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training and validation sets.
    Gen { config: PathBuf },
    /// Train a SICNN on a generated data set.
    Train {
        config: PathBuf,
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// BER sweep of the configured roster and any checkpoints.
    Eval { config: PathBuf, checkpoints: Vec<PathBuf> },
    /// Multiplication counts of the configured estimator tags.
    Complexity { config: PathBuf },
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    let load = |p: &Path| -> Result<RunConfig> {
        let mut c = RunConfig::load(p)?;
        if let Some(s) = cli.seed {
            c.seed = s;
        }
        Ok(c)
    };
    match &cli.command {
        Command::Gen { config } => cmd_gen(&load(config)?, &cli.out),
        Command::Train { config, data, epochs } => cmd_train(&load(config)?, data, &cli.out, *epochs),
        Command::Eval { config, checkpoints } => cmd_eval(&load(config)?, checkpoints, &cli.out),
        Command::Complexity { config } => cmd_complexity(&load(config)?, &cli.out),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
