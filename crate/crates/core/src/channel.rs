//! Rayleigh multipath channels with an exponential power delay profile and
//! the composite frequency response seen by the equalizer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{SimRng, C64};

/// Statistical channel model parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelParams {
    /// RMS delay spread in seconds.
    pub tau_rms: f64,
    /// Baseband sampling time (tap spacing) in seconds.
    pub t_s: f64,
    pub n_taps: usize,
}

impl ChannelParams {
    pub fn new(tau_rms: f64, t_s: f64, n_taps: usize) -> Result<Self> {
        if !(tau_rms > 0.0) || !(t_s > 0.0) || n_taps == 0 {
            return Err(Error::InvalidParameter(format!(
                "channel parameters need tau_rms > 0, t_s > 0, n_taps >= 1 (got {tau_rms}, {t_s}, {n_taps})"
            )));
        }
        Ok(Self { tau_rms, t_s, n_taps })
    }

    /// Uses the smallest tap count that holds 99.9% of the profile energy,
    /// capped at the guard length.
    pub fn with_default_taps(tau_rms: f64, t_s: f64, guard_len: usize) -> Result<Self> {
        Self::new(tau_rms, t_s, 1)?;
        Self::new(tau_rms, t_s, default_tap_count(tau_rms, t_s, guard_len))
    }

    /// Relative power of tap `l` before normalization.
    pub fn tap_power(&self, l: usize) -> f64 {
        (-(l as f64) * self.t_s / self.tau_rms).exp()
    }
}

/// Smallest `L` with `1 - exp(-L·T_s/τ) ≥ 0.999`, clamped to `[1, guard_len]`.
pub fn default_tap_count(tau_rms: f64, t_s: f64, guard_len: usize) -> usize {
    let l = (-(tau_rms / t_s) * 0.001f64.ln()).ceil().max(1.0) as usize;
    l.min(guard_len.max(1))
}

/// One channel impulse response with unit total energy.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTaps {
    pub taps: Vec<C64>,
}

impl ChannelTaps {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t.norm_sqr()).sum()
    }
}

/// Draws a tapped-delay-line realization: independent complex Gaussian taps
/// (Rayleigh magnitude, uniform phase) with exponentially decaying power,
/// normalized to unit energy.
pub fn sample_channel(rng: &mut SimRng, params: &ChannelParams) -> ChannelTaps {
    loop {
        let mut taps: Vec<C64> = (0..params.n_taps)
            .map(|l| rng.complex_normal() * params.tap_power(l).sqrt())
            .collect();
        let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
        if energy > 0.0 {
            let scale = energy.sqrt().recip();
            taps.iter_mut().for_each(|t| *t *= scale);
            return ChannelTaps { taps };
        }
    }
}

/// Diagonal of the composite response: `|Λ_i|²` with `Λ` the `n_prime`-point
/// DFT of the zero-padded taps.
pub fn composite_diag(taps: &ChannelTaps, n_prime: usize) -> Result<Vec<f64>> {
    if taps.taps.len() > n_prime {
        return Err(Error::InvalidParameter(format!(
            "{} taps exceed the {n_prime}-point block",
            taps.taps.len()
        )));
    }
    let n = n_prime as f64;
    Ok((0..n_prime)
        .map(|i| {
            let lambda: C64 = taps
                .taps
                .iter()
                .enumerate()
                .map(|(l, &h)| {
                    let t = (i * l) % n_prime;
                    h * C64::from_polar(1.0, -2.0 * std::f64::consts::PI * t as f64 / n)
                })
                .sum();
            lambda.norm_sqr()
        })
        .collect())
}

/// Writes channels as CSV rows `channel_id,tap_index,re,im`.
pub fn write_channels_csv(path: &Path, channels: &[(u64, ChannelTaps)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "channel_id,tap_index,re,im")?;
    for (id, ch) in channels {
        for (l, t) in ch.taps.iter().enumerate() {
            writeln!(w, "{id},{l},{:?},{:?}", t.re, t.im)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads channels written by [`write_channels_csv`], in file order.
pub fn read_channels_csv(path: &Path) -> Result<Vec<(u64, ChannelTaps)>> {
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<(u64, ChannelTaps)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "channel_id,tap_index,re,im" {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        let id: u64 = fields[0].parse().map_err(|_| bad(i + 1, "bad channel id"))?;
        let tap: usize = fields[1].parse().map_err(|_| bad(i + 1, "bad tap index"))?;
        let re: f64 = fields[2].parse().map_err(|_| bad(i + 1, "bad real part"))?;
        let im: f64 = fields[3].parse().map_err(|_| bad(i + 1, "bad imaginary part"))?;
        match out.last_mut() {
            Some((last, ch)) if *last == id => {
                if tap != ch.taps.len() {
                    return Err(bad(i + 1, "tap indices must be consecutive"));
                }
                ch.taps.push(C64::new(re, im));
            }
            _ => {
                if tap != 0 {
                    return Err(bad(i + 1, "first tap of a channel must have index 0"));
                }
                out.push((id, ChannelTaps { taps: vec![C64::new(re, im)] }));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> ChannelParams {
        ChannelParams::new(100e-9, 52e-9, 16).unwrap()
    }

    #[test]
    fn parameter_validation() {
        assert!(ChannelParams::new(0.0, 1.0, 1).is_err());
        assert!(ChannelParams::new(1.0, 0.0, 1).is_err());
        assert!(ChannelParams::new(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn default_tap_rule() {
        // ceil(100/52 · ln 1000) = ceil(13.28) = 14, capped at the guard.
        assert_eq!(default_tap_count(100e-9, 52e-9, 32), 14);
        assert_eq!(default_tap_count(100e-9, 52e-9, 12), 12);
        assert_eq!(default_tap_count(1e-12, 52e-9, 12), 1);
    }

    #[test]
    fn every_draw_has_unit_energy() {
        let mut rng = SimRng::new(1);
        for _ in 0..1000 {
            let ch = sample_channel(&mut rng, &reference_params());
            assert!((ch.energy() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_delay_spread_concentrates_energy() {
        let params = ChannelParams::new(52e-9 / 100.0, 52e-9, 8).unwrap();
        let mut rng = SimRng::new(2);
        for _ in 0..200 {
            let ch = sample_channel(&mut rng, &params);
            assert!(ch.taps[0].norm_sqr() >= 0.99);
        }
    }

    #[test]
    fn power_profile_matches_exponential_decay() {
        let params = reference_params();
        let mut rng = SimRng::new(3);
        let draws = 100_000;
        let mut profile = vec![0.0; params.n_taps];
        for _ in 0..draws {
            let ch = sample_channel(&mut rng, &params);
            for (p, t) in profile.iter_mut().zip(&ch.taps) {
                *p += t.norm_sqr() / draws as f64;
            }
        }
        // Exponential fit: linear regression of ln E|h_l|² on l.
        let n = profile.len() as f64;
        let xs: Vec<f64> = (0..profile.len()).map(|l| l as f64).collect();
        let ys: Vec<f64> = profile.iter().map(|p| p.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
            .sum();
        let r2 = 1.0 - ss_res / ss_tot;
        let rate = params.t_s / params.tau_rms;
        assert!((-slope / rate - 1.0).abs() < 0.1, "decay rate {} vs {rate}", -slope);
        assert!(r2 >= 0.99, "R² = {r2}");
    }

    #[test]
    fn flat_channel_gives_identity() {
        let ch = ChannelTaps { taps: vec![C64::new(1.0, 0.0)] };
        let d = composite_diag(&ch, 8).unwrap();
        assert!(d.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn two_tap_channel_has_spectral_null() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ch = ChannelTaps { taps: vec![C64::new(s, 0.0), C64::new(s, 0.0)] };
        let d = composite_diag(&ch, 4).unwrap();
        for (v, e) in d.iter().zip([2.0, 1.0, 0.0, 1.0]) {
            assert!((v - e).abs() < 1e-12, "{d:?}");
        }
        assert!(composite_diag(&ch, 1).is_err());
    }

    #[test]
    fn parseval_trace() {
        let mut rng = SimRng::new(4);
        for _ in 0..100 {
            let ch = sample_channel(&mut rng, &ChannelParams::new(100e-9, 52e-9, 12).unwrap());
            let d = composite_diag(&ch, 32).unwrap();
            assert!(d.iter().all(|&v| v >= 0.0));
            assert!((d.iter().sum::<f64>() - 32.0).abs() < 1e-8);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("channels.csv");
        let mut rng = SimRng::new(5);
        let chans: Vec<(u64, ChannelTaps)> = (0..3)
            .map(|i| (i as u64 * 7, sample_channel(&mut rng, &reference_params())))
            .collect();
        write_channels_csv(&path, &chans).unwrap();
        assert_eq!(read_channels_csv(&path).unwrap(), chans);
    }
}
