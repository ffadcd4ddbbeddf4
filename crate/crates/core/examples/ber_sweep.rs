//! Model-based BER curves for UW/QPSK, written as CSV to stdout.
//!
//! `cargo run --release --example ber_sweep -- [channels]`

use scfde_sicnn::channel::ChannelParams;
use scfde_sicnn::harness::{ber_sweep, csv_string, Estimator, SweepConfig};
use scfde_sicnn::system::{GuardMode, Modulation, Setup};

fn main() -> scfde_sicnn::Result<()> {
    let channels = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let setup = Setup::new(
        GuardMode::UniqueWord,
        20,
        12,
        Modulation::Qpsk,
        ChannelParams::with_default_taps(100e-9, 52e-9, 12)?,
    )?;
    let cfg = SweepConfig {
        ebn0_db: vec![0.0, 4.0, 8.0, 12.0],
        n_channels: channels,
        blocks_per_burst: 50,
        roster: ["lmmse", "dfe", "itsic1", "itsic3"]
            .iter()
            .map(|t| Estimator::from_tag(t))
            .collect::<scfde_sicnn::Result<_>>()?,
        seed: 7,
    };
    let out = ber_sweep(&setup, &cfg)?;
    print!("{}", csv_string(&out.report)?);
    let r = &out.report;
    for (p, db) in r.ebn0_db.iter().enumerate() {
        for (i, name) in r.names.iter().enumerate() {
            let (lo, hi) = r.ci95(i, p);
            eprintln!("{db:>5} dB {name:>7}: {:.3e} [{lo:.3e}, {hi:.3e}]", r.ber(i, p));
        }
    }
    Ok(())
}
