//! Exact bitwise MAP against the model-based equalizers on a 4-symbol block.

use scfde_sicnn::channel::ChannelParams;
use scfde_sicnn::harness::{ber_sweep, Estimator, SweepConfig};
use scfde_sicnn::system::{GuardMode, Modulation, Setup};

fn main() -> scfde_sicnn::Result<()> {
    let setup = Setup::new(
        GuardMode::UniqueWord,
        4,
        4,
        Modulation::Qpsk,
        ChannelParams::with_default_taps(100e-9, 52e-9, 4)?,
    )?;
    let out = ber_sweep(
        &setup,
        &SweepConfig {
            ebn0_db: vec![4.0, 8.0, 12.0],
            n_channels: 100,
            blocks_per_burst: 50,
            roster: vec![Estimator::Map, Estimator::Lmmse, Estimator::Dfe, Estimator::ItSic(3)],
            seed: 3,
        },
    )?;
    let r = &out.report;
    println!("{:>6} {}", "dB", r.names.iter().map(|n| format!("{n:>10}")).collect::<String>());
    for (p, db) in r.ebn0_db.iter().enumerate() {
        let row: String = (0..r.names.len()).map(|i| format!("{:>10.3e}", r.ber(i, p))).collect();
        println!("{db:>6} {row}");
    }
    Ok(())
}
