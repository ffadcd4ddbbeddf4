//! Generates a small UW/QPSK training set, saves it and checks every record
//! on replay.

use scfde_sicnn::channel::ChannelParams;
use scfde_sicnn::system::{GuardMode, Modulation, Setup};
use scfde_sicnn::training::{generate_training_set, replay_errors, GenConfig, TrainingSet};

fn main() -> scfde_sicnn::Result<()> {
    let setup = Setup::new(
        GuardMode::UniqueWord,
        20,
        12,
        Modulation::Qpsk,
        ChannelParams::with_default_taps(100e-9, 52e-9, 12)?,
    )?;
    let mut cfg = GenConfig::preset(GuardMode::UniqueWord, Modulation::Qpsk)?;
    cfg.n_channels = 100;
    cfg.n_burst = 20;
    let set = generate_training_set(&setup, &cfg, 42)?;
    println!(
        "{} vectors, {} channels discarded, {} grid points skipped",
        set.records.len(),
        set.stats.discarded_channels,
        set.stats.skipped_points.len()
    );
    let min = set
        .records
        .iter()
        .map(|r| replay_errors(&setup, cfg.baseline, r))
        .collect::<scfde_sicnn::Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);
    println!("fewest baseline symbol errors in a record: {min} (threshold {})", cfg.n_epd);

    let dir = std::env::temp_dir().join("scfde_training_set");
    set.save(&dir)?;
    let back = TrainingSet::load(&dir)?;
    assert_eq!(back.records, set.records);
    println!("saved to {}\n{}", dir.display(), set.manifest());
    Ok(())
}
