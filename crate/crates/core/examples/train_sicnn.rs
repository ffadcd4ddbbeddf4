//! Desk-scale SICNNv1 training on UW/QPSK.
//!
//! `cargo run --release --example train_sicnn -- [channels] [vectors_per_channel] [epochs]`

use std::sync::Arc;
use std::time::Instant;

use scfde_sicnn::channel::ChannelParams;
use scfde_sicnn::harness::{ber_sweep, Estimator, SweepConfig};
use scfde_sicnn::sicnn::{SicnnConfig, SicnnModel};
use scfde_sicnn::system::{GuardMode, Modulation, Setup};
use scfde_sicnn::training::{generate_training_set, train, GenConfig, Schedule};
use scfde_sicnn::SimRng;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> scfde_sicnn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (channels, burst, epochs) = (arg(1, 2000), arg(2, 10), arg(3, 5));
    let setup = Setup::new(
        GuardMode::UniqueWord,
        20,
        12,
        Modulation::Qpsk,
        ChannelParams::with_default_taps(100e-9, 52e-9, 12)?,
    )?;
    let mut gen = GenConfig::preset(GuardMode::UniqueWord, Modulation::Qpsk)?;
    gen.n_channels = channels;
    gen.n_burst = burst;

    let t = Instant::now();
    let train_set = generate_training_set(&setup, &gen, 1)?;
    gen.n_channels = (channels / 4).max(1);
    let val_set = generate_training_set(&setup, &gen, 2)?;
    println!(
        "generated {} + {} vectors in {:.1?}",
        train_set.records.len(),
        val_set.records.len(),
        t.elapsed()
    );

    let cfg = SicnnConfig::v1(3, 3, 48, 2, 10);
    let model = SicnnModel::new(cfg, &setup.alphabet, setup.mode, setup.n_d, setup.n_g, &mut SimRng::new(3))?;
    let t = Instant::now();
    let trained = train(model, &train_set, &val_set, &Schedule::new(epochs, 1e-3))?;
    println!("trained {epochs} epochs in {:.1?}", t.elapsed());
    println!("epoch 0: val BER {:.4e}", trained.initial_val_ber);
    for h in &trained.history {
        println!("epoch {}: loss {:.4} val BER {:.4e}", h.epoch, h.train_loss, h.val_ber);
    }
    println!("best epoch {}", trained.best_epoch);

    let t = Instant::now();
    let sweep = ber_sweep(
        &setup,
        &SweepConfig {
            ebn0_db: vec![10.0],
            n_channels: 500,
            blocks_per_burst: 40,
            roster: vec![
                Estimator::Lmmse,
                Estimator::Sicnn {
                    name: "SICNNv1".into(),
                    model: Arc::new(trained.model),
                },
            ],
            seed: 4,
        },
    )?;
    let r = &sweep.report;
    for (i, name) in r.names.iter().enumerate() {
        let (lo, hi) = r.ci95(i, 0);
        println!("{name:>8}: BER {:.4e}  [{lo:.4e}, {hi:.4e}]", r.ber(i, 0));
    }
    println!("held-out sweep in {:.1?}", t.elapsed());
    Ok(())
}
