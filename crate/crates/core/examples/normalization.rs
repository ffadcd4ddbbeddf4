//! Channel normalization: the scaled noise is white with variance κ²·N'·σ_n².

use scfde_sicnn::channel::ChannelParams;
use scfde_sicnn::numerics::gauss_cn_diag;
use scfde_sicnn::system::{GuardMode, Modulation, Setup};
use scfde_sicnn::training::normalizer;
use scfde_sicnn::SimRng;

fn main() -> scfde_sicnn::Result<()> {
    let setup = Setup::new(
        GuardMode::UniqueWord,
        20,
        12,
        Modulation::Qpsk,
        ChannelParams::with_default_taps(100e-9, 52e-9, 12)?,
    )?;
    let mut rng = SimRng::new(9);
    let (_, h) = setup.draw_channel(&mut rng)?;
    let model = setup.model(h)?;
    let (kappa, scale) = normalizer(model.h_tilde(), model.m())?;
    let sn = 0.1;
    let n = setup.n_prime();
    let draws = 20_000;
    let mut power = vec![0.0; n];
    for _ in 0..draws {
        let w = gauss_cn_diag(&mut rng, &model.noise_variances(sn));
        for (p, (v, s)) in power.iter_mut().zip(w.0.iter().zip(&scale)) {
            *p += (v * s).norm_sqr() / draws as f64;
        }
    }
    println!("kappa = {kappa:.4}, target variance {:.4}", kappa * kappa * n as f64 * sn);
    for (i, (h, p)) in model.h_tilde().iter().zip(&power).enumerate() {
        println!("{i:>3}  H = {h:>8.4}  raw noise {:>8.4}  scaled {p:>8.4}", n as f64 * sn * h);
    }
    Ok(())
}
