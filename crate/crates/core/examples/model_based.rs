//! One noisy block through LMMSE, the frequency-domain LMMSE, DFE and
//! iterative SIC.

use scfde_sicnn::channel::ChannelParams;
use scfde_sicnn::equalizers::{lmmse, lmmse_diag, Dfe, IterativeSic, SicConfig};
use scfde_sicnn::system::{ebn0_to_sigma_n2, GuardMode, Modulation, Setup, Transmission};
use scfde_sicnn::SimRng;

fn main() -> scfde_sicnn::Result<()> {
    let setup = Setup::new(
        GuardMode::CyclicPrefix,
        32,
        12,
        Modulation::Qam16,
        ChannelParams::with_default_taps(100e-9, 52e-9, 12)?,
    )?;
    let a = &setup.alphabet;
    let mut rng = SimRng::new(1);
    let (_, h) = setup.draw_channel(&mut rng)?;
    let model = setup.model(h)?;
    let sn = ebn0_to_sigma_n2(14.0, a);
    let tx = Transmission::draw(&model, a, sn, &mut rng)?;
    let errors = |bits: &[u8]| bits.iter().zip(&tx.bits).filter(|(x, y)| x != y).count();

    let l = lmmse(&model, &tx.y, sn, a.variance())?;
    let f = lmmse_diag(&model, &tx.y, sn, a.variance())?;
    println!("lmmse       {:>3} bit errors", errors(&a.hard_decide(&l)));
    println!("lmmse_diag  {:>3} bit errors (max deviation {:.1e})", errors(&a.hard_decide(&f)), l.sub(&f).norm());
    let d = Dfe::new(&model, sn, a.variance())?.equalize(&tx.y, a)?;
    println!("dfe         {:>3} bit errors", errors(&a.hard_decide(&d)));
    for q in 1..=4 {
        let (hard, _) = IterativeSic::new(&model, a, sn, a.variance(), SicConfig::new(q)?)?.run(&tx.y)?;
        println!("itsic{q}      {:>3} bit errors", errors(&a.hard_decide(&hard)));
    }
    println!("of {} bits", tx.bits.len());
    Ok(())
}
