//! Real multiplications per received vector for every estimator and setup.

use scfde_sicnn::harness::{complexity, ComplexityInput, COMPLEXITY_TAGS};
use scfde_sicnn::system::{GuardMode, Modulation};

fn main() {
    let setups = [
        ("UW/QPSK", GuardMode::UniqueWord, Modulation::Qpsk),
        ("CP/QPSK", GuardMode::CyclicPrefix, Modulation::Qpsk),
        ("UW/16QAM", GuardMode::UniqueWord, Modulation::Qam16),
    ];
    print!("{:<16}", "estimator");
    for (name, ..) in &setups {
        print!("{name:>14}");
    }
    println!();
    for tag in COMPLEXITY_TAGS {
        print!("{tag:<16}");
        for (_, mode, m) in setups {
            let cell = ComplexityInput::published(tag, mode, m)
                .and_then(|i| complexity(&i))
                .map(|c| c.rounded.to_string())
                .unwrap_or_else(|_| "-".into());
            print!("{cell:>14}");
        }
        println!();
    }
}
