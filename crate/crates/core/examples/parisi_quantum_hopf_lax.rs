//! Quantum Parisi value: inner minimization over (m, q), outer sup over the
//! self-overlap kernel, at a few transverse fields.

use qparisi::rsb::{hopf_lax_sup, MixtureFunction, OptimizeOptions, QuadratureSpec};

fn main() -> qparisi::Result<()> {
    let quad = QuadratureSpec::gauss_hermite(16);
    let opts = OptimizeOptions { budget: 800, ..Default::default() };
    for b in [0.0, 0.5, 1.0] {
        let chi = hopf_lax_sup(1, &MixtureFunction::sk(), 1.0, b, 0.0, 2, &quad, &opts)?;
        println!(
            "b={b}: value {:.6}  kernel {:?}  evaluations {}  converged {}",
            chi.value,
            chi.maximizer.profile(),
            chi.evaluations,
            chi.converged
        );
    }
    Ok(())
}
