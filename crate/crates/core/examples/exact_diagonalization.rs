//! Quenched free energy of the transverse-field SK model by exact
//! diagonalization, with one thermal expectation for a single sample.

use qparisi::quantum::{build_sk_hamiltonian, gibbs_expectation, quenched_free_energy, spectral_decompose, sx, DisorderSample, ModelParams};
use qparisi::stochastics::RngStream;

fn main() -> qparisi::Result<()> {
    println!("beta     b    (1/N) E log Z     stderr");
    for beta in [0.5, 1.0, 2.0] {
        for b in [0.0, 0.5, 1.0] {
            let est = quenched_free_energy(&ModelParams::new(beta, b, 0.0, 5)?, 60, 7)?;
            println!("{beta:4.1}  {b:4.1}   {:.6}        {:.1e}", est.mean, est.stderr);
        }
    }

    let params = ModelParams::new(1.0, 0.5, 0.0, 6)?;
    let g = DisorderSample::gaussian(2, 6, &RngStream::new(1))?;
    let spec = spectral_decompose(&build_sk_hamiltonian(&params, &g)?)?;
    println!("<S^x_0> at beta=1, b=0.5: {:.6}", gibbs_expectation(&sx(6, 0), &spec, 1.0)?);
    Ok(())
}
