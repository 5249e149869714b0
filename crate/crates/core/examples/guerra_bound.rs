//! Both sides of the interpolation identity at a tiny size, and the
//! resulting upper bound on the free energy.

use qparisi::interp::{InterpModel, InterpPoint};
use qparisi::quantum::ModelParams;
use qparisi::rsb::{QuadratureSpec, RsbParams, SelfOverlapKernel};

fn main() -> qparisi::Result<()> {
    let (beta, n) = (1.0, 3);
    let rsb = RsbParams::new(vec![0.0, 0.5, 1.0], vec![0.0, 0.2, 0.5])?;
    let model = InterpModel::new(
        ModelParams::new(beta, 0.5, 0.0, n)?,
        rsb,
        SelfOverlapKernel::new(vec![0.4, 0.2])?,
        QuadratureSpec::gauss_hermite(6),
    )?;
    let rep = model.guerra_identity_residual(0.0, 200, 1, 8)?;
    println!("phi(1,t=0)     {:.6} ± {:.1e}", rep.lhs.mean, rep.lhs.stderr);
    println!("Parisi value   {:.6}", rep.parisi);
    println!("remainder      {:.6}", rep.remainder.mean);
    println!("identity gap   {:+.2} stderr", rep.gap_in_stderr);
    let phi = model.phi_estimate(&InterpPoint::new(1.0, 1.0)?, 200, 2)?;
    let bound = model.parisi_value()? + beta * beta / (4.0 * n as f64);
    println!("(1/N) E log Z = {:.6} ± {:.1e} <= {bound:.6}", phi.mean, phi.stderr);
    Ok(())
}
