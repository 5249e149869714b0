//! Classical SK: minimizing the Parisi functional over one and two
//! replica-symmetry-breaking levels.

use qparisi::rsb::{optimize_rsb, MixtureFunction, OptimizeOptions, QuadratureSpec, SelfOverlapKernel, SingleSiteModel};

fn main() -> qparisi::Result<()> {
    let quad = QuadratureSpec::gauss_hermite(24);
    for beta in [0.8, 1.5, 2.0] {
        let site = SingleSiteModel::new(beta, 0.0, 0.0, SelfOverlapKernel::zeros(1))?;
        for k in 1..=2 {
            let opt = optimize_rsb(k, &MixtureFunction::sk(), &site, &quad, &OptimizeOptions::default())?;
            println!("beta={beta} k={k}: P = {:.6}  m = {:?}  q = {:?}", opt.value, opt.params.m(), opt.params.q());
        }
    }
    println!("high-temperature value log 2 + beta^2/4 at beta=0.8: {:.6}", 2f64.ln() + 0.16);
    Ok(())
}
