//! Tail probability of the replica path overlap deviation across N.

use qparisi::interp::concentration_scan;
use qparisi::rsb::{QuadratureSpec, RsbParams, SelfOverlapKernel};

fn main() -> qparisi::Result<()> {
    let rsb = RsbParams::new(vec![0.0, 1.0], vec![0.0, 0.3])?;
    let kernel = SelfOverlapKernel::zeros(2);
    let quad = QuadratureSpec::gauss_hermite(4);
    let scan = concentration_scan(1.0, 0.5, 0.0, &rsb, &kernel, &quad, 0.5, 1, 0.5, &[2, 3, 4, 5], 100, 9)?;
    for row in &scan.rows {
        println!("N={}  P = {:.4} ± {:.1e}{}", row.n, row.probability.mean, row.probability.stderr, if row.zero_event { "  (zero)" } else { "" });
    }
    if let Some(slope) = scan.slope {
        println!("fitted d log P / dN = {slope:.4}");
    }
    Ok(())
}
