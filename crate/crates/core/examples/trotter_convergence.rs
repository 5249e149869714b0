//! Trotter path sums approach the exact log-partition function as the
//! number of imaginary-time slices grows.

use qparisi::quantum::ModelParams;
use qparisi::trotter::convergence_table;

fn main() -> qparisi::Result<()> {
    for n in 1..=3 {
        let rows = convergence_table(&ModelParams::new(1.0, 1.0, 0.3, n)?, &[2, 4, 8, 16], 3)?;
        for r in rows {
            println!("N={} M={:2}  trotter {:.8}  exact {:.8}  error {:.2e}", r.n, r.m, r.log_z_trotter, r.log_z_exact, r.abs_error);
        }
    }
    Ok(())
}
