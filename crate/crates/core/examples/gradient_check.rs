//! Runs the finite-difference gradient suite, then checks a custom graph.

use rma::gradcheck::{grad_check, GradCheckOptions, GraphOp, TOLERANCE};
use rma::checks::{format_report, run_suite, SuiteOptions};
use rma::Tensor;

fn main() -> rma::Result<()> {
    let items = run_suite(SuiteOptions::default())?;
    print!("{}", format_report(&items));

    // softmax(W x) summed against itself.
    let op = GraphOp::new(|g, v| {
        let y = g.matmul(v[0], v[1])?;
        let p = g.softmax(y);
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    });
    let inputs = [
        Tensor::from_f64(&[3, 2], &[0.1, -0.4, 0.7, 0.2, -0.3, 0.5])?,
        Tensor::from_vec(vec![0.9, -1.1]),
    ];
    let report = grad_check(&op, &inputs, GradCheckOptions::default())?;
    println!("custom graph: max rel error {:.2e}, passes: {}", report.max_rel_error, report.passes(TOLERANCE));
    Ok(())
}
