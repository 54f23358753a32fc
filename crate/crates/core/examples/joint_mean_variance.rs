//! Joint calibration of (mean, variance) on Bernoulli cells.

use calibra::audit::joint_error;
use calibra::dataset::{make_bernoulli_dataset, GroupFamily, GroupPredicate};
use calibra::joint::{joint_multicalibrate, JointOptions};
use calibra::properties::mean_variance_family;

fn main() -> calibra::Result<()> {
    let data = make_bernoulli_dataset(&[0.0, 1.0, 0.1, 0.9, 0.3, 0.7, 0.5, 0.2])?;
    let groups = GroupFamily::from_predicates(
        &data,
        &[GroupPredicate::equals("even", "b", 0.0), GroupPredicate::in_range("low", "x", 0.0, 4.0)],
    )?;
    let fam = mean_variance_family();
    let opts = JointOptions { alpha0: Some(0.02), alpha1: Some(0.02), ..Default::default() };
    let run = joint_multicalibrate(&fam, &data, &groups, 19, &opts)?;
    let r = joint_error(&run.predictor.f0.current, &run.predictor.f1.current, &data, &groups, &fam)?;
    println!(
        "{} outer iterations, {} + {} updates, errors ({:.5}, {:.5})",
        run.trace.outer_iterations,
        run.trace.f0_updates,
        run.trace.f1_updates,
        r.alpha0_equivalent,
        r.alpha1_equivalent
    );
    for (c, (m, v)) in data.cells().iter().zip(run.predictor.f0.current.iter().zip(&run.predictor.f1.current)) {
        let p = c.dist.mean();
        println!("{:>4}: mean {m:.3} (true {p:.3}), variance {v:.3} (true {:.3})", c.id, p * (1.0 - p));
    }
    Ok(())
}
