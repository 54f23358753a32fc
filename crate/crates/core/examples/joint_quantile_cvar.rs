//! Joint calibration of (median, CVaR) on synthetic cells.

use calibra::audit::joint_error;
use calibra::dataset::{synth_bounded_density, GroupFamily, GroupPredicate};
use calibra::joint::{joint_multicalibrate, JointConfig, JointOptions};
use calibra::properties::quantile_cvar_family;

fn main() -> calibra::Result<()> {
    let data = synth_bounded_density(8, 200, 0.5, 2.0, 7)?;
    let groups = GroupFamily::from_predicates(
        &data,
        &[GroupPredicate::in_range("left", "x", 0.0, 0.5), GroupPredicate::equals("odd", "b", 1.0)],
    )?;
    let fam = quantile_cvar_family(0.5, 0.5, 2.0)?;
    let config = JointConfig::new(&fam, 20)?;
    println!("{}", serde_json::to_string_pretty(&config).unwrap());
    let run = joint_multicalibrate(&fam, &data, &groups, 20, &JointOptions::default())?;
    let r = joint_error(&run.predictor.f0.current, &run.predictor.f1.current, &data, &groups, &fam)?;
    println!("errors ({:.5}, {:.5}), {} updates", r.alpha0_equivalent, r.alpha1_equivalent, run.trace.total_updates());
    print!("{}", r.slices_csv_string());
    Ok(())
}
