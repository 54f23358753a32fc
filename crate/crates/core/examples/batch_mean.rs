//! Batch mean multicalibration on a permuted grid with interval groups.
//!
//! ```text
//! cargo run --example batch_mean
//! ```

use calibra::audit::batch_error_v;
use calibra::batch::{batch_multicalibrate, grid_points, BatchOptions, InitAssignment};
use calibra::dataset::{make_permuted_grid_dataset, GroupFamily, GroupPredicate};
use calibra::properties::mean_property;

fn main() -> calibra::Result<()> {
    let data = make_permuted_grid_dataset(16, 7)?;
    let preds: Vec<GroupPredicate> =
        (0..5).map(|k| GroupPredicate::in_range(&format!("i{k}"), "x", k as f64 / 5.0, (k + 1) as f64 / 5.0)).collect();
    let groups = GroupFamily::from_predicates(&data, &preds)?;
    let prop = mean_property();
    let m = 19;

    for alpha in [None, Some(0.01), Some(0.001)] {
        let opts =
            BatchOptions { alpha, f_init: Some(InitAssignment::Constant(grid_points(m)[0])), ..Default::default() };
        let run = batch_multicalibrate(&prop, &data, &groups, m, &opts)?;
        let report = batch_error_v(&run.predictor.current, &data, &groups, &prop);
        println!(
            "alpha {:.4}: {:>3} updates, budget {:.1}, potential {:.5} -> {:.5}, worst group {:.5}",
            run.trace.alpha,
            run.predictor.log.len(),
            run.trace.budget,
            run.trace.c_init,
            run.trace.potentials().last().unwrap(),
            report.max_alpha_equivalent()
        );
    }
    Ok(())
}
