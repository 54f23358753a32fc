//! Batch quantile multicalibration on bounded-density synthetic cells.

use calibra::audit::{batch_error_gamma, batch_error_v};
use calibra::batch::{batch_multicalibrate, BatchOptions};
use calibra::dataset::{synth_bounded_density, GroupFamily, GroupPredicate};
use calibra::properties::quantile_property;

fn main() -> calibra::Result<()> {
    let data = synth_bounded_density(8, 200, 0.5, 2.0, 7)?;
    let preds = [
        GroupPredicate::in_range("left", "x", 0.0, 0.5),
        GroupPredicate::in_range("right", "x", 0.5, 1.0),
        GroupPredicate::equals("odd", "b", 1.0),
    ];
    let groups = GroupFamily::from_predicates(&data, &preds)?;
    for tau in [0.5, 0.9] {
        let prop = quantile_property(tau, 2.0)?;
        let opts = BatchOptions { alpha: Some(0.002), ..Default::default() };
        let run = batch_multicalibrate(&prop, &data, &groups, 20, &opts)?;
        let v = batch_error_v(&run.predictor.current, &data, &groups, &prop);
        let g = batch_error_gamma(&run.predictor.current, &data, &groups, prop.functional())?;
        println!("tau {tau}: {} updates", run.predictor.log.len());
        print!("{}", v.to_csv_string());
        print!("{}", g.to_csv_string());
    }
    Ok(())
}
