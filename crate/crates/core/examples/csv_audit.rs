//! Audit a constant predictor on labelled rows read from CSV.

use std::collections::BTreeMap;

use calibra::audit::batch_error_v;
use calibra::dataset::{read_csv, GroupFamily, GroupPredicate};
use calibra::properties::mean_property;

const ROWS: &str = "x,y\n0,0.1\n0,0.3\n0,0.2\n1,0.9\n1,0.7\n1,1.0\n";

fn main() -> calibra::Result<()> {
    let sample = read_csv(ROWS.as_bytes(), &["x".to_string()], "y")?;
    let data = sample.to_exact()?;
    let groups = GroupFamily::from_predicates(&data, &[GroupPredicate::equals("x1", "x", 1.0)])?;
    let prop = mean_property();
    let by_cell: BTreeMap<&str, f64> = data.cells().iter().map(|c| (c.id.as_str(), c.dist.mean())).collect();
    println!("cell means {by_cell:?}");
    for constant in [0.5, 0.55] {
        let values = vec![constant; data.len()];
        println!("constant {constant}:");
        print!("{}", batch_error_v(&values, &data, &groups, &prop).to_csv_string());
    }
    Ok(())
}
