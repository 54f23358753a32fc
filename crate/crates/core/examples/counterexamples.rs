//! Variance and CVaR are not calibratable on their own.

use calibra::dataset::{find_cvar_cxls_violation, make_variance_counterexample, CVAR_SEARCH_ATOMS, CVAR_SEARCH_PROBS};
use calibra::properties::{FiniteDistribution, Functional};

fn main() -> calibra::Result<()> {
    let data = make_variance_counterexample();
    for c in data.cells() {
        println!("{}: variance {}", c.id, Functional::Variance.eval(&c.dist));
    }
    let mix = FiniteDistribution::mixture(data.cells().iter().map(|c| (c.weight, &c.dist)))?;
    println!("pooled: variance {}", Functional::Variance.eval(&mix));

    let w = find_cvar_cxls_violation(0.5, &CVAR_SEARCH_ATOMS, &CVAR_SEARCH_PROBS)?;
    println!("{}", serde_json::to_string_pretty(&w).unwrap());
    Ok(())
}
