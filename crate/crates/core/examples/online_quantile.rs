//! Online median calibration against an i.i.d. and a two-phase adversary.
//!
//! ```text
//! cargo run --release --example online_quantile -- [T] [seeds]
//! ```

use calibra::online::adversary::{default_contexts, AdversarySpec};
use calibra::online::{thread_cap, OnlineExperiment, OnlineOptions};
use calibra::properties::quantile_property;

fn main() -> calibra::Result<()> {
    let mut args = std::env::args().skip(1);
    let horizon: usize = args.next().map_or(20_000, |s| s.parse().expect("T"));
    let n_seeds: u64 = args.next().map_or(20, |s| s.parse().expect("seeds"));
    let id = quantile_property(0.5, 2.0)?;
    let (group_ids, contexts) = default_contexts();
    let seeds: Vec<u64> = (0..n_seeds).collect();

    for (name, adversary) in [("iid", AdversarySpec::sinusoid_iid()), ("two-phase", AdversarySpec::shifting_median())] {
        let exp = OnlineExperiment {
            id: &id,
            c: 1.0,
            m: 20,
            horizon,
            group_ids: group_ids.clone(),
            contexts: contexts.clone(),
            adversary,
            options: OnlineOptions::default(),
        };
        let runs = exp.run_seeds(&seeds, thread_cap())?;
        let mean = runs.iter().map(|r| r.report.max_alpha).sum::<f64>() / runs.len() as f64;
        let worst = runs.iter().map(|r| r.report.max_alpha).fold(0.0, f64::max);
        println!(
            "{name:>9}: mean max-group alpha {mean:.4}, worst seed {worst:.4}, bound {:.4} (L = {})",
            runs[0].report.bound, runs[0].report.lipschitz
        );
    }
    Ok(())
}
