//! Property-based invariants.

use calibra::audit::{batch_error_gamma, batch_error_gamma_l1_squared, online_k2_prefix};
use calibra::batch::{apply_predictor, batch_multicalibrate, grid_points, BatchOptions, DiscretizedPredictor};
use calibra::dataset::{Cell, ExactDataset, GroupFamily, GroupPredicate, Point};
use calibra::online::adversary::{default_contexts, AdversarySpec};
use calibra::online::{OnlineExperiment, OnlineOptions};
use calibra::properties::{
    lower_quantile, mean_property, quantile_property, FiniteDistribution, Functional, IdFunction,
};
use proptest::prelude::*;

fn arb_dist(max_atoms: usize) -> impl Strategy<Value = FiniteDistribution> {
    prop::collection::vec((0.0f64..=1.0, 0.01f64..1.0), 1..=max_atoms).prop_map(|atoms| {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let (s, p): (Vec<f64>, Vec<f64>) = atoms.into_iter().map(|(y, w)| (y, w / total)).unzip();
        FiniteDistribution::new(s, p).unwrap()
    })
}

/// Atoms at `(k + 0.5)/n` with density between 0.5 and 2.
fn arb_fine_grid(n: usize) -> impl Strategy<Value = FiniteDistribution> {
    prop::collection::vec(0.5f64..2.0, n).prop_map(move |raw| {
        let total: f64 = raw.iter().sum();
        let support = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        FiniteDistribution::new(support, raw.iter().map(|r| r / total).collect()).unwrap()
    })
}

fn expectations_close(a: &FiniteDistribution, b: &FiniteDistribution) -> bool {
    (0..=20).all(|k| {
        let t = k as f64 / 20.0;
        (a.cdf(t) - b.cdf(t)).abs() < 1e-12
    }) && (a.mean() - b.mean()).abs() < 1e-12
}

proptest! {
    #[test]
    fn mixture_is_associative(p1 in arb_dist(4), p2 in arb_dist(4), p3 in arb_dist(4), w in 0.05f64..0.95, v in 0.05f64..0.95) {
        let inner = FiniteDistribution::mixture([(v, &p2), (1.0 - v, &p3)]).unwrap();
        let nested = FiniteDistribution::mixture([(w, &p1), (1.0 - w, &inner)]).unwrap();
        let flat = FiniteDistribution::mixture([(w, &p1), ((1.0 - w) * v, &p2), ((1.0 - w) * (1.0 - v), &p3)]).unwrap();
        prop_assert!(expectations_close(&nested, &flat));
    }

    #[test]
    fn identification_is_oriented(d in arb_dist(6), tau in 0.05f64..0.95) {
        let grid = grid_points(20);
        let q = quantile_property(tau, 2.0).unwrap();
        let mean = mean_property();
        for w in grid.windows(2) {
            prop_assert!(mean.expected_id(w[0], &d) <= mean.expected_id(w[1], &d));
            prop_assert!(q.expected_id(w[0], &d) <= q.expected_id(w[1], &d));
        }
    }

    #[test]
    fn zero_at_truth(d in arb_dist(6), tau in 0.05f64..0.95) {
        let mean = mean_property();
        prop_assert!(mean.expected_id(Functional::Mean.eval(&d), &d).abs() < 1e-9);
        // atomic version: F(q⁻) < τ ≤ F(q)
        let q = quantile_property(tau, 2.0).unwrap();
        let x = lower_quantile(&d, tau);
        prop_assert!(q.expected_id(x, &d) >= -1e-12);
        let below: f64 = d.iter().filter(|&(y, _)| y < x).map(|(_, p)| p).sum();
        prop_assert!(below < tau + 1e-12);
    }

    #[test]
    fn mean_score_difference_is_id(d in arb_dist(5), g in 0.1f64..0.9, h in 0.001f64..0.1) {
        let mean = mean_property();
        let diff = (mean.expected_score(g + h, &d) - mean.expected_score(g - h, &d)) / (2.0 * h);
        prop_assert!((diff - mean.expected_id(g, &d)).abs() < 1e-9);
    }

    #[test]
    fn score_bounds_hold_with_equality_for_means(d in arb_dist(6), g in 0.0f64..=1.0) {
        let mean = mean_property();
        let truth = d.mean();
        let v = mean.expected_id(g, &d);
        let gap = mean.expected_score(g, &d) - mean.expected_score(truth, &d);
        prop_assert!((gap - v * v / 2.0).abs() < 1e-12);
        prop_assert!((gap - (v * (g - truth) - v * v / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn reports_dominate_l1_squared(ps in prop::collection::vec(0.0f64..=1.0, 2..6), picks in prop::collection::vec(0usize..9, 6)) {
        let cells: Vec<Cell> = ps.iter().enumerate().map(|(i, &p)| Cell {
            id: format!("c{i}"),
            weight: 1.0 / ps.len() as f64,
            dist: FiniteDistribution::new(vec![0.0, 1.0], vec![1.0 - p, p]).unwrap(),
            tags: [("x".to_string(), i as f64)].into(),
        }).collect();
        let data = ExactDataset::new(cells).unwrap();
        let groups = GroupFamily::from_predicates(&data, &[GroupPredicate::in_range("low", "x", 0.0, 2.0)]).unwrap();
        let grid = grid_points(9);
        let values: Vec<f64> = (0..ps.len()).map(|i| grid[picks[i]]).collect();
        let l2 = batch_error_gamma(&values, &data, &groups, Functional::Mean).unwrap();
        let l1 = batch_error_gamma_l1_squared(&values, &data, &groups, Functional::Mean).unwrap();
        for (a, b) in l2.groups.iter().zip(&l1) {
            prop_assert!(a.error >= b - 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pinball_integrates_its_id(d in arb_fine_grid(200), tau in 0.1f64..0.9, a in 0.0f64..0.5, b in 0.5f64..1.0) {
        let q = quantile_property(tau, 2.0).unwrap();
        let steps = 1_000_000;
        let h = (b - a) / steps as f64;
        // V(t) = F(t) − τ, evaluated by a sweep over the sorted atoms
        let (s, p) = (d.support(), d.probs());
        let (mut k, mut cdf) = (0, 0.0);
        let mut v_at = |t: f64| {
            while k < s.len() && s[k] <= t {
                cdf += p[k];
                k += 1;
            }
            cdf - tau
        };
        let mut integral = 0.0;
        let mut prev = v_at(a);
        for i in 1..=steps {
            let cur = v_at(a + i as f64 * h);
            integral += 0.5 * h * (prev + cur);
            prev = cur;
        }
        let exact = q.expected_score(b, &d) - q.expected_score(a, &d);
        prop_assert!((integral - exact).abs() < 1e-6, "{integral} vs {exact}");
    }

    #[test]
    fn score_bounds_hold_for_fine_quantile_surrogates(d in arb_fine_grid(2000), tau in 0.1f64..0.9, g in 0.0f64..=1.0) {
        let n = d.len() as f64;
        let q = quantile_property(tau, 2.0).unwrap();
        let lip = d.probs().iter().copied().fold(0.0, f64::max) * n;
        let truth = lower_quantile(&d, tau);
        let v = q.expected_id(g, &d);
        let gap = q.expected_score(g, &d) - q.expected_score(truth, &d);
        prop_assert!(v * v / (2.0 * lip) <= gap + 1e-6);
        prop_assert!(gap <= v * (g - truth) - v * v / (2.0 * lip) + 1e-6);
    }

    #[test]
    fn online_k2_prefixes_match_running_sums(seed in 0u64..1_000_000, horizon in 5usize..60) {
        let id = quantile_property(0.5, 2.0).unwrap();
        let (group_ids, contexts) = default_contexts();
        let exp = OnlineExperiment {
            id: &id, c: 1.0, m: 5, horizon, group_ids, contexts,
            adversary: AdversarySpec::shifting_median(),
            options: OnlineOptions { instrument: true, ..Default::default() },
        };
        let run = exp.run_seed(seed).unwrap();
        let inst = run.instrumentation.unwrap();
        for (t, k2) in inst.k2_history.iter().enumerate() {
            prop_assert_eq!(k2, &online_k2_prefix(&run.transcript, &id, t + 1));
        }
        prop_assert_eq!(inst.increment_violations, 0);
        prop_assert_eq!(inst.weight_violations, 0);
        prop_assert_eq!(inst.value_violations, 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_runs_replay_and_repeat(ps in prop::collection::vec(0.0f64..=1.0, 2..8), alpha in 0.005f64..0.1) {
        let cells: Vec<Cell> = ps.iter().enumerate().map(|(i, &p)| Cell {
            id: format!("c{i}"),
            weight: 1.0 / ps.len() as f64,
            dist: FiniteDistribution::new(vec![0.0, 1.0], vec![1.0 - p, p]).unwrap(),
            tags: [("x".to_string(), i as f64)].into(),
        }).collect();
        let data = ExactDataset::new(cells).unwrap();
        let preds = [GroupPredicate::in_range("low", "x", 0.0, 3.0), GroupPredicate::equals("one", "x", 1.0)];
        let groups = GroupFamily::from_predicates(&data, &preds).unwrap();
        let opts = BatchOptions { alpha: Some(alpha), ..Default::default() };
        let Ok(run) = batch_multicalibrate(&mean_property(), &data, &groups, 19, &opts) else {
            return Ok(());
        };
        let again = batch_multicalibrate(&mean_property(), &data, &groups, 19, &opts).unwrap();
        prop_assert_eq!(&run.predictor, &again.predictor);
        prop_assert_eq!(run.trace.to_csv_string(), again.trace.to_csv_string());
        let stored = DiscretizedPredictor::from_json_str(&run.predictor.to_json_string()).unwrap();
        prop_assert_eq!(stored.replay_on_cells(&data, &groups).unwrap(), run.predictor.current.clone());
        let points: Vec<Point> = data.cells().iter().map(|c| Point { id: c.id.clone(), tags: c.tags.clone() }).collect();
        prop_assert_eq!(apply_predictor(&stored, &points, &groups).unwrap(), run.predictor.current);
    }
}
