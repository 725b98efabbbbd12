mod common;

use fedplt_core::rng;
use fedplt_core::sampling::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance<R: Rng>(rng: &mut R, k: usize) -> SamplingInput {
    let n: Vec<f64> = (0..k).map(|_| rng.random_range(1..500) as f64).collect();
    let norms: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..10.0)).collect();
    let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..=1.0)).collect();
    let total: f64 = r.iter().sum();
    let kappa = rng.random_range(0.01..=1.0) * total;
    SamplingInput { n, norms, r, kappa }
}

fn budget(p: &[f64], r: &[f64]) -> f64 {
    p.iter().zip(r).map(|(p, r)| p * r).sum()
}

#[test]
fn matches_kkt_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let k = rng.random_range(1..=9);
        let input = random_instance(&mut rng, k);
        let p = ocs_plt_probabilities(&input).unwrap().probabilities;
        let oracle = common::kkt_enumeration(&input.n, &input.norms, &input.r, input.kappa);
        for (a, b) in p.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{:?} vs {oracle:?} for {input:?}", p.as_slice());
        }
    }
}

#[test]
fn three_client_kkt_example() {
    let oracle = common::kkt_enumeration(&[1.0; 3], &[1.0, 2.0, 10.0], &[1.0; 3], 2.0);
    let input = SamplingInput::uniform_cost(vec![1.0; 3], vec![1.0, 2.0, 10.0], 2.0);
    let d = ocs_plt_probabilities(&input).unwrap();
    for (a, b) in d.probabilities.as_slice().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8);
    }
    assert_eq!(d.unsaturated, vec![0, 1]);
}

#[test]
fn budget_identity_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let k = rng.random_range(1..=40);
        let input = random_instance(&mut rng, k);
        let d = ocs_plt_probabilities(&input).unwrap();
        let p = d.probabilities.as_slice();
        assert!((budget(p, &input.r) - input.kappa).abs() < 1e-8);
        for i in 0..k {
            assert!(p[i] > 0.0 && p[i] <= 1.0);
            assert_eq!(p[i] < 1.0, d.unsaturated.contains(&i));
        }
    }
}

#[test]
fn optimal_beats_random_feasible_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let k = rng.random_range(2..=12);
        let input = random_instance(&mut rng, k);
        let p = ocs_plt_probabilities(&input).unwrap().probabilities;
        let best = estimator_variance(p.as_slice(), &input.n, &input.norms);
        for _ in 0..1000 {
            let q = common::random_budget_point(&input.r, input.kappa, &mut rng);
            assert!((budget(&q, &input.r) - input.kappa).abs() < 1e-9);
            let v = estimator_variance(&q, &input.n, &input.norms);
            assert!(best <= v * (1.0 + 1e-12) + 1e-12, "{best} > {v}");
        }
    }
}

#[test]
fn optimal_beats_uniform_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let k = rng.random_range(2..=20);
        let mut input = random_instance(&mut rng, k);
        input.r = vec![1.0; k];
        input.kappa = rng.random_range(0.1..=1.0) * k as f64;
        let p = ocs_plt_probabilities(&input).unwrap().probabilities;
        let uniform = vec![input.kappa / k as f64; k];
        assert!(
            estimator_variance(p.as_slice(), &input.n, &input.norms)
                <= estimator_variance(&uniform, &input.n, &input.norms) + 1e-9
        );
    }
}

#[test]
fn inclusion_rate_within_binomial_band() {
    let p = Probabilities::new(vec![0.5; 8]).unwrap();
    let trials = 10_000;
    let mut hits = [0usize; 8];
    for t in 0..trials {
        for k in select_clients(&p, t) {
            hits[k] += 1;
        }
    }
    // pooled rate within 3σ; each client within 4σ so eight checks stay tight
    let pooled: usize = hits.iter().sum();
    let pooled_sigma = (8.0 * trials as f64 * 0.25).sqrt();
    assert!((pooled as f64 - 4.0 * trials as f64).abs() < 3.0 * pooled_sigma, "{pooled}");
    let sigma = (trials as f64 * 0.25).sqrt();
    for h in hits {
        assert!((h as f64 - 5000.0).abs() < 4.0 * sigma, "{h}");
    }
    assert_eq!(select_clients(&p, 42), select_clients(&p, 42));
}

#[test]
fn estimator_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = 4;
    let dim = 5;
    let n: Vec<f64> = (0..k).map(|_| rng.random_range(10..100) as f64).collect();
    let updates: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(0.5..2.0)).collect()).collect();
    let norms: Vec<f64> = updates.iter().map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let r = vec![0.3, 0.6, 1.0, 0.8];
    let input = SamplingInput { n: n.clone(), norms, r, kappa: 1.2 };
    let p = ocs_plt_probabilities(&input).unwrap().probabilities;
    let all: Vec<usize> = (0..k).collect();
    let exact = aggregate_unbiased(&all, &updates, &Probabilities::new(vec![1.0; k]).unwrap(), &n).unwrap();
    let draws = 100_000;
    let mut mean = vec![0.0; dim];
    let mut draw_rng = rng::stream(1, "mc", &[]);
    for _ in 0..draws {
        let sel = select_with(&p, &mut draw_rng);
        let est = aggregate_unbiased(&sel, &updates, &p, &n).unwrap();
        mean.iter_mut().zip(&est).for_each(|(m, e)| *m += e / draws as f64);
    }
    let err: f64 = mean.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / scale < 0.01, "relative error {}", err / scale);
}

#[test]
fn closed_form_variance_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..3 {
        let k = 5;
        let n: Vec<f64> = (0..k).map(|_| rng.random_range(1..50) as f64).collect();
        let updates: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let norms: Vec<f64> = updates.iter().map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let p = Probabilities::new((0..k).map(|_| rng.random_range(0.1..=1.0)).collect()).unwrap();
        let full: Vec<f64> = (0..3).map(|d| (0..k).map(|i| n[i] * updates[i][d]).sum()).collect();
        let draws = 1_000_000;
        let mut acc = 0.0;
        let mut draw_rng = rng::stream(2, "mc", &[case]);
        for _ in 0..draws {
            let mut est = [0.0; 3];
            for i in select_with(&p, &mut draw_rng) {
                for d in 0..3 {
                    est[d] += n[i] / p.as_slice()[i] * updates[i][d];
                }
            }
            acc += (0..3).map(|d| (est[d] - full[d]).powi(2)).sum::<f64>();
        }
        let empirical = acc / draws as f64;
        let closed = estimator_variance(p.as_slice(), &n, &norms);
        assert!((empirical - closed).abs() / closed < 0.02, "{empirical} vs {closed}");
    }
}

proptest! {
    #[test]
    fn probabilities_are_scale_invariant(seed in any::<u64>(), k in 1usize..20, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random_instance(&mut rng, k);
        let scaled = SamplingInput { norms: input.norms.iter().map(|v| v * c).collect(), ..input.clone() };
        let a = ocs_plt_probabilities(&input).unwrap().probabilities;
        let b = ocs_plt_probabilities(&scaled).unwrap().probabilities;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn larger_key_never_gets_smaller_probability(seed in any::<u64>(), k in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random_instance(&mut rng, k);
        let p = ocs_plt_probabilities(&input).unwrap().probabilities;
        let key: Vec<f64> = (0..k).map(|i| input.n[i] * input.norms[i] / input.r[i].sqrt()).collect();
        for i in 0..k {
            for j in 0..k {
                if key[i] > key[j] {
                    prop_assert!(p.as_slice()[i] >= p.as_slice()[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_norms_keep_budget(seed in any::<u64>(), k in 2usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = random_instance(&mut rng, k);
        input.norms[0] = 0.0;
        input.kappa = input.kappa.max(1e-3);
        let p = ocs_plt_probabilities(&input).unwrap().probabilities;
        prop_assert!((budget(p.as_slice(), &input.r) - input.kappa).abs() < 1e-8);
        prop_assert!(p.as_slice()[0] > 0.0);
    }
}
