mod common;

use common::{importance_log_likelihood, random_doc, random_params, small_config};
use savae::model::{elbo, ModelMode};
use savae::numerics::{standard_normal_log_density, GaussianPosterior, Rng};

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn normal_draws_have_unit_moments() {
    let draws = Rng::new(2).normals(1_000_000);
    let (mean, var) = mean_var(&draws);
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((var - 1.0).abs() < 0.01, "{var}");
}

#[test]
fn reparameterized_draws_match_posterior_moments() {
    let q = GaussianPosterior::new(vec![1.5, -0.4], vec![0.7, -1.2]);
    let mut rng = Rng::new(3);
    let zs: Vec<Vec<f64>> = (0..1_000_000).map(|_| q.sample_reparameterized(&rng.normals(2))).collect();
    for i in 0..2 {
        let col: Vec<f64> = zs.iter().map(|z| z[i]).collect();
        let (mean, var) = mean_var(&col);
        let target_var = q.log_var[i].exp();
        assert!((mean - q.mu[i]).abs() < 0.01 * target_var.sqrt().max(q.mu[i].abs()), "{mean}");
        assert!((var / target_var - 1.0).abs() < 0.01, "{var} vs {target_var}");
    }
}

/// Monte-Carlo `E_q[log q(z) - log p(z)]` and its standard error.
fn kl_monte_carlo(q: &GaussianPosterior, rng: &mut Rng, n: usize) -> (f64, f64) {
    let terms: Vec<f64> = (0..n)
        .map(|_| {
            let z = q.sample_reparameterized(&rng.normals(q.dim()));
            q.log_density(&z) - standard_normal_log_density(&z)
        })
        .collect();
    let (mean, var) = mean_var(&terms);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn analytic_kl_matches_monte_carlo() {
    let mut rng = Rng::new(4);
    for i in 0..10 {
        let q = GaussianPosterior::new(rng.normals(3), rng.normals(3).iter().map(|x| 0.7 * x).collect());
        let (mc, se) = kl_monte_carlo(&q, &mut Rng::substream(4, &[i]), 1_000_000);
        let kl = q.kl_standard_normal();
        assert!((kl - mc).abs() <= 3.0 * se, "posterior {i}: {kl} vs {mc} +- {se}");
    }
}

#[test]
fn evaluation_bound_stays_below_importance_sampled_likelihood() {
    for mode in [ModelMode::Savae, ModelMode::Nvdm] {
        let config = small_config(mode, 5, 2, 2, vec![6]);
        let mut rng = Rng::substream(12, &[mode as u64]);
        let params = random_params(&config, &mut rng, 0.8);
        let mut below = 0;
        for i in 0..20 {
            let doc = random_doc(&mut rng, 5, 3, 10);
            let bound = elbo(&doc, &params, &config, &mut Rng::substream(13, &[i]), 20).unwrap().total;
            let ll = importance_log_likelihood(&doc, &params, &config, &mut Rng::substream(14, &[i]), 10_000);
            below += (bound <= ll) as usize;
        }
        assert!(below >= 19, "{mode}: only {below}/20 bounds below the likelihood estimate");
    }
}

#[test]
fn multi_sample_bound_averages_single_sample_bounds() {
    let config = small_config(ModelMode::Savae, 6, 2, 2, vec![5]);
    let mut rng = Rng::new(15);
    let params = random_params(&config, &mut rng, 1.0);
    let doc = random_doc(&mut rng, 6, 6, 6);
    let runs = |samples: usize, stream: u64| -> Vec<f64> {
        (0..100)
            .map(|r| {
                elbo(&doc, &params, &config, &mut Rng::substream(stream, &[r]), samples)
                    .unwrap()
                    .total
            })
            .collect()
    };
    let (m1, v1) = mean_var(&runs(1, 1));
    let (m20, v20) = mean_var(&runs(20, 2));
    let se = (v1 / 100.0 + v20 / 100.0).sqrt();
    assert!((m1 - m20).abs() <= 3.0 * se, "{m1} vs {m20} +- {se}");
    assert!(v20 < v1 / 5.0, "20-sample variance {v20} vs 1-sample {v1}");
}
