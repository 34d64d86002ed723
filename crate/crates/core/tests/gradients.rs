mod common;

use common::{gradient_mismatches, random_doc, random_params, small_config};
use savae::model::ModelMode;
use savae::numerics::{GaussianPosterior, Rng};

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

fn check_mode(mode: ModelMode, m: usize, d: usize, k: usize, instances: u64) {
    let config = small_config(mode, m, d, k, vec![5, 4]);
    for i in 0..instances {
        let mut rng = Rng::substream(91, &[mode as u64, i]);
        let params = random_params(&config, &mut rng, 0.6);
        let doc = random_doc(&mut rng, m, 1, 9);
        let eps = rng.normals(d);
        let bad = gradient_mismatches(&doc, &params, &config, &eps, H, REL, ABS_FLOOR);
        assert!(bad.is_empty(), "{mode} instance {i}: {:?}", &bad[..bad.len().min(5)]);
    }
}

#[test]
fn savae_gradients_match_finite_differences() {
    check_mode(ModelMode::Savae, 6, 2, 2, 25);
}

#[test]
fn nvdm_gradients_match_finite_differences() {
    check_mode(ModelMode::Nvdm, 8, 3, 0, 25);
}

#[test]
fn savae_gradients_with_long_window_and_deeper_encoder() {
    let config = small_config(ModelMode::Savae, 7, 3, 4, vec![6, 5, 4]);
    for i in 0..5 {
        let mut rng = Rng::substream(5, &[i]);
        let params = random_params(&config, &mut rng, 0.5);
        let doc = random_doc(&mut rng, 7, 6, 12);
        let eps = rng.normals(3);
        let bad = gradient_mismatches(&doc, &params, &config, &eps, H, REL, ABS_FLOOR);
        assert!(bad.is_empty(), "instance {i}: {:?}", &bad[..bad.len().min(5)]);
    }
}

#[test]
fn reparameterized_sample_derivatives() {
    let mut rng = Rng::new(8);
    for _ in 0..20 {
        let mu = rng.normals(4);
        let lv: Vec<f64> = rng.normals(4).iter().map(|x| 0.8 * x).collect();
        let eps = rng.normals(4);
        let z = |mu: &[f64], lv: &[f64]| GaussianPosterior::new(mu.to_vec(), lv.to_vec()).sample_reparameterized(&eps);
        let h = 1e-6;
        for i in 0..4 {
            let mut up = mu.clone();
            let mut down = mu.clone();
            up[i] += h;
            down[i] -= h;
            let (zu, zd) = (z(&up, &lv), z(&down, &lv));
            for j in 0..4 {
                let numeric = (zu[j] - zd[j]) / (2.0 * h);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((numeric - expected).abs() <= 1e-6 * expected.abs().max(1.0), "dz{j}/dmu{i}");
            }
            let mut up = lv.clone();
            let mut down = lv.clone();
            up[i] += h;
            down[i] -= h;
            let (zu, zd) = (z(&mu, &up), z(&mu, &down));
            for j in 0..4 {
                let numeric = (zu[j] - zd[j]) / (2.0 * h);
                let expected = if i == j { 0.5 * (0.5 * lv[i]).exp() * eps[i] } else { 0.0 };
                assert!(
                    (numeric - expected).abs() <= 1e-6 * expected.abs().max(1e-3),
                    "dz{j}/dlv{i}: {numeric} vs {expected}"
                );
            }
        }
    }
}
