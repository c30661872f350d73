use super::*;
use crate::classifier::Dense;
use crate::mathcore::log_gamma;
use crate::prior::{AnchorRule, FeatureSpace};
use proptest::prelude::*;

fn inverse_softplus(a: f64) -> f64 {
    a.exp_m1().ln()
}

/// Single-layer encoder emitting a fixed α̂ and a single-layer decoder with
/// fixed logits, for any input.
fn constant_model(d: usize, alpha: &[f64], logits: &[f64]) -> NpcModel {
    let c = alpha.len();
    let layer = |bias: Vec<f64>| Dense { weights: Matrix::zeros(d + c, c), bias };
    let enc = MlpModel::from_layers(vec![layer(alpha.iter().map(|&a| inverse_softplus(a)).collect())]).unwrap();
    let dec = MlpModel::from_layers(vec![layer(logits.to_vec())]).unwrap();
    NpcModel::from_parts(enc, dec, 1e-4).unwrap()
}

fn batch(x: Matrix, yhat: &[usize], c: usize, prior: Vec<f64>) -> ElboBatch {
    let n = yhat.len();
    let mut oh = Matrix::zeros(n, c);
    for (i, &k) in yhat.iter().enumerate() {
        oh.row_mut(i)[k] = 1.0;
    }
    let p = Matrix::new(n, c, prior.iter().copied().cycle().take(n * c).collect()).unwrap();
    ElboBatch::new(x, oh.clone(), oh, p).unwrap()
}

#[test]
fn elbo_degenerate_optimum_is_zero() {
    let alpha = [3.0, 1.5, 0.7];
    let model = constant_model(2, &alpha, &[60.0, -60.0, -60.0]);
    let b = batch(Matrix::filled(4, 2, 0.3), &[0; 4], 3, alpha.to_vec());
    let mut rng = RngState::new(0);
    let v = elbo(&model, &b, 2, &mut rng).unwrap();
    assert!(v.kl.abs() < 1e-12, "{v:?}");
    assert!(v.elbo.abs() < 1e-20_f64.max(4.0 * (-60f64).exp()), "{v:?}");
}

#[test]
fn elbo_reference_values() {
    // uniform decoder on ten classes
    let model = constant_model(1, &[1.0; 10], &[0.0; 10]);
    let b = batch(Matrix::zeros(3, 1), &[4, 0, 9], 10, vec![1.0; 10]);
    let v = elbo(&model, &b, 1, &mut RngState::new(1)).unwrap();
    assert!((v.reconstruction - 10.0 * 0.5f64.ln()).abs() < 1e-9);
    assert!((v.reconstruction + 6.931_471_8).abs() < 1e-6);

    let model = constant_model(1, &[2.0, 2.0], &[0.0, 0.0]);
    let b = batch(Matrix::zeros(1, 1), &[0], 2, vec![1.0, 1.0]);
    let v = elbo(&model, &b, 1, &mut RngState::new(1)).unwrap();
    assert!((v.kl - 0.845_568_7).abs() < 1e-6);
    assert!((v.elbo - v.reconstruction + 0.845_568_7).abs() < 1e-6);
}

#[test]
fn zero_encoder_gives_softplus_of_zero() {
    let enc = MlpModel::zeros(&[5, 4, 3]).unwrap();
    let dec = MlpModel::zeros(&[5, 4, 3]).unwrap();
    let model = NpcModel::from_parts(enc, dec, 1e-4).unwrap();
    let a = posterior_alpha(&model, &[0.1, 0.2], 1).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.as_slice().iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    assert_eq!(posterior_alpha(&model, &[0.1, 0.2], 1).unwrap(), a);
    assert!(posterior_alpha(&model, &[0.1, 0.2], 3).is_err());
}

fn random_problem(seed: u64, hidden: &[usize]) -> (NpcModel, ElboBatch, Vec<Matrix>) {
    let (n, d, c) = (5, 2, 3);
    let mut rng = RngState::new(seed);
    let model = NpcModel::new(d, c, hidden, 1e-4, &mut rng).unwrap();
    let x = Matrix::new(n, d, (0..n * d).map(|_| rng.standard_normal()).collect()).unwrap();
    let yhat: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let mut b = batch(x, &yhat, c, vec![1.0; c]);
    for v in b.prior.as_mut_slice() {
        *v = 0.5 + 5.0 * rng.uniform_open();
    }
    let u = draw_noise(n, c, 2, &mut rng);
    (model, b, u)
}

fn draw_noise(n: usize, c: usize, m: usize, rng: &mut RngState) -> Vec<Matrix> {
    (0..m)
        .map(|_| Matrix::new(n, c, (0..n * c).map(|_| rng.uniform_open()).collect()).unwrap())
        .collect()
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let (model, b, u) = random_problem(17, &[7, 6]);
    let (_, eg, dg) = loss_gradients(&model, &b, &u).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (part, analytic) in [(0usize, eg.flatten()), (1, dg.flatten())] {
        let mut probe = model.clone();
        let mut idx = 0;
        let nslices = if part == 0 { probe.encoder().param_slices().len() } else { probe.decoder().param_slices().len() };
        for s in 0..nslices {
            let len = if part == 0 { probe.encoder().param_slices()[s].len() } else { probe.decoder().param_slices()[s].len() };
            for i in 0..len {
                let mut eval = |delta: f64| {
                    let (enc, dec) = probe.parts_mut();
                    let net = if part == 0 { enc } else { dec };
                    let orig = net.param_slices()[s][i];
                    net.param_slices_mut()[s][i] = orig + delta;
                    let v = -elbo_frozen(&probe, &b, &u).unwrap().elbo;
                    let (enc, dec) = probe.parts_mut();
                    let net = if part == 0 { enc } else { dec };
                    net.param_slices_mut()[s][i] = orig;
                    v
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[idx];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                worst = worst.max(err);
                idx += 1;
            }
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn mode_examples() {
    let m = posterior_mode(&[2.0, 2.0, 2.0]);
    assert!(m.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let m = posterior_mode(&[3.0, 2.0]);
    assert!((m[0] - 2.0 / 3.0).abs() < 1e-15 && (m[1] - 1.0 / 3.0).abs() < 1e-15);
    let m = posterior_mode(&[11.0, 1.0, 1.0, 1.0]);
    assert!(m[0] > 0.999 && (m.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    // components at or below one are clamped rather than rejected
    let m = posterior_mode(&[0.2, 0.5]);
    assert!(m.iter().all(|v| (v - 0.5).abs() < 1e-15));
}

fn grid_argmax(alpha: &[f64; 3], steps: usize) -> [f64; 3] {
    let mut best = (f64::NEG_INFINITY, [0.0; 3]);
    for i in 1..steps {
        for j in 1..steps - i {
            let p = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            let ld: f64 = p.iter().zip(alpha).map(|(p, a)| (a - 1.0) * p.ln()).sum();
            if ld > best.0 {
                best = (ld, p);
            }
        }
    }
    best.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mode_matches_density_grid(a in 1.1f64..20.0, b in 1.1f64..20.0, c in 1.1f64..20.0) {
        let want = grid_argmax(&[a, b, c], 200);
        let got = posterior_mode(&[a, b, c]);
        for k in 0..3 {
            prop_assert!((got[k] - want[k]).abs() <= 0.01);
        }
    }

    #[test]
    fn calibrated_rows_are_distributions(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let model = NpcModel::new(3, 4, &[8], 1e-4, &mut rng).unwrap();
        let x = Matrix::new(6, 3, (0..18).map(|_| rng.standard_normal()).collect()).unwrap();
        let probs: Vec<f64> = (0..6).flat_map(|_| {
            let raw: Vec<f64> = (0..4).map(|_| rng.uniform_open()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(move |v| v / s)
        }).collect();
        let preds = PredictionSet::new(Matrix::new(6, 4, probs).unwrap(), None).unwrap();
        let out = calibrate(&model, &x, &preds).unwrap();
        for row in out.probs().row_iter() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let h = calibration_matrices(&model, &x).unwrap();
        for row in h.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn mixing_examples() {
    let h = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
    let p = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
    let out = mix(&h, &p).unwrap();
    assert!((out[(0, 0)] - 0.55).abs() < 1e-15 && (out[(0, 1)] - 0.45).abs() < 1e-15);
    let onehot = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
    assert_eq!(mix(&h, &onehot).unwrap().row(0), h.row(1));

    let probs = Matrix::from_rows(&[[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]]).unwrap();
    let mut ident = Matrix::zeros(6, 3);
    for i in 0..2 {
        ident.as_mut_slice()[(i * 3) * 3..(i * 3 + 3) * 3].copy_from_slice(Matrix::identity(3).as_slice());
    }
    assert_eq!(mix(&ident, &probs).unwrap(), probs);
}

#[test]
fn calibration_matrix_matches_posterior_alpha() {
    let mut rng = RngState::new(5);
    let model = NpcModel::new(2, 3, &[6], 1e-4, &mut rng).unwrap();
    let x = [0.3, -1.2];
    let h = calibration_matrix(&model, &x).unwrap();
    for k in 0..3 {
        let want = posterior_mode(posterior_alpha(&model, &x, k).unwrap().as_slice());
        for (a, b) in h.row(k).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn monte_carlo_variance_shrinks_with_samples() {
    let (model, b, _) = random_problem(3, &[8, 8]);
    let mut rng = RngState::new(99);
    let var = |m: usize, rng: &mut RngState| {
        let vals: Vec<f64> = (0..600).map(|_| elbo(&model, &b, m, rng).unwrap().elbo).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let ratio = var(1, &mut rng) / var(4, &mut rng);
    assert!((2.8..5.7).contains(&ratio), "variance ratio {ratio}");
}

fn cluster_problem() -> (Matrix, PredictionSet) {
    // three zero-spread clusters, predictions deterministic per cluster
    let centres = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let mut x = Vec::new();
    let mut p = Vec::new();
    for i in 0..90 {
        let k = i % 3;
        x.extend_from_slice(&centres[k]);
        let mut row = [0.05; 3];
        row[k] = 0.9;
        p.extend_from_slice(&row);
    }
    (Matrix::new(90, 2, x).unwrap(), PredictionSet::new(Matrix::new(90, 3, p).unwrap(), None).unwrap())
}

fn small_cfg() -> NpcConfig {
    NpcConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 3e-3,
        hidden: vec![16, 16],
        prior: PriorConfig {
            k: 3,
            anchor_rule: AnchorRule::TopFraction(0.5),
            feature_space: FeatureSpace::Raw,
            ..PriorConfig::default()
        },
        ..NpcConfig::default()
    }
}

#[test]
fn training_fits_deterministic_predictions() {
    let (x, preds) = cluster_problem();
    let cfg = small_cfg();
    let (model, priors, hist) = fit_npc(&x, &preds, &cfg).unwrap();
    assert_eq!(hist.elbo.len(), cfg.epochs);
    assert!(hist.elbo.last().unwrap() > &hist.elbo[0]);
    // per-class reconstruction BCE on the training set
    let mut rng = RngState::new(0);
    let b = ElboBatch::new(x.clone(), preds_onehot(&preds), preds_onehot(&preds), priors.alpha.clone()).unwrap();
    let v = elbo(&model, &b, 8, &mut rng).unwrap();
    assert!(-v.reconstruction / 3.0 < 0.1, "bce {}", -v.reconstruction / 3.0);
    // calibration keeps the (correct) cluster predictions
    let out = calibrate(&model, &x, &preds).unwrap();
    assert_eq!(out.predicted_labels(), preds.predicted_labels());
}

fn preds_onehot(p: &PredictionSet) -> Matrix {
    let mut m = Matrix::zeros(p.len(), p.classes());
    for (i, l) in p.predicted_labels().into_iter().enumerate() {
        m.row_mut(i)[l] = 1.0;
    }
    m
}

#[test]
fn training_is_seed_deterministic_and_checkpoints() {
    let (x, preds) = cluster_problem();
    let cfg = NpcConfig { epochs: 3, ..small_cfg() };
    let (a, _, _) = fit_npc(&x, &preds, &cfg).unwrap();
    let (b, _, _) = fit_npc(&x, &preds, &cfg).unwrap();
    assert_eq!(a, b);

    let bytes = a.to_bytes(&cfg).unwrap();
    assert_eq!(&bytes[..4], b"NPCN");
    let (back, cfg_back) = NpcModel::from_bytes(&bytes).unwrap();
    assert_eq!(cfg_back, cfg);
    assert_eq!(back.encoder().layer_dims(), a.encoder().layer_dims());
    for (p, q) in back.decoder().param_slices().iter().zip(a.decoder().param_slices()) {
        assert!(p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-6 * v.abs().max(1.0)));
    }
    assert!(NpcModel::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(NpcModel::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn iteration_rounds() {
    let (x, preds) = cluster_problem();
    let cfg = NpcConfig { epochs: 4, ..small_cfg() };
    let stages = iterate_npc(&x, &preds, Some((&x, &preds)), &cfg, 2).unwrap();
    assert_eq!(stages.len(), 2);
    let (single, _, _) = fit_npc(&x, &preds, &cfg).unwrap();
    assert_eq!(stages[0].train, calibrate(&single, &x, &preds).unwrap());
    assert_eq!(stages[0].eval.as_ref().unwrap(), &stages[0].train);
    assert!(iterate_npc(&x, &preds, None, &cfg, 0).is_err());
}

#[test]
fn kl_reference_uses_log_gamma() {
    // sanity: the (2,2) vs (1,1) value equals 2ψ(2) computed independently
    let psi2 = 1.0 - 0.577_215_664_901_532_9;
    let model = constant_model(1, &[2.0, 2.0], &[0.0, 0.0]);
    let b = batch(Matrix::zeros(1, 1), &[1], 2, vec![1.0, 1.0]);
    let v = elbo(&model, &b, 1, &mut RngState::new(0)).unwrap();
    assert!((v.kl - (2.0 * psi2 - 2.0 * log_gamma(2.0).unwrap())).abs() < 1e-10);
}
