//! Loss formulas against brute-force evaluations, and their invariants.

mod support;

use drgcl_autodiff::{Tape, Tensor};
use drgcl_core::objectives::{
    infonce, normalize_instance_dim, rr_loss, DrWeight, LossConfig, Negatives,
};
use drgcl_core::trainer::BatchViews;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn formulas_match_brute_force_on_50_instances() {
    let [nce, norm, rr] = formula_errors(2024, 50);
    assert!(nce <= 1e-12, "infonce deviates by {nce:e}");
    assert!(norm <= 1e-12, "normalization deviates by {norm:e}");
    assert!(rr <= 1e-12, "redundancy loss deviates by {rr:e}");
}

#[test]
fn conditional_variance_never_grows_under_rationale_weights() {
    assert_eq!(conditional_variance_violations(7, 1500), 0);
}

#[test]
fn infonce_with_identical_rows_is_zero() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(&[[0.3, -1.0], [0.3, -1.0]]).unwrap());
    let loss = infonce(&z, &z, 0.2, Negatives::Exclusive).unwrap().item().unwrap();
    assert!(loss.abs() <= 1e-12);
}

#[test]
fn inclusive_negatives_add_the_positive_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zi = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let zj = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let tape = Tape::new();
    let (a, b) = (tape.constant(zi.clone()), tape.constant(zj.clone()));
    let inclusive = infonce(&a, &b, 0.5, Negatives::Inclusive).unwrap().item().unwrap();
    let cos = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        d / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    let mut brute = 0.0;
    for n in 0..5 {
        let denom: f64 = (0..5).map(|m| (cos(zi.row(n), zj.row(m)) / 0.5).exp()).sum();
        brute -= ((cos(zi.row(n), zj.row(n)) / 0.5).exp() / denom).ln();
    }
    assert!((inclusive - brute).abs() <= 1e-12);
}

#[test]
fn decorrelation_vanishes_only_at_orthonormal_columns() {
    // Columns of an orthogonal matrix: ZᵀZ = I.
    let (c, s) = (0.6, 0.8);
    let q = Tensor::from_rows(&[[c, -s], [s, c]]).unwrap();
    let tape = Tape::new();
    let z = tape.constant(q.clone());
    let (inv, dec) = rr_loss(&z, &z).unwrap();
    assert_eq!(inv.item().unwrap(), 0.0);
    assert!(dec.item().unwrap() <= 1e-24);

    let skew = tape.constant(Tensor::from_rows(&[[c, -s], [s, c + 0.1]]).unwrap());
    let (_, dec) = rr_loss(&z, &skew).unwrap();
    assert!(dec.item().unwrap() > 1e-4);

    let neg = tape.constant(q.map(|x| -x));
    let (inv, _) = rr_loss(&z, &neg).unwrap();
    assert!((inv.item().unwrap() - 4.0 * q.data().iter().map(|x| x * x).sum::<f64>()).abs() <= 1e-12);
}

#[test]
fn combined_loss_matches_scripted_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ds = toy_dataset(&mut rng, 6, 3);
    let model = tiny_model(3, 4, [5, 4]);
    let theta = model.encoder.init(&mut rng);
    let drin = model.drin_head.init(&mut rng);
    let rr = model.rr_head.init(&mut rng);
    let views = BatchViews::sample(&ds, &[0, 1, 2, 3, 4, 5], 0.2, &mut rng).unwrap();
    let omega = DrWeight::from_raw(vec![0.2, 1.0, 0.7, 0.0]);
    let cfg = LossConfig {
        lambda: 0.3,
        alpha: 2.5,
        ..LossConfig::default()
    };
    let tape = Tape::new();
    let th = theta.to_constants(&tape);
    let dr = drin.to_constants(&tape);
    let rv = rr.to_constants(&tape);
    let r = tape.constant(omega.row());
    let graph = model
        .combined_loss((&views.first, &views.second), &th, &dr, &rv, Some(&r), &cfg, &tape)
        .unwrap();
    let terms = graph.terms().unwrap();

    // Scripted: encode, weight, project, then the brute-force losses.
    let weight = |b: &drgcl_core::graph::Batch| -> Tensor {
        let h = model.encoder.embed(b, &theta).unwrap();
        let w = omega.effective();
        let d = h.cols();
        Tensor::matrix(h.rows(), d, h.data().iter().enumerate().map(|(i, x)| x * w[i % d]).collect()).unwrap()
    };
    let (hi, hj) = (weight(&views.first), weight(&views.second));
    let project = |h: &Tensor, p: &drgcl_core::params::ParamSet| -> Tensor {
        let t = Tape::new();
        let vars = p.to_constants(&t);
        (*model.drin_head.project(&t.constant(h.clone()), &vars).unwrap().value()).clone()
    };
    let drin_brute = infonce_brute(&project(&hi, &drin), &project(&hj, &drin), cfg.tau);
    let (inv, dec) = rr_brute(
        &normalize_brute(&project(&hi, &rr), drgcl_core::objectives::NORM_EPS),
        &normalize_brute(&project(&hj, &rr), drgcl_core::objectives::NORM_EPS),
    );
    let combined = inv + cfg.lambda * dec + cfg.alpha * drin_brute;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1.0);
    assert!(close(terms.drin, drin_brute), "{} vs {drin_brute}", terms.drin);
    assert!(close(terms.rr_invariance, inv));
    assert!(close(terms.rr_decorrelation, dec));
    assert!(close(terms.combined, combined));
    assert!(close(terms.combined, terms.rr_invariance + cfg.lambda * terms.rr_decorrelation + cfg.alpha * terms.drin));
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn infonce_ignores_positive_row_scaling(
        (zi, zj) in (2usize..6, 1usize..5).prop_flat_map(|(n, p)| (matrix(n, p), matrix(n, p))),
        row in 0usize..6,
        scale in 0.01f64..100.0,
    ) {
        let n = zi.rows();
        let p = zi.cols();
        prop_assume!(zi.data().chunks(p).all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        prop_assume!(zj.data().chunks(p).all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let row = row % n;
        let mut scaled = zi.clone();
        for x in &mut scaled.data_mut()[row * p..(row + 1) * p] {
            *x *= scale;
        }
        let tape = Tape::new();
        let a = infonce(&tape.constant(zi), &tape.constant(zj.clone()), 0.3, Negatives::Exclusive).unwrap();
        let b = infonce(&tape.constant(scaled), &tape.constant(zj), 0.3, Negatives::Exclusive).unwrap();
        prop_assert!((a.item().unwrap() - b.item().unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn normalized_columns_are_centered_with_unit_norm(z in (2usize..12, 1usize..5).prop_flat_map(|(n, p)| matrix(n, p))) {
        let tape = Tape::new();
        let out = normalize_instance_dim(&tape.constant(z.clone())).unwrap().value();
        let (n, p) = (z.rows(), z.cols());
        for k in 0..p {
            let col: Vec<f64> = (0..n).map(|i| z.get(i, k)).collect();
            let spread = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - col.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean: f64 = (0..n).map(|i| out.get(i, k)).sum::<f64>() / n as f64;
            let sq: f64 = (0..n).map(|i| out.get(i, k).powi(2)).sum();
            prop_assert!(mean.abs() <= 1e-12);
            if spread > 1e-6 {
                prop_assert!((sq - 1.0).abs() <= 1e-9, "column {k} squared norm {sq}");
            }
        }
    }

    #[test]
    fn clamped_weights_stay_in_unit_interval(
        steps in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..20),
        lr in 0.0f64..2.0,
    ) {
        let mut r = DrWeight::ones(4);
        for g in &steps {
            r.step(g, lr).unwrap();
            prop_assert!(r.raw().iter().all(|w| (0.0..=1.0).contains(w)));
            prop_assert!(r.effective().iter().all(|w| (0.0..=1.0).contains(w)));
        }
    }
}
