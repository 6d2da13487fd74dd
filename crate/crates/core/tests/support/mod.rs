//! Fixtures and brute-force reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use drgcl_autodiff::{Tape, Tensor};
use drgcl_core::config::RunConfig;
use drgcl_core::encoder::GinEncoder;
use drgcl_core::graph::{load_tu_dataset, Batch, Dataset, FeatureKind, Graph, LoadWarnings};
use drgcl_core::objectives::{
    apply_dr, infonce, normalize_instance_dim, rr_loss, DrWeight, Model, Negatives, NORM_EPS,
};
use drgcl_core::params::ParamSet;
use drgcl_core::trainer::{meta_gradient, trial_weights, BatchViews};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Directory holding TU corpora: `$DRGCL_DATA_DIR`, else `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("DRGCL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn mutag() -> Dataset {
    let dir = data_dir().join("MUTAG");
    load_tu_dataset(&dir, "MUTAG").unwrap_or_else(|e| panic!("MUTAG must be available at {}: {e}", dir.display()))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Erdős–Rényi-style graph with one-hot features over `feature_dim` labels.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, feature_dim: usize, label: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let mut feats = vec![0.0; n * feature_dim];
    for i in 0..n {
        feats[i * feature_dim + rng.gen_range(0..feature_dim)] = 1.0;
    }
    Graph::new(n, edges, Tensor::matrix(n, feature_dim, feats).unwrap(), label).unwrap()
}

pub fn toy_dataset(rng: &mut ChaCha8Rng, count: usize, feature_dim: usize) -> Dataset {
    let graphs = (0..count)
        .map(|i| {
            let n = rng.gen_range(4..10);
            random_graph(rng, n, 0.35, feature_dim, i % 2)
        })
        .collect();
    Dataset {
        name: "toy".into(),
        graphs,
        num_classes: 2,
        feature_dim,
        feature_kind: FeatureKind::NodeLabelOneHot,
        class_values: vec![0, 1],
        node_label_values: (0..feature_dim as i64).collect(),
        warnings: LoadWarnings::default(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Literal double loop: `Σ_n −log(exp(s_nn/τ) / Σ_{n'≠n} exp(s_nn'/τ))`.
pub fn infonce_brute(zi: &Tensor, zj: &Tensor, tau: f64) -> f64 {
    let n = zi.rows();
    let cos = |a: usize, b: usize| {
        let (x, y) = (zi.row(a), zj.row(b));
        dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt())
    };
    let mut total = 0.0;
    for a in 0..n {
        let mut denom = 0.0;
        for b in 0..n {
            if b != a {
                denom += (cos(a, b) / tau).exp();
            }
        }
        total -= ((cos(a, a) / tau).exp() / denom).ln();
    }
    total
}

/// Per column `(z − μ) / (σ·√N + ε)` with the population σ.
pub fn normalize_brute(z: &Tensor, eps: f64) -> Tensor {
    let (n, p) = (z.rows(), z.cols());
    let mut out = vec![0.0; n * p];
    for k in 0..p {
        let mut mean = 0.0;
        for i in 0..n {
            mean += z.get(i, k);
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            var += (z.get(i, k) - mean).powi(2);
        }
        let sigma = (var / n as f64).sqrt();
        for i in 0..n {
            out[i * p + k] = (z.get(i, k) - mean) / (sigma * (n as f64).sqrt() + eps);
        }
    }
    Tensor::matrix(n, p, out).unwrap()
}

/// `(‖Zi − Zj‖², ‖ZiᵀZi − I‖² + ‖ZjᵀZj − I‖²)` by explicit summation.
pub fn rr_brute(zi: &Tensor, zj: &Tensor) -> (f64, f64) {
    let (n, p) = (zi.rows(), zi.cols());
    let mut inv = 0.0;
    for i in 0..n {
        for k in 0..p {
            inv += (zi.get(i, k) - zj.get(i, k)).powi(2);
        }
    }
    let mut dec = 0.0;
    for z in [zi, zj] {
        for k in 0..p {
            for l in 0..p {
                let mut c = 0.0;
                for i in 0..n {
                    c += z.get(i, k) * z.get(i, l);
                }
                let target = if k == l { 1.0 } else { 0.0 };
                dec += (c - target).powi(2);
            }
        }
    }
    (inv, dec)
}

/// Small model: one GIN layer of width `d`, heads `[hidden, out]`.
pub fn tiny_model(input_dim: usize, d: usize, head: [usize; 2]) -> Model {
    Model::new(input_dim, vec![d], head).unwrap()
}

/// Replaces every bias (names ending in `b1`/`b2`) with random positive
/// values, moving finite-difference checks away from the all-zero embeddings
/// that zero-bias initialization can produce on tiny networks.
pub fn jitter_biases(set: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let names = set.names().to_vec();
    for (name, t) in names.iter().zip(set.tensors_mut()) {
        if name.ends_with("b1") || name.ends_with("b2") {
            for x in t.data_mut() {
                *x = rng.gen_range(0.1..0.5);
            }
        }
    }
}

/// Central difference of a scalar function of one coordinate.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest deviation (relative to `max(1, |value|)`) of `infonce`,
/// `normalize_instance_dim` and `rr_loss` from their brute-force forms over
/// `count` random instances.
pub fn formula_errors(seed: u64, count: usize) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..count {
        let n = rng.gen_range(2..8);
        let p = rng.gen_range(1..6);
        let tau = rng.gen_range(0.05..1.0);
        let zi = random_tensor(&mut rng, n, p, -2.0, 2.0);
        let zj = random_tensor(&mut rng, n, p, -2.0, 2.0);
        let tape = Tape::new();
        let (vi, vj) = (tape.constant(zi.clone()), tape.constant(zj.clone()));

        let loss = infonce(&vi, &vj, tau, Negatives::Exclusive).unwrap().item().unwrap();
        worst[0] = worst[0].max(rel_err(loss, infonce_brute(&zi, &zj, tau)));

        let normed = normalize_instance_dim(&vi).unwrap();
        let brute = normalize_brute(&zi, NORM_EPS);
        worst[1] = worst[1].max(normed.value().max_abs_diff(&brute));

        let (inv, dec) = rr_loss(&vi, &vj).unwrap();
        let (binv, bdec) = rr_brute(&zi, &zj);
        worst[2] = worst[2]
            .max(rel_err(inv.item().unwrap(), binv))
            .max(rel_err(dec.item().unwrap(), bdec));
    }
    worst
}

fn class_column_variance(h: &Tensor, members: &[usize], k: usize) -> f64 {
    let m = members.len() as f64;
    let mean = members.iter().map(|&i| h.get(i, k)).sum::<f64>() / m;
    members.iter().map(|&i| (h.get(i, k) - mean).powi(2)).sum::<f64>() / m
}

/// Counts instances breaking the conditional-variance inequality for
/// `H ∘ ω`, per column and summed, or its equality pattern (equality iff
/// `ω_k = 1` or the column is constant within the class).
pub fn conditional_variance_violations(seed: u64, count: usize) -> usize {
    const TOL: f64 = 1e-12;
    const ZERO_VAR: f64 = 1e-24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..count {
        let n = rng.gen_range(4..24);
        let d = rng.gen_range(1..8);
        let classes = rng.gen_range(2..4);
        let labels: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.gen_range(0..classes) }).collect();
        let mut h = random_tensor(&mut rng, n, d, -3.0, 3.0);
        // Some columns are constant within every class.
        for k in 0..d {
            if rng.gen_bool(0.2) {
                let levels: Vec<f64> = (0..classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
                for (i, &y) in labels.iter().enumerate() {
                    h.data_mut()[i * d + k] = levels[y];
                }
            }
        }
        let omega: Vec<f64> = (0..d)
            .map(|_| match rng.gen_range(0..5) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..0.999),
            })
            .collect();
        let tape = Tape::new();
        let weighted = apply_dr(&tape.constant(h.clone()), &tape.constant(DrWeight::from_raw(omega.clone()).row()))
            .unwrap()
            .value();
        let mut bad = false;
        for c in 0..classes {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let (mut sum_h, mut sum_w) = (0.0, 0.0);
            for k in 0..d {
                let vh = class_column_variance(&h, &members, k);
                let vw = class_column_variance(&weighted, &members, k);
                sum_h += vh;
                sum_w += vw;
                let tol = TOL * (1.0 + vh);
                let equal = (vw - vh).abs() <= tol;
                let expect_equal = omega[k] == 1.0 || vh <= ZERO_VAR;
                bad |= vw > vh + tol || equal != expect_equal;
            }
            bad |= sum_w > sum_h + TOL * (1.0 + sum_h);
        }
        violations += usize::from(bad);
    }
    violations
}

/// Largest `|encode(G) − encode(π·G)|_∞` over `count` random graphs with
/// real-valued features and random node permutations.
pub fn permutation_max_diff(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = GinEncoder::new(5, vec![8, 8, 8]).unwrap();
    let theta = encoder.init(&mut rng);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.gen_range(1..25);
        let p = rng.gen_range(0.05..0.6);
        let g = random_graph(&mut rng, n, p, 5, 0);
        let feats = random_tensor(&mut rng, n, 5, -1.0, 1.0);
        let g = Graph::new(n, g.edges().to_vec(), feats, 0).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = g.permuted(&perm).unwrap();
        let a = encoder.embed(&Batch::from_graphs([&g]).unwrap(), &theta).unwrap();
        let b = encoder.embed(&Batch::from_graphs([&pg]).unwrap(), &theta).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    worst
}

/// Meta objective evaluated from scratch: one plain gradient step of the
/// contrastive loss at `omega`, then the contrastive loss of the stepped
/// weights at `omega`. Uses only first-order backward passes.
pub fn composed_meta_objective(
    model: &Model,
    theta: &ParamSet,
    drin: &ParamSet,
    omega: &[f64],
    views: &BatchViews,
    cfg: &RunConfig,
) -> f64 {
    let loss_cfg = cfg.loss_config();
    let row = Tensor::matrix(1, omega.len(), omega.to_vec()).unwrap();
    let tape = Tape::new();
    let th = theta.to_params(&tape);
    let dr = drin.to_params(&tape);
    let r = tape.constant(row.clone());
    let inner = model
        .drin_loss((&views.first, &views.second), &th, &dr, Some(&r), &loss_cfg, &tape)
        .unwrap();
    let wrt: Vec<_> = th.iter().chain(&dr).cloned().collect();
    let grads = tape.backward(&inner, &wrt).unwrap();
    let outer_tape = Tape::new();
    let stepped: Vec<_> = wrt
        .iter()
        .zip(&grads)
        .map(|(p, g)| {
            let v = p.value().zip_map(g, |x, gx| x - cfg.pretrain_lr * gx);
            outer_tape.constant(v)
        })
        .collect();
    let (th2, dr2) = stepped.split_at(th.len());
    let r2 = outer_tape.constant(row);
    model
        .drin_loss((&views.first, &views.second), th2, dr2, Some(&r2), &loss_cfg, &outer_tape)
        .unwrap()
        .item()
        .unwrap()
}

pub struct MetaCheck {
    /// Largest per-coordinate relative error of the analytic meta gradient.
    pub rel_err: f64,
    /// Largest relative gap between the full and first-order meta gradients,
    /// showing the second-order path matters on this instance.
    pub second_order_gap: f64,
}

/// Meta gradient on a one-layer GIN (`D = 4`) over `N = 4` graphs versus
/// central differences of [`composed_meta_objective`].
pub fn meta_gradient_check(seed: u64) -> MetaCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = toy_dataset(&mut rng, 4, 3);
    let model = tiny_model(3, 4, [6, 5]);
    let mut theta = model.encoder.init(&mut rng);
    let mut drin = model.drin_head.init(&mut rng);
    jitter_biases(&mut theta, &mut rng);
    jitter_biases(&mut drin, &mut rng);
    let views = BatchViews::sample(&ds, &[0, 1, 2, 3], 0.2, &mut rng).unwrap();
    let omega: Vec<f64> = (0..4).map(|_| rng.gen_range(0.3..0.9)).collect();
    let mut cfg = RunConfig {
        hidden: vec![4],
        projection: [6, 5],
        pretrain_lr: 0.5,
        ..RunConfig::default()
    };
    let r = DrWeight::from_raw(omega.clone());
    let trial = trial_weights(&theta, &drin, &r, &model, &views, &cfg).unwrap();
    let (_, analytic) = meta_gradient(&trial, &model, &views, &cfg).unwrap();
    cfg.first_order_meta = true;
    let trial = trial_weights(&theta, &drin, &r, &model, &views, &cfg).unwrap();
    let (_, first_order) = meta_gradient(&trial, &model, &views, &cfg).unwrap();
    cfg.first_order_meta = false;

    let h = 1e-5;
    let mut rel = 0.0f64;
    let mut gap = 0.0f64;
    for k in 0..omega.len() {
        let numeric = central_difference(h, |dx| {
            let mut w = omega.clone();
            w[k] += dx;
            composed_meta_objective(&model, &theta, &drin, &w, &views, &cfg)
        });
        let a = analytic.data()[k];
        rel = rel.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        let f = first_order.data()[k];
        gap = gap.max((a - f).abs() / a.abs().max(f.abs()).max(1e-8));
    }
    MetaCheck {
        rel_err: rel,
        second_order_gap: gap,
    }
}
