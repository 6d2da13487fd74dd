//! Finite-difference helpers and a catalog of scalarized cases, one or more
//! per differentiable op. Shared by the gradient-check tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::rc::Rc;

use drgcl_autodiff::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TRIALS: usize = 100;

pub type Build = dyn Fn(&[Var]) -> Result<Var>;

pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

pub fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    build(&vars).unwrap().item().unwrap()
}

/// Central differences of the scalar built by `build` at `inputs`.
pub fn numeric_grad(build: &Build, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut grads = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            g.data_mut()[i] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
        }
        grads.push(g);
    }
    grads
}

pub fn analytic_grad(build: &Build, inputs: &[Tensor]) -> Vec<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&vars).unwrap();
    tape.backward(&out, &vars).unwrap()
}

pub fn assert_grads_match(name: &str, build: &Build, inputs: &[Tensor], rel: f64, abs: f64) {
    let a = analytic_grad(build, inputs);
    let n = numeric_grad(build, inputs);
    for (k, (ga, gn)) in a.iter().zip(&n).enumerate() {
        assert_eq!(ga.shape(), gn.shape());
        for (i, (&x, &y)) in ga.data().iter().zip(gn.data()).enumerate() {
            assert!(
                close(x, y, rel, abs),
                "{name}: input {k} element {i}: analytic {x} vs numeric {y}"
            );
        }
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in [-2, 2] kept at least `gap` away from `kink`.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-2.0..2.0);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalarizes a tensor-valued op with fixed random weights so every output
/// element contributes.
pub fn weighted(weights: Tensor, f: impl Fn(&[Var]) -> Result<Var> + 'static) -> Box<Build> {
    Box::new(move |vars: &[Var]| {
        let y = f(vars)?;
        let w = vars[0].tape().constant(weights.reshape(&y.shape())?);
        y.mul(&w)?.sum()
    })
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

pub fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (r, c, k) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let mut out = Vec::new();
    let w = |rng: &mut ChaCha8Rng, shape: &[usize]| random(rng, shape, -2.0, 2.0);

    let weights = w(rng, &[r, c]);
    out.push(Case {
        name: "add",
        inputs: vec![w(rng, &[r, c]), w(rng, &[r, c])],
        build: weighted(weights.clone(), |v| v[0].add(&v[1])),
    });
    out.push(Case {
        name: "add_row_broadcast",
        inputs: vec![w(rng, &[r, c]), w(rng, &[c])],
        build: weighted(weights.clone(), |v| v[0].add(&v[1])),
    });
    out.push(Case {
        name: "sub",
        inputs: vec![w(rng, &[r, c]), w(rng, &[r, c])],
        build: weighted(weights.clone(), |v| v[0].sub(&v[1])),
    });
    out.push(Case {
        name: "mul",
        inputs: vec![w(rng, &[r, c]), w(rng, &[r, c])],
        build: weighted(weights.clone(), |v| v[0].mul(&v[1])),
    });
    out.push(Case {
        name: "mul_scalar_broadcast",
        inputs: vec![w(rng, &[]), w(rng, &[r, c])],
        build: weighted(weights.clone(), |v| v[0].mul(&v[1])),
    });
    let den = {
        let mut t = random(rng, &[r, c], 0.5, 2.0);
        for v in t.data_mut() {
            if rng.gen_bool(0.5) {
                *v = -*v;
            }
        }
        t
    };
    out.push(Case {
        name: "div",
        inputs: vec![w(rng, &[r, c]), den],
        build: weighted(weights.clone(), |v| v[0].div(&v[1])),
    });
    out.push(Case {
        name: "div_guarded",
        inputs: vec![w(rng, &[r, c]), random(rng, &[1, c], 0.2, 2.0)],
        build: weighted(weights.clone(), |v| v[0].div_eps(&v[1], 1e-12)),
    });
    let mw = w(rng, &[r, k]);
    out.push(Case {
        name: "matmul",
        inputs: vec![w(rng, &[r, c]), w(rng, &[c, k])],
        build: weighted(mw, |v| v[0].matmul(&v[1])),
    });
    out.push(Case {
        name: "transpose",
        inputs: vec![w(rng, &[r, c])],
        build: weighted(w(rng, &[c, r]), |v| v[0].t()),
    });
    out.push(Case {
        name: "concat_cols",
        inputs: vec![w(rng, &[r, c]), w(rng, &[r, k])],
        build: weighted(w(rng, &[r, c + k]), |v| Var::concat(&v[..2], 1)),
    });
    out.push(Case {
        name: "concat_rows",
        inputs: vec![w(rng, &[r, c]), w(rng, &[k, c])],
        build: weighted(w(rng, &[r + k, c]), |v| Var::concat(&v[..2], 0)),
    });
    let cols = c + 2;
    out.push(Case {
        name: "slice",
        inputs: vec![w(rng, &[r, cols])],
        build: weighted(w(rng, &[r, c]), move |v| v[0].slice(1, 1, 1 + c)),
    });
    out.push(Case {
        name: "sum",
        inputs: vec![w(rng, &[r, c])],
        build: Box::new(|v| v[0].sum()?.scale(1.5)),
    });
    out.push(Case {
        name: "sum_rows",
        inputs: vec![w(rng, &[r, c])],
        build: weighted(w(rng, &[1, c]), |v| v[0].sum_rows()),
    });
    out.push(Case {
        name: "mean",
        inputs: vec![w(rng, &[r, c])],
        build: Box::new(|v| v[0].mul(&v[0])?.mean()),
    });
    out.push(Case {
        name: "relu",
        inputs: vec![away_from(rng, &[r, c], 0.0, 1e-3)],
        build: weighted(weights.clone(), |v| v[0].relu()),
    });
    out.push(Case {
        name: "exp",
        inputs: vec![w(rng, &[r, c])],
        build: weighted(weights.clone(), |v| v[0].exp()),
    });
    out.push(Case {
        name: "log",
        inputs: vec![random(rng, &[r, c], 0.1, 2.0)],
        build: weighted(weights.clone(), |v| v[0].log()),
    });
    out.push(Case {
        name: "sqrt",
        inputs: vec![random(rng, &[r, c], 0.1, 2.0)],
        build: weighted(weights.clone(), |v| v[0].sqrt()),
    });
    out.push(Case {
        name: "power",
        inputs: vec![random(rng, &[r, c], 0.1, 2.0)],
        build: weighted(weights.clone(), |v| v[0].powf(2.5)),
    });
    out.push(Case {
        name: "power_integer",
        inputs: vec![w(rng, &[r, c])],
        build: weighted(weights.clone(), |v| v[0].powf(3.0)),
    });
    out.push(Case {
        name: "clamp_min",
        inputs: vec![away_from(rng, &[r, c], 0.3, 1e-3)],
        build: weighted(weights.clone(), |v| v[0].clamp_min(0.3)),
    });
    out.push(Case {
        name: "broadcast",
        inputs: vec![w(rng, &[1, c])],
        build: weighted(weights.clone(), move |v| v[0].broadcast_to(&[r, c])),
    });
    out.push(Case {
        name: "reshape",
        inputs: vec![w(rng, &[r, c])],
        build: weighted(weights.clone(), move |v| v[0].reshape(&[c, r])),
    });
    let n_rows = r + k;
    let segments: Rc<[usize]> = (0..n_rows).map(|_| rng.gen_range(0..r)).collect();
    out.push(Case {
        name: "rowsum_by_segment",
        inputs: vec![w(rng, &[n_rows, c])],
        build: weighted(weights.clone(), move |v| v[0].segment_sum(segments.clone(), r)),
    });
    let index: Rc<[usize]> = (0..n_rows).map(|_| rng.gen_range(0..r)).collect();
    out.push(Case {
        name: "gather_rows",
        inputs: vec![w(rng, &[r, c])],
        build: weighted(w(rng, &[n_rows, c]), move |v| v[0].gather_rows(index.clone())),
    });
    out
}

