//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and fails
//! if any criterion fails. Lines are written straight to the process stdout so
//! they show up without `--nocapture`.
//!
//! Criteria 5-9 share their MUTAG pre-training runs: five seeds of each of the
//! full, no-DR and no-RR configurations.

mod support;

#[path = "../../autodiff/tests/support/op_cases.rs"]
mod op_cases;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::time::Instant;

use drgcl_core::analysis::{dimension_sweep, redundancy_matrix};
use drgcl_core::config::{RawConfig, RunConfig};
use drgcl_core::eval::{extract_embeddings, extract_projections, linear_classify_cv, mean_std, CvConfig, CvReport, EmbeddingTable};
use drgcl_core::graph::Dataset;
use drgcl_core::rng::{stream, substream};
use drgcl_core::trainer::{pretrain, Pretrained};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Criterion 1.
const OP_REL: f64 = 1e-5;
const OP_ABS: f64 = 1e-7;
const OP_TRIALS: usize = 100;
const META_REL: f64 = 1e-4;
const META_SEEDS: [u64; 3] = [1, 2, 3];
const NUMERIC_BUDGET_SECS: f64 = 120.0;
// Criterion 2.
const FORMULA_TOL: f64 = 1e-12;
const FORMULA_INSTANCES: usize = 50;
// Criterion 3.
const VARIANCE_INSTANCES: usize = 1000;
// Criterion 4.
const PERMUTATION_TOL: f64 = 1e-9;
const PERMUTATION_GRAPHS: usize = 200;
// Criteria 5-9.
const PRETRAIN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MUTAG_MIN_ACC: f64 = 0.85;
const MUTAG_BUDGET_SECS: f64 = 30.0 * 60.0;
const ABLATION_SLACK: f64 = 0.015;
const REDUNDANCY_RATIO: f64 = 0.5;
const SWEEP_RATES: [f64; 7] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const SWEEP_TRIALS: usize = 5;
const SWEEP_CV_SEEDS: usize = 1;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {}: {} | {}", v.id, v.name, v.detail);
    let _ = out.flush();
}

fn numerical_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut trials: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut failures = Vec::new();
    for _ in 0..OP_TRIALS {
        for case in op_cases::cases(&mut rng) {
            let analytic = op_cases::analytic_grad(&*case.build, &case.inputs);
            let numeric = op_cases::numeric_grad(&*case.build, &case.inputs);
            let ok = analytic
                .iter()
                .zip(&numeric)
                .all(|(a, n)| a.data().iter().zip(n.data()).all(|(&x, &y)| op_cases::close(x, y, OP_REL, OP_ABS)));
            if !ok {
                failures.push(case.name);
            }
            *trials.entry(case.name).or_default() += 1;
        }
    }
    let min_trials = trials.values().copied().min().unwrap_or(0);
    let meta: Vec<_> = META_SEEDS.iter().map(|&s| support::meta_gradient_check(s)).collect();
    let meta_err = meta.iter().map(|m| m.rel_err).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        name: "autodiff and meta-gradient finite differences",
        pass: failures.is_empty() && min_trials >= OP_TRIALS && meta_err <= META_REL && secs < NUMERIC_BUDGET_SECS,
        detail: format!(
            "{} ops, min {min_trials} trials/op, {} op failures (rel {OP_REL:e}); meta rel err {meta_err:.2e} <= {META_REL:e}; {secs:.1}s < {NUMERIC_BUDGET_SECS}s",
            trials.len(),
            failures.len()
        ),
    }
}

fn formula_fidelity() -> Verdict {
    let [nce, norm, rr] = support::formula_errors(2024, FORMULA_INSTANCES);
    Verdict {
        id: 2,
        name: "loss formulas vs brute force",
        pass: nce.max(norm).max(rr) <= FORMULA_TOL,
        detail: format!("{FORMULA_INSTANCES} instances: infonce {nce:.1e}, normalization {norm:.1e}, rr {rr:.1e} (tol {FORMULA_TOL:e})"),
    }
}

fn variance_property() -> Verdict {
    let violations = support::conditional_variance_violations(7, VARIANCE_INSTANCES);
    Verdict {
        id: 3,
        name: "class-conditional variance under rationale weights",
        pass: violations == 0,
        detail: format!("{violations} violations over {VARIANCE_INSTANCES} instances"),
    }
}

fn permutation_invariance() -> Verdict {
    let diff = support::permutation_max_diff(11, PERMUTATION_GRAPHS);
    Verdict {
        id: 4,
        name: "encoder permutation invariance",
        pass: diff <= PERMUTATION_TOL,
        detail: format!("{PERMUTATION_GRAPHS} graphs, max inf-norm diff {diff:.2e} (tol {PERMUTATION_TOL:e})"),
    }
}

fn mutag_config(seed: u64, overrides: &[&str]) -> RunConfig {
    let mut raw = RawConfig::default();
    raw.set(&format!("seed={seed}")).unwrap();
    for o in overrides {
        raw.set(o).unwrap();
    }
    raw.resolve().unwrap()
}

struct ArmRun {
    run: Pretrained,
    table: EmbeddingTable,
    cv: CvReport,
}

fn run_arm(ds: &Dataset, cfg: &RunConfig) -> ArmRun {
    let run = pretrain(ds, cfg, |_, _| {}).expect("pretraining");
    let table = extract_embeddings(ds, &run.model.encoder, &run.state.theta, Some(&run.state.r), "acceptance").unwrap();
    let cv = linear_classify_cv(&table, &cfg.cv_config()).unwrap();
    ArmRun { run, table, cv }
}

fn arm_means(arms: &[ArmRun]) -> Vec<f64> {
    arms.iter().map(|a| a.cv.mean).collect()
}

fn fmt_pct(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join(", ")
}

fn mutag_reproduction(full: &[ArmRun], secs: f64) -> Verdict {
    let means = arm_means(full);
    let (mean, std) = mean_std(&means);
    Verdict {
        id: 5,
        name: "MUTAG accuracy at default settings",
        pass: mean >= MUTAG_MIN_ACC && secs < MUTAG_BUDGET_SECS,
        detail: format!(
            "mean {:.2}% +- {:.2} over seeds [{}] (threshold {:.1}%); {secs:.0}s < {MUTAG_BUDGET_SECS}s",
            100.0 * mean,
            100.0 * std,
            fmt_pct(&means),
            100.0 * MUTAG_MIN_ACC
        ),
    }
}

fn ablation_order(full: &[ArmRun], no_dr: &[ArmRun], no_rr: &[ArmRun]) -> Verdict {
    let m = |arms: &[ArmRun]| mean_std(&arm_means(arms)).0;
    let (f, d, r) = (m(full), m(no_dr), m(no_rr));
    let margins = [f - d, f - r];
    Verdict {
        id: 6,
        name: "ablation ordering on MUTAG",
        pass: margins.iter().all(|&x| x >= -ABLATION_SLACK),
        detail: format!(
            "full {:.2}%, w/o DR {:.2}% [{}], w/o RR {:.2}% [{}]; margins {:+.2}, {:+.2} points (allowed -{:.1})",
            100.0 * f,
            100.0 * d,
            fmt_pct(&arm_means(no_dr)),
            100.0 * r,
            fmt_pct(&arm_means(no_rr)),
            100.0 * margins[0],
            100.0 * margins[1],
            100.0 * ABLATION_SLACK
        ),
    }
}

fn rr_head_redundancy(ds: &Dataset, arm: &ArmRun) -> f64 {
    let run = &arm.run;
    let z = extract_projections(ds, &run.model.encoder, &run.state.theta, &run.model.rr_head, &run.state.rr, &run.state.r).unwrap();
    redundancy_matrix(&z).unwrap().mean_abs_offdiag
}

fn redundancy_effect(ds: &Dataset, seed: u64, with_rr: &ArmRun, without_rr: &ArmRun) -> Verdict {
    let on = rr_head_redundancy(ds, with_rr);
    let off = rr_head_redundancy(ds, without_rr);
    Verdict {
        id: 7,
        name: "redundancy reduction on RR-head outputs",
        pass: on <= REDUNDANCY_RATIO * off,
        detail: format!(
            "seed {seed}: mean |offdiag| {on:.4} with RR vs {off:.4} without (ratio {:.3}, limit {REDUNDANCY_RATIO})",
            on / off
        ),
    }
}

fn dimension_sweep_check(arm: &ArmRun, cfg: &RunConfig) -> Verdict {
    let cv = CvConfig {
        seeds: SWEEP_CV_SEEDS,
        ..cfg.cv_config()
    };
    let mut rng = substream(cfg.seed, stream::SWEEP);
    let sweep = dimension_sweep(&arm.table, &SWEEP_RATES, SWEEP_TRIALS, &cv, &mut rng).unwrap();
    let full = dimension_sweep(&arm.table, &[1.0], 1, &cv, &mut rng).unwrap();
    let trials: Vec<f64> = sweep.records.iter().filter(|r| r.trial > 0).map(|r| r.accuracy).collect();
    let above = trials.iter().filter(|&&a| a > sweep.baseline).count();
    let below = trials.iter().filter(|&&a| a < sweep.baseline).count();
    let exact = full.records.iter().all(|r| r.accuracy == sweep.baseline) && full.baseline == sweep.baseline;
    Verdict {
        id: 8,
        name: "dimension sweep scatters around the baseline",
        pass: above >= 1 && below >= 1 && exact,
        detail: format!(
            "baseline {:.2}%, {} trials: {above} above, {below} below; rate 1.0 equals baseline bitwise: {exact}",
            100.0 * sweep.baseline,
            trials.len()
        ),
    }
}

fn determinism(ds: &Dataset, first: &ArmRun, cfg: &RunConfig) -> Verdict {
    let second = run_arm(ds, cfg);
    let logs = |a: &ArmRun| a.run.log.iter().map(|r| r.deterministic_json()).collect::<Vec<_>>();
    let same_log = logs(first) == logs(&second);
    let same_cv = first.cv == second.cv;
    let same_params = first.run.state == second.run.state;
    Verdict {
        id: 9,
        name: "bitwise reproducibility",
        pass: same_log && same_cv && same_params,
        detail: format!(
            "seed {}: metrics log identical {same_log}, CvReport identical {same_cv}, final state identical {same_params}",
            cfg.seed
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    for check in [numerical_correctness, formula_fidelity, variance_property, permutation_invariance] {
        let v = check();
        report(&v);
        verdicts.push(v);
    }

    let ds = support::mutag();
    let start = Instant::now();
    let full: Vec<ArmRun> = PRETRAIN_SEEDS.iter().map(|&s| run_arm(&ds, &mutag_config(s, &[]))).collect();
    let v = mutag_reproduction(&full, start.elapsed().as_secs_f64());
    report(&v);
    verdicts.push(v);

    let no_dr: Vec<ArmRun> = PRETRAIN_SEEDS.iter().map(|&s| run_arm(&ds, &mutag_config(s, &["enable_dr=false"]))).collect();
    let no_rr: Vec<ArmRun> = PRETRAIN_SEEDS.iter().map(|&s| run_arm(&ds, &mutag_config(s, &["enable_rr=false"]))).collect();
    let v = ablation_order(&full, &no_dr, &no_rr);
    report(&v);
    verdicts.push(v);

    let v = redundancy_effect(&ds, PRETRAIN_SEEDS[0], &full[0], &no_rr[0]);
    report(&v);
    verdicts.push(v);

    let cfg = mutag_config(PRETRAIN_SEEDS[0], &[]);
    let v = dimension_sweep_check(&full[0], &cfg);
    report(&v);
    verdicts.push(v);

    let v = determinism(&ds, &full[0], &cfg);
    report(&v);
    verdicts.push(v);

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
