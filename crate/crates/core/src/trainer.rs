//! Bi-level pre-training: a regular optimizer step on the encoder and heads,
//! then a second-order meta step on the rationale weight, per batch.

use std::time::Instant;

use drgcl_autodiff::{AutodiffError, GradGraph, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::augment::{sample_pair, AugmentKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{batch_indices, Batch, Dataset};
use crate::objectives::{DrWeight, LossConfig, LossTerms, Model};
use crate::params::ParamSet;
use crate::rng::{stream, substream, Rng};

/// Adaptive-moment optimizer state over a flat list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != g.numel() || m.len() != g.numel() {
                return Err(Error::Width("optimizer state does not match parameters".into()));
            }
            for (((x, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                *x -= lr * (*mk / c1) / ((*vk / c2).sqrt() + self.eps);
            }
            count += 1;
        }
        if count != grads.len() || count != self.m.len() {
            return Err(Error::Width("optimizer state does not match parameters".into()));
        }
        Ok(())
    }
}

/// Everything mutated by training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ParamSet,
    pub drin: ParamSet,
    pub rr: ParamSet,
    pub r: DrWeight,
    pub adam: Adam,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

impl TrainState {
    /// Fresh parameters from the `init` sub-stream of `cfg.seed`.
    pub fn init(model: &Model, cfg: &RunConfig) -> Self {
        let mut rng = substream(cfg.seed, stream::INIT);
        let theta = model.encoder.init(&mut rng);
        let drin = model.drin_head.init(&mut rng);
        let rr = model.rr_head.init(&mut rng);
        let r = match cfg.fixed_r {
            Some(v) => DrWeight::constant(model.dim(), v),
            None => DrWeight::ones(model.dim()),
        };
        let adam = Adam::new(
            theta.tensors().iter().chain(drin.tensors()).chain(rr.tensors()).map(Tensor::numel),
        );
        Self {
            theta,
            drin,
            rr,
            r,
            adam,
            epoch: 0,
            batch: 0,
            step: 0,
        }
    }

    pub fn check(&self, model: &Model) -> Result<()> {
        model.encoder.check(&self.theta)?;
        model.drin_head.check(&self.drin)?;
        model.rr_head.check(&self.rr)?;
        if self.r.dim() != model.dim() {
            return Err(Error::Width(format!(
                "rationale weight has width {}, encoder output is {}",
                self.r.dim(),
                model.dim()
            )));
        }
        Ok(())
    }

    /// Encoder and both heads as one prefixed parameter set.
    pub fn checkpoint(&self) -> ParamSet {
        let mut all = ParamSet::new();
        all.extend_prefixed("encoder", &self.theta);
        all.extend_prefixed("drin", &self.drin);
        all.extend_prefixed("rr", &self.rr);
        all
    }

    pub fn from_checkpoint(model: &Model, params: &ParamSet, r: DrWeight) -> Result<Self> {
        let theta = params.strip_prefix("encoder");
        let drin = params.strip_prefix("drin");
        let rr = params.strip_prefix("rr");
        let adam = Adam::new(
            theta.tensors().iter().chain(drin.tensors()).chain(rr.tensors()).map(Tensor::numel),
        );
        let state = Self {
            theta,
            drin,
            rr,
            r,
            adam,
            epoch: 0,
            batch: 0,
            step: 0,
        };
        state.check(model)?;
        Ok(state)
    }
}

/// Two augmented views of each graph in a batch, row-aligned.
#[derive(Clone, Debug)]
pub struct BatchViews {
    pub first: Batch,
    pub second: Batch,
    pub kinds: Vec<(AugmentKind, AugmentKind)>,
}

impl BatchViews {
    pub fn sample(dataset: &Dataset, indices: &[usize], ratio: f64, rng: &mut Rng) -> Result<Self> {
        let pairs: Vec<_> = indices
            .iter()
            .map(|&i| sample_pair(&dataset.graphs[i], ratio, rng))
            .collect();
        Ok(Self {
            first: Batch::from_graphs(pairs.iter().map(|p| &p.first))?,
            second: Batch::from_graphs(pairs.iter().map(|p| &p.second))?,
            kinds: pairs.iter().map(|p| p.kinds).collect(),
        })
    }

    /// Both views equal to the unaugmented graphs.
    pub fn identity(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let batch = Batch::from_graphs(indices.iter().map(|&i| &dataset.graphs[i]))?;
        Ok(Self {
            first: batch.clone(),
            second: batch,
            kinds: Vec::new(),
        })
    }

    fn pair(&self) -> (&Batch, &Batch) {
        (&self.first, &self.second)
    }
}

fn tag(err: Error, term: &'static str, state: &TrainState) -> Error {
    match err {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::NonFinite {
            term,
            epoch: state.epoch,
            batch: state.batch,
        },
        other => other,
    }
}

fn ensure_finite(tensors: &[Tensor], term: &'static str, state: &TrainState) -> Result<()> {
    if tensors.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term,
            epoch: state.epoch,
            batch: state.batch,
        })
    }
}

/// Loss terms and gradients of the combined objective with `R` held constant,
/// ordered as encoder, contrastive head, redundancy head.
pub fn regular_gradients(
    state: &TrainState,
    model: &Model,
    views: &BatchViews,
    loss: &LossConfig,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let tape = Tape::new();
    let theta = state.theta.to_params(&tape);
    let drin = state.drin.to_params(&tape);
    let rr = state.rr.to_params(&tape);
    let r = tape.constant(state.r.row());
    let graph = model
        .combined_loss(views.pair(), &theta, &drin, &rr, Some(&r), loss, &tape)
        .map_err(|e| tag(e, "combined loss", state))?;
    let terms = graph.terms()?;
    let wrt: Vec<Var> = theta.into_iter().chain(drin).chain(rr).collect();
    let grads = tape
        .backward(&graph.combined, &wrt)
        .map_err(|e| tag(e.into(), "combined loss gradient", state))?;
    ensure_finite(&grads, "combined loss gradient", state)?;
    Ok((terms, grads))
}

/// One optimizer update of encoder and heads; `R` is not touched.
pub fn regular_step(state: &mut TrainState, model: &Model, views: &BatchViews, cfg: &RunConfig) -> Result<LossTerms> {
    let (terms, grads) = regular_gradients(state, model, views, &cfg.loss_config())?;
    let TrainState {
        theta, drin, rr, adam, ..
    } = state;
    let params = theta
        .tensors_mut()
        .iter_mut()
        .chain(drin.tensors_mut())
        .chain(rr.tensors_mut());
    adam.update(params, &grads, cfg.pretrain_lr)?;
    state.step += 1;
    Ok(terms)
}

/// One-plain-gradient-step copies of the encoder and contrastive head, still
/// attached to the tape that computed them.
pub struct TrialWeights {
    pub tape: Tape,
    pub theta: Vec<Var>,
    pub drin: Vec<Var>,
    /// The rationale weight as a differentiable leaf.
    pub r: Var,
    pub inner_loss: f64,
    first_order: bool,
}

impl TrialWeights {
    pub fn values(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        let get = |vs: &[Var]| vs.iter().map(|v| (*v.value()).clone()).collect();
        (get(&self.theta), get(&self.drin))
    }
}

/// `θ − β∇θ L`, `ϑ − β∇ϑ L` for the contrastive loss at the current `R`.
/// Optimizer moments are not used.
pub fn trial_weights(
    theta: &ParamSet,
    drin: &ParamSet,
    r: &DrWeight,
    model: &Model,
    views: &BatchViews,
    cfg: &RunConfig,
) -> Result<TrialWeights> {
    let tape = Tape::new();
    let th = theta.to_params(&tape);
    let dr = drin.to_params(&tape);
    let rv = tape.param(r.row());
    let loss = model.drin_loss(views.pair(), &th, &dr, Some(&rv), &cfg.loss_config(), &tape)?;
    let wrt: Vec<Var> = th.iter().chain(&dr).cloned().collect();
    let mode = if cfg.first_order_meta {
        GradGraph::Detach
    } else {
        GradGraph::Retain
    };
    let grads = tape.grad(&loss, &wrt, mode)?;
    let stepped = wrt
        .iter()
        .zip(&grads)
        .map(|(p, g)| p.sub(&g.scale(cfg.pretrain_lr)?))
        .collect::<std::result::Result<Vec<Var>, _>>()?;
    let (theta_trial, drin_trial) = stepped.split_at(th.len());
    Ok(TrialWeights {
        inner_loss: loss.item()?,
        theta: theta_trial.to_vec(),
        drin: drin_trial.to_vec(),
        r: rv,
        tape,
        first_order: cfg.first_order_meta,
    })
}

/// Value of the meta objective and its total derivative with respect to `R`.
pub fn meta_gradient(trial: &TrialWeights, model: &Model, views: &BatchViews, cfg: &RunConfig) -> Result<(f64, Tensor)> {
    let outer = model.drin_loss(
        views.pair(),
        &trial.theta,
        &trial.drin,
        Some(&trial.r),
        &cfg.loss_config(),
        &trial.tape,
    )?;
    let grad = if trial.first_order {
        trial.tape.backward(&outer, std::slice::from_ref(&trial.r))?.remove(0)
    } else {
        trial.tape.grad_through_grad(&outer, &trial.r)?
    };
    Ok((outer.item()?, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaOutcome {
    pub meta_loss: f64,
    pub grad: Vec<f64>,
}

/// `R_raw ← clamp(R_raw − β_R · dL/dR)` using the trial weights' tape.
pub fn meta_step(
    state: &mut TrainState,
    trial: TrialWeights,
    model: &Model,
    views: &BatchViews,
    cfg: &RunConfig,
) -> Result<MetaOutcome> {
    let (meta_loss, grad) = meta_gradient(&trial, model, views, cfg).map_err(|e| tag(e, "meta loss", state))?;
    ensure_finite(std::slice::from_ref(&grad), "meta gradient", state)?;
    let grad = grad.into_data();
    state.r.step(&grad, cfg.meta_lr)?;
    Ok(MetaOutcome { meta_loss, grad })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_drin: f64,
    pub loss_rr_inv: f64,
    pub loss_rr_dec: f64,
    pub loss_combined: f64,
    pub r_min: f64,
    pub r_mean: f64,
    pub r_max: f64,
    pub r_at_zero: f64,
    pub r_at_one: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    /// JSON line with the timing field removed, for reproducibility checks.
    pub fn deterministic_json(&self) -> String {
        let mut copy = self.clone();
        copy.wall_seconds = 0.0;
        serde_json::to_string(&copy).expect("plain record")
    }
}

pub fn metrics_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

/// Progress notifications from [`pretrain`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Views,
    Regular,
    Trial,
    Meta,
    EpochEnd,
}

pub struct Pretrained {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

/// A run stopped by an error, with the state reached so far.
pub struct Aborted {
    pub partial: Option<Box<Pretrained>>,
    pub error: Error,
}

impl From<Error> for Aborted {
    fn from(error: Error) -> Self {
        Self { partial: None, error }
    }
}

impl std::fmt::Debug for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Aborted({:?})", self.error)
    }
}

pub fn model_for(dataset: &Dataset, cfg: &RunConfig) -> Result<Model> {
    Model::new(dataset.feature_dim, cfg.hidden.clone(), cfg.projection)
}

/// Runs the full bi-level loop for `cfg.epochs` epochs.
pub fn pretrain(
    dataset: &Dataset,
    cfg: &RunConfig,
    mut observer: impl FnMut(StepEvent, &TrainState),
) -> std::result::Result<Pretrained, Aborted> {
    cfg.validate().map_err(Error::from)?;
    let model = model_for(dataset, cfg)?;
    let mut state = TrainState::init(&model, cfg);
    let mut shuffle = substream(cfg.seed, stream::DATA_SHUFFLE);
    let mut augment = substream(cfg.seed, stream::AUGMENT);
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let batches = batch_indices(dataset.len(), cfg.batch_size, &mut shuffle, true).map_err(Error::from)?;
        let mut sums = [0.0; 4];
        for (b, indices) in batches.iter().enumerate() {
            state.batch = b;
            let outcome = (|| -> Result<LossTerms> {
                let views = BatchViews::sample(dataset, indices, cfg.aug_ratio, &mut augment)?;
                observer(StepEvent::Views, &state);
                let terms = regular_step(&mut state, &model, &views, cfg)?;
                observer(StepEvent::Regular, &state);
                if cfg.enable_dr {
                    let trial = trial_weights(&state.theta, &state.drin, &state.r, &model, &views, cfg)
                        .map_err(|e| tag(e, "trial weights", &state))?;
                    observer(StepEvent::Trial, &state);
                    meta_step(&mut state, trial, &model, &views, cfg)?;
                    observer(StepEvent::Meta, &state);
                }
                Ok(terms)
            })();
            let terms = match outcome {
                Ok(t) => t,
                Err(error) => {
                    return Err(Aborted {
                        partial: Some(Box::new(Pretrained { model, state, log })),
                        error,
                    })
                }
            };
            sums[0] += terms.drin;
            sums[1] += terms.rr_invariance;
            sums[2] += terms.rr_decorrelation;
            sums[3] += terms.combined;
        }
        let nb = batches.len() as f64;
        let stats = state.r.stats();
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss_drin: sums[0] / nb,
            loss_rr_inv: sums[1] / nb,
            loss_rr_dec: sums[2] / nb,
            loss_combined: sums[3] / nb,
            r_min: stats.min,
            r_mean: stats.mean,
            r_max: stats.max,
            r_at_zero: stats.at_zero,
            r_at_one: stats.at_one,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        observer(StepEvent::EpochEnd, &state);
    }
    state.epoch = cfg.epochs;
    Ok(Pretrained { model, state, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new([2]);
        let mut p = [Tensor::vector(vec![1.0, -1.0])];
        adam.update(p.iter_mut(), &[Tensor::vector(vec![3.0, -0.5])], 0.1).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] + 0.9).abs() < 1e-7);
        assert!(adam.update(p.iter_mut(), &[Tensor::vector(vec![1.0])], 0.1).is_err());
    }

    #[test]
    fn deterministic_json_drops_timing() {
        let mut r = EpochRecord {
            epoch: 1,
            loss_drin: 1.0,
            loss_rr_inv: 0.0,
            loss_rr_dec: 0.0,
            loss_combined: 10.0,
            r_min: 1.0,
            r_mean: 1.0,
            r_max: 1.0,
            r_at_zero: 0.0,
            r_at_one: 1.0,
            wall_seconds: 3.5,
        };
        let a = r.deterministic_json();
        r.wall_seconds = 9.0;
        assert_eq!(a, r.deterministic_json());
        assert!(metrics_jsonl(&[r]).contains("\"wall_seconds\":9.0"));
    }
}
