//! GIN message-passing encoder with per-layer sum readout.

use drgcl_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::params::{glorot, two_layer, zero_bias, ParamSet};

/// Tensors per GIN layer: `w1, b1, w2, b2`.
pub const PARAMS_PER_LAYER: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GinEncoder {
    input_dim: usize,
    hidden: Vec<usize>,
}

impl GinEncoder {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Invalid(format!(
                "encoder needs positive widths, got input {input_dim}, hidden {hidden:?}"
            )));
        }
        Ok(Self { input_dim, hidden })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Width of the concatenated readout.
    pub fn output_dim(&self) -> usize {
        self.hidden.iter().sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let mut width = self.input_dim;
        for (k, &h) in self.hidden.iter().enumerate() {
            p.push(format!("layer{k}.w1"), glorot(width, h, rng));
            p.push(format!("layer{k}.b1"), zero_bias(h));
            p.push(format!("layer{k}.w2"), glorot(h, h, rng));
            p.push(format!("layer{k}.b2"), zero_bias(h));
            width = h;
        }
        p
    }

    /// Parameter shapes in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut width = self.input_dim;
        for &h in &self.hidden {
            out.extend([vec![width, h], vec![1, h], vec![h, h], vec![1, h]]);
            width = h;
        }
        out
    }

    /// Checks that `params` has this encoder's layout.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let expected = self.shapes();
        if params.len() != expected.len()
            || params.tensors().iter().zip(&expected).any(|(a, b)| a.shape() != b.as_slice())
        {
            return Err(Error::Width(format!(
                "encoder parameters do not match input {} and hidden {:?}",
                self.input_dim, self.hidden
            )));
        }
        Ok(())
    }

    /// Graph embeddings `[num_graphs, output_dim]` for `batch`.
    pub fn encode(&self, batch: &Batch, params: &[Var], tape: &Tape) -> Result<Var> {
        if batch.features.cols() != self.input_dim {
            return Err(Error::Width(format!(
                "batch features have width {}, encoder expects {}",
                batch.features.cols(),
                self.input_dim
            )));
        }
        if params.len() != PARAMS_PER_LAYER * self.num_layers() {
            return Err(Error::Width(format!(
                "expected {} encoder tensors, got {}",
                PARAMS_PER_LAYER * self.num_layers(),
                params.len()
            )));
        }
        let n = batch.num_nodes();
        let graphs = batch.num_graphs();
        let mut h = tape.constant(batch.features.clone());
        let mut readouts = Vec::with_capacity(self.num_layers());
        for layer in params.chunks(PARAMS_PER_LAYER) {
            let neighbours = h
                .gather_rows(batch.src.clone())?
                .segment_sum(batch.dst.clone(), n)?;
            h = two_layer(&h.add(&neighbours)?, layer)?;
            readouts.push(h.segment_sum(batch.segments.clone(), graphs)?);
        }
        Ok(Var::concat(&readouts, 1)?)
    }

    /// Forward pass without gradient bookkeeping beyond a scratch tape.
    pub fn embed(&self, batch: &Batch, params: &ParamSet) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = params.to_constants(&tape);
        Ok((*self.encode(batch, &vars, &tape)?.value()).clone())
    }
}
