//! Named parameter tensors and their binary checkpoint format.
//!
//! A checkpoint is a UTF-8 header followed by the raw little-endian `f64`
//! payload of every tensor in header order:
//!
//! ```text
//! drgcl-params 1
//! tensors <count>
//! <name> <dim>[x<dim>]
//! ...
//! data
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use drgcl_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

const MAGIC: &str = "drgcl-params 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn to_params(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant leaf on `tape`.
    pub fn to_constants(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len()
            || values.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Width("replacement parameters differ in shape".into()));
        }
        self.tensors = values;
        Ok(())
    }

    /// Prefixes names and appends all entries of `other`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.names.iter().zip(&other.tensors) {
            self.push(format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Entries whose name starts with `prefix.`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if let Some(rest) = n.strip_prefix(&head) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\ntensors {}\n", self.len());
        for (n, t) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{n} {}\n", dims.join("x")));
        }
        header.push_str("data\n");
        let mut bytes = header.into_bytes();
        for t in &self.tensors {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("unrecognized magic line"));
        }
        let count: usize = next_line()?
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed tensor count"))?;
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let (name, dims) = line.rsplit_once(' ').ok_or_else(|| bad("malformed tensor line"))?;
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse().map_err(|_| bad("malformed dimension")))
                    .collect::<Result<_>>()?
            };
            specs.push((name.to_string(), shape));
        }
        if next_line()? != "data" {
            return Err(bad("missing data marker"));
        }
        let mut out = ParamSet::new();
        let mut payload = bytes[pos..].chunks_exact(8);
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            if data.len() != n {
                return Err(bad("truncated payload"));
            }
            out.push(name, Tensor::new(shape, data)?);
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Glorot-uniform `[fan_in, fan_out]` weight matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized above")
}

/// Zero bias row `[1, width]`.
pub fn zero_bias(width: usize) -> Tensor {
    Tensor::zeros(&[1, width])
}

/// `relu(x W1 + b1) W2 + b2` over parameter Vars `[w1, b1, w2, b2]`.
pub fn two_layer(x: &Var, p: &[Var]) -> Result<Var> {
    let hidden = x.matmul(&p[0])?.add(&p[1])?.relu()?;
    Ok(hidden.matmul(&p[2])?.add(&p[3])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamSet::new();
        p.push("a.w", glorot(3, 2, &mut substream(1, "t")));
        p.push("a.b", zero_bias(2));
        p.push("s", Tensor::scalar(-0.0));
        p.push("v", Tensor::vector(vec![f64::MIN_POSITIVE, 1e300]));
        let back = ParamSet::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        assert!(back.get("s").unwrap().data()[0].is_sign_negative());
        assert_eq!(back.strip_prefix("a").names(), &["w", "b"]);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::ones(&[2, 2]));
        let bytes = p.to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(ParamSet::from_bytes(&extra).is_err());
        assert!(ParamSet::from_bytes(b"nope\n").is_err());
    }
}
