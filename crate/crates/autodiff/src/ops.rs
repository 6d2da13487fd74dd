use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::tape::{Var, DOMAIN_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `num / (den + eps)`; `eps` is nonzero only for variance-like denominators.
    Div {
        num: usize,
        den: usize,
        eps: f64,
    },
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    Sum(usize),
    SumRows(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Power(usize, f64),
    Broadcast(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
    SegmentSum {
        src: usize,
        segments: Rc<[usize]>,
        count: usize,
    },
    GatherRows {
        src: usize,
        index: Rc<[usize]>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div { .. } => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Power(..) => "power",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::SegmentSum { .. } => "rowsum_by_segment",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Div { num, den, .. } => vec![*num, *den],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::Power(a, _)
            | Op::Broadcast(a, _)
            | Op::Reshape(a, _)
            | Op::Slice { src: a, .. }
            | Op::SegmentSum { src: a, .. }
            | Op::GatherRows { src: a, .. } => vec![*a],
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Single-value tensors broadcast anywhere; `[c]`/`[1, c]` rows broadcast to `[r, c]`.
pub(crate) fn can_broadcast(src: &[usize], dst: &[usize]) -> bool {
    if src == dst {
        return true;
    }
    if src.iter().all(|&d| d == 1) {
        return true;
    }
    if dst.len() == 2 {
        return match src {
            [c] => *c == dst[1],
            [1, c] => *c == dst[1],
            _ => false,
        };
    }
    false
}

/// Forward evaluation of a non-leaf op over its input values.
pub(crate) fn eval(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let same = |name: &'static str| -> Result<()> {
        if x[0].shape() != x[1].shape() {
            Err(mismatch(name, x[0].shape(), x[1].shape()))
        } else {
            Ok(())
        }
    };
    match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::Add(..) => {
            same("add")?;
            Ok(x[0].zip_map(x[1], |a, b| a + b))
        }
        Op::Sub(..) => {
            same("sub")?;
            Ok(x[0].zip_map(x[1], |a, b| a - b))
        }
        Op::Mul(..) => {
            same("mul")?;
            Ok(x[0].zip_map(x[1], |a, b| a * b))
        }
        Op::Div { eps, .. } => {
            same("div")?;
            if x[1].data().iter().any(|&d| d + eps == 0.0) {
                return Err(AutodiffError::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            Ok(x[0].zip_map(x[1], |a, b| a / (b + eps)))
        }
        Op::Scale(_, c) => Ok(x[0].map(|v| v * c)),
        Op::MatMul(..) => x[0].matmul(x[1]),
        Op::Transpose(_) => x[0].transpose(),
        Op::Concat { axis, .. } => concat(x, *axis),
        Op::Slice {
            axis, start, end, ..
        } => slice(x[0], *axis, *start, *end),
        Op::Sum(_) => Ok(Tensor::scalar(x[0].sum())),
        Op::SumRows(_) => {
            let t = x[0];
            if t.rank() != 2 {
                return Err(mismatch("sum_rows", t.shape(), &[]));
            }
            let (r, c) = (t.rows(), t.cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            Tensor::matrix(1, c, out)
        }
        Op::Relu(_) => Ok(x[0].map(|v| v.max(0.0))),
        Op::Exp(_) => Ok(x[0].map(f64::exp)),
        Op::Log(_) => {
            if x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(AutodiffError::Domain {
                    op: "log",
                    detail: "non-positive argument".into(),
                });
            }
            Ok(x[0].map(f64::ln))
        }
        Op::Sqrt(_) => {
            if x[0].data().iter().any(|&v| v < 0.0) {
                return Err(AutodiffError::Domain {
                    op: "sqrt",
                    detail: "negative argument".into(),
                });
            }
            Ok(x[0].map(f64::sqrt))
        }
        Op::ClampMin(_, lo) => Ok(x[0].map(|v| v.max(*lo))),
        Op::Power(_, p) => Ok(x[0].map(|v| v.powf(*p))),
        Op::Broadcast(_, shape) => broadcast(x[0], shape),
        Op::Reshape(_, shape) => x[0].reshape(shape),
        Op::SegmentSum {
            segments, count, ..
        } => segment_sum(x[0], segments, *count),
        Op::GatherRows { index, .. } => gather_rows(x[0], index),
    }
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if first.rank() != 2 || axis > 1 {
        return Err(mismatch("concat", first.shape(), &[axis]));
    }
    for p in parts {
        let ok = p.rank() == 2
            && match axis {
                0 => p.cols() == first.cols(),
                _ => p.rows() == first.rows(),
            };
        if !ok {
            return Err(mismatch("concat", first.shape(), p.shape()));
        }
    }
    if axis == 0 {
        let rows = parts.iter().map(|p| p.rows()).sum();
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::matrix(rows, first.cols(), data)
    } else {
        let rows = first.rows();
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(rows, cols, data)
    }
}

fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if t.rank() != 2 || axis > 1 {
        return Err(mismatch("slice", t.shape(), &[axis]));
    }
    let bound = if axis == 0 { t.rows() } else { t.cols() };
    if start > end || end > bound {
        return Err(AutodiffError::IndexOutOfRange {
            op: "slice",
            index: end,
            bound,
        });
    }
    if axis == 0 {
        let c = t.cols();
        Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())
    } else {
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        Tensor::matrix(t.rows(), end - start, data)
    }
}

fn broadcast(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if !can_broadcast(t.shape(), shape) {
        return Err(mismatch("broadcast", t.shape(), shape));
    }
    if t.numel() == 1 {
        return Ok(Tensor::full(shape, t.data()[0]));
    }
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let rows = shape[0];
    let mut data = Vec::with_capacity(rows * t.numel());
    for _ in 0..rows {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape.to_vec(), data)
}

fn segment_sum(t: &Tensor, segments: &[usize], count: usize) -> Result<Tensor> {
    if t.rank() != 2 || t.rows() != segments.len() {
        return Err(mismatch("rowsum_by_segment", t.shape(), &[segments.len()]));
    }
    let c = t.cols();
    let mut out = vec![0.0; count * c];
    for (i, &s) in segments.iter().enumerate() {
        if s >= count {
            return Err(AutodiffError::IndexOutOfRange {
                op: "rowsum_by_segment",
                index: s,
                bound: count,
            });
        }
        for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    Tensor::matrix(count, c, out)
}

fn gather_rows(t: &Tensor, index: &[usize]) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(mismatch("gather_rows", t.shape(), &[]));
    }
    let mut data = Vec::with_capacity(index.len() * t.cols());
    for &i in index {
        if i >= t.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                bound: t.rows(),
            });
        }
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(index.len(), t.cols(), data)
}

/// Vector-Jacobian products of `op` (whose result is `out`) for upstream
/// gradient `g`, built from recorded ops. Entries are `None` where not wanted.
pub(crate) fn vjp(op: &Op, out: &Var, g: &Var, wanted: &[bool]) -> Result<Vec<Option<Var>>> {
    let tape = out.tape();
    let input = |i: usize| Var {
        tape: tape.clone(),
        id: op.inputs()[i],
    };
    let mut res: Vec<Option<Var>> = vec![None; wanted.len()];
    let mut set = |i: usize, f: &mut dyn FnMut() -> Result<Var>| -> Result<()> {
        if wanted[i] {
            res[i] = Some(f()?);
        }
        Ok(())
    };
    match op {
        Op::Leaf => {}
        Op::Add(..) => {
            set(0, &mut || Ok(g.clone()))?;
            set(1, &mut || Ok(g.clone()))?;
        }
        Op::Sub(..) => {
            set(0, &mut || Ok(g.clone()))?;
            set(1, &mut || g.scale(-1.0))?;
        }
        Op::Mul(..) => {
            set(0, &mut || g.mul(&input(1)))?;
            set(1, &mut || g.mul(&input(0)))?;
        }
        Op::Div { eps, .. } => {
            let eps = *eps;
            set(0, &mut || g.div_eps(&input(1), eps))?;
            set(1, &mut || g.mul(out)?.div_eps(&input(1), eps)?.scale(-1.0))?;
        }
        Op::Scale(_, c) => set(0, &mut || g.scale(*c))?,
        Op::MatMul(..) => {
            set(0, &mut || g.matmul(&input(1).t()?))?;
            set(1, &mut || input(0).t()?.matmul(g))?;
        }
        Op::Transpose(_) => set(0, &mut || g.t())?,
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for (i, &p) in parts.iter().enumerate() {
                let shape = tape.value(p).shape().to_vec();
                let width = shape[*axis];
                let (start, end) = (offset, offset + width);
                set(i, &mut || g.slice(*axis, start, end))?;
                offset = end;
            }
        }
        Op::Slice {
            src,
            axis,
            start,
            end,
        } => {
            let shape = tape.value(*src).shape().to_vec();
            let axis = *axis;
            set(0, &mut || {
                let mut pieces = Vec::with_capacity(3);
                let zeros = |n: usize| {
                    let mut s = shape.clone();
                    s[axis] = n;
                    tape.constant(Tensor::zeros(&s))
                };
                if *start > 0 {
                    pieces.push(zeros(*start));
                }
                pieces.push(g.clone());
                if *end < shape[axis] {
                    pieces.push(zeros(shape[axis] - *end));
                }
                if pieces.len() == 1 {
                    Ok(g.clone())
                } else {
                    Var::concat(&pieces, axis)
                }
            })?;
        }
        Op::Sum(src) => {
            let shape = tape.value(*src).shape().to_vec();
            set(0, &mut || g.broadcast_to(&shape))?;
        }
        Op::SumRows(src) => {
            let shape = tape.value(*src).shape().to_vec();
            set(0, &mut || g.broadcast_to(&shape))?;
        }
        Op::Relu(src) => {
            let mask = tape.value(*src).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            set(0, &mut || g.mul(&tape.constant(mask.clone())))?;
        }
        Op::Exp(_) => set(0, &mut || g.mul(out))?,
        Op::Log(_) => set(0, &mut || g.div_eps(&input(0), 0.0))?,
        Op::Sqrt(_) => set(0, &mut || g.scale(0.5)?.div_eps(out, 0.0))?,
        Op::ClampMin(src, lo) => {
            let mask = tape
                .value(*src)
                .map(|v| if v > *lo { 1.0 } else { 0.0 });
            set(0, &mut || g.mul(&tape.constant(mask.clone())))?;
        }
        Op::Power(_, p) => {
            let p = *p;
            set(0, &mut || g.mul(&input(0).powf(p - 1.0)?.scale(p)?))?;
        }
        Op::Broadcast(src, _) => {
            let shape = tape.value(*src).shape().to_vec();
            set(0, &mut || {
                let gs = g.shape();
                if shape.iter().product::<usize>() == 1 {
                    g.sum()?.reshape(&shape)
                } else if shape == gs {
                    Ok(g.clone())
                } else {
                    g.sum_rows()?.reshape(&shape)
                }
            })?;
        }
        Op::Reshape(src, _) => {
            let shape = tape.value(*src).shape().to_vec();
            set(0, &mut || g.reshape(&shape))?;
        }
        Op::SegmentSum { segments, .. } => {
            set(0, &mut || g.gather_rows(segments.clone()))?;
        }
        Op::GatherRows { src, index } => {
            let rows = tape.value(*src).rows();
            set(0, &mut || g.segment_sum(index.clone(), rows))?;
        }
    }
    Ok(res)
}

impl Var {
    fn unary(&self, op: Op) -> Result<Var> {
        self.tape.push(op)
    }

    fn binary(&self, other: &Var, name: &'static str, make: impl Fn(usize, usize) -> Op) -> Result<Var> {
        if !self.tape.same_as(&other.tape) {
            return Err(AutodiffError::ForeignVar);
        }
        let (a, b) = (self.shape(), other.shape());
        let (lhs, rhs) = if a == b {
            (self.clone(), other.clone())
        } else if can_broadcast(&b, &a) {
            (self.clone(), other.broadcast_to(&a)?)
        } else if can_broadcast(&a, &b) {
            (self.broadcast_to(&b)?, other.clone())
        } else {
            return Err(mismatch(name, &a, &b));
        };
        self.tape.push(make(lhs.id, rhs.id))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", Op::Mul)
    }

    /// Plain division; exact zero denominators are a domain error.
    pub fn div(&self, other: &Var) -> Result<Var> {
        self.div_eps(other, 0.0)
    }

    /// Division with `eps` added to the denominator, for variance-like
    /// quantities that may vanish.
    pub fn div_eps(&self, other: &Var, eps: f64) -> Result<Var> {
        self.binary(other, "div", |num, den| Op::Div { num, den, eps })
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.tape.same_as(&other.tape) {
            return Err(AutodiffError::ForeignVar);
        }
        self.tape.push(Op::MatMul(self.id, other.id))
    }

    /// Matrix transpose.
    pub fn t(&self) -> Result<Var> {
        self.unary(Op::Transpose(self.id))
    }

    /// Concatenation of matrices along `axis` (0 stacks rows, 1 appends columns).
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        if parts.iter().any(|p| !p.tape.same_as(&first.tape)) {
            return Err(AutodiffError::ForeignVar);
        }
        first.tape.push(Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        })
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.unary(Op::Slice {
            src: self.id,
            axis,
            start,
            end,
        })
    }

    pub fn sum(&self) -> Result<Var> {
        self.unary(Op::Sum(self.id))
    }

    /// Column sums of a matrix as a `[1, cols]` row.
    pub fn sum_rows(&self) -> Result<Var> {
        self.unary(Op::SumRows(self.id))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Column means of a matrix as a `[1, cols]` row.
    pub fn mean_rows(&self) -> Result<Var> {
        let n = self.value().rows() as f64;
        self.sum_rows()?.scale(1.0 / n)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu(self.id))
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp(self.id))
    }

    /// Natural log with the argument clamped to at least [`DOMAIN_FLOOR`].
    pub fn log(&self) -> Result<Var> {
        let x = self.clamp_min(DOMAIN_FLOOR)?;
        x.unary(Op::Log(x.id))
    }

    /// Square root with the argument clamped to at least [`DOMAIN_FLOOR`].
    pub fn sqrt(&self) -> Result<Var> {
        let x = self.clamp_min(DOMAIN_FLOOR)?;
        x.unary(Op::Sqrt(x.id))
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Var> {
        self.unary(Op::ClampMin(self.id, lo))
    }

    pub fn powf(&self, p: f64) -> Result<Var> {
        self.unary(Op::Power(self.id, p))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        if !can_broadcast(&self.shape(), shape) {
            return Err(mismatch("broadcast", &self.shape(), shape));
        }
        self.unary(Op::Broadcast(self.id, shape.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value().numel() {
            return Err(mismatch("reshape", &self.shape(), shape));
        }
        self.unary(Op::Reshape(self.id, shape.to_vec()))
    }

    /// Sums rows that share a segment id; row `i` goes to output row `segments[i]`.
    pub fn segment_sum(&self, segments: Rc<[usize]>, count: usize) -> Result<Var> {
        self.unary(Op::SegmentSum {
            src: self.id,
            segments,
            count,
        })
    }

    /// Output row `k` is input row `index[k]`.
    pub fn gather_rows(&self, index: Rc<[usize]>) -> Result<Var> {
        self.unary(Op::GatherRows {
            src: self.id,
            index,
        })
    }
}
