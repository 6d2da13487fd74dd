//! Embedding extraction, a linear hinge-loss classifier and stratified
//! k-fold cross-validation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use drgcl_autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Batch, Dataset};
use crate::objectives::{apply_dr, DrWeight, ProjectionHead};
use crate::encoder::GinEncoder;
use crate::params::ParamSet;
use crate::rng::{indexed_seed, stream, Rng};

/// Graphs per forward pass during extraction.
const EXTRACT_CHUNK: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub dataset: String,
    pub r_applied: bool,
}

/// One embedding row per graph, with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub data: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl EmbeddingTable {
    pub fn new(data: Tensor, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if data.rank() != 2 || data.rows() != labels.len() {
            return Err(Error::Width(format!(
                "{} labels for embedding matrix {:?}",
                labels.len(),
                data.shape()
            )));
        }
        Ok(Self {
            data,
            labels,
            provenance,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Copy with every column outside `keep` set to zero.
    pub fn masked(&self, keep: &[usize]) -> Self {
        let d = self.dim();
        let mut mask = vec![false; d];
        for &k in keep {
            mask[k] = true;
        }
        let mut data = self.data.clone();
        for row in data.data_mut().chunks_mut(d) {
            for (x, &m) in row.iter_mut().zip(&mask) {
                if !m {
                    *x = 0.0;
                }
            }
        }
        Self {
            data,
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for k in 0..self.dim() {
            let _ = write!(s, ",dim_{k}");
        }
        s.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            let _ = write!(s, "{label}");
            for x in self.data.row(i) {
                let _ = write!(s, ",{x:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Invalid(format!("embedding csv line {line}: {m}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"label")
            || cols[1..].iter().enumerate().any(|(k, c)| *c != format!("dim_{k}"))
        {
            return Err(bad(1, "header must be `label,dim_0,...`"));
        }
        let d = cols.len() - 1;
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 1 {
                return Err(bad(i + 1, &format!("expected {} fields, found {}", d + 1, fields.len())));
            }
            labels.push(fields[0].parse().map_err(|_| bad(i + 1, "label is not a class index"))?);
            for f in &fields[1..] {
                let x: f64 = f.parse().map_err(|_| bad(i + 1, &format!("`{f}` is not a number")))?;
                if !x.is_finite() {
                    return Err(bad(i + 1, "non-finite value"));
                }
                data.push(x);
            }
        }
        let rows = labels.len();
        Self::new(Tensor::matrix(rows, d, data)?, labels, Provenance::default())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

fn chunks(dataset: &Dataset) -> impl Iterator<Item = Result<Batch>> + '_ {
    dataset
        .graphs
        .chunks(EXTRACT_CHUNK)
        .map(|c| Batch::from_graphs(c).map_err(Error::from))
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let cols = parts.first().map_or(0, Tensor::cols);
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// Embeddings of the unaugmented graphs, optionally multiplied by `r`.
pub fn extract_embeddings(
    dataset: &Dataset,
    encoder: &GinEncoder,
    theta: &ParamSet,
    r: Option<&DrWeight>,
    checkpoint: &str,
) -> Result<EmbeddingTable> {
    encoder.check(theta)?;
    if dataset.feature_dim != encoder.input_dim() {
        return Err(Error::Width(format!(
            "dataset features have width {}, encoder expects {}",
            dataset.feature_dim,
            encoder.input_dim()
        )));
    }
    if let Some(r) = r {
        if r.dim() != encoder.output_dim() {
            return Err(Error::Width(format!(
                "rationale weight width {} vs embedding width {}",
                r.dim(),
                encoder.output_dim()
            )));
        }
    }
    let mut parts = Vec::new();
    for batch in chunks(dataset) {
        let tape = Tape::new();
        let vars = theta.to_constants(&tape);
        let mut h = encoder.encode(&batch?, &vars, &tape)?;
        if let Some(r) = r {
            h = apply_dr(&h, &tape.constant(r.row()))?;
        }
        parts.push((*h.value()).clone());
    }
    EmbeddingTable::new(
        stack(parts)?,
        dataset.labels(),
        Provenance {
            checkpoint: checkpoint.to_string(),
            dataset: dataset.name.clone(),
            r_applied: r.is_some(),
        },
    )
}

/// Outputs of a projection head applied to rationale-weighted embeddings.
pub fn extract_projections(
    dataset: &Dataset,
    encoder: &GinEncoder,
    theta: &ParamSet,
    head: &ProjectionHead,
    head_params: &ParamSet,
    r: &DrWeight,
) -> Result<EmbeddingTable> {
    head.check(head_params)?;
    let h = extract_embeddings(dataset, encoder, theta, Some(r), "")?;
    let tape = Tape::new();
    let vars = head_params.to_constants(&tape);
    let z = head.project(&tape.constant(h.data.clone()), &vars)?;
    EmbeddingTable::new((*z.value()).clone(), h.labels, h.provenance)
}

/// Stopping rule of the dual coordinate-descent solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_passes: usize,
    /// Bound on the spread of projected gradients at convergence.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_passes: 10_000,
            tol: 1e-4,
        }
    }
}

/// Minimizes `½‖w‖² + C Σ max(0, 1 − yᵢ w·xᵢ)` by coordinate descent on the dual.
/// Rows of `x` should already carry a constant bias feature.
pub fn train_hinge(x: &[Vec<f64>], y: &[f64], c: f64, solver: SolverConfig, rng: &mut Rng) -> Vec<f64> {
    let mut alpha = vec![0.0; x.len()];
    train_hinge_from(x, y, c, solver, rng, &mut alpha)
}

/// [`train_hinge`] started from the dual point `alpha` (clipped to `[0, C]`),
/// which is overwritten with the final dual solution.
pub fn train_hinge_from(
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    solver: SolverConfig,
    rng: &mut Rng,
    alpha: &mut [f64],
) -> Vec<f64> {
    let d = x.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    for ((a, xi), yi) in alpha.iter_mut().zip(x).zip(y) {
        *a = a.clamp(0.0, c);
        for (wk, xk) in w.iter_mut().zip(xi) {
            *wk += *a * yi * xk;
        }
    }
    let q: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..solver.max_passes {
        order.shuffle(rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            if q[i] == 0.0 {
                continue;
            }
            let g = y[i] * dot(&w, &x[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y[i];
                for (wk, xk) in w.iter_mut().zip(&x[i]) {
                    *wk += delta * xk;
                }
            }
        }
        if pg_max - pg_min <= solver.tol {
            break;
        }
    }
    w
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row divided by `scale`, with a trailing constant bias feature.
fn augmented(x: &[f64], scale: f64) -> Vec<f64> {
    x.iter().map(|v| v / scale).chain(std::iter::once(1.0)).collect()
}

/// Linear classifier: one hinge-loss separator per class (a single one for
/// two classes), scored by the largest margin.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// Mean training-row norm. One scalar for all columns, so relative
    /// column magnitudes (and thus rationale weighting) are preserved.
    scale: f64,
    classes: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl LinearClassifier {
    pub fn fit(table: &EmbeddingTable, rows: &[usize], c: f64, solver: SolverConfig, rng: &mut Rng) -> Self {
        Self::fit_path(table, rows, &[c], solver, rng).remove(0)
    }

    /// One classifier per entry of `cs`. Values are visited in ascending
    /// order, each solve starting from the previous dual solution.
    pub fn fit_path(table: &EmbeddingTable, rows: &[usize], cs: &[f64], solver: SolverConfig, rng: &mut Rng) -> Vec<Self> {
        let norm = |i: usize| table.data.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean_norm = rows.iter().map(|&i| norm(i)).sum::<f64>() / rows.len().max(1) as f64;
        let scale = if mean_norm > 0.0 { mean_norm } else { 1.0 };
        let x: Vec<Vec<f64>> = rows.iter().map(|&i| augmented(table.data.row(i), scale)).collect();
        let mut classes: Vec<usize> = rows.iter().map(|&i| table.labels[i]).collect();
        classes.sort_unstable();
        classes.dedup();
        let targets: Vec<usize> = match classes.len() {
            0 | 1 => Vec::new(),
            2 => vec![classes[1]],
            _ => classes.clone(),
        };
        let mut order: Vec<usize> = (0..cs.len()).collect();
        order.sort_by(|&a, &b| cs[a].total_cmp(&cs[b]));
        let mut weights = vec![Vec::with_capacity(targets.len()); cs.len()];
        for &k in &targets {
            let y: Vec<f64> = rows
                .iter()
                .map(|&i| if table.labels[i] == k { 1.0 } else { -1.0 })
                .collect();
            let mut alpha = vec![0.0; rows.len()];
            for &j in &order {
                weights[j].push(train_hinge_from(&x, &y, cs[j], solver, rng, &mut alpha));
            }
        }
        weights
            .into_iter()
            .map(|weights| Self {
                scale,
                classes: classes.clone(),
                weights,
            })
            .collect()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        match self.classes.len() {
            0 => usize::MAX,
            1 => self.classes[0],
            2 => {
                let s = dot(&self.weights[0], &augmented(x, self.scale));
                self.classes[usize::from(s > 0.0)]
            }
            _ => {
                let z = augmented(x, self.scale);
                let mut best = (f64::NEG_INFINITY, self.classes[0]);
                for (w, &k) in self.weights.iter().zip(&self.classes) {
                    let s = dot(w, &z);
                    if s > best.0 {
                        best = (s, k);
                    }
                }
                best.1
            }
        }
    }

    pub fn accuracy(&self, table: &EmbeddingTable, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hits = rows
            .iter()
            .filter(|&&i| self.predict(table.data.row(i)) == table.labels[i])
            .count();
        hits as f64 / rows.len() as f64
    }
}

/// Fold id per row: each class is shuffled and dealt round-robin, continuing
/// across classes, so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], folds: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if folds < 2 || labels.len() < folds {
        return Err(Error::Invalid(format!(
            "cannot split {} rows into {folds} non-empty folds",
            labels.len()
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut assignment = vec![0; labels.len()];
    let mut t = 0;
    for members in &mut by_class {
        members.shuffle(rng);
        for &i in members.iter() {
            assignment[i] = t % folds;
            t += 1;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seeds: usize,
    pub inner_folds: usize,
    pub c_grid: Vec<f64>,
    pub base_seed: u64,
    pub solver: SolverConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            seeds: 5,
            inner_folds: 3,
            c_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0],
            base_seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `[seed][fold]` outer-fold accuracies.
    pub fold_accuracies: Vec<Vec<f64>>,
    /// `[seed][fold]` regularization constant picked by the inner search.
    pub selected_c: Vec<Vec<f64>>,
    pub seed_means: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fold_seeds: Vec<u64>,
    /// `[seed][row]` fold id of every row.
    pub fold_assignments: Vec<Vec<usize>>,
}

fn fit_score(table: &EmbeddingTable, train: &[usize], test: &[usize], c: f64, solver: SolverConfig, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    LinearClassifier::fit(table, train, c, solver, &mut rng).accuracy(table, test)
}

fn split(assignment: &[usize], rows: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    rows.iter().zip(assignment).fold((Vec::new(), Vec::new()), |(mut tr, mut te), (&i, &f)| {
        if f == fold {
            te.push(i);
        } else {
            tr.push(i);
        }
        (tr, te)
    })
}

/// Picks `C` by inner cross-validation on `train`; ties keep the smaller value.
fn select_c(table: &EmbeddingTable, train: &[usize], cfg: &CvConfig, seed: u64) -> Result<f64> {
    let labels: Vec<usize> = train.iter().map(|&i| table.labels[i]).collect();
    let inner = cfg.inner_folds.min(train.len());
    if inner < 2 {
        return Ok(cfg.c_grid[0]);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let assignment = stratified_folds(&labels, inner, &mut rng)?;
    let solver_seed: u64 = rng.gen();
    let mut totals = vec![0.0; cfg.c_grid.len()];
    for f in 0..inner {
        let (tr, te) = split(&assignment, train, f);
        let mut rng = Rng::seed_from_u64(solver_seed ^ f as u64);
        let path = LinearClassifier::fit_path(table, &tr, &cfg.c_grid, cfg.solver, &mut rng);
        for (t, clf) in totals.iter_mut().zip(&path) {
            *t += clf.accuracy(table, &te);
        }
    }
    let mut best = (f64::NEG_INFINITY, cfg.c_grid[0]);
    for (&t, &c) in totals.iter().zip(&cfg.c_grid) {
        let score = t / inner as f64;
        if score > best.0 || (score == best.0 && c < best.1) {
            best = (score, c);
        }
    }
    Ok(best.1)
}

/// Repeated stratified k-fold evaluation of a linear classifier.
pub fn linear_classify_cv(table: &EmbeddingTable, cfg: &CvConfig) -> Result<CvReport> {
    if cfg.seeds == 0 || cfg.c_grid.is_empty() {
        return Err(Error::Invalid("need at least one seed and one C value".into()));
    }
    let rows: Vec<usize> = (0..table.rows()).collect();
    let mut report = CvReport {
        fold_accuracies: Vec::new(),
        selected_c: Vec::new(),
        seed_means: Vec::new(),
        mean: 0.0,
        std: 0.0,
        fold_seeds: Vec::new(),
        fold_assignments: Vec::new(),
    };
    for s in 0..cfg.seeds {
        let fold_seed = indexed_seed(cfg.base_seed, stream::CV_FOLDS, s as u64);
        let mut rng = Rng::seed_from_u64(fold_seed);
        let assignment = stratified_folds(&table.labels, cfg.folds, &mut rng)?;
        let mut accs = Vec::with_capacity(cfg.folds);
        let mut cs = Vec::with_capacity(cfg.folds);
        for f in 0..cfg.folds {
            let (train, test) = split(&assignment, &rows, f);
            let inner_seed: u64 = rng.gen();
            let c = select_c(table, &train, cfg, inner_seed)?;
            accs.push(fit_score(table, &train, &test, c, cfg.solver, inner_seed.rotate_left(17)));
            cs.push(c);
        }
        report.seed_means.push(accs.iter().sum::<f64>() / accs.len() as f64);
        report.fold_accuracies.push(accs);
        report.selected_c.push(cs);
        report.fold_seeds.push(fold_seed);
        report.fold_assignments.push(assignment);
    }
    let (mean, std) = mean_std(&report.seed_means);
    report.mean = mean;
    report.std = std;
    Ok(report)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
