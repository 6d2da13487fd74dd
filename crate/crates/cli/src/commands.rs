use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use drgcl_core::analysis::{dimension_sweep, redundancy_matrix};
use drgcl_core::config::{RawConfig, RunConfig};
use drgcl_core::eval::{extract_embeddings, extract_projections, linear_classify_cv, mean_std, CvReport, EmbeddingTable};
use drgcl_core::graph::{load_tu_dataset, Dataset};
use drgcl_core::objectives::{DrWeight, Model};
use drgcl_core::params::ParamSet;
use drgcl_core::rng::{stream, substream};
use drgcl_core::trainer::{metrics_jsonl, model_for, pretrain, Aborted, Pretrained, StepEvent, TrainState};
use serde_json::json;

use crate::manifest::{RunManifest, Status};

pub const DEFAULT_DATA_DIR: &str = "data";

/// Configuration sources shared by every subcommand, lowest precedence first:
/// the base (defaults or a run's recorded config), `--config`, `--set`, then
/// `--seed` and `--dataset`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut raw: RawConfig) -> Result<RawConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file = RawConfig::parse(&text).with_context(|| format!("in config {}", path.display()))?;
            raw.merge(&file);
        }
        for assignment in &self.set {
            raw.set(assignment).with_context(|| format!("in --set {assignment}"))?;
        }
        if let Some(seed) = self.seed {
            raw.set(&format!("seed={seed}"))?;
        }
        if let Some(name) = &self.dataset {
            raw.set(&format!("dataset={name}"))?;
        }
        Ok(raw)
    }
}

fn resolve(raw: &RawConfig) -> Result<RunConfig> {
    raw.resolve().context("invalid configuration")
}

pub fn load_dataset(data_dir: &Path, name: &str) -> Result<Dataset> {
    let dir = data_dir.join(name);
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    load_tu_dataset(&dir, name).with_context(|| format!("loading dataset {name} from {}", dir.display()))
}

/// Which saved parameters of a run to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Checkpoint {
    Init,
    Final,
}

impl Checkpoint {
    fn roles(self) -> (&'static str, &'static str) {
        match self {
            Self::Init => ("checkpoint_init", "r_init"),
            Self::Final => ("checkpoint", "r"),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Init => "init",
            Self::Final => "final",
        }
    }
}

fn save_state(state: &TrainState, dir: &Path, params: &str, r: &str, manifest: &mut RunManifest) -> Result<()> {
    let (p, rp) = (format!("{params}.bin"), format!("{r}.txt"));
    state.checkpoint().save(&dir.join(&p)).with_context(|| format!("writing {p}"))?;
    state.r.save(&dir.join(&rp)).with_context(|| format!("writing {rp}"))?;
    manifest.add(params, p);
    manifest.add(r, rp);
    Ok(())
}

fn write_metrics(log: &[drgcl_core::trainer::EpochRecord], dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(log)).context("writing metrics.jsonl")?;
    manifest.add("metrics", "metrics.jsonl");
    Ok(())
}

/// Pre-trains into `out` and records everything in its manifest. On abort the
/// partial state is flushed before the error is returned.
pub fn run_pretrain(ds: &Dataset, cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(Pretrained, RunManifest)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data_dir = fs::canonicalize(data_dir).unwrap_or_else(|_| data_dir.to_path_buf());
    let mut manifest = RunManifest::start("pretrain", cfg.to_text(), cfg.seed, &cfg.dataset, &data_dir);
    fs::write(out.join("config.cfg"), cfg.to_text()).context("writing config.cfg")?;
    manifest.add("config", "config.cfg");
    let model = model_for(ds, cfg)?;
    save_state(&TrainState::init(&model, cfg), out, "checkpoint_init", "r_init", &mut manifest)?;
    manifest.write(out)?;

    let epochs = cfg.epochs;
    let result = pretrain(ds, cfg, |event, state| {
        if event == StepEvent::EpochEnd {
            eprintln!("epoch {}/{epochs}", state.epoch + 1);
        }
    });
    match result {
        Ok(run) => {
            save_state(&run.state, out, "checkpoint", "r", &mut manifest)?;
            write_metrics(&run.log, out, &mut manifest)?;
            manifest.finish(Status::Complete, None);
            manifest.write(out)?;
            Ok((run, manifest))
        }
        Err(Aborted { partial, error }) => {
            if let Some(run) = partial {
                save_state(&run.state, out, "checkpoint_partial", "r_partial", &mut manifest)?;
                write_metrics(&run.log, out, &mut manifest)?;
            }
            manifest.finish(Status::Aborted, Some(error.to_string()));
            manifest.write(out)?;
            Err(anyhow!(error).context("training aborted; partial state saved"))
        }
    }
}

fn data_dir_or(o: &Overrides, fallback: &Path) -> PathBuf {
    o.data_dir.clone().unwrap_or_else(|| fallback.to_path_buf())
}

fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-seed{}", cfg.dataset, cfg.seed))
}

pub fn cmd_pretrain(o: &Overrides, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = resolve(&o.apply(RawConfig::default())?)?;
    let data_dir = data_dir_or(o, Path::new(DEFAULT_DATA_DIR));
    let ds = load_dataset(&data_dir, &cfg.dataset)?;
    let out = out.unwrap_or_else(|| default_run_dir(&cfg));
    let (run, _) = run_pretrain(&ds, &cfg, &data_dir, &out)?;
    if let Some(last) = run.log.last() {
        println!(
            "{}: {} epochs, final loss {:.4}, R mean {:.3}",
            out.display(),
            last.epoch,
            last.loss_combined,
            last.r_mean
        );
    }
    Ok(out)
}

/// A completed pre-training run reopened for evaluation or analysis.
pub struct OpenRun {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub model: Model,
    pub state: TrainState,
    pub checkpoint: Checkpoint,
}

impl OpenRun {
    pub fn open(dir: &Path, o: &Overrides, checkpoint: Checkpoint) -> Result<Self> {
        let manifest = RunManifest::read(dir)?;
        if manifest.status != Status::Complete {
            bail!("run in {} is {:?}, not complete", dir.display(), manifest.status);
        }
        let base = RawConfig::parse(&manifest.config).context("recorded config")?;
        let cfg = resolve(&o.apply(base)?)?;
        let data_dir = data_dir_or(o, &manifest.data_dir);
        let dataset = load_dataset(&data_dir, &cfg.dataset)?;
        let model = model_for(&dataset, &cfg)?;
        let (params, r) = checkpoint.roles();
        let params_path = manifest.artifact(dir, params)?;
        let r_path = manifest.artifact(dir, r)?;
        let params = ParamSet::load(&params_path).with_context(|| format!("reading {}", params_path.display()))?;
        let r = DrWeight::load(&r_path).with_context(|| format!("reading {}", r_path.display()))?;
        let state = TrainState::from_checkpoint(&model, &params, r).context("checkpoint does not fit the configured model")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg,
            dataset,
            model,
            state,
            checkpoint,
        })
    }

    fn id(&self) -> String {
        format!("{}#{}", self.dir.display(), self.checkpoint.label())
    }

    pub fn embeddings(&self, apply_r: bool) -> Result<EmbeddingTable> {
        let r = apply_r.then_some(&self.state.r);
        Ok(extract_embeddings(&self.dataset, &self.model.encoder, &self.state.theta, r, &self.id())?)
    }

    pub fn projections(&self, head: Head) -> Result<EmbeddingTable> {
        let (h, params) = match head {
            Head::Rr => (&self.model.rr_head, &self.state.rr),
            Head::Drin => (&self.model.drin_head, &self.state.drin),
            Head::Embedding => bail!("the embedding table is not a projection"),
        };
        Ok(extract_projections(&self.dataset, &self.model.encoder, &self.state.theta, h, params, &self.state.r)?)
    }
}

/// Where an analysis reads its table from.
pub enum Source {
    Run { dir: PathBuf, checkpoint: Checkpoint },
    Embeddings(PathBuf),
}

fn suffix(apply_r: bool) -> &'static str {
    if apply_r {
        ""
    } else {
        "_raw"
    }
}

fn fold_csv(report: &CvReport) -> String {
    let mut s = String::from("seed,fold,accuracy,c\n");
    for (i, (accs, cs)) in report.fold_accuracies.iter().zip(&report.selected_c).enumerate() {
        for (f, (a, c)) in accs.iter().zip(cs).enumerate() {
            let _ = writeln!(s, "{i},{f},{a:?},{c:?}");
        }
    }
    s
}

pub fn write_cv(report: &CvReport, out: &Path, stem: &str) -> Result<()> {
    fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(out.join(format!("{stem}_folds.csv")), fold_csv(report))?;
    Ok(())
}

pub fn cmd_eval(run: &Path, o: &Overrides, checkpoint: Checkpoint, apply_r: bool, out: Option<PathBuf>) -> Result<CvReport> {
    let run = OpenRun::open(run, o, checkpoint)?;
    let out = out.unwrap_or_else(|| run.dir.clone());
    fs::create_dir_all(&out)?;
    let table = run.embeddings(apply_r)?;
    let tag = format!("{}{}", if checkpoint == Checkpoint::Init { "_init" } else { "" }, suffix(apply_r));
    table.save_csv(&out.join(format!("embeddings{tag}.csv")))?;
    let report = linear_classify_cv(&table, &run.cfg.cv_config())?;
    write_cv(&report, &out, &format!("cv_report{tag}"))?;
    println!("accuracy {:.2} +- {:.2} ({} x {}-fold)", 100.0 * report.mean, 100.0 * report.std, run.cfg.cv_seeds, run.cfg.cv_folds);
    Ok(report)
}

fn source_table(source: &Source, o: &Overrides, apply_r: bool) -> Result<(EmbeddingTable, RunConfig, PathBuf)> {
    match source {
        Source::Run { dir, checkpoint } => {
            let run = OpenRun::open(dir, o, *checkpoint)?;
            Ok((run.embeddings(apply_r)?, run.cfg, dir.clone()))
        }
        Source::Embeddings(path) => {
            let table = EmbeddingTable::load_csv(path).with_context(|| format!("reading embeddings {}", path.display()))?;
            let cfg = resolve(&o.apply(RawConfig::default())?)?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((table, cfg, dir))
        }
    }
}

pub fn cmd_sweep(source: &Source, o: &Overrides, rates: &[f64], trials: usize, apply_r: bool, out: Option<PathBuf>) -> Result<()> {
    let (table, cfg, dir) = source_table(source, o, apply_r)?;
    let out = out.unwrap_or(dir);
    fs::create_dir_all(&out)?;
    let mut rng = substream(cfg.seed, stream::SWEEP);
    let result = dimension_sweep(&table, rates, trials, &cfg.cv_config(), &mut rng)?;
    fs::write(out.join("sweep.csv"), result.to_csv())?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    let trials: Vec<f64> = result.records.iter().filter(|r| r.trial > 0).map(|r| r.accuracy).collect();
    println!(
        "baseline {:.2}; {} trials, {} above and {} below",
        100.0 * result.baseline,
        trials.len(),
        trials.iter().filter(|&&a| a > result.baseline).count(),
        trials.iter().filter(|&&a| a < result.baseline).count()
    );
    Ok(())
}

/// Which representation the redundancy analysis correlates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Embedding,
    Rr,
    Drin,
}

impl Head {
    fn label(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::Rr => "rr",
            Self::Drin => "drin",
        }
    }
}

pub fn cmd_analyze(source: &Source, o: &Overrides, head: Head, apply_r: bool, out: Option<PathBuf>) -> Result<f64> {
    let (table, stem, dir) = match source {
        Source::Run { dir, checkpoint } => {
            let run = OpenRun::open(dir, o, *checkpoint)?;
            let table = match head {
                Head::Embedding => run.embeddings(apply_r)?,
                _ => run.projections(head)?,
            };
            // Projections always see R-weighted embeddings.
            let weighted = apply_r || head != Head::Embedding;
            let stem = format!("redundancy_{}_{}{}", head.label(), checkpoint.label(), suffix(weighted));
            (table, stem, dir.clone())
        }
        Source::Embeddings(path) => {
            if head != Head::Embedding {
                bail!("an embedding CSV has no projection heads; use --run");
            }
            let (table, _, dir) = source_table(source, o, apply_r)?;
            let stem = path
                .file_stem()
                .map(|s| format!("redundancy_{}", s.to_string_lossy()))
                .unwrap_or_else(|| "redundancy".into());
            (table, stem, dir)
        }
    };
    let out = out.unwrap_or(dir);
    fs::create_dir_all(&out)?;
    let report = redundancy_matrix(&table)?;
    report.write(&out.join(format!("{stem}.csv")), &out.join(format!("{stem}.pgm")))?;
    let summary = json!({ "dim": report.dim, "mean_abs_offdiag": report.mean_abs_offdiag });
    fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{stem}: mean |off-diagonal| {:.4} over {} dimensions", report.mean_abs_offdiag, report.dim);
    Ok(report.mean_abs_offdiag)
}

/// The ablation arms, each as overrides on top of the base configuration.
pub const ARMS: [(&str, &[&str]); 4] = [
    ("full", &[]),
    ("no_dr", &["enable_dr=false"]),
    ("no_rr", &["enable_rr=false"]),
    ("no_rr_dr", &["enable_dr=false", "enable_rr=false"]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: &'static str,
    pub seed: u64,
    pub mean: f64,
    pub std: f64,
}

pub fn ablation_table(results: &[ArmResult]) -> String {
    let mut s = String::from("| arm | mean acc (%) | std over seeds | per-seed |\n|---|---|---|---|\n");
    for (arm, _) in ARMS {
        let means: Vec<f64> = results.iter().filter(|r| r.arm == arm).map(|r| r.mean).collect();
        if means.is_empty() {
            continue;
        }
        let (m, sd) = mean_std(&means);
        let per: Vec<String> = means.iter().map(|x| format!("{:.2}", 100.0 * x)).collect();
        let _ = writeln!(s, "| {arm} | {:.2} | {:.2} | {} |", 100.0 * m, 100.0 * sd, per.join(", "));
    }
    s
}

/// Runs pretrain + eval for every arm and seed, sequentially, sharing seeds
/// across arms so the comparison is paired.
pub fn cmd_ablate(o: &Overrides, seeds: &[u64], out: Option<PathBuf>) -> Result<Vec<ArmResult>> {
    let base = o.apply(RawConfig::default())?;
    let base_cfg = resolve(&base)?;
    let data_dir = data_dir_or(o, Path::new(DEFAULT_DATA_DIR));
    let ds = load_dataset(&data_dir, &base_cfg.dataset)?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-ablation", base_cfg.dataset)));
    let seeds = if seeds.is_empty() { vec![base_cfg.seed] } else { seeds.to_vec() };
    let mut results = Vec::new();
    let mut csv = String::from("arm,seed,mean,std\n");
    for &seed in &seeds {
        for (arm, sets) in ARMS {
            let mut raw = base.clone();
            for s in sets {
                raw.set(s)?;
            }
            raw.set(&format!("seed={seed}"))?;
            let cfg = resolve(&raw).with_context(|| format!("arm {arm}"))?;
            let dir = out.join(arm).join(format!("seed{seed}"));
            eprintln!("arm {arm}, seed {seed}");
            let (run, _) = run_pretrain(&ds, &cfg, &data_dir, &dir)?;
            let table = extract_embeddings(&ds, &run.model.encoder, &run.state.theta, Some(&run.state.r), &dir.display().to_string())?;
            let report = linear_classify_cv(&table, &cfg.cv_config())?;
            write_cv(&report, &dir, "cv_report")?;
            let _ = writeln!(csv, "{arm},{seed},{:?},{:?}", report.mean, report.std);
            results.push(ArmResult {
                arm,
                seed,
                mean: report.mean,
                std: report.std,
            });
        }
    }
    fs::write(out.join("ablation.csv"), csv)?;
    let table = ablation_table(&results);
    fs::write(out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(results)
}
