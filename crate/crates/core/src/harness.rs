//! File-level workflows behind the command-line tool: run configuration,
//! training with metrics and checkpoint files, evaluation records, matrix
//! export and the diagnostic suites.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Method, TrainConfig};
use crate::curvature::{mc_expand_capped, CurvatureBlock, EXPAND_CAP};
use crate::diag::{run_suite, Suite, SuiteReport, SuiteSize};
use crate::error::{Error, Result};
use crate::format::{fmt_f64, to_json, to_json_line};
use crate::inner::{InnerRule, MetaGradMode};
use crate::tensor::Matrix;
use crate::trainer::{evaluate, MetricsRow, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const EVAL_RECORDS: &str = "eval.jsonl";
pub const METRICS_HEADER: &str = "iteration,train_loss,val_loss,val_ci,wall_ms,method,seed";

/// Process exit status for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::UnsupportedMode(_) | Error::Schema(_) | Error::Json(_) => 2,
        Error::SizeLimit { .. } | Error::NumericFailure(_) | Error::Io { .. } => 1,
    }
}

/// A run configuration as written by hand. Only `method` is required.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub method: Option<Method>,
    pub k_shot: Option<usize>,
    pub query_points: Option<usize>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub meta_batch: Option<usize>,
    pub iterations: Option<u64>,
    pub inner_steps: Option<usize>,
    pub meta_grad_mode: Option<MetaGradMode>,
    pub eval_every: Option<u64>,
    pub eval_tasks: Option<usize>,
    pub eval_points: Option<usize>,
    pub seed: Option<u64>,
    pub per_step_rules: Option<bool>,
    pub deterministic: Option<bool>,
    pub sizes: Option<Vec<usize>>,
    pub out_dir: Option<PathBuf>,
}

/// A configuration with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    /// Applies defaults. `out_override` takes precedence over `out_dir`.
    pub fn resolve(&self, out_override: Option<&Path>) -> Result<ResolvedConfig> {
        let method = self
            .method
            .ok_or_else(|| Error::InvalidArgument("config: missing required field `method`".into()))?;
        let k_shot = self.k_shot.unwrap_or(5);
        let mut c = TrainConfig::new(method, k_shot);
        c.query_points = self.query_points.unwrap_or(k_shot);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        take!(
            inner_lr,
            outer_lr,
            meta_batch,
            iterations,
            inner_steps,
            meta_grad_mode,
            eval_every,
            eval_tasks,
            eval_points,
            seed,
            per_step_rules,
            deterministic,
            sizes
        );
        c.validate()?;
        let out_dir = match (out_override, &self.out_dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => p.clone(),
            (None, None) => PathBuf::from(format!("runs/{}_{}shot_seed{}", method.name(), k_shot, c.seed)),
        };
        Ok(ResolvedConfig { train: c, out_dir })
    }
}

impl ResolvedConfig {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }
}

pub fn metrics_line(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.iteration,
        fmt_f64(row.train_loss),
        fmt_f64(row.val_loss),
        fmt_f64(row.val_ci),
        row.wall_ms,
        row.method,
        row.seed
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Metrics rows kept when resuming: the header and every row at or before
/// `iteration`.
fn metrics_prefix(path: &Path, iteration: u64) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Schema(format!("{}: unexpected header {line:?}", path.display())));
            }
        } else {
            let it: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Schema(format!("{}: bad row {line:?}", path.display())))?;
            if it > iteration {
                break;
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub iterations: u64,
    pub best: Option<(u64, f64)>,
    pub rows: usize,
}

/// Runs (or resumes) training, writing `resolved_config.json`,
/// `metrics.csv`, `best.ckpt.json` and `last.ckpt.json` into the output
/// directory. On failure the last good state is left on disk.
pub fn run_training(
    config: &ResolvedConfig,
    resume: bool,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainSummary> {
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let last_path = dir.join(LAST_CHECKPOINT);
    let best_path = dir.join(BEST_CHECKPOINT);
    let metrics_path = dir.join(METRICS_FILE);

    let mut trainer = if resume && last_path.exists() {
        let last = Checkpoint::load(&last_path)?;
        if last.config != config.train {
            return Err(Error::InvalidArgument(format!(
                "{} was written with a different configuration",
                last_path.display()
            )));
        }
        let best = if best_path.exists() {
            Some(Checkpoint::load(&best_path)?)
        } else {
            None
        };
        let kept = metrics_prefix(&metrics_path, last.iteration)?;
        write_file(&metrics_path, &kept)?;
        Trainer::resume(last, best)?
    } else {
        write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
        Trainer::new(config.train.clone())?
    };
    write_file(&dir.join(RESOLVED_CONFIG), &config.to_json()?)?;

    let file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut rows = 0;
    let result = trainer.run_until(u64::MAX, |row, t| {
        writeln!(metrics, "{}", metrics_line(row))
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(best) = t.best_checkpoint().filter(|b| b.iteration == row.iteration) {
            best.save(&best_path)?;
        }
        t.checkpoint().save(&last_path)?;
        rows += 1;
        progress(row);
        Ok(())
    });
    if let Err(e) = result {
        // `step` leaves the trainer at its last good state.
        if trainer.theta().is_finite() {
            trainer.checkpoint().save(&last_path)?;
        }
        return Err(e);
    }
    if !best_path.exists() {
        trainer.checkpoint().save(&best_path)?;
    }
    let ckpt = trainer.checkpoint();
    Ok(TrainSummary {
        out_dir: dir.clone(),
        iterations: trainer.iteration(),
        best: ckpt.best.map(|b| (b.iteration, b.val_loss)),
        rows,
    })
}

/// One line of `eval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    pub method: Method,
    pub iteration: u64,
    pub k_shot: usize,
    pub inner_steps: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub mean: f64,
    pub ci95: f64,
}

impl EvalRecord {
    pub fn to_line(&self) -> Result<String> {
        to_json_line(self)
    }
}

pub fn evaluate_checkpoint(path: &Path, tasks: usize, shots: usize, steps: usize, seed: u64) -> Result<EvalRecord> {
    if tasks == 0 {
        return Err(Error::InvalidArgument("--tasks must be positive".into()));
    }
    let ckpt = Checkpoint::load(path)?;
    let r = evaluate(&ckpt, tasks, shots, steps, seed)?;
    Ok(EvalRecord {
        checkpoint: path.display().to_string(),
        method: ckpt.config.method,
        iteration: ckpt.iteration,
        k_shot: r.k_shot,
        inner_steps: r.inner_steps,
        n_tasks: r.n_tasks,
        seed,
        mean: r.mean,
        ci95: r.ci95,
    })
}

pub fn append_record(path: &Path, record: &EvalRecord) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", record.to_line()?).map_err(|e| Error::io(path, e))
}

/// Rows of comma-separated values at 17 significant digits.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..m.rows() {
        let row = &m.data()[r * m.cols()..(r + 1) * m.cols()];
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines() {
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Schema(format!("{}: ragged rows", path.display())));
        }
        data.extend(row);
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

/// Summary of one exported matrix.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixSummary {
    pub file: String,
    pub size: usize,
    pub diagonal_mean: f64,
    pub max_abs_off_diagonal: f64,
}

impl MatrixSummary {
    pub fn of(file: &str, m: &Matrix) -> Self {
        let n = m.rows().min(m.cols());
        let diagonal_mean = (0..n).map(|i| m.get(i, i)).sum::<f64>() / n.max(1) as f64;
        let mut off = 0.0f64;
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                if r != c {
                    off = off.max(m.get(r, c).abs());
                }
            }
        }
        MatrixSummary {
            file: file.to_string(),
            size: m.rows(),
            diagonal_mean,
            max_abs_off_diagonal: off,
        }
    }
}

/// Base names of a network's parameter tensors: `layer1_weight`, `layer1_bias`, ...
pub fn tensor_names(layers: usize) -> Vec<String> {
    (1..=layers)
        .flat_map(|l| [format!("layer{l}_weight"), format!("layer{l}_bias")])
        .collect()
}

/// Writes `<tensor>_Mo.csv`, `<tensor>_Mi.csv`, `<tensor>_Mf.csv` for every
/// curvature block, and `<tensor>_M_mc.csv` when the block's expansion fits
/// under `expand_cap`. With one rule per inner step, names are prefixed
/// with `step<s>_`.
pub fn export_matrices(ckpt: &Checkpoint, out: &Path, expand_cap: usize) -> Result<Vec<MatrixSummary>> {
    ckpt.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names = tensor_names(ckpt.sizes.len() - 1);
    let multi = ckpt.rules.len() > 1;
    let mut summaries = Vec::new();
    for (s, rule) in ckpt.rules.iter().enumerate() {
        let InnerRule::MetaCurv { blocks, .. } = rule else {
            continue;
        };
        for (name, block) in names.iter().zip(blocks) {
            let base = if multi {
                format!("step{}_{name}", s + 1)
            } else {
                name.clone()
            };
            for (tag, m) in [("Mo", &block.mo), ("Mi", &block.mi), ("Mf", &block.mf)] {
                let file = format!("{base}_{tag}.csv");
                write_matrix_csv(&out.join(&file), m)?;
                summaries.push(MatrixSummary::of(&file, m));
            }
            if let Some(m) = expanded(block, expand_cap)? {
                let file = format!("{base}_M_mc.csv");
                write_matrix_csv(&out.join(&file), &m)?;
                summaries.push(MatrixSummary::of(&file, &m));
            }
        }
    }
    Ok(summaries)
}

fn expanded(block: &CurvatureBlock, cap: usize) -> Result<Option<Matrix>> {
    match mc_expand_capped(block, cap) {
        Ok(m) => Ok(Some(m)),
        Err(Error::SizeLimit { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub const DEFAULT_EXPAND_CAP: usize = EXPAND_CAP;

pub fn run_diag(suite: Suite) -> Result<SuiteReport> {
    run_suite(suite, 0, SuiteSize::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_method_names_the_field() {
        let err = RunConfigFile::parse(r#"{"k_shot": 5}"#)
            .unwrap()
            .resolve(None)
            .unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("method"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfigFile::parse(r#"{"method": "MC2", "lr": 1}"#).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn resolved_config_is_a_valid_config() {
        let r = RunConfigFile::parse(r#"{"method": "MC2", "k_shot": 10}"#)
            .unwrap()
            .resolve(None)
            .unwrap();
        assert_eq!(r.train.query_points, 10);
        assert_eq!(r.train.iterations, 70_000);
        let again = RunConfigFile::parse(&r.to_json().unwrap())
            .unwrap()
            .resolve(None)
            .unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn metrics_line_matches_header_arity() {
        let row = MetricsRow {
            iteration: 3,
            train_loss: 0.5,
            val_loss: 0.25,
            val_ci: 0.01,
            wall_ms: 0,
            method: "MC2".into(),
            seed: 7,
            negative_rates: 0,
        };
        let line = metrics_line(&row);
        assert_eq!(line.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(line.starts_with("3,5.0000000000000000e-1,"));
    }
}
