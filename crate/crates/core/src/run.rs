//! Run configuration and the training loop that writes metrics and checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablations::Ablation;
use crate::data::{downscale, load_cifar_binary, synthetic, Dataset};
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::training::{evaluate, save_checkpoint, train_step, OptimConfig, OptimState, RngState};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "CAUSALPIX_SEED";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cpix";
pub const RESOLVED_CONFIG_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated gradient-and-shapes images.
    Synthetic { n: usize, side: usize, seed: u64 },
    /// CIFAR-10 binary batch files, concatenated in order.
    Cifar { files: Vec<PathBuf> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 400,
            side: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataSource,
    /// Block-mean factor applied to every image before the split.
    pub downscale: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Applied on top of `model`.
    pub ablation: Option<Ablation>,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Evaluate with the EMA parameters instead of the raw ones.
    pub use_ema: bool,
    /// Record elapsed time in the `seconds` column; when off it is always 0.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            optim: OptimConfig::default(),
            data: DataSource::default(),
            downscale: 2,
            n_train: 300,
            n_eval: 100,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            ablation: None,
            steps: 2000,
            batch_size: 16,
            eval_batch_size: 50,
            eval_every: 100,
            checkpoint_every: 500,
            use_ema: true,
            wall_clock: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it are taken from the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Joins relative data and output paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Cifar { files } = &mut self.data {
            files.iter_mut().for_each(join);
        }
        join(&mut self.out_dir);
    }

    /// Replaces the seed with `CAUSALPIX_SEED` when that is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Model config with the ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        match self.ablation {
            Some(a) => a.apply(&self.model),
            None => self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.effective_model();
        model.validate()?;
        self.optim.validate()?;
        match &self.data {
            DataSource::Synthetic { n, side, .. } => {
                if *n == 0 || *side == 0 {
                    return Err(Error::config("data", "synthetic n and side must be positive"));
                }
                if n_needed(self) > *n {
                    return Err(Error::config("n_train", format!("n_train + n_eval exceeds the {n} synthetic images")));
                }
                if side % self.downscale.max(1) != 0 {
                    return Err(Error::config("downscale", format!("does not divide the side {side}")));
                }
                let s = side / self.downscale.max(1);
                model.check_input(s, s).map_err(|e| Error::config("downscale", e.to_string()))?;
            }
            DataSource::Cifar { files } => {
                if files.is_empty() {
                    return Err(Error::config("data.files", "at least one file is required"));
                }
                if let Some(missing) = files.iter().find(|f| !f.is_file()) {
                    return Err(Error::config("data.files", format!("{} does not exist", missing.display())));
                }
            }
        }
        if self.downscale == 0 {
            return Err(Error::config("downscale", "must be positive"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be positive"));
        }
        if self.n_eval == 0 {
            return Err(Error::config("n_eval", "must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::config("batch_size", "must lie in 1..=n_train"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        Ok(())
    }

    /// Loads, downscales and splits the configured images.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let all = match &self.data {
            DataSource::Synthetic { n, side, seed } => synthetic(*n, *side, *seed)?,
            DataSource::Cifar { files } => {
                let mut sets = files.iter().map(load_cifar_binary);
                let mut all = sets.next().ok_or_else(|| Error::config("data.files", "no files"))??;
                for more in sets {
                    let more = more?;
                    if all.len() >= n_needed(self) {
                        break;
                    }
                    all.images = all.images.concat(&more.images)?;
                    all.labels = match (all.labels, more.labels) {
                        (Some(mut a), Some(b)) => {
                            a.extend(b);
                            Some(a)
                        }
                        _ => None,
                    };
                }
                all
            }
        };
        if all.len() < n_needed(self) {
            return Err(Error::config(
                "n_train",
                format!("n_train + n_eval = {} but only {} images are available", n_needed(self), all.len()),
            ));
        }
        let all = all.select(&(0..n_needed(self)).collect::<Vec<_>>());
        let all = if self.downscale > 1 { downscale(&all, self.downscale)? } else { all };
        let (mut train, mut eval) = all.split_off(self.n_train, self.n_eval)?;
        match self.effective_model().n_classes {
            Some(c) => {
                if train.labels.is_none() {
                    return Err(Error::config("model.n_classes", "the dataset has no labels"));
                }
                train.check_labels(c)?;
                eval.check_labels(c)?;
            }
            None => {
                train.labels = None;
                eval.labels = None;
            }
        }
        Ok((train, eval))
    }
}

fn n_needed(cfg: &RunConfig) -> usize {
    cfg.n_train + cfg.n_eval
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub train_bpd: f64,
    pub eval_bpd: f64,
    pub seconds: f64,
}

pub fn csv_header(ablation: Option<Ablation>) -> String {
    match ablation {
        Some(_) => "step,train_bpd,eval_bpd,seconds,ablation\n".into(),
        None => "step,train_bpd,eval_bpd,seconds\n".into(),
    }
}

pub fn csv_row(m: &TrainMetrics, ablation: Option<Ablation>) -> String {
    let mut row = format!("{},{:.6},{:.6},{:.3}", m.step, m.train_bpd, m.eval_bpd, m.seconds);
    if let Some(a) = ablation {
        let _ = write!(row, ",{a}");
    }
    row.push('\n');
    row
}

/// A training run in progress: data, model, optimizer and the shared RNG.
pub struct Run {
    pub config: RunConfig,
    pub train: Dataset,
    pub eval: Dataset,
    pub model: Model<f32>,
    pub optim: OptimState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    started: Instant,
}

impl Run {
    /// Validates `config`, loads the data and initializes the model from the seed.
    pub fn new(config: RunConfig) -> Result<Run> {
        config.validate()?;
        let (train, eval) = config.datasets()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.effective_model(), &mut rng)?;
        let optim = OptimState::new(config.optim.clone(), &model)?;
        let order: Vec<usize> = (0..train.len()).collect();
        Ok(Run {
            cursor: order.len(),
            order,
            config,
            train,
            eval,
            model,
            optim,
            rng,
            started: Instant::now(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    fn next_batch(&mut self) -> Dataset {
        let bs = self.config.batch_size;
        if self.cursor + bs > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + bs];
        self.cursor += bs;
        self.train.select(idx)
    }

    /// One optimizer step on the next shuffled minibatch; returns its bits per sub-pixel.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        train_step(
            &mut self.model,
            &mut self.optim,
            &batch.images,
            batch.labels.as_deref(),
            &mut self.rng,
        )
    }

    /// The parameters used for evaluation and sampling.
    pub fn eval_model(&self) -> Result<Model<f32>> {
        if self.config.use_ema {
            self.optim.ema_model(&self.model)
        } else {
            Ok(self.model.clone())
        }
    }

    /// Deterministic eval-mode bits on both splits at the current step.
    pub fn metrics(&self) -> Result<TrainMetrics> {
        let model = self.eval_model()?;
        let bs = self.config.eval_batch_size;
        Ok(TrainMetrics {
            step: self.optim.step,
            train_bpd: evaluate(&model, &self.train, bs)?,
            eval_bpd: evaluate(&model, &self.eval, bs)?,
            seconds: if self.config.wall_clock {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.optim, &RngState::capture(&self.rng))
    }

    /// Trains for `config.steps`, writing `metrics.csv`, `run.json` and
    /// `checkpoint.cpix` into the output directory. Metrics rows are taken at
    /// step 0, every `eval_every` steps and at the last step; a zero-step run
    /// writes the header and the initial checkpoint only.
    pub fn execute(&mut self) -> Result<Vec<TrainMetrics>> {
        self.execute_with(|_| {})
    }

    /// [`Run::execute`], calling `on_row` after each metrics row is written.
    pub fn execute_with(&mut self, mut on_row: impl FnMut(&TrainMetrics)) -> Result<Vec<TrainMetrics>> {
        let dir = self.config.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
        let csv_path = dir.join(METRICS_FILE);
        let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let ablation = self.config.ablation;
        let mut emit = |line: String| csv.write_all(line.as_bytes()).map_err(|e| Error::io(&csv_path, e));
        emit(csv_header(ablation))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let mut rows = Vec::new();
        let steps = self.config.steps;
        if steps > 0 {
            let m = self.metrics()?;
            emit(csv_row(&m, ablation))?;
            on_row(&m);
            rows.push(m);
        }
        while self.optim.step < steps {
            self.step()?;
            let s = self.optim.step;
            if s.is_multiple_of(self.config.eval_every) || s == steps {
                let m = self.metrics()?;
                emit(csv_row(&m, ablation))?;
                on_row(&m);
                rows.push(m);
            }
            if s.is_multiple_of(self.config.checkpoint_every) && s != steps {
                self.save_checkpoint(&ckpt)?;
            }
        }
        self.save_checkpoint(&ckpt)?;
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &Path) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                n_filters: 4,
                layers_per_block: 1,
                n_mixtures: 2,
                ..ModelConfig::desk()
            },
            data: DataSource::Synthetic {
                n: 12,
                side: 8,
                seed: 1,
            },
            downscale: 1,
            n_train: 8,
            n_eval: 4,
            steps: 3,
            batch_size: 4,
            eval_every: 2,
            wall_clock: false,
            out_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 3}"#).is_ok());
        let err = RunConfig::from_json(r#"{"sed": 3}"#).unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
        assert!(RunConfig::from_json(r#"{"data": {"kind": "synthetic", "n": 4, "side": 8, "seed": 0, "x": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"ablation": "no_dropout"}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"ablation": "no_such"}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let bad = RunConfig {
            batch_size: 100,
            ..quick(dir.path())
        };
        assert!(bad.validate().unwrap_err().to_string().contains("batch_size"));
        let bad = RunConfig {
            data: DataSource::Cifar {
                files: vec![dir.path().join("missing.bin")],
            },
            ..quick(dir.path())
        };
        assert!(bad.validate().unwrap_err().to_string().contains("data.files"));
        let bad = RunConfig {
            downscale: 3,
            ..quick(dir.path())
        };
        assert!(bad.validate().unwrap_err().to_string().contains("downscale"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"out_dir": "out", "data": {"kind": "cifar", "files": ["b1.bin"]}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.data, DataSource::Cifar { files: vec![dir.path().join("b1.bin")] });
    }

    #[test]
    fn csv_rows_follow_the_schema() {
        let m = TrainMetrics {
            step: 7,
            train_bpd: 5.25,
            eval_bpd: 6.0,
            seconds: 1.5,
        };
        assert_eq!(csv_row(&m, None), "7,5.250000,6.000000,1.500\n");
        assert_eq!(csv_row(&m, Some(Ablation::NoDropout)), "7,5.250000,6.000000,1.500,no_dropout\n");
        assert_eq!(csv_header(Some(Ablation::NoDropout)), "step,train_bpd,eval_bpd,seconds,ablation\n");
    }

    #[test]
    fn execution_is_reproducible_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let rows = Run::new(quick(&a)).unwrap().execute().unwrap();
        Run::new(quick(&b)).unwrap().execute().unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        for f in [METRICS_FILE, CHECKPOINT_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let csv = std::fs::read_to_string(a.join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        let back = RunConfig::load(a.join(RESOLVED_CONFIG_FILE)).unwrap();
        assert_eq!(back.seed, 0);
    }

    #[test]
    fn zero_steps_writes_header_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            steps: 0,
            ablation: Some(Ablation::NoDropout),
            ..quick(dir.path())
        };
        assert!(Run::new(cfg).unwrap().execute().unwrap().is_empty());
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, "step,train_bpd,eval_bpd,seconds,ablation\n");
        assert!(dir.path().join(CHECKPOINT_FILE).is_file());
    }
}
