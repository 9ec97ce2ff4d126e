//! The experiment harness behind the `atkf` command-line tool: dataset
//! generation, training, evaluation of every filter, and result export.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/q2_<level>/{train,val,test}.json
//! data/q2_<level>/pretrain_<regime>.json
//! data/linearization_<regime>.json
//! models/<regime>/q2_<level>.json         network checkpoints
//! logs/<regime>/q2_<level>.csv            training logs
//! results.csv                             filter,regime,q2,mse
//! runtime.csv                             filter,regime,q2,runtime_seconds
//! summary.csv                             one row per (regime, filter), one column per level
//! trajectories/<regime>_q2_<level>_<i>.csv
//! manifest.json                           config plus sha256 of every file
//! ```
//!
//! Every random stream is keyed off the root seed with [`stage_seed`], so a
//! rerun with the same configuration rewrites identical data, checkpoints and
//! result files. Only wall-clock columns (logs, `runtime.csv`) differ.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atkf::atkf_run;
use crate::batch::build_pretrain_set;
use crate::error::{Error, Result};
use crate::filters::{ekf_run, mse, pf_run, ukf_run, GaussianBelief, UkfConfig};
use crate::ltpwl::linearize_system;
use crate::nn::{AttentionNetParams, NetConfig};
use crate::rng::{derive_seed, stage_seed};
use crate::system::{generate_dataset, noise_free_trajectory, Dataset, SynthModel, SynthParams};
use crate::train::{evaluate, pretrain, train_e2e, log_csv, EpochRecord, TrainConfig};

/// Which model the filters are given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Filters know the true system.
    Noise,
    /// Filters use the mismatched parameters.
    Mismatch,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Noise => "noise",
            Regime::Mismatch => "mismatch",
        }
    }

    /// Parameters of the model the filters run with.
    pub fn filter_params(self) -> SynthParams {
        match self {
            Regime::Noise => SynthParams::TRUE_SYSTEM,
            Regime::Mismatch => SynthParams::MISMATCHED,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Regime::Noise),
            "mismatch" => Ok(Regime::Mismatch),
            other => Err(Error::Config(format!("unknown regime {other:?} (expected noise or mismatch)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Ukf,
    Pf,
    Atkf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [FilterKind::Ekf, FilterKind::Ukf, FilterKind::Pf, FilterKind::Atkf];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Ekf => "EKF",
            FilterKind::Ukf => "UKF",
            FilterKind::Pf => "PF",
            FilterKind::Atkf => "AtKF",
        }
    }
}

/// Everything an experiment run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub regimes: Vec<Regime>,
    /// Values of `q² = r²`.
    pub noise_levels: Vec<f64>,
    pub filters: Vec<FilterKind>,
    pub x0: Vec<f64>,
    pub n_train: usize,
    pub l_train: usize,
    pub n_val: usize,
    pub l_val: usize,
    pub n_test: usize,
    pub l_test: usize,
    /// Length of the noise-free trajectory used as linearization points.
    pub linearization_len: usize,
    /// Prior covariance `P̌_1 = prior_scale · I` of the batch estimates.
    pub prior_scale: f64,
    pub particles: usize,
    pub ukf: UkfConfig,
    pub network: NetConfig,
    pub train: TrainConfig,
    pub skip_pretrain: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            out_dir: PathBuf::from("out"),
            regimes: vec![Regime::Noise, Regime::Mismatch],
            noise_levels: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            filters: FilterKind::ALL.to_vec(),
            x0: vec![0.1, 0.1],
            n_train: 1000,
            l_train: 10,
            n_val: 100,
            l_val: 10,
            n_test: 200,
            l_test: 100,
            linearization_len: 10,
            prior_scale: 1.0,
            particles: 100,
            ukf: UkfConfig::default(),
            network: NetConfig::benchmark(),
            train: TrainConfig::default(),
            skip_pretrain: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
            return Err(Error::Config(format!("noise levels must be positive, got {:?}", self.noise_levels)));
        }
        if self.filters.is_empty() || self.regimes.is_empty() {
            return Err(Error::Config("filter roster and regime list must be non-empty".into()));
        }
        let sizes = [self.n_train, self.l_train, self.n_val, self.l_val, self.n_test, self.l_test, self.linearization_len, self.particles];
        if sizes.contains(&0) {
            return Err(Error::Config("dataset sizes, linearization length and particle count must be positive".into()));
        }
        if self.x0.len() != self.network.state_dim || self.network.state_dim != self.network.obs_dim {
            return Err(Error::Config(format!(
                "initial state of size {} does not fit network dimensions {}x{}",
                self.x0.len(),
                self.network.state_dim,
                self.network.obs_dim
            )));
        }
        if self.prior_scale.is_nan() || self.prior_scale <= 0.0 {
            return Err(Error::Config("prior_scale must be positive".into()));
        }
        self.network.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn true_model(&self, level: f64) -> Result<SynthModel> {
        SynthModel::isotropic(SynthParams::TRUE_SYSTEM, self.dim(), level, level)
    }

    /// The model the filters (and training) use in `regime`.
    pub fn filter_model(&self, regime: Regime, level: f64) -> Result<SynthModel> {
        SynthModel::isotropic(regime.filter_params(), self.dim(), level, level)
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.out_dir.clone() }
    }
}

/// `16.0` → `"16"`, `0.5` → `"0.5"`.
pub fn level_label(level: f64) -> String {
    format!("{level}")
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn split(&self, level: f64, split: &str) -> PathBuf {
        self.root.join("data").join(format!("q2_{}", level_label(level))).join(format!("{split}.json"))
    }

    pub fn pretrain(&self, regime: Regime, level: f64) -> PathBuf {
        self.split(level, &format!("pretrain_{regime}"))
    }

    pub fn linearization(&self, regime: Regime) -> PathBuf {
        self.root.join("data").join(format!("linearization_{regime}.json"))
    }

    pub fn checkpoint(&self, regime: Regime, level: f64) -> PathBuf {
        self.root.join("models").join(regime.as_str()).join(format!("q2_{}.json", level_label(level)))
    }

    pub fn log(&self, regime: Regime, level: f64) -> PathBuf {
        self.root.join("logs").join(regime.as_str()).join(format!("q2_{}.csv", level_label(level)))
    }

    pub fn trajectory_dump(&self, regime: Regime, level: f64, index: usize) -> PathBuf {
        self.root.join("trajectories").join(format!("{regime}_q2_{}_{index}.csv", level_label(level)))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn runtime(&self) -> PathBuf {
        self.root.join("runtime.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct LinearizationFile {
    regime: Regime,
    x0: Vec<f64>,
    points: Vec<Vec<f64>>,
}

fn read_linearization(path: &Path) -> Result<Vec<DVector<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LinearizationFile =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })?;
    Ok(file.points.iter().map(|p| DVector::from_column_slice(p)).collect())
}

fn data_seed(cfg: &ExperimentConfig, split: &str, level: f64) -> u64 {
    stage_seed(cfg.seed, &format!("data/{split}/q2={}", level_label(level)))
}

/// Writes train/val/test sets per noise level, the noise-free linearization
/// trajectory per regime, and the manifest.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let layout = cfg.layout();
    let x0 = cfg.x0();
    for &level in &cfg.noise_levels {
        let model = cfg.true_model(level)?;
        let splits = [("train", cfg.n_train, cfg.l_train), ("val", cfg.n_val, cfg.l_val), ("test", cfg.n_test, cfg.l_test)];
        for (split, n, len) in splits {
            let data = generate_dataset(&model, &x0, n, len, data_seed(cfg, split, level))?;
            let path = layout.split(level, split);
            write_file(&path, data.to_json())?;
            log::info!("wrote {} ({n} x {len})", path.display());
        }
    }
    for &regime in &cfg.regimes {
        let model = cfg.filter_model(regime, 1.0)?;
        let points = noise_free_trajectory(&model, &x0, cfg.linearization_len);
        let file = LinearizationFile {
            regime,
            x0: cfg.x0.clone(),
            points: points.iter().map(|p| p.iter().copied().collect()).collect(),
        };
        write_file(&layout.linearization(regime), serde_json::to_string(&file).expect("serializable"))?;
    }
    write_manifest(cfg)
}

/// Outcome of training one (regime, level) network.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub regime: Regime,
    pub level: f64,
    pub log: Vec<EpochRecord>,
    /// Validation MSE of the kept checkpoint.
    pub val_mse: f64,
    pub params: AttentionNetParams,
}

/// Trains one network for `regime` at noise `level` from the generated data.
pub fn train_one(cfg: &ExperimentConfig, regime: Regime, level: f64) -> Result<TrainSummary> {
    let layout = cfg.layout();
    let x0 = cfg.x0();
    let label = level_label(level);
    let train_set = Dataset::read(&layout.split(level, "train"))?;
    let val_set = Dataset::read(&layout.split(level, "val"))?;
    let model = cfg.filter_model(regime, level)?;
    let mut params = AttentionNetParams::init(cfg.network, stage_seed(cfg.seed, &format!("init/{regime}/q2={label}")))?;
    let tcfg = TrainConfig { seed: stage_seed(cfg.seed, &format!("train/{regime}/q2={label}")), ..cfg.train.clone() };
    let mut validator = |p: &AttentionNetParams| evaluate(p, &val_set.instances, &model, &x0);
    let mut log = Vec::new();
    let mut val_mse = None;

    if !cfg.skip_pretrain && tcfg.pretrain_epochs > 0 {
        let points = read_linearization(&layout.linearization(regime))?;
        let lattice = linearize_system(&model, &points)?;
        let p1 = DMatrix::identity(cfg.dim(), cfg.dim()) * cfg.prior_scale;
        let set = build_pretrain_set(&model, &lattice, train_set.meta.clone(), &train_set.instances, &x0, &p1, &cfg.network)?;
        write_file(&layout.pretrain(regime, level), set.to_json())?;
        let out = pretrain(&params, &set, &tcfg, Some(&mut validator))?;
        log::info!("{regime} q2={label}: pre-training kept epoch {}", out.best_epoch);
        val_mse = out.best_val();
        params = out.params;
        log.extend(out.log);
    }
    let out = train_e2e(&params, &model, &train_set.instances, &x0, &tcfg, Some(&mut validator))?;
    log::info!("{regime} q2={label}: end-to-end training kept epoch {}", out.best_epoch);
    val_mse = out.best_val().or(val_mse);
    let params = out.params;
    log.extend(out.log);

    write_file(&layout.checkpoint(regime, level), params.to_json())?;
    write_file(&layout.log(regime, level), log_csv(&log))?;
    let val_mse = match val_mse {
        Some(v) => v,
        None => evaluate(&params, &val_set.instances, &model, &x0)?,
    };
    Ok(TrainSummary { regime, level, log, val_mse, params })
}

/// Trains every configured (regime, level) pair.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &regime in &cfg.regimes {
        for &level in &cfg.noise_levels {
            out.push(train_one(cfg, regime, level)?);
        }
    }
    write_manifest(cfg)?;
    Ok(out)
}

/// One line of `results.csv` (plus its runtime, which goes to `runtime.csv`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub filter: FilterKind,
    pub regime: Regime,
    pub level: f64,
    pub mse: f64,
    pub runtime_seconds: f64,
}

fn run_filter(
    cfg: &ExperimentConfig,
    filter: FilterKind,
    regime: Regime,
    level: f64,
    model: &SynthModel,
    test: &Dataset,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let x0 = cfg.x0();
    let init = GaussianBelief::exact(x0.clone());
    let label = level_label(level);
    match filter {
        FilterKind::Ekf => test.instances.par_iter().map(|t| ekf_run(model, &t.observations, &init)).collect(),
        FilterKind::Ukf => test.instances.par_iter().map(|t| ukf_run(model, &t.observations, &init, &cfg.ukf)).collect(),
        FilterKind::Pf => {
            let root = stage_seed(cfg.seed, &format!("pf/{regime}/q2={label}"));
            test.instances
                .par_iter()
                .enumerate()
                .map(|(i, t)| pf_run(model, &t.observations, &init, cfg.particles, derive_seed(root, i as u64)))
                .collect()
        }
        FilterKind::Atkf => {
            let params = AttentionNetParams::load(&cfg.layout().checkpoint(regime, level))?;
            if params.config != cfg.network {
                return Err(Error::Config("checkpoint network shape differs from the configuration".into()));
            }
            test.instances.par_iter().map(|t| atkf_run(model, &params, &t.observations, &x0)).collect()
        }
    }
}

fn write_trajectory_dump(path: &Path, truth: &[DVector<f64>], runs: &[(FilterKind, &[DVector<f64>])]) -> Result<()> {
    let dim = truth.first().map_or(0, |x| x.len());
    let mut out = String::from("step");
    for c in 1..=dim {
        write!(out, ",true_x{c}").unwrap();
    }
    for (f, _) in runs {
        for c in 1..=dim {
            write!(out, ",{}_x{c}", f.as_str()).unwrap();
        }
    }
    out.push('\n');
    for (k, x) in truth.iter().enumerate() {
        write!(out, "{}", k + 1).unwrap();
        for v in x.iter() {
            write!(out, ",{v}").unwrap();
        }
        for (_, est) in runs {
            for v in est[k].iter() {
                write!(out, ",{v}").unwrap();
            }
        }
        out.push('\n');
    }
    write_file(path, out)
}

/// Runs every filter of the roster on the test sets and writes `results.csv`
/// and `runtime.csv`. With `dump = Some(i)`, also writes the per-step states
/// of test instance `i`.
pub fn cmd_eval(cfg: &ExperimentConfig, dump: Option<usize>) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut rows = Vec::new();
    for &regime in &cfg.regimes {
        for &level in &cfg.noise_levels {
            let test = Dataset::read(&layout.split(level, "test"))?;
            if let Some(i) = dump.filter(|&i| i >= test.instances.len()) {
                return Err(Error::Config(format!("trajectory index {i} outside the {} test instances", test.instances.len())));
            }
            let model = cfg.filter_model(regime, level)?;
            let mut dumped = Vec::new();
            for &filter in &cfg.filters {
                let started = Instant::now();
                let estimates = run_filter(cfg, filter, regime, level, &model, &test)?;
                let runtime_seconds = started.elapsed().as_secs_f64();
                let per: Vec<f64> = estimates
                    .iter()
                    .zip(&test.instances)
                    .map(|(e, t)| mse(e, &t.states))
                    .collect::<Result<_>>()?;
                let value = per.iter().sum::<f64>() / per.len() as f64;
                log::info!("{} {regime} q2={}: mse {value:.4} ({runtime_seconds:.2}s)", filter.as_str(), level_label(level));
                rows.push(ResultRow { filter, regime, level, mse: value, runtime_seconds });
                if let Some(i) = dump {
                    dumped.push((filter, estimates.into_iter().nth(i).expect("index checked")));
                }
            }
            if let Some(i) = dump {
                let runs: Vec<_> = dumped.iter().map(|(f, e)| (*f, e.as_slice())).collect();
                write_trajectory_dump(&layout.trajectory_dump(regime, level, i), &test.instances[i].states, &runs)?;
            }
        }
    }
    write_file(&layout.results(), results_csv(&rows))?;
    write_file(&layout.runtime(), runtime_csv(&rows))?;
    write_manifest(cfg)?;
    Ok(rows)
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("filter,regime,q2,mse\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.filter.as_str(), r.regime, level_label(r.level), r.mse).unwrap();
    }
    out
}

fn runtime_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("filter,regime,q2,runtime_seconds\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.3}", r.filter.as_str(), r.regime, level_label(r.level), r.runtime_seconds).unwrap();
    }
    out
}

/// Distinct items in order of first appearance.
fn first_seen<T: PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

/// One table per regime: rows are filters, columns are noise levels.
pub fn summary_csv(rows: &[ResultRow], levels: &[f64]) -> String {
    let mut out = String::from("regime,filter");
    for &l in levels {
        write!(out, ",q2={}", level_label(l)).unwrap();
    }
    out.push('\n');
    for (regime, filter) in first_seen(rows.iter().map(|r| (r.regime, r.filter))) {
        write!(out, "{regime},{}", filter.as_str()).unwrap();
        for &l in levels {
            match rows.iter().find(|r| r.regime == regime && r.filter == filter && r.level == l) {
                Some(r) => write!(out, ",{:.4}", r.mse).unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// A fixed-width rendering of [`summary_csv`] for the terminal.
pub fn summary_table(rows: &[ResultRow], levels: &[f64]) -> String {
    let mut out = String::new();
    for regime in first_seen(rows.iter().map(|r| r.regime)) {
        writeln!(out, "MSE, {regime} study").unwrap();
        write!(out, "{:<6}", "q2").unwrap();
        for &l in levels {
            write!(out, "{:>12}", level_label(l)).unwrap();
        }
        out.push('\n');
        for f in first_seen(rows.iter().filter(|r| r.regime == regime).map(|r| r.filter)) {
            write!(out, "{:<6}", f.as_str()).unwrap();
            for &l in levels {
                match rows.iter().find(|r| r.regime == regime && r.filter == f && r.level == l) {
                    Some(r) => write!(out, "{:>12.4}", r.mse).unwrap(),
                    None => write!(out, "{:>12}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// generate, train, eval, then the summary table.
pub fn cmd_reproduce(cfg: &ExperimentConfig, dump: Option<usize>) -> Result<(Vec<ResultRow>, String)> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    cmd_generate(cfg).map_err(|e| e.in_stage("generate"))?;
    cmd_train(cfg).map_err(|e| e.in_stage("train"))?;
    let rows = cmd_eval(cfg, dump).map_err(|e| e.in_stage("eval"))?;
    write_file(&cfg.layout().summary(), summary_csv(&rows, &cfg.noise_levels))?;
    write_manifest(cfg)?;
    Ok((rows.clone(), summary_table(&rows, &cfg.noise_levels)))
}

fn collect_files(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, root, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Relative path → sha256 of the file contents.
    pub files: BTreeMap<String, String>,
}

/// Records the configuration and the hash of every file under the output directory.
pub fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let layout = cfg.layout();
    let mut files = BTreeMap::new();
    collect_files(&layout.root, &layout.root, &mut files)?;
    let manifest = Manifest { seed: cfg.seed, config: cfg.clone(), files };
    write_file(&layout.manifest(), serde_json::to_string_pretty(&manifest).expect("serializable"))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })
}
