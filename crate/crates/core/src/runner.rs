//! Experiment orchestration: seeded multi-run training, per-seed metrics
//! files, across-seed summaries, paired family comparison, and the
//! verification suite behind the `verify` subcommand.
//!
//! Output directory layout of [`run_experiment`]:
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | the effective [`RunConfig`] |
//! | `metrics_seed{S}.csv` | `seed,epoch,split,l_ld,l_exp,l_smooth,total,mae`, one row per (epoch, split) |
//! | `summary.csv` | one row per epoch: mean and sample std across seeds of every column, for both splits |
//! | `failures.txt` | only when some seed diverged |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv, split, Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::{discretize_gaussian, make_grid, softmax, LabelGrid, Moments, NumericPolicy, Pmf};
use crate::losses::{
    full_kl_grad, full_kl_loss, gaussian_kl, kl_div, reference_grad, reference_loss, smoothness, LossConfig,
    ReferenceLossConfig,
};
use crate::model::{fit_with, init_mlp, Metrics, Mlp, TrainConfig};
use crate::verify::{check_grad_norm, fd_grad_relative, numeric_gaussian_kl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic { n: usize, d_in: usize, sigma_range: [f64; 2], seed: u64 },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<LabelGrid<f64>> {
        make_grid(self.start, self.stop, self.step)
    }
}

/// Hyperparameters shared by every seed of a run; the loss and seed of
/// [`TrainConfig`] come from the enclosing [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::<f64>::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            lr_decay_factor: d.lr_decay_factor,
            lr_decay_every: d.lr_decay_every,
            hidden: d.hidden,
        }
    }
}

fn default_val_fraction() -> f64 {
    0.2
}

/// A complete, self-describing experiment. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub grid: GridSpec,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub train: TrainSettings,
    pub loss: LossConfig<f64>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    /// 5,000 synthetic samples (16 features, σ ∈ [2, 6]) on ages 0..=100,
    /// 80/20 split, 10 seeds, 60 epochs of the default optimizer protocol.
    pub fn default_synthetic(loss: LossConfig<f64>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetSource::Synthetic { n: 5000, d_in: 16, sigma_range: [2.0, 6.0], seed: 0 },
            grid: GridSpec { start: 0.0, stop: 100.0, step: 1.0 },
            val_fraction: 0.2,
            split_seed: 0,
            train: TrainSettings::default(),
            loss,
            out_dir: out_dir.into(),
            seeds: (0..10).collect(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig<f64> {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            hidden: t.hidden.clone(),
            loss: self.loss,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        self.grid.build().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config(self.seeds[0]).validate().map_err(|e| Error::Config(e.to_string()))?;
        if let DatasetSource::Synthetic { n, d_in, .. } = self.dataset {
            if n < 2 || d_in == 0 {
                return Err(Error::Config("synthetic dataset needs n >= 2 and d_in >= 1".into()));
            }
        }
        Ok(())
    }

    /// The full dataset before splitting.
    pub fn load_dataset(&self) -> Result<Dataset<f64>> {
        let grid = self.grid.build()?;
        match &self.dataset {
            DatasetSource::Synthetic { n, d_in, sigma_range, seed } => {
                gen_synthetic(*n, *d_in, &grid, *sigma_range, *seed)
            }
            DatasetSource::Csv { path } => load_csv(path, &grid),
        }
    }

    /// Everything except loss, output location and the training
    /// hyperparameters: the part two compared runs must share.
    fn protocol(&self) -> (&DatasetSource, GridSpec, u64, u64, &[u64]) {
        (&self.dataset, self.grid, self.val_fraction.to_bits(), self.split_seed, &self.seeds)
    }
}

/// Knobs of a run that do not change its results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Final-epoch `(train, val)` metrics, or the divergence message.
    pub result: std::result::Result<(Metrics<f64>, Metrics<f64>), String>,
    pub metrics_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl RunReport {
    pub fn failed(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.seeds.iter().filter(|s| s.result.is_err())
    }

    pub fn all_succeeded(&self) -> bool {
        self.failed().next().is_none()
    }
}

pub const METRICS_HEADER: [&str; 8] = ["seed", "epoch", "split", "l_ld", "l_exp", "l_smooth", "total", "mae"];

/// Trains every seed, writes per-seed metrics, then derives the summary from
/// the files just written.
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.json"), &cfg.to_json())?;

    let full = cfg.load_dataset()?;
    let (train, val) = split(&full, cfg.val_fraction, cfg.split_seed)?;
    let policy = NumericPolicy::default();

    let failures_path = out.join("failures.txt");
    remove_if_exists(&failures_path)?;
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let path = metrics_path(out, seed);
        remove_if_exists(&path)?;
        let tc = cfg.train_config(seed);
        let fitted = fit_with(&tc, &train, &val, &policy, |m| {
            if !opts.quiet {
                let (tr, va) = (&m[0], &m[1]);
                eprintln!(
                    "[{} seed {seed}] epoch {:>3}: train total {:.5} mae {:.3} | val total {:.5} mae {:.3}",
                    cfg.loss.family(),
                    tr.epoch,
                    tr.loss.total,
                    tr.mae,
                    va.loss.total,
                    va.mae
                );
            }
        });
        match fitted {
            Ok(run) => {
                write_metrics(&path, seed, &run.history)?;
                let n = run.history.len();
                outcomes.push(SeedOutcome {
                    seed,
                    result: Ok((run.history[n - 2], run.history[n - 1])),
                    metrics_path: Some(path),
                });
            }
            Err(e) => {
                if !opts.quiet {
                    eprintln!("[{} seed {seed}] failed: {e}", cfg.loss.family());
                }
                outcomes.push(SeedOutcome { seed, result: Err(e.to_string()), metrics_path: None });
            }
        }
    }

    let failures: Vec<String> =
        outcomes.iter().filter_map(|o| o.result.as_ref().err().map(|e| format!("seed {}: {e}\n", o.seed))).collect();
    if !failures.is_empty() {
        write_file(&failures_path, &failures.concat())?;
    }

    let files: Vec<PathBuf> = outcomes.iter().filter_map(|o| o.metrics_path.clone()).collect();
    let summary = summarize_files(&files)?;
    let summary_path = out.join("summary.csv");
    remove_if_exists(&summary_path)?;
    if !summary.is_empty() {
        write_summary(&summary_path, &summary)?;
    }
    Ok(RunReport { out_dir: out.clone(), seeds: outcomes, summary })
}

pub fn metrics_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("metrics_seed{seed}.csv"))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

fn write_metrics(path: &Path, seed: u64, history: &[Metrics<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for m in history {
        w.write_record([
            seed.to_string(),
            m.epoch.to_string(),
            m.split.to_string(),
            m.loss.l_ld.to_string(),
            m.loss.l_exp.to_string(),
            m.loss.l_smooth.map(|s| s.to_string()).unwrap_or_default(),
            m.loss.total.to_string(),
            m.mae.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed row of a per-seed metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub epoch: usize,
    pub split: Split,
    pub l_ld: f64,
    pub l_exp: f64,
    pub l_smooth: Option<f64>,
    pub total: f64,
    pub mae: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Row { path: path.into(), row: 1, message: "unexpected metrics header".into() });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Row { path: path.into(), row: i + 2, message: m.to_string() };
        let f = |j: usize| rec[j].parse::<f64>().map_err(|_| bad(METRICS_HEADER[j]));
        rows.push(MetricsRow {
            seed: rec[0].parse().map_err(|_| bad("seed"))?,
            epoch: rec[1].parse().map_err(|_| bad("epoch"))?,
            split: match &rec[2] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(bad("split")),
            },
            l_ld: f(3)?,
            l_exp: f(4)?,
            l_smooth: if rec[5].is_empty() { None } else { Some(f(5)?) },
            total: f(6)?,
            mae: f(7)?,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (`n − 1`; zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplitStats {
    pub l_ld: Stat,
    pub l_exp: Stat,
    pub l_smooth: Option<Stat>,
    pub total: Stat,
    pub mae: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub epoch: usize,
    pub n_seeds: usize,
    pub train: SplitStats,
    pub val: SplitStats,
}

const SUMMARY_METRICS: [&str; 5] = ["l_ld", "l_exp", "l_smooth", "total", "mae"];

fn summary_header() -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "n_seeds".to_string()];
    for split in ["train", "val"] {
        for m in SUMMARY_METRICS {
            h.push(format!("{split}_{m}_mean"));
            h.push(format!("{split}_{m}_std"));
        }
    }
    h
}

/// Per-epoch statistics across the given per-seed files, in file order.
pub fn summarize_files(paths: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut per_epoch: BTreeMap<(usize, u8), Vec<MetricsRow>> = BTreeMap::new();
    for p in paths {
        for row in read_metrics(p)? {
            let key = (row.epoch, if row.split == Split::Train { 0 } else { 1 });
            per_epoch.entry(key).or_default().push(row);
        }
    }
    let stats = |rows: &[MetricsRow]| {
        let col = |f: fn(&MetricsRow) -> f64| Stat::of(&rows.iter().map(f).collect::<Vec<_>>());
        let smooth: Option<Vec<f64>> = rows.iter().map(|r| r.l_smooth).collect();
        SplitStats {
            l_ld: col(|r| r.l_ld),
            l_exp: col(|r| r.l_exp),
            l_smooth: smooth.map(|s| Stat::of(&s)),
            total: col(|r| r.total),
            mae: col(|r| r.mae),
        }
    };
    let epochs: Vec<usize> =
        per_epoch.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    epochs
        .into_iter()
        .map(|epoch| {
            let train = per_epoch.get(&(epoch, 0)).map(Vec::as_slice).unwrap_or_default();
            let val = per_epoch.get(&(epoch, 1)).map(Vec::as_slice).unwrap_or_default();
            if train.len() != val.len() {
                return Err(Error::InvalidArgument(format!("epoch {epoch}: unequal train/val row counts")));
            }
            Ok(SummaryRow { epoch, n_seeds: train.len(), train: stats(train), val: stats(val) })
        })
        .collect()
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(summary_header())?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.n_seeds.to_string()];
        for s in [&r.train, &r.val] {
            for stat in [Some(s.l_ld), Some(s.l_exp), s.l_smooth, Some(s.total), Some(s.mae)] {
                match stat {
                    Some(st) => {
                        rec.push(st.mean.to_string());
                        rec.push(st.std.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(summary_header().iter().map(String::as_str)) {
        return Err(Error::Row { path: path.into(), row: 1, message: "unexpected summary header".into() });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Row { path: path.into(), row: i + 2, message: "malformed summary row".into() };
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| bad());
        let stat = |j: usize| -> Result<Option<Stat>> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                Ok(Some(Stat { mean: num(j)?, std: num(j + 1)? }))
            }
        };
        let split_at = |base: usize| -> Result<SplitStats> {
            Ok(SplitStats {
                l_ld: stat(base)?.ok_or_else(bad)?,
                l_exp: stat(base + 2)?.ok_or_else(bad)?,
                l_smooth: stat(base + 4)?,
                total: stat(base + 6)?.ok_or_else(bad)?,
                mae: stat(base + 8)?.ok_or_else(bad)?,
            })
        };
        rows.push(SummaryRow {
            epoch: rec[0].parse().map_err(|_| bad())?,
            n_seeds: rec[1].parse().map_err(|_| bad())?,
            train: split_at(2)?,
            val: split_at(12)?,
        });
    }
    Ok(rows)
}

/// Paired final-epoch validation MAE of two runs over the same seeds.
#[derive(Debug, Clone)]
pub struct Comparison {
    /// `(seed, mae_a, mae_b)` for seeds where both runs finished.
    pub pairs: Vec<(u64, f64, f64)>,
    pub a: Stat,
    pub b: Stat,
    /// `(mean_a − mean_b) / mean_b`.
    pub rel_diff: f64,
    pub skipped_seeds: Vec<u64>,
    pub reports: (RunReport, RunReport),
}

/// Runs both configurations and compares final validation MAE seed by seed.
/// Writes `compare.csv` and `compare.txt` into `report_dir`.
pub fn compare(cfg_a: &RunConfig, cfg_b: &RunConfig, report_dir: &Path, opts: RunOptions) -> Result<Comparison> {
    if cfg_a.protocol() != cfg_b.protocol() {
        return Err(Error::Config("compared runs must share dataset, grid, split and seeds".into()));
    }
    if cfg_a.out_dir == cfg_b.out_dir {
        return Err(Error::Config("compared runs need distinct output directories".into()));
    }
    let ra = run_experiment(cfg_a, opts)?;
    let rb = run_experiment(cfg_b, opts)?;

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (sa, sb) in ra.seeds.iter().zip(&rb.seeds) {
        match (&sa.result, &sb.result) {
            (Ok((_, va)), Ok((_, vb))) => pairs.push((sa.seed, va.mae, vb.mae)),
            _ => skipped.push(sa.seed),
        }
    }
    let a = Stat::of(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let b = Stat::of(&pairs.iter().map(|p| p.2).collect::<Vec<_>>());
    let rel_diff = if a.mean == b.mean { 0.0 } else { (a.mean - b.mean) / b.mean };

    fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let csv_path = report_dir.join("compare.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["seed", "mae_a", "mae_b", "rel_diff"])?;
    for &(seed, ma, mb) in &pairs {
        let rd = if ma == mb { 0.0 } else { (ma - mb) / mb };
        w.write_record([seed.to_string(), ma.to_string(), mb.to_string(), rd.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut text = String::new();
    let _ = writeln!(text, "# run A\n{}\n# run B\n{}\n", cfg_a.to_json(), cfg_b.to_json());
    let _ = writeln!(text, "final-epoch validation MAE");
    let _ = writeln!(text, "{:>8} {:>12} {:>12} {:>10}", "seed", "A", "B", "(A-B)/B");
    for &(seed, ma, mb) in &pairs {
        let rd = if ma == mb { 0.0 } else { (ma - mb) / mb };
        let _ = writeln!(text, "{seed:>8} {ma:>12.5} {mb:>12.5} {rd:>10.4}");
    }
    let _ = writeln!(text, "A ({}): {:.5} ± {:.5}", cfg_a.loss.family(), a.mean, a.std);
    let _ = writeln!(text, "B ({}): {:.5} ± {:.5}", cfg_b.loss.family(), b.mean, b.std);
    let _ = writeln!(text, "relative difference (A-B)/B: {rel_diff:.5}");
    if !skipped.is_empty() {
        let _ = writeln!(text, "seeds skipped (a run failed): {skipped:?}");
    }
    write_file(&report_dir.join("compare.txt"), &text)?;

    Ok(Comparison { pairs, a, b, rel_diff, skipped_seeds: skipped, reports: (ra, rb) })
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), max_error, tolerance, passed: max_error <= tolerance }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<40} max error {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const GRAD_INSTANCES: usize = 100;
pub const GRAD_SIZES: [usize; 3] = [2, 5, 101];
pub const GRAD_TOL: f64 = 1e-6;
pub const NETWORK_GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const GAUSSIAN_KL_TOL: f64 = 1e-4;
pub const QUADRATURE_POINTS: usize = 100_000;
pub const QUADRATURE_SPAN: f64 = 8.0;
pub const AFFINE_TOL: f64 = 1e-9;
/// Floating point rounding allowance for "scales by exactly `a`" and "≥ 0".
pub const ROUNDING_TOL: f64 = 1e-12;
pub const RANDOM_INSTANCES: usize = 10_000;

/// Random `(target, logits)` instance on the grid `0..n`. Targets alternate
/// between random positive pmfs and discretized Gaussians.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (LabelGrid<f64>, Pmf<f64>, Vec<f64>) {
    let grid = make_grid(0.0, (n - 1) as f64, 1.0).expect("n >= 2");
    let target = if n > 2 && rng.gen_bool(0.5) {
        let mu = rng.gen_range(0.0..(n - 1) as f64);
        let sigma = rng.gen_range(0.5..(n as f64 / 4.0).max(0.6));
        discretize_gaussian(mu, sigma, &grid).expect("valid gaussian")
    } else {
        Pmf::from_weights((0..n).map(|_| rng.gen_range(-2.0f64..2.0).exp()).collect()).expect("positive weights")
    };
    let scale = rng.gen_range(0.5..3.0);
    let logits = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    (grid, target, logits)
}

/// Worst relative-norm discrepancy between analytic and finite-difference
/// head gradients over random instances.
pub fn head_gradient_check(family: LossConfig<f64>, n: usize, instances: usize, seed: u64) -> Result<f64> {
    let policy = NumericPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (grid, target, logits) = random_instance(&mut rng, n);
        let (analytic, numeric) = match family {
            LossConfig::FullKl => (
                full_kl_grad(&target, &logits, &grid, &policy)?,
                fd_grad_relative(|z: &[f64]| Ok(full_kl_loss(&target, z, &grid, &policy)?.total), &logits, FD_STEP)?,
            ),
            LossConfig::Reference { lambda } => {
                let cfg = ReferenceLossConfig::new(lambda)?;
                (
                    reference_grad(&target, &logits, &grid, &cfg, &policy)?,
                    fd_grad_relative(
                        |z: &[f64]| Ok(reference_loss(&target, z, &grid, &cfg, &policy)?.total),
                        &logits,
                        FD_STEP,
                    )?,
                )
            }
        };
        worst = worst.max(check_grad_norm(&analytic, &numeric, GRAD_TOL)?.max_rel_error);
    }
    Ok(worst)
}

/// Backpropagated parameter gradient of a `[3, 4, 5]` network against finite
/// differences through forward pass and loss.
pub fn network_gradient_check(family: LossConfig<f64>, seed: u64) -> Result<f64> {
    let dims = [3, 4, 5];
    let grid = make_grid(0.0, 2.0, 0.5)?;
    let ds = gen_synthetic(8, 3, &grid, [0.25, 0.3], seed)?;
    let batch: Vec<_> = ds.samples().iter().collect();
    let policy = NumericPolicy::default();
    let mlp: Mlp<f64> = init_mlp(&dims, seed)?;
    let (_, analytic) = mlp.loss_and_grad(&batch, &family, &grid, &policy)?;
    let numeric = fd_grad_relative(
        |p: &[f64]| Ok(Mlp::from_params(&dims, p.to_vec())?.loss_and_grad(&batch, &family, &grid, &policy)?.0.total),
        mlp.params(),
        FD_STEP,
    )?;
    Ok(check_grad_norm(&analytic, &numeric, NETWORK_GRAD_TOL)?.max_rel_error)
}

/// Moment pairs for the closed-form sweep: σ, σ̂ ∈ {0.5, 1, 2, 5, 10} and
/// |μ − μ̂| ∈ {0, 1, 10}.
pub fn gaussian_kl_sweep_pairs() -> Vec<(Moments<f64>, Moments<f64>)> {
    let sigmas = [0.5, 1.0, 2.0, 5.0, 10.0];
    let mut out = Vec::new();
    for &s in &sigmas {
        for &sh in &sigmas {
            for &dmu in &[0.0, 1.0, 10.0] {
                out.push((Moments { mu: 3.0, var: s * s }, Moments { mu: 3.0 + dmu, var: sh * sh }));
            }
        }
    }
    out
}

/// Largest absolute gap between a closed form and the quadrature oracle over
/// the sweep. The closed form is a parameter so the sweep itself can be
/// mutation-tested.
pub fn gaussian_kl_sweep(closed_form: impl Fn(&Moments<f64>, &Moments<f64>) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for (t, p) in gaussian_kl_sweep_pairs() {
        let oracle = numeric_gaussian_kl(&t, &p, QUADRATURE_POINTS, QUADRATURE_SPAN)?;
        let err = (closed_form(&t, &p)? - oracle).abs();
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(worst)
}

/// Under `y → a·y + b`, worst relative change of the full-KL total and worst
/// deviation of the reference `l_exp` from `a·l_exp`.
///
/// `l_exp = |μ̂ − μ|` is a difference of two rounded expectations, so its
/// deviation is measured relative to their magnitude `|μ'| + |μ̂'|` on the
/// moved grid: a few ulps there means the scaling is exact up to rounding.
pub fn affine_invariance_check(scale: f64, offset: f64, instances: usize, seed: u64) -> Result<(f64, f64)> {
    let policy = NumericPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ReferenceLossConfig::new(1.0)?;
    let (mut full_err, mut ref_err) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let n = GRAD_SIZES[i % GRAD_SIZES.len()];
        let (grid, target, logits) = random_instance(&mut rng, n);
        let moved = grid.affine(scale, offset)?;
        let before = full_kl_loss(&target, &logits, &grid, &policy)?;
        let after = full_kl_loss(&target, &logits, &moved, &policy)?;
        if before.l_ld != after.l_ld || before.l_smooth != after.l_smooth {
            full_err = f64::INFINITY;
        }
        full_err = full_err.max((after.total - before.total).abs() / before.total.abs().max(1e-300));
        let r0 = reference_loss(&target, &logits, &grid, &cfg, &policy)?;
        let r1 = reference_loss(&target, &logits, &moved, &cfg, &policy)?;
        let operands = crate::grid::moments(&target, &moved)?.mu.abs()
            + crate::grid::moments(&softmax(&logits)?, &moved)?.mu.abs();
        ref_err = ref_err.max((r1.l_exp - scale * r0.l_exp).abs() / operands.max(1e-300));
    }
    Ok((full_err, ref_err))
}

/// Worst violation of `kl_div(p,p) = 0`, `smoothness(uniform) = 0` and
/// `gaussian_kl(m,m) = 0` (these must be exactly zero).
pub fn identity_check(instances: usize, seed: u64) -> Result<f64> {
    let policy = NumericPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let n = GRAD_SIZES[i % GRAD_SIZES.len()];
        let (grid, target, logits) = random_instance(&mut rng, n);
        let pred = softmax(&logits)?;
        worst = worst.max(kl_div(&target, &target, &policy)?.abs());
        worst = worst.max(kl_div(&pred, &pred, &policy)?.abs());
        worst = worst.max(smoothness(&Pmf::uniform(n)?, &policy)?.abs());
        let m = crate::grid::moments(&target, &grid)?;
        worst = worst.max(gaussian_kl(&m, &m, &policy)?.abs());
    }
    Ok(worst)
}

/// Most negative loss component seen over random instances (0 if none).
pub fn nonnegativity_check(instances: usize, seed: u64) -> Result<f64> {
    let policy = NumericPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ReferenceLossConfig::new(1.0)?;
    let mut worst = 0.0f64;
    for i in 0..instances {
        let n = GRAD_SIZES[i % GRAD_SIZES.len()];
        let (grid, target, logits) = random_instance(&mut rng, n);
        let f = full_kl_loss(&target, &logits, &grid, &policy)?;
        let r = reference_loss(&target, &logits, &grid, &cfg, &policy)?;
        for v in [f.l_ld, f.l_exp, f.l_smooth.unwrap_or(0.0), r.l_ld, r.l_exp] {
            worst = worst.max(-v);
        }
    }
    Ok(worst)
}

/// The full verification suite: head gradients for both families and all
/// sizes, the network gradient, the Gaussian-KL oracle sweep, and the
/// invariance checks.
pub fn verify_suite() -> Result<VerifyReport> {
    verify_suite_with(|t, p| gaussian_kl(t, p, &NumericPolicy::default()))
}

pub fn verify_suite_with(closed_form: impl Fn(&Moments<f64>, &Moments<f64>) -> Result<f64>) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let families = [("full_kl", LossConfig::FullKl), ("reference", LossConfig::Reference { lambda: 1.0 })];
    for (name, family) in families {
        for (k, &n) in GRAD_SIZES.iter().enumerate() {
            let err = head_gradient_check(family, n, GRAD_INSTANCES, 1000 + k as u64)?;
            checks.push(CheckResult::at_most(format!("{name} head gradient n={n}"), err, GRAD_TOL));
        }
    }
    for (name, family) in families {
        let err = network_gradient_check(family, 7)?;
        checks.push(CheckResult::at_most(format!("{name} network gradient [3,4,5]"), err, NETWORK_GRAD_TOL));
    }
    let err = gaussian_kl_sweep(&closed_form)?;
    checks.push(CheckResult::at_most("gaussian KL vs quadrature (75 pairs)", err, GAUSSIAN_KL_TOL));
    let spot = |t: (f64, f64), p: (f64, f64), want: f64| -> Result<f64> {
        Ok((closed_form(&Moments::new(t.0, t.1)?, &Moments::new(p.0, p.1)?)? - want).abs())
    };
    let err = spot((0.0, 1.0), (1.0, 1.0), 0.5)?.max(spot((0.0, 1.0), (0.0, 4.0), 2f64.ln() + 0.125 - 0.5)?);
    checks.push(CheckResult::at_most("gaussian KL spot values", err, 1e-12));

    let (full_err, ref_err) = affine_invariance_check(3.0, 7.0, 1000, 2024)?;
    checks.push(CheckResult::at_most("affine y->3y+7: full-KL total", full_err, AFFINE_TOL));
    checks.push(CheckResult::at_most("affine y->3y+7: reference l_exp x3", ref_err, ROUNDING_TOL));
    checks.push(CheckResult::at_most("identities (kl, smoothness, gaussian)", identity_check(1000, 2025)?, 0.0));
    checks.push(CheckResult::at_most(
        "non-negativity (10^4 instances)",
        nonnegativity_check(RANDOM_INSTANCES, 2026)?,
        ROUNDING_TOL,
    ));
    Ok(VerifyReport { checks })
}
