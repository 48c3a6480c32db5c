//! Distribution-regression datasets: a synthetic generator and a CSV format
//! for externally annotated `(mean, std)` labels.
//!
//! CSV layout: header `id,f0,...,f{d-1},mean,std`, one sample per line,
//! `.` as decimal separator.

use std::fmt;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{discretize_gaussian, LabelGrid, Pmf};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Full,
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub features: Vec<T>,
    pub target_mu: T,
    pub target_sigma: T,
    pub target_pmf: Pmf<T>,
}

impl<T: Scalar> Sample<T> {
    /// Builds a sample and materializes its target pmf on `grid`.
    pub fn new(
        id: impl Into<String>,
        features: Vec<T>,
        target_mu: T,
        target_sigma: T,
        grid: &LabelGrid<T>,
    ) -> Result<Self> {
        if let Some(i) = features.iter().position(|f| !f.is_finite()) {
            return Err(Error::NonFinite { what: "features", index: i });
        }
        if !(target_mu >= grid.min() && target_mu <= grid.max()) {
            return Err(Error::InvalidArgument(format!(
                "target mean {target_mu} outside grid span [{}, {}]",
                grid.min(),
                grid.max()
            )));
        }
        let target_pmf = discretize_gaussian(target_mu, target_sigma, grid)?;
        Ok(Self { id: id.into(), features, target_mu, target_sigma, target_pmf })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
    grid: LabelGrid<T>,
    split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>, grid: LabelGrid<T>, split: Split) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("dataset"))?;
        let d = first.features.len();
        for s in &samples {
            if s.features.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has {} features, expected {d}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.target_pmf.len() != grid.len() {
                return Err(Error::LengthMismatch {
                    what: "target pmf",
                    expected: grid.len(),
                    got: s.target_pmf.len(),
                });
            }
        }
        Ok(Self { samples, grid, split })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn grid(&self) -> &LabelGrid<T> {
        &self.grid
    }

    pub fn split_tag(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.len()
    }
}

/// Seed for the fixed coefficients of the synthetic target map, so every
/// generated dataset poses the same regression task.
const TARGET_MAP_SEED: u64 = 0x5EED_0F7A_26E7;
const WAVES: usize = 4;

/// Smooth feature → mean map: an affine part plus a mixture of sinusoids
/// along random directions, squashed with `tanh` into `[lo, hi]`.
struct TargetMap {
    linear: Vec<f64>,
    waves: Vec<(Vec<f64>, f64, f64, f64)>,
    scale: f64,
}

impl TargetMap {
    fn new(d_in: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TARGET_MAP_SEED);
        let linear: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let waves: Vec<_> = (0..WAVES)
            .map(|_| {
                let mut dir: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|x| *x /= norm);
                let freq = rng.gen_range(1.0..3.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.5..1.5);
                (dir, freq, phase, amp)
            })
            .collect();
        // Standard deviation of the raw map for uniform features (var 1/3 each).
        let var = linear.iter().map(|a| a * a / 3.0).sum::<f64>() + waves.iter().map(|w| w.3 * w.3 / 2.0).sum::<f64>();
        Self { linear, waves, scale: var.sqrt().max(1e-12) }
    }

    fn unit(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(a, xi)| a * xi).sum();
        let wav: f64 = self
            .waves
            .iter()
            .map(|(dir, freq, phase, amp)| {
                let proj: f64 = dir.iter().zip(x).map(|(u, xi)| u * xi).sum();
                amp * (freq * proj * std::f64::consts::PI + phase).sin()
            })
            .sum();
        0.5 + 0.5 * ((lin + wav) / self.scale).tanh()
    }
}

/// Synthetic distribution-regression data.
///
/// Features are uniform on `[−1, 1]^d_in`; the target mean is a fixed smooth
/// function of the features mapped into `[min + 3σ_max, max − 3σ_max]`; the
/// target std is uniform on `sigma_range` and independent of the features.
pub fn gen_synthetic<T: Scalar>(
    n: usize,
    d_in: usize,
    grid: &LabelGrid<T>,
    sigma_range: [T; 2],
    seed: u64,
) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Empty("synthetic dataset"));
    }
    if d_in == 0 {
        return Err(Error::InvalidArgument("d_in must be at least 1".into()));
    }
    let step = grid.spacing().ok_or_else(|| Error::InvalidGrid("synthetic data needs a uniform grid".into()))?;
    let [s_lo, s_hi] = sigma_range;
    let floor = step * T::of(0.5);
    if !(s_lo >= floor && s_hi >= s_lo && s_hi <= grid.span() / T::of(4.0)) {
        return Err(Error::InvalidArgument(format!(
            "sigma_range [{s_lo}, {s_hi}] must lie within [{floor}, {}] and be ordered",
            grid.span() / T::of(4.0)
        )));
    }
    let lo = (grid.min() + T::of(3.0) * s_hi).to_f64_lossy();
    let hi = (grid.max() - T::of(3.0) * s_hi).to_f64_lossy();
    if lo > hi {
        return Err(Error::InvalidArgument(format!("grid too narrow to keep means 3 sigma ({s_hi}) from its edges")));
    }
    let (s_lo, s_hi) = (s_lo.to_f64_lossy(), s_hi.to_f64_lossy());

    let map = TargetMap::new(d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let sigma = if s_hi > s_lo { rng.gen_range(s_lo..=s_hi) } else { s_lo };
            let mu = (lo + (hi - lo) * map.unit(&x)).clamp(lo, hi);
            Sample::new(format!("s{i}"), x.into_iter().map(T::of).collect(), T::of(mu), T::of(sigma), grid)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, grid.clone(), Split::Full)
}

/// Rows accepted by [`load_csv_report`] whose Gaussian target is visibly
/// truncated by the grid edges (mean within 3σ of an edge).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    pub edge_truncated: Vec<usize>,
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, grid: &LabelGrid<T>) -> Result<Dataset<T>> {
    load_csv_report(path, grid).map(|(ds, _)| ds)
}

/// Loads a CSV dataset. Row numbers in errors and in the report are file
/// line numbers (the header is line 1).
pub fn load_csv_report<T: Scalar>(path: impl AsRef<Path>, grid: &LabelGrid<T>) -> Result<(Dataset<T>, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let row_err = |row: usize, message: String| Error::Row { path: path.to_path_buf(), row, message };

    let headers = reader.headers()?.clone();
    let d = check_header(&headers).map_err(|m| row_err(1, m))?;

    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| row_err(line, e.to_string()))?;
        if record.len() != d + 3 {
            return Err(row_err(line, format!("expected {} fields, found {}", d + 3, record.len())));
        }
        let num = |j: usize| -> Result<f64> {
            let raw = &record[j];
            let v: f64 = raw
                .parse()
                .map_err(|_| row_err(line, format!("column {} is not a number: {raw:?}", headers[j].to_owned())))?;
            if !v.is_finite() {
                return Err(row_err(line, format!("column {} is not finite", &headers[j])));
            }
            Ok(v)
        };
        let features = (1..=d).map(|j| num(j).map(T::of)).collect::<Result<Vec<T>>>()?;
        let mu = T::of(num(d + 1)?);
        let sigma = T::of(num(d + 2)?);
        let sample = Sample::new(&record[0], features, mu, sigma, grid).map_err(|e| row_err(line, e.to_string()))?;
        let edge = T::of(3.0) * sigma;
        if mu - grid.min() < edge || grid.max() - mu < edge {
            report.edge_truncated.push(line);
        }
        samples.push(sample);
    }
    report.rows = samples.len();
    if samples.is_empty() {
        return Err(row_err(1, "no data rows".into()));
    }
    Ok((Dataset::new(samples, grid.clone(), Split::Full)?, report))
}

fn check_header(headers: &csv::StringRecord) -> std::result::Result<usize, String> {
    let n = headers.len();
    if n < 4 {
        return Err(format!("header has {n} columns; expected id,f0,...,mean,std"));
    }
    if &headers[0] != "id" || &headers[n - 2] != "mean" || &headers[n - 1] != "std" {
        return Err("header must start with `id` and end with `mean,std`".into());
    }
    for (k, h) in headers.iter().skip(1).take(n - 3).enumerate() {
        if h != format!("f{k}") {
            return Err(format!("header column {} is {h:?}, expected \"f{k}\"", k + 2));
        }
    }
    Ok(n - 3)
}

pub fn write_csv<T: Scalar>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let d = ds.feature_dim();
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|k| format!("f{k}")));
    header.push("mean".into());
    header.push("std".into());
    w.write_record(&header)?;
    for s in ds.samples() {
        let mut row = vec![s.id.clone()];
        row.extend(s.features.iter().map(|f| f.to_string()));
        row.push(s.target_mu.to_string());
        row.push(s.target_sigma.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Seeded shuffle, then the first `round(n·val_fraction)` samples become the
/// validation split.
pub fn split<T: Scalar>(ds: &Dataset<T>, val_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let n = ds.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} leaves an empty split for {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].clone()).collect::<Vec<_>>();
    let val = Dataset::new(pick(&order[..n_val]), ds.grid.clone(), Split::Val)?;
    let train = Dataset::new(pick(&order[n_val..]), ds.grid.clone(), Split::Train)?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, moments};
    use std::io::Write;

    fn grid() -> LabelGrid<f64> {
        make_grid(0.0, 100.0, 1.0).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(50, 4, &grid(), [2.0, 6.0], 7).unwrap();
        let b = gen_synthetic(50, 4, &grid(), [2.0, 6.0], 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(50, 4, &grid(), [2.0, 6.0], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_bounds_and_moment_recovery() {
        let g = grid();
        let ds = gen_synthetic(1000, 16, &g, [2.0, 6.0], 1).unwrap();
        assert_eq!(ds.len(), 1000);
        for s in ds.samples() {
            assert!((18.0..=82.0).contains(&s.target_mu), "{}", s.target_mu);
            assert!((2.0..=6.0).contains(&s.target_sigma));
            assert!(s.features.iter().all(|f| (-1.0..=1.0).contains(f)));
            let sum: f64 = s.target_pmf.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let m = moments(&s.target_pmf, &g).unwrap();
            assert!((m.mu - s.target_mu).abs() / s.target_mu <= 0.02);
            let var = s.target_sigma * s.target_sigma;
            assert!((m.var - var).abs() / var <= 0.02);
        }
    }

    #[test]
    fn synthetic_targets_spread_over_the_range() {
        let ds = gen_synthetic(2000, 16, &grid(), [2.0, 6.0], 3).unwrap();
        let mus: Vec<f64> = ds.samples().iter().map(|s| s.target_mu).collect();
        let mean = mus.iter().sum::<f64>() / mus.len() as f64;
        let sd = (mus.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / mus.len() as f64).sqrt();
        assert!(sd > 8.0, "target means too concentrated: sd {sd}");
    }

    #[test]
    fn synthetic_rejects_bad_sigma_range() {
        assert!(gen_synthetic(10, 2, &grid(), [0.4, 6.0], 0).is_err());
        assert!(gen_synthetic(10, 2, &grid(), [2.0, 26.0], 0).is_err());
        assert!(gen_synthetic(10, 2, &grid(), [6.0, 2.0], 0).is_err());
        assert!(gen_synthetic(0, 2, &grid(), [2.0, 6.0], 0).is_err());
        let narrow = make_grid(0.0, 4.0, 1.0).unwrap();
        assert!(gen_synthetic(5, 2, &narrow, [0.5, 1.0], 0).is_err());
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_valid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ok.csv", "id,f0,f1,mean,std\na,0.1,0.2,30,3\nb,-1,1,50.5,2\nc,0,0,2,4\n");
        let (ds, report) = load_csv_report(&p, &grid()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples()[1].id, "b");
        assert_eq!(ds.samples()[1].target_mu, 50.5);
        assert_eq!(report.rows, 3);
        assert_eq!(report.edge_truncated, vec![4]);
    }

    #[test]
    fn load_rejects_zero_std_with_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.csv", "id,f0,mean,std\na,0.1,30,3\nb,0.2,40,0\n");
        let err = load_csv(&p, &grid()).unwrap_err();
        assert!(matches!(err, Error::Row { row: 3, .. }), "{err}");
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_csv(dir.path().join("missing.csv"), &grid()), Err(Error::Io { .. })));
        let p = write(&dir, "hdr.csv", "id,x0,mean,std\na,1,30,3\n");
        assert!(matches!(load_csv(&p, &grid()), Err(Error::Row { row: 1, .. })));
        let p = write(&dir, "num.csv", "id,f0,mean,std\na,abc,30,3\n");
        assert!(matches!(load_csv(&p, &grid()), Err(Error::Row { row: 2, .. })));
        let p = write(&dir, "off.csv", "id,f0,mean,std\na,0,30,3\nb,0,120,3\n");
        assert!(matches!(load_csv(&p, &grid()), Err(Error::Row { row: 3, .. })));
        let p = write(&dir, "short.csv", "id,f0,mean,std\na,0,30\n");
        assert!(matches!(load_csv(&p, &grid()), Err(Error::Row { row: 2, .. })));
        let p = write(&dir, "empty.csv", "id,f0,mean,std\n");
        assert!(load_csv(&p, &grid()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let ds = gen_synthetic(40, 3, &g, [2.0, 6.0], 11).unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p, &g).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.id, b.id);
            assert!((a.target_mu - b.target_mu).abs() <= 1e-9);
            assert!((a.target_sigma - b.target_sigma).abs() <= 1e-9);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn split_partitions() {
        let ds = gen_synthetic(100, 2, &grid(), [2.0, 6.0], 0).unwrap();
        let (train, val) = split(&ds, 0.2, 5).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        assert_eq!(train.split_tag(), Split::Train);
        assert_eq!(val.split_tag(), Split::Val);
        let (train2, val2) = split(&ds, 0.2, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);

        let mut ids: Vec<&str> = train.samples().iter().chain(val.samples()).map(|s| s.id.as_str()).collect();
        ids.sort();
        let mut orig: Vec<&str> = ds.samples().iter().map(|s| s.id.as_str()).collect();
        orig.sort();
        assert_eq!(ids, orig);

        assert!(split(&ds, 0.0, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.001, 0).is_err());
    }
}
