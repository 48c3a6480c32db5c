//! Feed-forward network with a softmax distribution head, hand-written
//! backpropagation, and the Adam training protocol.
//!
//! Parameters live in one flat vector. Layer `l` maps `dims[l] → dims[l+1]`
//! and occupies `dims[l]·dims[l+1]` weights (row-major, `in × out`) followed
//! by `dims[l+1]` biases. Hidden layers use ReLU; the last layer emits raw
//! logits.
//!
//! Checkpoint text format:
//!
//! ```text
//! fullkl-mlp 1
//! dims 16 64 64 101
//! <one parameter per line, shortest round-trip decimal>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::{moments, softmax, LabelGrid, NumericPolicy};
use crate::losses::{LossBreakdown, LossConfig};
use crate::scalar::Scalar;

const CHECKPOINT_MAGIC: &str = "fullkl-mlp 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    params: Vec<T>,
}

/// Deterministic initialization: weights uniform on `±1/√fan_in`, biases zero.
pub fn init_mlp<T: Scalar>(dims: &[usize], seed: u64) -> Result<Mlp<T>> {
    Mlp::init(dims, seed)
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

impl<T: Scalar> Mlp<T> {
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| T::of(rng.gen_range(-bound..bound))));
            params.extend(std::iter::repeat_n(T::zero(), w[1]));
        }
        Ok(Self { dims: dims.to_vec(), params })
    }

    pub fn from_params(dims: &[usize], params: Vec<T>) -> Result<Self> {
        validate_dims(dims)?;
        if params.len() != param_count(dims) {
            return Err(Error::LengthMismatch { what: "parameters", expected: param_count(dims), got: params.len() });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { what: "parameters", index: i });
        }
        Ok(Self { dims: dims.to_vec(), params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(weights, biases)` of layer `l`; weights are `in × out` row-major.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (start, n_in, n_out) = self.layer_offset(l);
        let (w, rest) = self.params[start..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let start = param_count(&self.dims[..=l]);
        (start, self.dims[l], self.dims[l + 1])
    }

    pub fn forward(&self, features: &[T]) -> Result<Vec<T>> {
        let acts = self.forward_trace(features)?;
        Ok(acts.into_iter().next_back().unwrap_or_default())
    }

    /// Activations of every layer, input first and logits last.
    fn forward_trace(&self, features: &[T]) -> Result<Vec<Vec<T>>> {
        if features.len() != self.input_dim() {
            return Err(Error::LengthMismatch { what: "features", expected: self.input_dim(), got: features.len() });
        }
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(features.to_vec());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let x = &acts[l];
            let n_out = b.len();
            let mut out = b.to_vec();
            for (i, &xi) in x.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let row = &w[i * n_out..(i + 1) * n_out];
                for (o, &wij) in out.iter_mut().zip(row) {
                    *o = *o + xi * wij;
                }
            }
            if l + 1 < self.num_layers() {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            if let Some(i) = out.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "activations", index: i });
            }
            acts.push(out);
        }
        Ok(acts)
    }

    /// Accumulates `scale · ∂L/∂θ` into `grad` given `∂L/∂logits`.
    fn backward(&self, acts: &[Vec<T>], dlogits: &[T], scale: T, grad: &mut [T]) {
        let mut delta: Vec<T> = dlogits.iter().map(|&d| d * scale).collect();
        for l in (0..self.num_layers()).rev() {
            let (start, n_in, n_out) = self.layer_offset(l);
            let x = &acts[l];
            let (gw, rest) = grad[start..].split_at_mut(n_in * n_out);
            for (gb, &d) in rest[..n_out].iter_mut().zip(&delta) {
                *gb = *gb + d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                for (g, &d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(&delta) {
                    *g = *g + xi * d;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[start..start + n_in * n_out];
            // ReLU: the derivative is zero wherever the stored activation is zero
            delta = (0..n_in)
                .map(|i| {
                    if x[i] > T::zero() {
                        w[i * n_out..(i + 1) * n_out].iter().zip(&delta).map(|(&wij, &d)| wij * d).sum()
                    } else {
                        T::zero()
                    }
                })
                .collect();
        }
    }

    /// Mean loss over `batch` and the mean parameter gradient, accumulated in
    /// batch order.
    pub fn loss_and_grad(
        &self,
        batch: &[&Sample<T>],
        loss: &LossConfig<T>,
        grid: &LabelGrid<T>,
        policy: &NumericPolicy<T>,
    ) -> Result<(LossBreakdown<T>, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let scale = T::one() / T::of_usize(batch.len());
        let mut grad = vec![T::zero(); self.params.len()];
        let mut parts = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            let acts = self.forward_trace(&s.features).map_err(|e| diverged(k, s, e))?;
            let (b, dlogits) = loss
                .loss_and_grad(&s.target_pmf, &acts[acts.len() - 1], grid, policy)
                .map_err(|e| diverged(k, s, e))?;
            if !b.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at batch index {k} (sample {})", s.id)));
            }
            if dlogits.iter().any(|d| !d.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient at batch index {k} (sample {})", s.id)));
            }
            self.backward(&acts, &dlogits, scale, &mut grad);
            parts.push(b);
        }
        Ok((LossBreakdown::mean(&parts)?, grad))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "dims {}", dims.join(" "))?;
        for p in &self.params {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(file).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("bad checkpoint: {m}"));
        let mut lines = BufReader::new(r).lines();
        let mut next =
            || -> Result<Option<String>> { lines.next().transpose().map_err(|e| Error::io("<checkpoint>", e)) };
        if next()?.as_deref() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header".into()));
        }
        let dims_line = next()?.ok_or_else(|| bad("missing dims".into()))?;
        let dims = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| bad("missing dims".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad(format!("bad dim {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut params = Vec::new();
        while let Some(line) = next()? {
            if line.is_empty() {
                continue;
            }
            params.push(line.parse::<T>().map_err(|_| bad(format!("bad parameter {line:?}")))?);
        }
        Self::from_params(&dims, params)
    }
}

fn diverged<T: Scalar>(k: usize, s: &Sample<T>, e: Error) -> Error {
    Error::Diverged(format!("batch index {k} (sample {}): {e}", s.id))
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: T, beta1: T, beta2: T, epsilon: T) -> Self {
        Self { lr, beta1, beta2, epsilon, step: 0, m: vec![T::zero(); n_params], v: vec![T::zero(); n_params] }
    }

    /// `lr = 1e-3, β = (0.9, 0.999), ε = 1e-8`.
    pub fn with_defaults(n_params: usize) -> Self {
        Self::new(n_params, T::of(1e-3), T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch { what: "optimizer state", expected: self.m.len(), got: grad.len() });
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Training protocol. Defaults: Adam
/// (1e-3, 0.9, 0.999, 1e-8), lr ×0.1 every 30 epochs, batch 128.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub adam_eps: T,
    pub lr_decay_factor: T,
    pub lr_decay_every: usize,
    pub hidden: Vec<usize>,
    pub loss: LossConfig<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: T::of(1e-3),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            adam_eps: T::of(1e-8),
            lr_decay_factor: T::of(0.1),
            lr_decay_every: 30,
            hidden: vec![64, 64],
            loss: LossConfig::FullKl,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_decay_factor > T::zero() && self.lr_decay_factor <= T::one()) {
            return bad("lr_decay_factor must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        if !(self.lr >= T::zero()) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if !(self.beta1 >= T::zero() && self.beta1 < T::one() && self.beta2 >= T::zero() && self.beta2 < T::one()) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > T::zero()) {
            return bad("adam_eps must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1");
        }
        self.loss.validate()
    }

    pub fn dims(&self, d_in: usize, n_bins: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend(&self.hidden);
        dims.push(n_bins);
        dims
    }
}

/// Step schedule: `lr · factor^⌊epoch / every⌋` (epochs counted from 0).
pub fn lr_at<T: Scalar>(epoch: usize, cfg: &TrainConfig<T>) -> T {
    let k = epoch / cfg.lr_decay_every.max(1);
    cfg.lr * cfg.lr_decay_factor.powi(i32::try_from(k).unwrap_or(i32::MAX))
}

/// One optimizer step on the mean gradient of `batch`.
pub fn train_step<T: Scalar>(
    mlp: &mut Mlp<T>,
    opt: &mut Adam<T>,
    batch: &[&Sample<T>],
    loss: &LossConfig<T>,
    grid: &LabelGrid<T>,
    policy: &NumericPolicy<T>,
) -> Result<LossBreakdown<T>> {
    let (mean, grad) = mlp.loss_and_grad(batch, loss, grid, policy)?;
    opt.update(&mut mlp.params, &grad)?;
    if mlp.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(mean)
}

/// Expectation of the predicted pmf.
pub fn predict<T: Scalar>(mlp: &Mlp<T>, features: &[T], grid: &LabelGrid<T>) -> Result<T> {
    let logits = mlp.forward(features)?;
    Ok(moments(&softmax(&logits)?, grid)?.mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics<T> {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBreakdown<T>,
    /// Label units.
    pub mae: T,
}

/// Mean loss breakdown and MAE over a dataset, in dataset order. The epoch
/// field is left at 0 for the caller to fill in.
pub fn evaluate<T: Scalar>(
    mlp: &Mlp<T>,
    ds: &Dataset<T>,
    loss: &LossConfig<T>,
    policy: &NumericPolicy<T>,
) -> Result<Metrics<T>> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let grid = ds.grid();
    let mut parts = Vec::with_capacity(ds.len());
    let mut abs_err = T::zero();
    for s in ds.samples() {
        let logits = mlp.forward(&s.features)?;
        let b = loss.loss(&s.target_pmf, &logits, grid, policy)?;
        let mu_hat = moments(&softmax(&logits)?, grid)?.mu;
        abs_err = abs_err + (mu_hat - s.target_mu).abs();
        parts.push(b);
    }
    Ok(Metrics {
        epoch: 0,
        split: ds.split_tag(),
        loss: LossBreakdown::mean(&parts)?,
        mae: abs_err / T::of_usize(ds.len()),
    })
}

/// Result of [`fit`]: final parameters and one train and one validation
/// record per epoch (epochs numbered from 1).
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub mlp: Mlp<T>,
    pub history: Vec<Metrics<T>>,
}

/// Full training run. Each epoch visits the training set in a seeded
/// permutation, in mini-batches of `batch_size`, then evaluates both splits.
pub fn fit<T: Scalar>(
    cfg: &TrainConfig<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    policy: &NumericPolicy<T>,
) -> Result<TrainRun<T>> {
    fit_with(cfg, train, val, policy, |_| {})
}

/// [`fit`] with a callback invoked after each epoch's evaluation.
pub fn fit_with<T: Scalar>(
    cfg: &TrainConfig<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    policy: &NumericPolicy<T>,
    mut on_epoch: impl FnMut(&[Metrics<T>]),
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if train.grid() != val.grid() {
        return Err(Error::InvalidArgument("train and validation grids differ".into()));
    }
    let grid = train.grid();
    let mut mlp = Mlp::init(&cfg.dims(train.feature_dim(), grid.len()), cfg.seed)?;
    let mut opt = Adam::new(mlp.params.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(2 * cfg.epochs);

    for epoch in 0..cfg.epochs {
        opt.lr = lr_at(epoch, cfg);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train.samples()[i]).collect();
            train_step(&mut mlp, &mut opt, &batch, &cfg.loss, grid, policy)
                .map_err(|e| Error::Diverged(format!("epoch {}: {e}", epoch + 1)))?;
        }
        for ds in [train, val] {
            let mut m = evaluate(&mlp, ds, &cfg.loss, policy)?;
            m.epoch = epoch + 1;
            if !m.loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {}: non-finite {} loss", epoch + 1, m.split)));
            }
            history.push(m);
        }
        on_epoch(&history[history.len() - 2..]);
    }
    Ok(TrainRun { mlp, history })
}
