//! Datasets, Dirichlet non-IID sharding, streaming schedules and the
//! weak/strong augmentation pair.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Feature matrix plus one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() || inputs.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Shape {
                context: "dataset labels",
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn class_histogram(&self, idx: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in idx {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Moves `per_class` examples of every class into a held-out set.
    pub fn split_holdout(&self, per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pools = class_pools(&self.labels, self.num_classes);
        let mut held = Vec::with_capacity(per_class * self.num_classes);
        for (c, pool) in pools.iter_mut().enumerate() {
            if pool.len() <= per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} examples, cannot hold out {per_class}",
                    pool.len()
                )));
            }
            pool.shuffle(&mut rng);
            held.extend(pool.drain(..per_class));
        }
        let mut keep: Vec<usize> = pools.into_iter().flatten().collect();
        keep.sort_unstable();
        held.sort_unstable();
        Ok((self.select(&keep)?, self.select(&held)?))
    }

    /// Parses `label,f1,...,fd` rows (UTF-8, no header).
    pub fn from_csv_reader<R: Read>(reader: R, num_classes: usize, scale: bool) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut dim: Option<usize> = None;
        let mut record = csv::StringRecord::new();
        loop {
            let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            if !more {
                break;
            }
            let line = record.position().map_or(0, |p| p.line());
            if record.len() == 1 && record[0].is_empty() {
                continue;
            }
            if record.len() < 2 {
                return Err(Error::Parse {
                    line,
                    message: "expected a label followed by at least one feature".into(),
                });
            }
            let label: usize = record[0].parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid label {:?}", &record[0]),
            })?;
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    line,
                    label,
                    num_classes,
                });
            }
            let d = record.len() - 1;
            match dim {
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected {expected} features, found {d}"),
                    })
                }
                _ => {}
            }
            for (j, field) in record.iter().skip(1).enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("feature {} is not numeric: {field:?}", j + 1),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("feature {} is not finite", j + 1),
                    });
                }
                data.push(v);
            }
            labels.push(label);
        }
        let Some(dim) = dim else {
            return Err(Error::EmptyDataset);
        };
        let mut inputs = Matrix::from_vec(labels.len(), dim, data)?;
        if scale {
            min_max_scale(&mut inputs);
        }
        Dataset::new(inputs, labels, num_classes)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for (row, label) in self.inputs.iter_rows().zip(&self.labels) {
            out.push_str(&label.to_string());
            for v in row {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-feature min-max scaling into [0, 1]. Constant features map to 0.
fn min_max_scale(m: &mut Matrix) {
    let cols = m.cols();
    let mut lo = vec![f64::INFINITY; cols];
    let mut hi = vec![f64::NEG_INFINITY; cols];
    for row in m.iter_rows() {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for i in 0..m.rows() {
        for (j, v) in m.row_mut(i).iter_mut().enumerate() {
            let range = hi[j] - lo[j];
            *v = if range.is_infinite() {
                // Span overflows f64; halving every term keeps it finite.
                (*v / 2.0 - lo[j] / 2.0) / (hi[j] / 2.0 - lo[j] / 2.0)
            } else if range > 0.0 {
                (*v - lo[j]) / range
            } else {
                0.0
            };
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, num_classes: usize, scale: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_csv_reader(file, num_classes, scale)
}

/// Gaussian blobs: class `c` is centred on a seeded point of the unit sphere
/// and its examples are `center + N(0, spread^2 I)`. Rows are class-major.
pub fn gen_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be >= 1".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be >= 1".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| std_normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &x in center {
                let noise = std_normal.sample(&mut rng);
                data.push(x + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, data)?,
        labels,
        num_classes,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "at")]
pub enum LabelPlacement {
    /// Each client holds `per_client` labeled examples.
    Client { per_client: usize },
    /// A class-balanced pool of `total` labeled examples stays at the server.
    Server { total: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardPlan {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub labels: LabelPlacement,
    /// Unlabeled examples per client; `None` splits the remaining pool evenly.
    pub unlabeled_per_client: Option<usize>,
    pub seed: u64,
}

impl ShardPlan {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet_alpha must be positive, got {}",
                self.dirichlet_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub stream_splits: Option<Vec<Vec<usize>>>,
    /// The client's Dirichlet class prior.
    pub class_prior: Vec<f64>,
    /// Draws that fell back to other classes because the preferred class pool ran dry.
    pub fallback_draws: usize,
}

impl ClientShard {
    /// Unlabeled examples visible on the client's `participation`-th selection
    /// (0-based). Streaming schedules wrap around after the last segment.
    pub fn visible_unlabeled(&self, participation: usize) -> &[usize] {
        match &self.stream_splits {
            Some(splits) if !splits.is_empty() => &splits[participation % splits.len()],
            _ => &self.unlabeled_idx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sharding {
    pub clients: Vec<ClientShard>,
    /// Labeled pool retained by the server (labels-at-server only).
    pub server_labeled: Vec<usize>,
}

fn class_pools(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    pools
}

/// Draws `p ~ Dirichlet(alpha * 1)`.
///
/// Sampled in log space (`G_{a+1} * U^{1/a}` has the `Gamma(a)` law) so that
/// very small concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma({alpha}): {e}")))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>();
            // u == 0 has probability ~2^-53; clamp to keep the log finite.
            g.ln() + u.max(f64::MIN_POSITIVE).ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / sum).collect())
}

/// Takes `n` examples from the class pools, choosing each example's class
/// from `prior` restricted to non-empty pools. Returns the indices and the
/// number of fallback draws (prior mass entirely on exhausted classes).
fn draw_by_prior<R: Rng + ?Sized>(
    pools: &mut [Vec<usize>],
    prior: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(n);
    let mut fallbacks = 0;
    for _ in 0..n {
        let mut weights: Vec<f64> = prior
            .iter()
            .zip(pools.iter())
            .map(|(&p, pool)| if pool.is_empty() { 0.0 } else { p })
            .collect();
        let mut total: f64 = weights.iter().sum();
        if total.is_nan() || total <= 0.0 {
            fallbacks += 1;
            weights = pools.iter().map(|p| p.len() as f64).collect();
            total = weights.iter().sum();
            if total == 0.0 {
                return Err(Error::InvalidArgument(
                    "example pool exhausted while sharding".into(),
                ));
            }
        }
        let mut target = rng.random::<f64>() * total;
        let mut class = weights.len() - 1;
        for (c, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                class = c;
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        out.push(pools[class].pop().expect("class pool is non-empty"));
    }
    Ok((out, fallbacks))
}

/// Dirichlet non-IID sharding with equal per-client quotas.
pub fn dirichlet_shard(ds: &Dataset, plan: &ShardPlan) -> Result<Sharding> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let num_classes = ds.num_classes();
    let mut pools = class_pools(ds.labels(), num_classes);
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut server_labeled = Vec::new();
    if let LabelPlacement::Server { total } = plan.labels {
        for (c, pool) in pools.iter_mut().enumerate() {
            let want = total / num_classes + usize::from(c < total % num_classes);
            if pool.len() < want {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} examples, server pool needs {want}",
                    pool.len()
                )));
            }
            server_labeled.extend(pool.split_off(pool.len() - want));
        }
        server_labeled.sort_unstable();
    }

    let priors: Vec<Vec<f64>> = (0..plan.num_clients)
        .map(|_| sample_dirichlet(plan.dirichlet_alpha, num_classes, &mut rng))
        .collect::<Result<_>>()?;
    let mut clients: Vec<ClientShard> = priors
        .into_iter()
        .enumerate()
        .map(|(client_id, class_prior)| ClientShard {
            client_id,
            labeled_idx: Vec::new(),
            unlabeled_idx: Vec::new(),
            stream_splits: None,
            class_prior,
            fallback_draws: 0,
        })
        .collect();

    if let LabelPlacement::Client { per_client } = plan.labels {
        let remaining: usize = pools.iter().map(Vec::len).sum();
        if per_client * plan.num_clients > remaining {
            return Err(Error::InvalidArgument(format!(
                "{} clients x {per_client} labeled examples exceed the {remaining} available",
                plan.num_clients
            )));
        }
        for shard in &mut clients {
            let (idx, fb) = draw_by_prior(&mut pools, &shard.class_prior, per_client, &mut rng)?;
            shard.labeled_idx = idx;
            shard.fallback_draws += fb;
        }
    }

    let remaining: usize = pools.iter().map(Vec::len).sum();
    let quota = plan
        .unlabeled_per_client
        .unwrap_or(remaining / plan.num_clients);
    if quota == 0 {
        return Err(Error::InvalidArgument(
            "dataset too small: clients would receive no unlabeled examples".into(),
        ));
    }
    if quota * plan.num_clients > remaining {
        return Err(Error::InvalidArgument(format!(
            "{} clients x {quota} unlabeled examples exceed the {remaining} available",
            plan.num_clients
        )));
    }
    for shard in &mut clients {
        let (idx, fb) = draw_by_prior(&mut pools, &shard.class_prior, quota, &mut rng)?;
        shard.unlabeled_idx = idx;
        shard.fallback_draws += fb;
    }
    Ok(Sharding {
        clients,
        server_labeled,
    })
}

fn segment_sizes(n: usize, steps: usize) -> impl Iterator<Item = usize> {
    (0..steps).map(move |k| n / steps + usize::from(k < n % steps))
}

/// Splits the unlabeled pool into `num_steps` contiguous near-equal segments.
pub fn make_stream_schedule(shard: &ClientShard, num_steps: usize) -> Result<ClientShard> {
    check_steps(shard, num_steps)?;
    let mut splits = Vec::with_capacity(num_steps);
    let mut start = 0;
    for size in segment_sizes(shard.unlabeled_idx.len(), num_steps) {
        splits.push(shard.unlabeled_idx[start..start + size].to_vec());
        start += size;
    }
    Ok(ClientShard {
        stream_splits: Some(splits),
        ..shard.clone()
    })
}

/// Streaming schedule whose segments are themselves class-skewed: each
/// segment draws its own `Dirichlet(alpha)` class preference and fills its
/// quota from the client's unlabeled pool.
pub fn make_skewed_stream_schedule(
    shard: &ClientShard,
    labels: &[usize],
    num_classes: usize,
    num_steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<ClientShard> {
    check_steps(shard, num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = vec![Vec::new(); num_classes];
    for &i in &shard.unlabeled_idx {
        pools[labels[i]].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut splits = Vec::with_capacity(num_steps);
    let mut fallbacks = 0;
    for size in segment_sizes(shard.unlabeled_idx.len(), num_steps) {
        let prior = sample_dirichlet(alpha, num_classes, &mut rng)?;
        let (seg, fb) = draw_by_prior(&mut pools, &prior, size, &mut rng)?;
        fallbacks += fb;
        splits.push(seg);
    }
    Ok(ClientShard {
        stream_splits: Some(splits),
        fallback_draws: shard.fallback_draws + fallbacks,
        ..shard.clone()
    })
}

fn check_steps(shard: &ClientShard, num_steps: usize) -> Result<()> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("num_steps must be >= 1".into()));
    }
    if shard.unlabeled_idx.len() < num_steps {
        return Err(Error::InvalidArgument(format!(
            "client {} has {} unlabeled examples, fewer than {num_steps} streaming steps",
            shard.client_id,
            shard.unlabeled_idx.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub weak_shift_fraction: f64,
    pub strong_noise_sigma: f64,
    pub strong_mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_noise_sigma: 0.05,
            weak_shift_fraction: 0.02,
            strong_noise_sigma: 0.3,
            strong_mask_prob: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            weak_noise_sigma: 0.0,
            weak_shift_fraction: 0.0,
            strong_noise_sigma: 0.0,
            strong_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.weak_noise_sigma >= 0.0 && self.weak_noise_sigma.is_finite()) {
            return bad(format!("weak_noise_sigma = {}", self.weak_noise_sigma));
        }
        if !(0.0..1.0).contains(&self.weak_shift_fraction) {
            return bad(format!(
                "weak_shift_fraction must be in [0, 1), got {}",
                self.weak_shift_fraction
            ));
        }
        if !(self.strong_noise_sigma >= self.weak_noise_sigma
            && self.strong_noise_sigma.is_finite())
        {
            return bad(format!(
                "strong_noise_sigma ({}) must be >= weak_noise_sigma ({})",
                self.strong_noise_sigma, self.weak_noise_sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return bad(format!(
                "strong_mask_prob must be in [0, 1], got {}",
                self.strong_mask_prob
            ));
        }
        Ok(())
    }
}

/// Adds `N(0, sigma^2)` noise and a per-example shift vector whose entries
/// are uniform in `±shift_fraction * (max - min)` of that example's features.
fn perturb<R: Rng + ?Sized>(
    inputs: &Matrix,
    sigma: f64,
    shift_fraction: f64,
    rng: &mut R,
) -> Matrix {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = inputs.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let max_shift = shift_fraction * (hi - lo);
        for v in row.iter_mut() {
            let shift = rng.random_range(-1.0..1.0) * max_shift;
            let noise: f64 = std_normal.sample(rng);
            *v += shift + sigma * noise;
        }
    }
    out
}

pub fn weak_augment<R: Rng + ?Sized>(inputs: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Matrix {
    perturb(inputs, cfg.weak_noise_sigma, cfg.weak_shift_fraction, rng)
}

/// Shift plus stronger noise, then zeroes each coordinate with
/// probability `strong_mask_prob`.
pub fn strong_augment<R: Rng + ?Sized>(
    inputs: &Matrix,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Matrix {
    let mut out = perturb(inputs, cfg.strong_noise_sigma, cfg.weak_shift_fraction, rng);
    for i in 0..out.rows() {
        for v in out.row_mut(i) {
            if rng.random::<f64>() < cfg.strong_mask_prob {
                *v = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_shape_and_histogram() {
        let ds = gen_blobs(10, 4, 10, 0.3, 1).unwrap();
        assert_eq!(ds.len(), 100);
        let all: Vec<usize> = (0..ds.len()).collect();
        assert_eq!(ds.class_histogram(&all), vec![10; 10]);
    }

    #[test]
    fn zero_spread_blobs_sit_on_center() {
        let ds = gen_blobs(3, 5, 4, 0.0, 9).unwrap();
        for c in 0..3 {
            let first = ds.inputs().row(c * 4).to_vec();
            let norm: f64 = first.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for k in 1..4 {
                assert_eq!(ds.inputs().row(c * 4 + k), first.as_slice());
            }
        }
    }

    #[test]
    fn blobs_deterministic() {
        assert_eq!(
            gen_blobs(4, 3, 5, 0.2, 3).unwrap(),
            gen_blobs(4, 3, 5, 0.2, 3).unwrap()
        );
    }

    #[test]
    fn csv_well_formed() {
        let ds = Dataset::from_csv_reader("0,1.0,2.0\n1,3.0,4.0\n2,5.0,6.5\n".as_bytes(), 3, false)
            .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        assert_eq!(ds.inputs().row(2), &[5.0, 6.5]);
    }

    #[test]
    fn csv_scaling_survives_overflowing_span() {
        let ds = Dataset::from_csv_reader("0,-1e308\n1,1e308\n0,0\n".as_bytes(), 2, true).unwrap();
        assert_eq!(ds.inputs().as_slice(), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn csv_scaling_to_unit_range() {
        let ds = Dataset::from_csv_reader("0,1,10\n1,3,10\n0,2,10\n".as_bytes(), 2, true).unwrap();
        assert_eq!(ds.inputs().row(0), &[0.0, 0.0]);
        assert_eq!(ds.inputs().row(1), &[1.0, 0.0]);
        assert_eq!(ds.inputs().row(2), &[0.5, 0.0]);
    }

    #[test]
    fn csv_non_numeric_names_line() {
        let err = Dataset::from_csv_reader("0,1,2\n1,x,3\n".as_bytes(), 2, false).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string("0,1,2\n1,x,3\n").contains("line 2"));
    }

    fn err_string(s: &str) -> String {
        Dataset::from_csv_reader(s.as_bytes(), 2, false)
            .unwrap_err()
            .to_string()
    }

    #[test]
    fn csv_empty_file() {
        assert_eq!(err_string(""), "empty dataset");
    }

    #[test]
    fn csv_label_out_of_range() {
        assert!(matches!(
            Dataset::from_csv_reader("0,1\n5,2\n".as_bytes(), 2, false),
            Err(Error::LabelOutOfRange {
                line: 2,
                label: 5,
                ..
            })
        ));
    }

    #[test]
    fn csv_ragged_rows() {
        assert!(err_string("0,1,2\n1,3\n").contains("line 2"));
    }

    #[test]
    fn dirichlet_sums_to_one_even_for_tiny_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &alpha in &[0.001, 0.01, 1.0, 100.0] {
            let p = sample_dirichlet(alpha, 10, &mut rng).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    fn check_partition(sh: &Sharding, n: usize) {
        let mut seen = vec![false; n];
        let mut all = sh.server_labeled.clone();
        for c in &sh.clients {
            assert!(!c.unlabeled_idx.is_empty());
            all.extend(&c.labeled_idx);
            all.extend(&c.unlabeled_idx);
        }
        for i in all {
            assert!(!seen[i], "index {i} assigned twice");
            seen[i] = true;
        }
    }

    #[test]
    fn shards_are_disjoint_and_cover_pool() {
        let ds = gen_blobs(5, 2, 40, 0.1, 0).unwrap();
        for labels in [
            LabelPlacement::Client { per_client: 3 },
            LabelPlacement::Server { total: 10 },
        ] {
            let plan = ShardPlan {
                num_clients: 7,
                dirichlet_alpha: 0.3,
                labels,
                unlabeled_per_client: None,
                seed: 4,
            };
            let sh = dirichlet_shard(&ds, &plan).unwrap();
            check_partition(&sh, ds.len());
            let used: usize = sh.server_labeled.len()
                + sh.clients
                    .iter()
                    .map(|c| c.labeled_idx.len() + c.unlabeled_idx.len())
                    .sum::<usize>();
            // even split leaves at most num_clients - 1 examples unassigned
            assert!(ds.len() - used < 7);
            assert_eq!(sh, dirichlet_shard(&ds, &plan).unwrap());
        }
    }

    #[test]
    fn server_pool_is_class_balanced() {
        let ds = gen_blobs(4, 2, 30, 0.1, 0).unwrap();
        let plan = ShardPlan {
            num_clients: 3,
            dirichlet_alpha: 1.0,
            labels: LabelPlacement::Server { total: 20 },
            unlabeled_per_client: Some(10),
            seed: 1,
        };
        let sh = dirichlet_shard(&ds, &plan).unwrap();
        assert_eq!(ds.class_histogram(&sh.server_labeled), vec![5; 4]);
        assert!(sh.clients.iter().all(|c| c.labeled_idx.is_empty()));
    }

    #[test]
    fn oversubscribed_plan_errors() {
        let ds = gen_blobs(2, 2, 5, 0.1, 0).unwrap();
        let plan = ShardPlan {
            num_clients: 4,
            dirichlet_alpha: 1.0,
            labels: LabelPlacement::Client { per_client: 0 },
            unlabeled_per_client: Some(3),
            seed: 0,
        };
        assert!(dirichlet_shard(&ds, &plan).is_err());
        let bad_alpha = ShardPlan {
            dirichlet_alpha: -1.0,
            unlabeled_per_client: None,
            ..plan
        };
        assert!(dirichlet_shard(&ds, &bad_alpha).is_err());
    }

    #[test]
    fn exhausted_class_falls_back() {
        // 2 classes x 5 examples, 2 clients of 5: the second client's
        // preferred class is gone once the first client drains it.
        let ds = gen_blobs(2, 1, 5, 0.1, 0).unwrap();
        let plan = ShardPlan {
            num_clients: 2,
            dirichlet_alpha: 0.001,
            labels: LabelPlacement::Client { per_client: 0 },
            unlabeled_per_client: Some(5),
            seed: 0,
        };
        let sh = dirichlet_shard(&ds, &plan).unwrap();
        check_partition(&sh, ds.len());
        let total: usize = sh.clients.iter().map(|c| c.unlabeled_idx.len()).sum();
        assert_eq!(total, 10);
    }

    fn shard_with(n: usize) -> ClientShard {
        ClientShard {
            client_id: 0,
            labeled_idx: vec![],
            unlabeled_idx: (0..n).collect(),
            stream_splits: None,
            class_prior: vec![],
            fallback_draws: 0,
        }
    }

    #[test]
    fn stream_ten_by_ten() {
        let s = make_stream_schedule(&shard_with(100), 10).unwrap();
        let splits = s.stream_splits.as_ref().unwrap();
        assert_eq!(splits.len(), 10);
        assert!(splits.iter().all(|seg| seg.len() == 10));
        let flat: Vec<usize> = splits.concat();
        assert_eq!(flat, s.unlabeled_idx);
        assert_eq!(s.visible_unlabeled(3), splits[3].as_slice());
        assert_eq!(s.visible_unlabeled(13), splits[3].as_slice());
    }

    #[test]
    fn stream_single_step_is_whole_pool() {
        let base = shard_with(17);
        let s = make_stream_schedule(&base, 1).unwrap();
        assert_eq!(s.visible_unlabeled(0), base.visible_unlabeled(0));
        assert_eq!(s.visible_unlabeled(5), base.unlabeled_idx.as_slice());
    }

    #[test]
    fn stream_uneven_and_too_many_steps() {
        let s = make_stream_schedule(&shard_with(11), 3).unwrap();
        let sizes: Vec<usize> = s.stream_splits.unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 3]);
        assert!(make_stream_schedule(&shard_with(2), 3).is_err());
        assert!(make_stream_schedule(&shard_with(2), 0).is_err());
    }

    #[test]
    fn skewed_stream_partitions_pool() {
        let ds = gen_blobs(4, 1, 25, 0.1, 0).unwrap();
        let base = shard_with(100);
        let s = make_skewed_stream_schedule(&base, ds.labels(), 4, 5, 0.1, 3).unwrap();
        let mut flat = s.stream_splits.unwrap().concat();
        flat.sort_unstable();
        assert_eq!(flat, base.unlabeled_idx);
    }

    #[test]
    fn identity_augment_is_identity() {
        let ds = gen_blobs(2, 3, 4, 0.5, 0).unwrap();
        let cfg = AugmentConfig::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&weak_augment(ds.inputs(), &cfg, &mut rng), ds.inputs());
        assert_eq!(&strong_augment(ds.inputs(), &cfg, &mut rng), ds.inputs());
    }

    #[test]
    fn augment_is_stochastic_and_shape_preserving() {
        let ds = gen_blobs(2, 3, 4, 0.5, 0).unwrap();
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = weak_augment(ds.inputs(), &cfg, &mut rng);
        let b = weak_augment(ds.inputs(), &cfg, &mut rng);
        assert_eq!((a.rows(), a.cols()), (8, 3));
        assert_ne!(a, b);
        let s = strong_augment(ds.inputs(), &cfg, &mut rng);
        assert_eq!((s.rows(), s.cols()), (8, 3));
    }

    #[test]
    fn full_mask_zeroes_everything() {
        let ds = gen_blobs(2, 3, 4, 0.5, 0).unwrap();
        let cfg = AugmentConfig {
            strong_mask_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = strong_augment(ds.inputs(), &cfg, &mut rng);
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_rate_matches_probability() {
        let x = Matrix::from_vec(1000, 10, vec![1.0; 10_000]).unwrap();
        let cfg = AugmentConfig {
            strong_mask_prob: 0.3,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s = strong_augment(&x, &cfg, &mut rng);
        let zeroed = s.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((zeroed - 0.3).abs() < 0.05, "zeroed fraction {zeroed}");
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let weaker_strong = AugmentConfig {
            weak_noise_sigma: 0.5,
            strong_noise_sigma: 0.1,
            ..AugmentConfig::default()
        };
        assert!(weaker_strong.validate().is_err());
        let bad_shift = AugmentConfig {
            weak_shift_fraction: 1.0,
            ..AugmentConfig::default()
        };
        assert!(bad_shift.validate().is_err());
    }

    #[test]
    fn holdout_split_is_stratified() {
        let ds = gen_blobs(3, 2, 10, 0.1, 0).unwrap();
        let (train, test) = ds.split_holdout(2, 5).unwrap();
        assert_eq!(train.len(), 24);
        assert_eq!(test.len(), 6);
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(test.class_histogram(&all), vec![2, 2, 2]);
    }
}
