//! Confidence-thresholded pseudo-labeling, the combined client objective and
//! batch prediction-distribution diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{strong_augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, Matrix, ModelSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub pseudo_labels: Vec<usize>,
    pub mask: Vec<f64>,
    pub source: LabelSource,
}

impl PseudoBatch {
    pub fn num_confident(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslHyper {
    pub tau: f64,
    pub lambda_u: f64,
    pub mu: f64,
}

impl Default for SslHyper {
    fn default() -> Self {
        SslHyper {
            tau: 0.95,
            lambda_u: 1.0,
            mu: 0.001,
        }
    }
}

impl SslHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_u must be non-negative, got {}",
                self.lambda_u
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mu must be non-negative, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn pseudo_label(probs: &Matrix, tau: f64, source: LabelSource) -> PseudoBatch {
    let mut pseudo_labels = Vec::with_capacity(probs.rows());
    let mut mask = Vec::with_capacity(probs.rows());
    for row in probs.iter_rows() {
        let c = argmax(row);
        pseudo_labels.push(c);
        mask.push(if row[c] >= tau { 1.0 } else { 0.0 });
    }
    PseudoBatch {
        pseudo_labels,
        mask,
        source,
    }
}

pub fn class_counts(probs: &Matrix) -> Vec<usize> {
    let mut counts = vec![0; probs.cols()];
    for row in probs.iter_rows() {
        counts[argmax(row)] += 1;
    }
    counts
}

pub fn normalize_counts(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Normalized histogram of argmax predictions over the batch.
pub fn batch_prediction_distribution(probs: &Matrix) -> Result<Vec<f64>> {
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument(
            "prediction distribution of an empty batch".into(),
        ));
    }
    Ok(normalize_counts(&class_counts(probs)))
}

/// `D_KL(p || U) = Σ_c p_c ln(p_c C)`, with `0 ln 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".into()));
    }
    if let Some(&neg) = p.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "distribution entry {neg} is not a probability"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "distribution sums to {sum}, not 1"
        )));
    }
    let c = p.len() as f64;
    let kl: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (x * c).ln())
        .sum();
    // Rounding can leave a tiny negative residue for near-uniform inputs.
    Ok(kl.clamp(0.0, c.ln()))
}

/// Per-client KL statistics: means over batches plus the raw sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub dkl_teacher: f64,
    pub dkl_student: f64,
    pub num_batches: usize,
    pub sum_teacher: f64,
    pub sum_student: f64,
}

impl KlStats {
    pub fn new(dkl_teacher: f64, dkl_student: f64) -> Self {
        KlStats {
            dkl_teacher,
            dkl_student,
            num_batches: 1,
            sum_teacher: dkl_teacher,
            sum_student: dkl_student,
        }
    }

    /// Mean over clients of the per-client means.
    pub fn average(stats: &[KlStats]) -> Result<KlStats> {
        if stats.is_empty() {
            return Err(Error::InvalidArgument("no KL statistics to average".into()));
        }
        let n = stats.len() as f64;
        Ok(KlStats {
            dkl_teacher: stats.iter().map(|s| s.dkl_teacher).sum::<f64>() / n,
            dkl_student: stats.iter().map(|s| s.dkl_student).sum::<f64>() / n,
            num_batches: stats.iter().map(|s| s.num_batches).sum(),
            sum_teacher: stats.iter().map(|s| s.sum_teacher).sum(),
            sum_student: stats.iter().map(|s| s.sum_student).sum(),
        })
    }
}

/// Streaming form of [`client_kl_stats`].
#[derive(Debug, Clone, Default)]
pub struct KlAccumulator {
    sum_teacher: f64,
    sum_student: f64,
    batches: usize,
}

impl KlAccumulator {
    pub fn push(&mut self, teacher_probs: &Matrix, student_probs: &Matrix) -> Result<()> {
        self.sum_teacher += kl_to_uniform(&batch_prediction_distribution(teacher_probs)?)?;
        self.sum_student += kl_to_uniform(&batch_prediction_distribution(student_probs)?)?;
        self.batches += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<KlStats> {
        if self.batches == 0 {
            return Err(Error::InvalidArgument(
                "KL statistics need at least one batch".into(),
            ));
        }
        let l = self.batches as f64;
        Ok(KlStats {
            dkl_teacher: self.sum_teacher / l,
            dkl_student: self.sum_student / l,
            num_batches: self.batches,
            sum_teacher: self.sum_teacher,
            sum_student: self.sum_student,
        })
    }
}

/// Average over batches of the KL-to-uniform of each batch's argmax
/// histogram, for the teacher (weak view) and the student (strong view).
pub fn client_kl_stats(teacher_probs: &[Matrix], student_probs: &[Matrix]) -> Result<KlStats> {
    if teacher_probs.len() != student_probs.len() {
        return Err(Error::Shape {
            context: "per-batch prediction lists",
            expected: teacher_probs.len(),
            actual: student_probs.len(),
        });
    }
    let mut acc = KlAccumulator::default();
    for (t, s) in teacher_probs.iter().zip(student_probs) {
        acc.push(t, s)?;
    }
    acc.finish()
}

/// Masked cross-entropy of the student on an already strongly augmented view.
pub fn unsupervised_loss_grad_on_view(
    student: &ParamVector,
    spec: &ModelSpec,
    strong_view: &Matrix,
    pseudo: &PseudoBatch,
) -> Result<(f64, ParamVector)> {
    loss_and_grad(
        student,
        spec,
        strong_view,
        &pseudo.pseudo_labels,
        &pseudo.mask,
    )
}

/// Strongly augments `unlabeled` and trains the student towards `pseudo`.
/// The pseudo-labels are constants here: nothing flows back to their source.
pub fn unsupervised_loss_grad<R: Rng + ?Sized>(
    student: &ParamVector,
    spec: &ModelSpec,
    unlabeled: &Matrix,
    pseudo: &PseudoBatch,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(f64, ParamVector)> {
    let strong = strong_augment(unlabeled, cfg, rng);
    unsupervised_loss_grad_on_view(student, spec, &strong, pseudo)
}

pub struct LabeledView<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
}

/// `∇L_s + λ_u ∇L_u + μ (θ - θ^s)` and the matching objective value.
pub fn combined_client_grad(
    student: &ParamVector,
    snapshot: &ParamVector,
    spec: &ModelSpec,
    labeled: Option<LabeledView<'_>>,
    strong_view: &Matrix,
    pseudo: &PseudoBatch,
    hyper: &SslHyper,
) -> Result<(f64, ParamVector)> {
    student.check_compatible(snapshot)?;
    let mut grad = ParamVector::zeros(spec);
    let mut loss = 0.0;

    if let Some(view) = labeled {
        let ones = vec![1.0; view.labels.len()];
        let (ls, gs) = loss_and_grad(student, spec, view.inputs, view.labels, &ones)?;
        loss += ls;
        grad.axpy(1.0, &gs)?;
    }

    if hyper.lambda_u > 0.0 && pseudo.num_confident() > 0 {
        let (lu, gu) = unsupervised_loss_grad_on_view(student, spec, strong_view, pseudo)?;
        loss += hyper.lambda_u * lu;
        grad.axpy(hyper.lambda_u, &gu)?;
    }

    if hyper.mu > 0.0 {
        let diff = student.sub(snapshot)?;
        loss += 0.5 * hyper.mu * diff.values().iter().map(|d| d * d).sum::<f64>();
        grad.axpy(hyper.mu, &diff)?;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn pseudo_label_threshold() {
        let p = pseudo_label(
            &m(&[vec![0.96, 0.02, 0.02], vec![0.2, 0.3, 0.5]]),
            0.95,
            LabelSource::Teacher,
        );
        assert_eq!(p.pseudo_labels, vec![0, 2]);
        assert_eq!(p.mask, vec![1.0, 0.0]);
        let even = pseudo_label(&m(&[vec![0.5, 0.5]]), 0.95, LabelSource::Student);
        assert_eq!(even.pseudo_labels, vec![0]);
        assert_eq!(even.mask, vec![0.0]);
        let tiny = pseudo_label(
            &m(&[vec![0.5, 0.5], vec![0.1, 0.9]]),
            1e-12,
            LabelSource::Student,
        );
        assert_eq!(tiny.mask, vec![1.0, 1.0]);
    }

    #[test]
    fn prediction_distribution_counts_argmax() {
        let one_class = m(&vec![vec![0.0, 0.1, 0.2, 0.7]; 5]);
        assert_eq!(
            batch_prediction_distribution(&one_class).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|c| (0..10).map(|j| if j == c { 0.9 } else { 0.01 }).collect())
            .collect();
        assert_eq!(
            batch_prediction_distribution(&m(&rows)).unwrap(),
            vec![0.1; 10]
        );
        let mixed = m(&[
            vec![0.8, 0.1, 0.1],
            vec![0.6, 0.3, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
        ]);
        assert_eq!(
            batch_prediction_distribution(&mixed).unwrap(),
            vec![0.5, 0.25, 0.25]
        );
        assert!(batch_prediction_distribution(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn kl_anchors() {
        assert!(kl_to_uniform(&[0.25; 4]).unwrap().abs() < 1e-12);
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        assert!((kl_to_uniform(&one_hot).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((kl_to_uniform(&one_hot).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        // 0.75 ln 1.5 + 0.25 ln 0.5
        let hand = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let v = kl_to_uniform(&[0.75, 0.25]).unwrap();
        assert!((v - hand).abs() < 1e-15);
        assert!((v - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_bad_input() {
        assert!(kl_to_uniform(&[1.2, -0.2]).is_err());
        assert!(kl_to_uniform(&[0.3, 0.3]).is_err());
        assert!(kl_to_uniform(&[]).is_err());
    }

    fn one_hot_rows(class: usize, n: usize, c: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|j| if j == class { 1.0 } else { 0.0 }).collect())
            .collect();
        m(&rows)
    }

    fn uniform_argmax_rows(c: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|k| (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        m(&rows)
    }

    #[test]
    fn client_kl_averaging() {
        let u = uniform_argmax_rows(10);
        let s = client_kl_stats(std::slice::from_ref(&u), std::slice::from_ref(&u)).unwrap();
        assert_eq!((s.dkl_teacher, s.dkl_student), (0.0, 0.0));

        let hot = one_hot_rows(2, 10, 10);
        let s = client_kl_stats(&[u.clone(), hot.clone()], &[u.clone(), u.clone()]).unwrap();
        assert!((s.dkl_teacher - 10f64.ln() / 2.0).abs() < 1e-12);
        assert!((s.sum_teacher - 10f64.ln()).abs() < 1e-12);
        assert_eq!(s.num_batches, 2);

        let s =
            client_kl_stats(&[hot.clone(), hot.clone(), hot], &[u.clone(), u.clone(), u]).unwrap();
        assert!((s.dkl_teacher - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(client_kl_stats(&[], &[]).is_err());
    }

    #[test]
    fn combined_grad_proximal_term() {
        let spec = ModelSpec::new(1, vec![], 1 + 1).unwrap(); // 4 params
        let theta = ParamVector::from_values(&spec, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let snap = ParamVector::zeros(&spec);
        let empty = PseudoBatch {
            pseudo_labels: vec![0],
            mask: vec![0.0],
            source: LabelSource::Student,
        };
        let hyper = SslHyper {
            tau: 0.95,
            lambda_u: 1.0,
            mu: 2.0,
        };
        let view = Matrix::zeros(1, 1);
        let (loss, g) =
            combined_client_grad(&theta, &snap, &spec, None, &view, &empty, &hyper).unwrap();
        assert_eq!(g.values(), &[2.0, -2.0, 0.0, 0.0]);
        assert!((loss - 2.0).abs() < 1e-15);

        let (_, g0) =
            combined_client_grad(&snap, &snap, &spec, None, &view, &empty, &hyper).unwrap();
        assert!(g0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combined_grad_reduces_to_supervised() {
        let spec = ModelSpec::new(3, vec![4], 3).unwrap();
        let theta = init_params(&spec, 1).unwrap();
        let snap = init_params(&spec, 2).unwrap();
        let x = m(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0]]);
        let labels = [1, 2];
        let pseudo = pseudo_label(
            &forward(&theta, &spec, &x),
            0.0 + 1e-9,
            LabelSource::Student,
        );
        let hyper = SslHyper {
            tau: 0.5,
            lambda_u: 0.0,
            mu: 0.0,
        };
        let (_, g) = combined_client_grad(
            &theta,
            &snap,
            &spec,
            Some(LabeledView {
                inputs: &x,
                labels: &labels,
            }),
            &x,
            &pseudo,
            &hyper,
        )
        .unwrap();
        let (_, sup) = loss_and_grad(&theta, &spec, &x, &labels, &[1.0, 1.0]).unwrap();
        assert_eq!(g, sup);
    }

    fn forward(p: &ParamVector, spec: &ModelSpec, x: &Matrix) -> Matrix {
        crate::nn::forward_probs(p, spec, x).unwrap()
    }

    #[test]
    fn fully_masked_unsupervised_is_zero() {
        let spec = ModelSpec::new(3, vec![4], 3).unwrap();
        let theta = init_params(&spec, 1).unwrap();
        let x = m(&[vec![0.1, 0.2, 0.3]]);
        let pseudo = PseudoBatch {
            pseudo_labels: vec![1],
            mask: vec![0.0],
            source: LabelSource::Teacher,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, g) = unsupervised_loss_grad(
            &theta,
            &spec,
            &x,
            &pseudo,
            &AugmentConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hyper_validation() {
        assert!(SslHyper::default().validate().is_ok());
        assert!(SslHyper {
            tau: 0.0,
            ..SslHyper::default()
        }
        .validate()
        .is_err());
        assert!(SslHyper {
            lambda_u: -1.0,
            ..SslHyper::default()
        }
        .validate()
        .is_err());
        assert!(SslHyper {
            mu: f64::NAN,
            ..SslHyper::default()
        }
        .validate()
        .is_err());
    }
}
