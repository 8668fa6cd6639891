//! Accuracy, the transmission log / communication ledger, pseudo-label KL
//! ratios and training-stability statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward_probs, ModelSpec, ParamVector};
use crate::ssl::{argmax, kl_to_uniform, normalize_counts};

/// Fraction of test examples whose argmax prediction equals the label.
pub fn evaluate(params: &ParamVector, spec: &ModelSpec, test: &Dataset) -> Result<f64> {
    let probs = forward_probs(params, spec, test.inputs())?;
    let correct = probs
        .iter_rows()
        .zip(test.labels())
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Downlink,
    Uplink,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Downlink => "downlink",
            Direction::Uplink => "uplink",
        }
    }
}

/// What a transmission carries. Uplinked models are deltas against the
/// downlinked snapshot; `KlScalars` is the pair `(D_KL^T, D_KL^S)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Student,
    Teacher,
    KlScalars,
}

impl Payload {
    pub fn name(self) -> &'static str {
        match self {
            Payload::Student => "student",
            Payload::Teacher => "teacher",
            Payload::KlScalars => "kl_scalars",
        }
    }

    pub fn is_model(self) -> bool {
        !matches!(self, Payload::KlScalars)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transmission {
    pub round: usize,
    pub direction: Direction,
    pub payload: Payload,
    pub client_id: usize,
    pub num_params: usize,
    pub bytes: usize,
}

/// Append-only record of everything that crossed the client/server boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionLog {
    bytes_per_param: usize,
    entries: Vec<Transmission>,
}

impl TransmissionLog {
    pub fn new(bytes_per_param: usize) -> Self {
        TransmissionLog {
            bytes_per_param,
            entries: Vec::new(),
        }
    }

    pub fn bytes_per_param(&self) -> usize {
        self.bytes_per_param
    }

    pub fn entries(&self) -> &[Transmission] {
        &self.entries
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("round,direction,payload,client_id,num_params,bytes\n");
        for t in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.round,
                t.direction.name(),
                t.payload.name(),
                t.client_id,
                t.num_params,
                t.bytes
            );
        }
        out
    }
}

pub fn record_transmission(
    log: &mut TransmissionLog,
    round: usize,
    direction: Direction,
    payload: Payload,
    client_id: usize,
    num_params: usize,
) {
    let bytes = num_params * log.bytes_per_param;
    log.entries.push(Transmission {
        round,
        direction,
        payload,
        client_id,
        num_params,
        bytes,
    });
}

/// Model traffic for one round. Scalar payloads are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub downlink_models: usize,
    pub downlink_bytes: usize,
    pub uplink_models: usize,
    pub uplink_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleTotals {
    pub models: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: Vec<LedgerEntry>,
    /// Keyed by `"<direction>/<payload>"`.
    pub totals: BTreeMap<String, RoleTotals>,
}

impl CommLedger {
    pub fn from_log(log: &TransmissionLog) -> Self {
        let mut by_round: BTreeMap<usize, LedgerEntry> = BTreeMap::new();
        let mut totals: BTreeMap<String, RoleTotals> = BTreeMap::new();
        for t in log.entries().iter().filter(|t| t.payload.is_model()) {
            let e = by_round.entry(t.round).or_insert(LedgerEntry {
                round: t.round,
                ..LedgerEntry::default()
            });
            match t.direction {
                Direction::Downlink => {
                    e.downlink_models += 1;
                    e.downlink_bytes += t.bytes;
                }
                Direction::Uplink => {
                    e.uplink_models += 1;
                    e.uplink_bytes += t.bytes;
                }
            }
            let tot = totals
                .entry(format!("{}/{}", t.direction.name(), t.payload.name()))
                .or_default();
            tot.models += 1;
            tot.bytes += t.bytes;
        }
        CommLedger {
            rounds: by_round.into_values().collect(),
            totals,
        }
    }

    pub fn round(&self, round: usize) -> LedgerEntry {
        self.rounds
            .iter()
            .find(|e| e.round == round)
            .copied()
            .unwrap_or(LedgerEntry {
                round,
                ..LedgerEntry::default()
            })
    }

    pub fn models(&self, direction: Direction) -> usize {
        self.rounds
            .iter()
            .map(|e| match direction {
                Direction::Downlink => e.downlink_models,
                Direction::Uplink => e.uplink_models,
            })
            .sum()
    }

    pub fn bytes(&self, direction: Direction) -> usize {
        self.rounds
            .iter()
            .map(|e| match direction {
                Direction::Downlink => e.downlink_bytes,
                Direction::Uplink => e.uplink_bytes,
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlRatioStat {
    pub client_id: usize,
    pub pseudo_kl: f64,
    pub ground_truth_kl: f64,
    /// `None` when the client's true label histogram is exactly uniform.
    pub ratio: Option<f64>,
}

/// Per-client ratio of pseudo-label KL-to-uniform over true-label KL-to-uniform.
/// Both inputs are class-count histograms; clients that processed no
/// examples (empty histograms) are skipped.
pub fn kl_ratio_stats(
    clients: &[usize],
    pseudo_counts: &[Vec<usize>],
    true_counts: &[Vec<usize>],
) -> Result<Vec<KlRatioStat>> {
    if clients.len() != pseudo_counts.len() || clients.len() != true_counts.len() {
        return Err(Error::Shape {
            context: "KL ratio inputs",
            expected: clients.len(),
            actual: pseudo_counts.len().min(true_counts.len()),
        });
    }
    clients
        .iter()
        .zip(pseudo_counts.iter().zip(true_counts))
        .filter(|(_, (p, t))| p.iter().sum::<usize>() > 0 && t.iter().sum::<usize>() > 0)
        .map(|(&client_id, (p, t))| {
            let pseudo_kl = kl_to_uniform(&normalize_counts(p))?;
            let ground_truth_kl = kl_to_uniform(&normalize_counts(t))?;
            let ratio = (ground_truth_kl > 0.0).then(|| pseudo_kl / ground_truth_kl);
            Ok(KlRatioStat {
                client_id,
                pseudo_kl,
                ground_truth_kl,
                ratio,
            })
        })
        .collect()
}

/// Mean of the defined ratios; `None` when no ratio is defined.
pub fn mean_ratio(stats: &[KlRatioStat]) -> Option<f64> {
    let defined: Vec<f64> = stats.iter().filter_map(|s| s.ratio).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub eval_accuracy_student: f64,
    pub eval_accuracy_teacher: Option<f64>,
    pub dkl_teacher: f64,
    pub dkl_student: f64,
    /// Sum over clients of each client's raw (un-averaged) batch KL sums.
    pub dkl_teacher_sum: f64,
    pub dkl_student_sum: f64,
    /// Clients whose teacher KL was measured with the student's weak view
    /// because no teacher was downlinked (FedSwitch student rounds).
    pub teacher_kl_fallbacks: usize,
    pub send_teacher: Option<bool>,
    pub clients: Vec<usize>,
    pub ledger_delta: LedgerEntry,
    /// Mean over clients of pseudo-label KL / true-label KL.
    pub kl_ratio: Option<f64>,
    /// Fraction of unlabeled examples whose pseudo-label cleared the threshold.
    pub mask_rate: f64,
}

pub const ROUNDS_CSV_HEADER: &str =
    "round,acc_student,acc_teacher,dkl_T,dkl_S,send_teacher,downlink_bytes,uplink_bytes";

pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.eval_accuracy_student,
            r.eval_accuracy_teacher
                .map_or(String::new(), |a| a.to_string()),
            r.dkl_teacher,
            r.dkl_student,
            r.send_teacher.map_or(String::new(), |b| b.to_string()),
            r.ledger_delta.downlink_bytes,
            r.ledger_delta.uplink_bytes,
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub rolling_std: f64,
    pub max_drawdown: f64,
}

/// Population standard deviation and largest peak-to-trough drop over the
/// trailing `window` values.
pub fn stability_of(values: &[f64], window: usize) -> Result<Stability> {
    if window == 0 {
        return Err(Error::InvalidArgument(
            "stability window must be >= 1".into(),
        ));
    }
    if window > values.len() {
        return Err(Error::InvalidArgument(format!(
            "stability window {window} exceeds {} reports",
            values.len()
        )));
    }
    let tail = &values[values.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64;
    let mut peak = f64::NEG_INFINITY;
    let mut drawdown = 0.0f64;
    for &v in tail {
        peak = peak.max(v);
        drawdown = drawdown.max(peak - v);
    }
    Ok(Stability {
        rolling_std: var.sqrt(),
        max_drawdown: drawdown,
    })
}

pub fn stability_stats(reports: &[RoundReport], window: usize) -> Result<Stability> {
    let acc: Vec<f64> = reports.iter().map(|r| r.eval_accuracy_student).collect();
    stability_of(&acc, window)
}

/// Trailing window covering `fraction` of `rounds`, at least one round.
pub fn trailing_window(rounds: usize, fraction: f64) -> usize {
    ((rounds as f64 * fraction).round() as usize).clamp(1, rounds.max(1))
}
