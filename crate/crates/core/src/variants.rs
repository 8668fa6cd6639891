//! Protocol variants.
//!
//! | variant            | pseudo-labels from              | downlink          | uplink                 |
//! |--------------------|---------------------------------|-------------------|------------------------|
//! | `fedprox_fixmatch` | student                         | student           | student delta          |
//! | `ts_server_ema`    | frozen downlinked teacher       | student, teacher  | student delta          |
//! | `ts_client_ema`    | local teacher, EMA every batch  | student, teacher  | student + teacher delta|
//! | `fedswitch`        | local teacher (teacher rounds)  | student (+teacher)| student delta          |
//! |                    | or student (student rounds)     |                   |                        |
//!
//! Every variant except `fedprox_fixmatch` keeps a global teacher which the
//! server moves towards the aggregated student once per round.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamVector};
use crate::ssl::{pseudo_label, KlStats, LabelSource, PseudoBatch, SslHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    FedproxFixmatch,
    TsServerEma,
    TsClientEma,
    Fedswitch,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::FedproxFixmatch,
        VariantKind::TsServerEma,
        VariantKind::TsClientEma,
        VariantKind::Fedswitch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::FedproxFixmatch => "fedprox_fixmatch",
            VariantKind::TsServerEma => "ts_server_ema",
            VariantKind::TsClientEma => "ts_client_ema",
            VariantKind::Fedswitch => "fedswitch",
        }
    }

    pub fn has_teacher(self) -> bool {
        self != VariantKind::FedproxFixmatch
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?} (expected one of fedprox_fixmatch, ts_server_ema, ts_client_ema, fedswitch)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub kind: VariantKind,
    /// Round-level EMA ratio for the global teacher.
    #[serde(default = "default_ema_alpha")]
    pub ema_alpha: f64,
    /// Batch-level EMA ratio for client-local teachers.
    #[serde(default = "default_local_ema_alpha")]
    pub local_ema_alpha: f64,
    /// IIDness prior β for the switch rule.
    #[serde(default)]
    pub iidness_prior: f64,
    /// Replace the local teacher by the live student after every step
    /// (`T = S`). Used to check that teacher variants collapse onto
    /// FedProx-FixMatch.
    #[serde(default)]
    pub alias_teacher_to_student: bool,
}

fn default_ema_alpha() -> f64 {
    0.99
}

fn default_local_ema_alpha() -> f64 {
    0.999
}

impl VariantConfig {
    pub fn new(kind: VariantKind) -> Self {
        VariantConfig {
            kind,
            ema_alpha: default_ema_alpha(),
            local_ema_alpha: default_local_ema_alpha(),
            iidness_prior: 0.0,
            alias_teacher_to_student: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ema_alpha", self.ema_alpha),
            ("local_ema_alpha", self.local_ema_alpha),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if !(self.iidness_prior >= 0.0 && self.iidness_prior.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "iidness_prior must be non-negative, got {}",
                self.iidness_prior
            )));
        }
        Ok(())
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, alpha: f64) -> Result<ParamVector> {
    teacher.check_compatible(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "EMA ratio must be in [0, 1], got {alpha}"
        )));
    }
    let mut out = teacher.clone();
    for (t, s) in out.values_mut().iter_mut().zip(student.values()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub send_teacher: bool,
    pub dkl_teacher: f64,
    pub dkl_student: f64,
    pub round: usize,
}

/// Sends the teacher iff its KL is strictly closer to `beta`; ties send the student.
pub fn switch_decide(last_kl: &KlStats, beta: f64, round: usize) -> SwitchDecision {
    let send_teacher = (last_kl.dkl_teacher - beta).abs() < (last_kl.dkl_student - beta).abs();
    SwitchDecision {
        send_teacher,
        dkl_teacher: last_kl.dkl_teacher,
        dkl_student: last_kl.dkl_student,
        round,
    }
}

/// KL state before any round has run: the teacher sits exactly at `beta`
/// and the student infinitely far away, so the first round sends the teacher.
pub fn initial_kl(beta: f64) -> KlStats {
    KlStats {
        dkl_teacher: beta,
        dkl_student: f64::INFINITY,
        num_batches: 0,
        sum_teacher: 0.0,
        sum_student: 0.0,
    }
}

/// Models sent from the server to one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Downlink {
    pub student: ParamVector,
    pub teacher: Option<ParamVector>,
}

impl Downlink {
    pub fn num_models(&self) -> usize {
        1 + usize::from(self.teacher.is_some())
    }
}

pub fn variant_downlink(
    kind: VariantKind,
    student: &ParamVector,
    teacher: Option<&ParamVector>,
    decision: Option<&SwitchDecision>,
) -> Result<Downlink> {
    let need_teacher = match kind {
        VariantKind::FedproxFixmatch => false,
        VariantKind::TsServerEma | VariantKind::TsClientEma => true,
        VariantKind::Fedswitch => {
            decision
                .ok_or_else(|| {
                    Error::InvalidArgument("fedswitch downlink needs a switch decision".into())
                })?
                .send_teacher
        }
    };
    let teacher = if need_teacher {
        Some(
            teacher
                .ok_or(Error::MissingTeacher {
                    variant: kind.name(),
                })?
                .clone(),
        )
    } else {
        None
    };
    Ok(Downlink {
        student: student.clone(),
        teacher,
    })
}

/// Client-side teacher copy; lives for one participation only.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTeacher {
    pub params: ParamVector,
    pub updated_this_round: bool,
}

impl LocalTeacher {
    pub fn new(params: ParamVector) -> Self {
        LocalTeacher {
            params,
            updated_this_round: false,
        }
    }
}

/// Whether the variant adapts a local teacher after each client step.
fn adapts_local_teacher(kind: VariantKind) -> bool {
    matches!(kind, VariantKind::TsClientEma | VariantKind::Fedswitch)
}

/// Chooses the pseudo-label source for one unlabeled batch and thresholds it.
/// Both probability matrices come from the weakly augmented view.
pub fn variant_batch_hook(
    kind: VariantKind,
    local_teacher: Option<&LocalTeacher>,
    weak_probs_teacher: Option<&Matrix>,
    weak_probs_student: &Matrix,
    hyper: &SslHyper,
) -> Result<PseudoBatch> {
    let use_teacher = match kind {
        VariantKind::FedproxFixmatch => false,
        VariantKind::TsServerEma | VariantKind::TsClientEma => {
            if local_teacher.is_none() {
                return Err(Error::MissingTeacher {
                    variant: kind.name(),
                });
            }
            true
        }
        // Teacher rounds are exactly those where a teacher was downlinked.
        VariantKind::Fedswitch => local_teacher.is_some(),
    };
    if use_teacher {
        let probs = weak_probs_teacher.ok_or(Error::MissingTeacher {
            variant: kind.name(),
        })?;
        Ok(pseudo_label(probs, hyper.tau, LabelSource::Teacher))
    } else {
        Ok(pseudo_label(
            weak_probs_student,
            hyper.tau,
            LabelSource::Student,
        ))
    }
}

/// Runs after the student's optimizer step on a batch.
pub fn variant_post_step_hook(
    cfg: &VariantConfig,
    local_teacher: Option<&mut LocalTeacher>,
    student: &ParamVector,
) -> Result<()> {
    let Some(teacher) = local_teacher else {
        return Ok(());
    };
    if cfg.alias_teacher_to_student {
        teacher.params = student.clone();
        teacher.updated_this_round = true;
    } else if adapts_local_teacher(cfg.kind) {
        teacher.params = ema_update(&teacher.params, student, cfg.local_ema_alpha)?;
        teacher.updated_this_round = true;
    }
    Ok(())
}

/// Model payloads travelling client -> server, alongside the two KL scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub student_delta: ParamVector,
    pub teacher_delta: Option<ParamVector>,
}

impl Uplink {
    pub fn num_models(&self) -> usize {
        1 + usize::from(self.teacher_delta.is_some())
    }
}

/// `downlinked_teacher` is the teacher the client received this round.
pub fn variant_uplink(
    kind: VariantKind,
    student_delta: ParamVector,
    local_teacher: Option<&LocalTeacher>,
    downlinked_teacher: Option<&ParamVector>,
) -> Result<Uplink> {
    let teacher_delta = match kind {
        VariantKind::TsClientEma => {
            let missing = Error::MissingTeacher {
                variant: kind.name(),
            };
            let local = local_teacher.ok_or(missing)?;
            let base = downlinked_teacher.ok_or(Error::MissingTeacher {
                variant: kind.name(),
            })?;
            Some(local.params.sub(base)?)
        }
        _ => None,
    };
    Ok(Uplink {
        student_delta,
        teacher_delta,
    })
}

/// New global teacher after the student has been aggregated.
///
/// `mean_teacher_delta` is the average of the uploaded local-teacher deltas
/// (TS-Client EMA only); it is applied before the EMA towards the student.
pub fn variant_server_merge(
    cfg: &VariantConfig,
    teacher: Option<&ParamVector>,
    aggregated_student: &ParamVector,
    mean_teacher_delta: Option<&ParamVector>,
) -> Result<Option<ParamVector>> {
    if !cfg.kind.has_teacher() {
        return Ok(None);
    }
    let teacher = teacher.ok_or(Error::MissingTeacher {
        variant: cfg.kind.name(),
    })?;
    let base = match (cfg.kind, mean_teacher_delta) {
        (VariantKind::TsClientEma, Some(delta)) => teacher.add(delta)?,
        (VariantKind::TsClientEma, None) => {
            return Err(Error::InvalidArgument(
                "ts_client_ema merge needs the uploaded teacher deltas".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::InvalidArgument(format!(
                "{} does not upload teacher models",
                cfg.kind
            )))
        }
        (_, None) => teacher.clone(),
    };
    Ok(Some(ema_update(&base, aggregated_student, cfg.ema_alpha)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn spec() -> ModelSpec {
        ModelSpec::new(1, vec![], 2).unwrap()
    }

    fn pv(v: [f64; 4]) -> ParamVector {
        ParamVector::from_values(&spec(), v.to_vec()).unwrap()
    }

    #[test]
    fn ema_arithmetic() {
        let t = pv([1.0, 2.0, 3.0, 4.0]);
        let s = pv([3.0, 0.0, 3.0, -4.0]);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&t, &s, 0.5).unwrap().values()[0], 2.0);
        assert!(ema_update(&t, &s, 1.5).is_err());
        let other = ParamVector::zeros(&ModelSpec::new(2, vec![], 2).unwrap());
        assert!(ema_update(&t, &other, 0.5).is_err());
    }

    #[test]
    fn switch_rule() {
        let d = switch_decide(&KlStats::new(0.5, 1.0), 0.6, 3);
        assert!(d.send_teacher);
        assert_eq!(d.round, 3);
        assert!(!switch_decide(&KlStats::new(0.7, 0.7), 0.6, 0).send_teacher);
        assert!(!switch_decide(&KlStats::new(0.3, 0.1), 0.0, 0).send_teacher);
        assert!(switch_decide(&initial_kl(0.4), 0.4, 0).send_teacher);
    }

    #[test]
    fn downlink_sets() {
        let s = pv([1.0; 4]);
        let t = pv([2.0; 4]);
        let student_round = SwitchDecision {
            send_teacher: false,
            dkl_teacher: 0.0,
            dkl_student: 0.0,
            round: 0,
        };
        let teacher_round = SwitchDecision {
            send_teacher: true,
            ..student_round
        };
        let d = variant_downlink(VariantKind::FedproxFixmatch, &s, Some(&t), None).unwrap();
        assert_eq!(d.num_models(), 1);
        for kind in [VariantKind::TsServerEma, VariantKind::TsClientEma] {
            let d = variant_downlink(kind, &s, Some(&t), None).unwrap();
            assert_eq!(d.num_models(), 2);
            assert_eq!(d.teacher.as_ref(), Some(&t));
        }
        let d =
            variant_downlink(VariantKind::Fedswitch, &s, Some(&t), Some(&student_round)).unwrap();
        assert_eq!(d.num_models(), 1);
        let d =
            variant_downlink(VariantKind::Fedswitch, &s, Some(&t), Some(&teacher_round)).unwrap();
        assert_eq!(d.num_models(), 2);
        assert!(variant_downlink(VariantKind::Fedswitch, &s, Some(&t), None).is_err());
        assert!(variant_downlink(VariantKind::TsServerEma, &s, None, None).is_err());
    }

    fn probs(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn batch_hook_sources() {
        let hyper = SslHyper {
            tau: 0.6,
            ..SslHyper::default()
        };
        let teacher_p = probs(&[[0.9, 0.1], [0.2, 0.8]]);
        let student_p = probs(&[[0.3, 0.7], [0.55, 0.45]]);
        let lt = LocalTeacher::new(pv([0.0; 4]));

        let p = variant_batch_hook(VariantKind::FedproxFixmatch, None, None, &student_p, &hyper)
            .unwrap();
        assert_eq!(
            (p.pseudo_labels.clone(), p.source),
            (vec![1, 0], LabelSource::Student)
        );
        assert_eq!(p.mask, vec![1.0, 0.0]);

        for kind in [
            VariantKind::TsServerEma,
            VariantKind::TsClientEma,
            VariantKind::Fedswitch,
        ] {
            let p =
                variant_batch_hook(kind, Some(&lt), Some(&teacher_p), &student_p, &hyper).unwrap();
            assert_eq!(p.pseudo_labels, vec![0, 1]);
            assert_eq!(p.source, LabelSource::Teacher);
        }
        let p = variant_batch_hook(VariantKind::Fedswitch, None, None, &student_p, &hyper).unwrap();
        assert_eq!(p.source, LabelSource::Student);
        assert!(
            variant_batch_hook(VariantKind::TsServerEma, None, None, &student_p, &hyper).is_err()
        );
    }

    #[test]
    fn server_ema_teacher_is_frozen_on_client() {
        let cfg = VariantConfig {
            local_ema_alpha: 0.5,
            ..VariantConfig::new(VariantKind::TsServerEma)
        };
        let mut lt = LocalTeacher::new(pv([1.0; 4]));
        for k in 0..5 {
            variant_post_step_hook(&cfg, Some(&mut lt), &pv([k as f64; 4])).unwrap();
        }
        assert_eq!(lt.params, pv([1.0; 4]));
        assert!(!lt.updated_this_round);
    }

    #[test]
    fn client_ema_two_batches_unrolled() {
        let cfg = VariantConfig {
            local_ema_alpha: 0.9,
            ..VariantConfig::new(VariantKind::TsClientEma)
        };
        let t0 = pv([1.0, 0.0, -2.0, 5.0]);
        let s1 = pv([2.0, 1.0, 0.0, 5.0]);
        let s2 = pv([4.0, -1.0, 1.0, 0.0]);
        let mut lt = LocalTeacher::new(t0);
        variant_post_step_hook(&cfg, Some(&mut lt), &s1).unwrap();
        variant_post_step_hook(&cfg, Some(&mut lt), &s2).unwrap();
        // T2 = 0.9 (0.9 T0 + 0.1 S1) + 0.1 S2 = 0.81 T0 + 0.09 S1 + 0.1 S2
        let expected = [
            0.81 * 1.0 + 0.09 * 2.0 + 0.1 * 4.0,
            0.0 + 0.09 * 1.0 - 0.1,
            0.81 * -2.0 + 0.0 + 0.1,
            0.81 * 5.0 + 0.09 * 5.0 + 0.0,
        ];
        for (got, want) in lt.params.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(lt.updated_this_round);
    }

    #[test]
    fn fedswitch_alpha_zero_teacher_tracks_student() {
        let cfg = VariantConfig {
            local_ema_alpha: 0.0,
            ..VariantConfig::new(VariantKind::Fedswitch)
        };
        let mut lt = LocalTeacher::new(pv([9.0; 4]));
        let s = pv([0.5, 0.25, -1.0, 3.0]);
        variant_post_step_hook(&cfg, Some(&mut lt), &s).unwrap();
        assert_eq!(lt.params, s);
    }

    #[test]
    fn uplink_model_counts() {
        let t = pv([1.0; 4]);
        let lt = LocalTeacher::new(pv([3.0; 4]));
        for kind in [
            VariantKind::FedproxFixmatch,
            VariantKind::TsServerEma,
            VariantKind::Fedswitch,
        ] {
            let up = variant_uplink(kind, pv([0.0; 4]), Some(&lt), Some(&t)).unwrap();
            assert_eq!(up.num_models(), 1);
        }
        let up =
            variant_uplink(VariantKind::TsClientEma, pv([0.0; 4]), Some(&lt), Some(&t)).unwrap();
        assert_eq!(up.num_models(), 2);
        assert_eq!(up.teacher_delta.unwrap(), pv([2.0; 4]));
    }

    #[test]
    fn server_merge_rules() {
        let t = pv([1.0; 4]);
        let s = pv([3.0; 4]);
        let mut cfg = VariantConfig::new(VariantKind::TsServerEma);
        cfg.ema_alpha = 1.0;
        assert_eq!(
            variant_server_merge(&cfg, Some(&t), &s, None).unwrap(),
            Some(t.clone())
        );
        cfg.ema_alpha = 0.0;
        assert_eq!(
            variant_server_merge(&cfg, Some(&t), &s, None).unwrap(),
            Some(s.clone())
        );
        assert!(variant_server_merge(&cfg, Some(&t), &s, Some(&t)).is_err());

        let plain = VariantConfig::new(VariantKind::FedproxFixmatch);
        assert_eq!(variant_server_merge(&plain, None, &s, None).unwrap(), None);

        let mut client = VariantConfig::new(VariantKind::TsClientEma);
        client.ema_alpha = 0.5;
        // (1 + 1) * 0.5 + 3 * 0.5 = 2.5
        let merged = variant_server_merge(&client, Some(&t), &s, Some(&t))
            .unwrap()
            .unwrap();
        assert_eq!(merged, pv([2.5; 4]));
        assert!(variant_server_merge(&client, Some(&t), &s, None).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for k in VariantKind::ALL {
            assert_eq!(k.name().parse::<VariantKind>().unwrap(), k);
        }
        assert!("fedavg".parse::<VariantKind>().is_err());
    }
}
