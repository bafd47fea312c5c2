//! Loss terms of the hybrid online distillation objective.
//!
//! The teacher trains on the summed cross-entropy of its two heads. The
//! student minimises
//!
//! ```text
//! L = λ1·L_hard + λ2·L_fd + λ3·L_rd + λ4·L_sd
//! ```
//!
//! where `L_hard` is the summed cross-entropy of both student heads,
//! `L_fd` aligns GAP feature vectors with the teacher's (main and aux),
//! `L_rd` is the KL divergence between temperature-softened teacher and
//! student outputs (both heads), and `L_sd` distils the student's own aux
//! head into its main head. Every KL term is a batch mean of
//! `KL(target ‖ learner)` with no `τ²` factor, and all distillation
//! targets are detached.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::network::ForwardBundle;
use crate::nn::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub lambda4: f32,
    pub tau: f32,
    pub tau_prime: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_array([0.3, 0.7, 0.7, 0.7, 4.0, 4.0])
    }
}

impl LossWeights {
    /// `[λ1, λ2, λ3, λ4, τ, τ′]`.
    pub fn from_array(v: [f32; 6]) -> Self {
        Self {
            lambda1: v[0],
            lambda2: v[1],
            lambda3: v[2],
            lambda4: v[3],
            tau: v[4],
            tau_prime: v[5],
        }
    }

    pub fn to_array(&self) -> [f32; 6] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.tau,
            self.tau_prime,
        ]
    }

    /// Weights must be finite and non-negative (zero switches a term off);
    /// temperatures strictly positive.
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err!("loss weights must be finite and >= 0: {:?}", l));
        }
        if !(self.tau > 0.0 && self.tau_prime > 0.0) || !self.tau.is_finite() || !self.tau_prime.is_finite() {
            return Err(config_err!(
                "temperatures must be > 0: tau={} tau'={}",
                self.tau,
                self.tau_prime
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLoss {
    /// Unsquared L2 distance per sample, batch mean.
    #[default]
    Euclidean,
    /// Mean squared error over all feature entries.
    Mse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(mentor ‖ learner)`: the teacher (or aux head) is the target.
    #[default]
    MentorTarget,
    /// `KL(learner ‖ mentor)`: argument order as literally written.
    LearnerTarget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub feature_loss: FeatureLoss,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

/// Scalar values of every loss component for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hard: f32,
    pub feature: f32,
    pub response: f32,
    pub self_distill: f32,
    pub total: f32,
    pub teacher_total: f32,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.hard,
            self.feature,
            self.response,
            self.self_distill,
            self.total,
            self.teacher_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// `CE(T_main, y) + CE(T_aux, y)`.
pub fn teacher_loss(g: &mut Graph, teacher: &ForwardBundle, labels: &[usize]) -> Result<Var> {
    let a = g.cross_entropy(teacher.main_logits, labels)?;
    let b = g.cross_entropy(teacher.aux_logits, labels)?;
    g.weighted_sum(&[(a, 1.0), (b, 1.0)])
}

/// `CE(S_main, y) + CE(S_aux, y)`.
pub fn hard_loss(g: &mut Graph, student: &ForwardBundle, labels: &[usize]) -> Result<Var> {
    teacher_loss(g, student, labels)
}

fn feature_term(g: &mut Graph, s: Var, t: Var, kind: FeatureLoss) -> Result<Var> {
    let t = g.detach(t);
    match kind {
        FeatureLoss::Euclidean => g.euclidean(s, t),
        FeatureLoss::Mse => g.mse(s, t),
    }
}

/// Feature alignment on the GAP vectors of both branches.
pub fn feature_distill(
    g: &mut Graph,
    fs_main: Var,
    ft_main: Var,
    fs_aux: Var,
    ft_aux: Var,
    kind: FeatureLoss,
) -> Result<Var> {
    let m = feature_term(g, fs_main, ft_main, kind)?;
    let a = feature_term(g, fs_aux, ft_aux, kind)?;
    g.weighted_sum(&[(m, 1.0), (a, 1.0)])
}

fn kl_term(g: &mut Graph, learner: Var, mentor: Var, tau: f32, dir: KlDirection) -> Result<Var> {
    let mentor = g.detach(mentor);
    match dir {
        KlDirection::MentorTarget => g.kl_div(mentor, learner, tau),
        KlDirection::LearnerTarget => g.kl_div(learner, mentor, tau),
    }
}

/// Softened-output KL between teacher and student on both heads.
pub fn response_distill(
    g: &mut Graph,
    s_main: Var,
    t_main: Var,
    s_aux: Var,
    t_aux: Var,
    tau: f32,
    dir: KlDirection,
) -> Result<Var> {
    let m = kl_term(g, s_main, t_main, tau, dir)?;
    let a = kl_term(g, s_aux, t_aux, tau, dir)?;
    g.weighted_sum(&[(m, 1.0), (a, 1.0)])
}

/// The student's aux head (detached) as mentor for its main head.
pub fn self_distill(g: &mut Graph, s_main: Var, s_aux: Var, tau_prime: f32, dir: KlDirection) -> Result<Var> {
    kl_term(g, s_main, s_aux, tau_prime, dir)
}

/// Builds the weighted student objective. Terms with a zero weight are
/// evaluated for reporting but left out of the differentiated sum.
pub fn student_total(
    g: &mut Graph,
    student: &ForwardBundle,
    teacher: &ForwardBundle,
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let w = &cfg.weights;
    w.validate()?;
    let hard = hard_loss(g, student, labels)?;
    let feature = feature_distill(
        g,
        student.f_main,
        teacher.f_main,
        student.f_aux,
        teacher.f_aux,
        cfg.feature_loss,
    )?;
    let response = response_distill(
        g,
        student.main_logits,
        teacher.main_logits,
        student.aux_logits,
        teacher.aux_logits,
        w.tau,
        cfg.kl_direction,
    )?;
    let sd = self_distill(
        g,
        student.main_logits,
        student.aux_logits,
        w.tau_prime,
        cfg.kl_direction,
    )?;
    let terms: Vec<(Var, f32)> = [
        (hard, w.lambda1),
        (feature, w.lambda2),
        (response, w.lambda3),
        (sd, w.lambda4),
    ]
    .into_iter()
    .filter(|&(_, l)| l != 0.0)
    .collect();
    let total = g.weighted_sum(&terms)?;
    let breakdown = LossBreakdown {
        hard: g.value(hard).item(),
        feature: g.value(feature).item(),
        response: g.value(response).item(),
        self_distill: g.value(sd).item(),
        total: g.value(total).item(),
        teacher_total: 0.0,
    };
    Ok((total, breakdown))
}
