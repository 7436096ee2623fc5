//! Loss terms of the shared-private adversarial objective.
//!
//! Each term is recorded on a [`Tape`] so it can be differentiated. The
//! per-domain expectations are realized as mini-batch means; the trainer sums
//! them over domains.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Mean negative log-likelihood of the gold classes. `labels` are 0-based.
pub fn classification_loss(tape: &mut Tape<'_>, class_log_probs: Var, labels: &[usize]) -> Result<Var> {
    nll_checked(tape, class_log_probs, labels, "class label")
}

/// Mean negative log-likelihood the discriminator assigns to each sample's
/// true domain. `domains` are 0-based.
pub fn adversarial_loss(tape: &mut Tape<'_>, domain_log_probs: Var, domains: &[usize]) -> Result<Var> {
    nll_checked(tape, domain_log_probs, domains, "domain index")
}

fn nll_checked(tape: &mut Tape<'_>, log_probs: Var, targets: &[usize], what: &'static str) -> Result<Var> {
    let limit = tape.value(log_probs).cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= limit) {
        return Err(Error::Index {
            what,
            index: bad,
            limit,
        });
    }
    tape.nll(log_probs, targets)
}

/// `(1/B)·‖A‖_F` where `A = exp(class_log_probs)` is the batch output
/// matrix. Since every row of `A` is a distribution, `‖A‖_F ≥ √(B/K) > 0`
/// and the norm is always differentiable here.
pub fn batch_frobenius_loss(tape: &mut Tape<'_>, class_log_probs: Var) -> Result<Var> {
    let b = tape.value(class_log_probs).rows();
    if b == 0 {
        return Err(Error::Shape {
            op: "batch_frobenius_loss",
            lhs: tape.value(class_log_probs).shape(),
            rhs: (1, 1),
        });
    }
    let probs = tape.exp(class_log_probs);
    let norm = tape.frobenius_norm(probs);
    Ok(tape.scale(norm, 1.0 / b as f64))
}

/// The three loss values and their weighted combination
/// `l_c + α·l_adv − β·l_bf`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_adv: f64,
    pub l_bf: f64,
    pub combined: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_c.is_finite() && self.l_adv.is_finite() && self.l_bf.is_finite() && self.combined.is_finite()
    }

    /// The objective the feature extractors and classifier descend: they
    /// maximize the discriminator's loss, so the adversarial term enters
    /// with a minus sign.
    pub fn feature_objective(&self) -> f64 {
        self.l_c - self.alpha * self.l_adv - self.beta * self.l_bf
    }
}

pub fn combined_objective(l_c: f64, l_adv: f64, l_bf: f64, alpha: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        l_c,
        l_adv,
        l_bf,
        combined: l_c + alpha * l_adv - beta * l_bf,
        alpha,
        beta,
    }
}
