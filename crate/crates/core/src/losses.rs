//! Joint-training objective for the relevance estimator and generator,
//! as plain numerical functions with analytic gradients.
//!
//! Parametrization used for the gradients:
//! - `re_logits[j]` are free reals; `P_RE = softmax(re_logits)`.
//! - `gold_loglik[j] = log P_G(gold | q, c_j)`; the teacher
//!   `Q_G = softmax(gold_loglik)` is a constant target (stop-gradient).
//! - Each `token_dist` row is the first-decoded-token distribution of the
//!   relevance model for one context; its logits are taken as `ln p`, which
//!   reproduces the row exactly under softmax.
//!
//! ```text
//! l_gen = -Σ_j ln(P_RE_j · P_G_j)            (sum of log-products)
//! l_re  = Σ_j P_RE_j · ln(P_RE_j / Q_G_j)
//! l_tok = Σ_rows (1 - p(TRUE) - p(FALSE))
//! l_tot = l_gen + α1·l_re + α2·l_tok
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::softmax;

/// Floor applied to every probability before a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossInputs {
    pub re_logits: Vec<f64>,
    pub gold_loglik: Vec<f64>,
    pub token_dist: Vec<Vec<f64>>,
    pub true_idx: usize,
    pub false_idx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_gen: f64,
    pub l_re: f64,
    pub l_tok: f64,
    pub l_tot: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// ∂l_tot / ∂re_logits.
    pub grad_re_logits: Vec<f64>,
    /// ∂l_tot / ∂(token logits), one row per context.
    pub grad_token_logits: Vec<Vec<f64>>,
    /// Set when some `P_RE · P_G` product hit [`PROB_FLOOR`].
    pub floored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLoss {
    pub value: f64,
    pub floored: bool,
}

fn check_distribution(p: &[f64], what: &'static str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty(what));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
    }
    Ok(())
}

/// `-Σ_j ln(P_RE_j · gold_prob_j)`, each product floored at [`PROB_FLOOR`].
pub fn loss_gen(p_re: &[f64], gold_probs: &[f64]) -> Result<GenLoss> {
    check_distribution(p_re, "relevance distribution")?;
    if p_re.len() != gold_probs.len() {
        return Err(Error::LengthMismatch {
            what: "P_RE vs gold probabilities",
            left: p_re.len(),
            right: gold_probs.len(),
        });
    }
    if gold_probs.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::InvalidArgument("gold probabilities must lie in [0, 1]".into()));
    }
    let mut floored = false;
    let value = p_re
        .iter()
        .zip(gold_probs)
        .map(|(p, g)| {
            let prod = p * g;
            if prod < PROB_FLOOR {
                floored = true;
                -PROB_FLOOR.ln()
            } else {
                -prod.ln()
            }
        })
        .sum();
    if floored {
        log::warn!("loss_gen: probability product floored at {PROB_FLOOR}");
    }
    Ok(GenLoss { value, floored })
}

/// Softmax over per-context gold log-likelihoods.
pub fn teacher_distribution(gold_loglik: &[f64]) -> Result<Vec<f64>> {
    if gold_loglik.iter().any(|f| !f.is_finite()) {
        return Err(Error::InvalidArgument("gold log-likelihoods must be finite".into()));
    }
    softmax(gold_loglik)
}

/// `D_KL(P ‖ Q)` with both sides floored at [`PROB_FLOOR`].
pub fn loss_re(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "P_RE vs Q_G",
            left: p.len(),
            right: q.len(),
        });
    }
    check_distribution(p, "P_RE")?;
    check_distribution(q, "Q_G")?;
    Ok(p
        .iter()
        .zip(q)
        .map(|(&pj, &qj)| {
            let pj = pj.max(PROB_FLOOR);
            pj * (pj / qj.max(PROB_FLOOR)).ln()
        })
        .sum())
}

/// Total probability of non-classification tokens, summed over rows.
pub fn loss_tok(rows: &[Vec<f64>], true_idx: usize, false_idx: usize) -> Result<f64> {
    let mut total = 0.0;
    for row in rows {
        for idx in [true_idx, false_idx] {
            if idx >= row.len() {
                return Err(Error::IndexOutOfRange { index: idx, len: row.len() });
            }
        }
        let class_mass = if true_idx == false_idx {
            row[true_idx]
        } else {
            row[true_idx] + row[false_idx]
        };
        total += row.iter().sum::<f64>() - class_mass;
    }
    Ok(total)
}

impl LossInputs {
    pub fn validate(&self) -> Result<()> {
        let n = self.re_logits.len();
        if n == 0 {
            return Err(Error::Empty("loss inputs"));
        }
        if self.gold_loglik.len() != n {
            return Err(Error::LengthMismatch {
                what: "re_logits vs gold_loglik",
                left: n,
                right: self.gold_loglik.len(),
            });
        }
        if self.token_dist.len() != n {
            return Err(Error::LengthMismatch {
                what: "re_logits vs token_dist rows",
                left: n,
                right: self.token_dist.len(),
            });
        }
        if self.re_logits.iter().chain(&self.gold_loglik).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite loss input".into()));
        }
        if self.gold_loglik.iter().any(|&f| f > 0.0) {
            return Err(Error::InvalidArgument("gold log-likelihoods must be <= 0".into()));
        }
        if self.true_idx == self.false_idx {
            return Err(Error::InvalidArgument("TRUE and FALSE token indices must differ".into()));
        }
        for row in &self.token_dist {
            check_distribution(row, "token distribution")?;
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("token distribution row sums to {s}")));
            }
        }
        Ok(())
    }
}

/// All four losses and the analytic gradients of `l_tot`.
pub fn loss_total(inputs: &LossInputs, alpha1: f64, alpha2: f64) -> Result<LossBundle> {
    inputs.validate()?;
    if !(alpha1 >= 0.0 && alpha2 >= 0.0) {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    let p = softmax(&inputs.re_logits)?;
    let q = teacher_distribution(&inputs.gold_loglik)?;
    let gold: Vec<f64> = inputs.gold_loglik.iter().map(|f| f.exp()).collect();

    let gen = loss_gen(&p, &gold)?;
    let l_re = loss_re(&p, &q)?;
    let l_tok = loss_tok(&inputs.token_dist, inputs.true_idx, inputs.false_idx)?;

    // l_gen: only unfloored terms depend on the logits.
    // ∂/∂z_k [-ln P_j] = P_k - δ_jk.
    let active: Vec<bool> = p.iter().zip(&gold).map(|(pj, gj)| pj * gj >= PROB_FLOOR).collect();
    let n_active = active.iter().filter(|a| **a).count() as f64;
    // l_re: ∂/∂z_k = P_k (ln(P_k/Q_k) - l_re).
    let grad_re_logits = p
        .iter()
        .zip(&q)
        .zip(&active)
        .map(|((&pk, &qk), &act)| {
            let d_gen = n_active * pk - if act { 1.0 } else { 0.0 };
            let d_re = pk * ((pk.max(PROB_FLOOR) / qk.max(PROB_FLOOR)).ln() - l_re);
            d_gen + alpha1 * d_re
        })
        .collect();

    // l_tok row: 1 - p_T - p_F, with p = softmax(u).
    // ∂/∂u_t = (p_T + p_F)·p_t - [t ∈ {T, F}]·p_t.
    let grad_token_logits = inputs
        .token_dist
        .iter()
        .map(|row| {
            let class_mass = row[inputs.true_idx] + row[inputs.false_idx];
            row.iter()
                .enumerate()
                .map(|(t, &pt)| {
                    let is_class = t == inputs.true_idx || t == inputs.false_idx;
                    alpha2 * (class_mass * pt - if is_class { pt } else { 0.0 })
                })
                .collect()
        })
        .collect();

    Ok(LossBundle {
        l_gen: gen.value,
        l_re,
        l_tok,
        l_tot: gen.value + alpha1 * l_re + alpha2 * l_tok,
        alpha1,
        alpha2,
        grad_re_logits,
        grad_token_logits,
        floored: gen.floored,
    })
}

/// Vocabulary size of the random instances used by [`check_gradients`].
pub const TOY_VOCAB: usize = 6;

/// A random instance with `TRUE = 0`, `FALSE = 1`.
pub fn random_inputs(seed: u64, n_contexts: usize) -> LossInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let re_logits = (0..n_contexts).map(|_| rng.random_range(-3.0..3.0)).collect();
    let gold_loglik = (0..n_contexts).map(|_| rng.random_range(-6.0..-0.01)).collect();
    let token_dist = (0..n_contexts)
        .map(|_| {
            let logits: Vec<f64> = (0..TOY_VOCAB).map(|_| rng.random_range(-2.0..2.0)).collect();
            softmax(&logits).expect("vocabulary is non-empty")
        })
        .collect();
    LossInputs {
        re_logits,
        gold_loglik,
        token_dist,
        true_idx: 0,
        false_idx: 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Max relative error over the relevance-logit gradient.
    pub max_rel_error: f64,
    /// Same, over the token-logit gradient.
    pub max_rel_error_tokens: f64,
}

/// Relative error with an absolute floor on the denominator, so components
/// that are zero up to rounding do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `l_tot` (α1 = α2 = 1) with central finite
/// differences on a seeded random instance.
pub fn check_gradients(seed: u64, n_contexts: usize, h: f64) -> Result<GradCheck> {
    if n_contexts < 2 {
        return Err(Error::InvalidArgument("gradient check needs at least 2 contexts".into()));
    }
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidArgument(format!("step {h} outside (0, 1e-3]")));
    }
    let inputs = random_inputs(seed, n_contexts);
    check_gradients_on(&inputs, 1.0, 1.0, h)
}

pub fn check_gradients_on(inputs: &LossInputs, alpha1: f64, alpha2: f64, h: f64) -> Result<GradCheck> {
    let bundle = loss_total(inputs, alpha1, alpha2)?;
    let l_tot_at = |x: &LossInputs| loss_total(x, alpha1, alpha2).map(|b| b.l_tot);

    let mut max_rel_error: f64 = 0.0;
    for k in 0..inputs.re_logits.len() {
        let mut plus = inputs.clone();
        let mut minus = inputs.clone();
        plus.re_logits[k] += h;
        minus.re_logits[k] -= h;
        let numeric = (l_tot_at(&plus)? - l_tot_at(&minus)?) / (2.0 * h);
        max_rel_error = max_rel_error.max(relative_error(bundle.grad_re_logits[k], numeric));
    }

    let mut max_rel_error_tokens: f64 = 0.0;
    for (r, row) in inputs.token_dist.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|p| p.ln()).collect();
        for t in 0..row.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut u = logits.clone();
                u[t] += delta;
                let mut x = inputs.clone();
                x.token_dist[r] = softmax(&u)?;
                l_tot_at(&x)
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            max_rel_error_tokens =
                max_rel_error_tokens.max(relative_error(bundle.grad_token_logits[r][t], numeric));
        }
    }

    Ok(GradCheck {
        max_rel_error,
        max_rel_error_tokens,
    })
}
