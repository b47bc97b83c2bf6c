//! Held-out evaluation: predictive log-likelihood averaged over posterior
//! samples, and test perplexity for count data.
//!
//! Word probabilities for perplexity come from normalizing each document's
//! predicted Poisson rates across the vocabulary, the usual multinomial
//! convention for Poisson factorization; the reports carry a note naming
//! the convention.

use crate::error::{Error, Result};
use crate::estimators::VariationalState;
use crate::models::{CountMatrix, ObservedModel};
use crate::rng::RngState;
use crate::stats;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub stddev: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Per-entry mean held-out log-likelihood at fixed latents.
pub fn predictive_log_likelihood_at(
    model: &dyn ObservedModel,
    latents: &[f64],
    heldout: &[f64],
) -> Result<f64> {
    let (rows, cols) = model.data_shape();
    if heldout.len() != rows * cols {
        return Err(Error::Domain(format!(
            "held-out data has {} entries, model expects {}",
            heldout.len(),
            rows * cols
        )));
    }
    let params = model.predicted_params(latents)?;
    let mut total = 0.0;
    for (&p, &x) in params.iter().zip(heldout) {
        total += model.entry_log_lik(p, x)?;
    }
    Ok(total / heldout.len() as f64)
}

/// Predictive log-likelihood per held-out entry, averaged over posterior
/// samples; the report carries the mean and the spread across samples.
pub fn predictive_log_likelihood(
    model: &dyn ObservedModel,
    fitted: &VariationalState,
    heldout: &[f64],
    n_samples: usize,
    rng: &mut RngState,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let mut vals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = fitted.sample(rng)?;
        vals.push(predictive_log_likelihood_at(model, &z, heldout)?);
    }
    let (mean, var) = stats::mean_variance(&vals);
    Ok(EvalReport {
        metric: "predictive_log_likelihood".into(),
        value: mean,
        stddev: var.sqrt(),
        n_samples,
        note: None,
    })
}

/// Test perplexity with one posterior sample:
/// exp(−Σ_docs Σ_{held-out w} log p(w | doc) / #held-out tokens), with
/// p(w | doc) the document's predicted rates normalized over the
/// vocabulary.
pub fn perplexity(
    model: &dyn ObservedModel,
    fitted: &VariationalState,
    heldout: &CountMatrix,
    rng: &mut RngState,
) -> Result<EvalReport> {
    if !model.is_count_model() {
        return Err(Error::Domain(
            "perplexity is defined for count models only".into(),
        ));
    }
    let (rows, cols) = model.data_shape();
    if heldout.rows != rows || heldout.cols != cols {
        return Err(Error::Domain(format!(
            "held-out counts are {}x{}, model expects {rows}x{cols}",
            heldout.rows, heldout.cols
        )));
    }
    let z = fitted.sample(rng)?;
    let value = perplexity_at(model, &z, heldout)?;
    Ok(EvalReport {
        metric: "perplexity".into(),
        value,
        stddev: 0.0,
        n_samples: 1,
        note: Some("word probabilities are per-document rate-normalized".into()),
    })
}

/// Perplexity at fixed latents.
pub fn perplexity_at(
    model: &dyn ObservedModel,
    latents: &[f64],
    heldout: &CountMatrix,
) -> Result<f64> {
    let (rows, cols) = model.data_shape();
    let rates = model.predicted_params(latents)?;
    let mut log_prob_sum = 0.0;
    let mut tokens = 0u64;
    for doc in 0..rows {
        let row = &rates[doc * cols..(doc + 1) * cols];
        let mass: f64 = row.iter().sum();
        let held_in_doc: u64 = (0..cols).map(|w| heldout.get(doc, w)).sum();
        if held_in_doc == 0 {
            continue;
        }
        if mass <= 0.0 || !mass.is_finite() {
            return Err(Error::Numerical(format!(
                "document {doc} has zero predicted rate mass"
            )));
        }
        for w in 0..cols {
            let c = heldout.get(doc, w);
            if c == 0 {
                continue;
            }
            let p = row[w] / mass;
            if p <= 0.0 {
                return Err(Error::Numerical(format!(
                    "held-out word {w} in document {doc} has zero predicted probability"
                )));
            }
            log_prob_sum += c as f64 * p.ln();
            tokens += c;
        }
    }
    if tokens == 0 {
        return Err(Error::Domain("no held-out tokens".into()));
    }
    Ok((-log_prob_sum / tokens as f64).exp())
}

/// Split each document's tokens independently into kept and held-out
/// counts; `fraction` is the held-out probability per token. Deterministic
/// given the stream.
pub fn split_count_tokens(
    data: &CountMatrix,
    fraction: f64,
    rng: &mut RngState,
) -> Result<(CountMatrix, CountMatrix)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Domain(format!(
            "held-out fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut kept = Vec::with_capacity(data.data.len());
    let mut held = Vec::with_capacity(data.data.len());
    for &c in &data.data {
        let mut h = 0u64;
        for _ in 0..c {
            if rng.bernoulli(fraction)? {
                h += 1;
            }
        }
        held.push(h);
        kept.push(c - h);
    }
    Ok((
        CountMatrix::new(data.rows, data.cols, kept)?,
        CountMatrix::new(data.rows, data.cols, held)?,
    ))
}
