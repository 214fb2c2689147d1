use serde::{Deserialize, Serialize};

use super::RolloutRecord;
use crate::autodiff::{Real, Var};
use crate::error::{Error, Result};

/// Per-frame distance used by the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Root of the mean squared difference.
    #[default]
    Rms,
    /// Euclidean norm over all components.
    L2,
}

/// Distance between two equally sized values.
pub fn norm<'t, T: Real>(a: &Var<'t, T>, b: &Var<'t, T>, kind: LossNorm) -> Result<Var<'t, T>> {
    if a.len() != b.len() {
        return Err(Error::shape("loss", format!("{} vs {} values", a.len(), b.len())));
    }
    let sq = a.reshape(&[a.len()])?.sub(&b.reshape(&[b.len()])?)?.square();
    Ok(match kind {
        LossNorm::Rms => sq.mean().sqrt(),
        LossNorm::L2 => sq.sum().sqrt(),
    })
}

/// `Σ_i λ_hires‖f̂_i − f_i‖ + λ_latent‖r̂_i − ℰ(s_i)‖`. A zero latent weight
/// drops the second term entirely.
pub fn loss_eq1<'t, T: Real>(
    record: &RolloutRecord<'t, T>,
    lambda_hires: f64,
    lambda_latent: f64,
    kind: LossNorm,
) -> Result<Var<'t, T>> {
    let n = record.decoded.len();
    if n == 0 || record.reference.len() != n || record.latent.len() != n || record.encoded.len() != n {
        return Err(Error::shape("loss_eq1", "record lengths differ or are zero"));
    }
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        terms.push(norm(&record.decoded[i], &record.reference[i], kind)?.scale(T::cast(lambda_hires)));
        if lambda_latent != 0.0 {
            terms.push(norm(&record.latent[i], &record.encoded[i], kind)?.scale(T::cast(lambda_latent)));
        }
    }
    let refs: Vec<&Var<'t, T>> = terms.iter().collect();
    Ok(Var::concat(&refs)?.sum())
}

/// Corrector objective: reduced states against linearly down-sampled
/// references.
pub fn sol_loss<'t, T: Real>(
    latent: &[Var<'t, T>],
    targets: &[Var<'t, T>],
    lambda: f64,
    kind: LossNorm,
) -> Result<Var<'t, T>> {
    if latent.is_empty() || latent.len() != targets.len() {
        return Err(Error::shape("sol_loss", "record lengths differ or are zero"));
    }
    let terms: Vec<Var<'t, T>> = latent
        .iter()
        .zip(targets)
        .map(|(a, b)| Ok(norm(a, b, kind)?.scale(T::cast(lambda))))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var<'t, T>> = terms.iter().collect();
    Ok(Var::concat(&refs)?.sum())
}
