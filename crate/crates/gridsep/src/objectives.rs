//! Training objectives and evaluation metrics.
//!
//! The training loss is SI-SDR with a learned-free scale on the *estimate*
//! (`si_sdr_se_loss`), optionally plus a mixture-constraint L1 term
//! (`mc_loss`). Both are built on the tape so gradients flow through the
//! scale factors. Evaluation metrics (`si_sdr_metric`, `si_sdri`) are plain
//! functions using the community-standard scale-the-*target* form; the two
//! coincide at the optimum but are not interchangeable mid-training.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
/// Guard added to denominators and inside the log. Also sets the metric cap:
/// a perfect estimate scores exactly 10·log10(1/ε) = 80 dB.
pub const LOSS_EPS: f64 = 1e-8;

/// Which loss `pit` minimizes over assignments.
#[derive(Debug, Clone, Copy)]
pub enum PitLoss {
    SiSdrSe,
    /// SI-SDR-SE plus the L1 mixture-constraint term against this mixture.
    MixtureConstraint(TensorId),
}

/// Outcome of a permutation-invariant loss evaluation.
pub struct PitResult {
    /// Loss under the best assignment, still on the tape (backward flows
    /// only through the winning branch).
    pub loss: TensorId,
    /// `permutation[c]` is the reference index assigned to estimate `c`.
    pub permutation: Vec<usize>,
    /// Scale factors α̂ of the winning assignment, one per estimate.
    pub alphas: Vec<f64>,
}

fn check_sources<S: Scalar>(
    tape: &Tape<S>,
    ests: &[TensorId],
    refs: &[TensorId],
) -> Result<usize> {
    if ests.is_empty() || ests.len() != refs.len() {
        return Err(Error::invalid(
            "objectives",
            format!("{} estimates vs {} references", ests.len(), refs.len()),
        ));
    }
    let shape = tape.value(ests[0])?.shape().to_vec();
    for &id in ests.iter().chain(refs) {
        if tape.value(id)?.shape() != shape {
            return Err(Error::shape("objectives", "all sources must share one shape"));
        }
    }
    for &r in refs {
        if Scalar::to_f64(kernels::sumsq(tape.value(r)?.data())) == 0.0 {
            return Err(Error::invalid("objectives", "zero-energy reference"));
        }
    }
    Ok(shape.iter().product())
}

/// α̂ = (ŝᵀs)/(ŝᵀŝ + ε) as a tape node.
fn scale_factor_node<S: Scalar>(
    tape: &mut Tape<S>,
    est: TensorId,
    reference: TensorId,
) -> Result<TensorId> {
    let num = tape.dot(est, reference)?;
    let den = tape.dot(est, est)?;
    let den = tape.add_const(den, S::from_f64(LOSS_EPS))?;
    tape.div(num, den)
}

/// −10·log10( ‖s‖² / (‖α̂ŝ − s‖² + ε) + ε ) for one (estimate, reference) pair.
fn pair_loss<S: Scalar>(
    tape: &mut Tape<S>,
    est: TensorId,
    reference: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    let scaled = tape.scale_by_scalar(est, alpha)?;
    let err = tape.sub(scaled, reference)?;
    let err_sq = tape.dot(err, err)?;
    let den = tape.add_const(err_sq, S::from_f64(LOSS_EPS))?;
    let num = tape.dot(reference, reference)?;
    let ratio = tape.div(num, den)?;
    let guarded = tape.add_const(ratio, S::from_f64(LOSS_EPS))?;
    let l = tape.ln(guarded)?;
    tape.scale(l, S::from_f64(-10.0 / std::f64::consts::LN_10))
}

/// (1/N)·‖Σ_c α̂⁽ᶜ⁾ŝ⁽ᶜ⁾ − x‖₁ given the per-estimate scale nodes.
fn mc_term<S: Scalar>(
    tape: &mut Tape<S>,
    ests: &[TensorId],
    alphas: &[TensorId],
    mixture: TensorId,
    n: usize,
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (&e, &a) in ests.iter().zip(alphas) {
        let scaled = tape.scale_by_scalar(e, a)?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => tape.add(prev, scaled)?,
        });
    }
    let diff = tape.sub(acc.unwrap(), mixture)?;
    let l1 = tape.abs_sum(diff)?;
    tape.scale(l1, S::from_f64(1.0 / n as f64))
}

/// Eq. (1)-style loss under a fixed (identity) assignment:
/// −Σ_c 10·log10(‖s⁽ᶜ⁾‖² / (‖α̂⁽ᶜ⁾ŝ⁽ᶜ⁾ − s⁽ᶜ⁾‖² + ε) + ε).
pub fn si_sdr_se_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ests: &[TensorId],
    refs: &[TensorId],
) -> Result<TensorId> {
    check_sources(tape, ests, refs)?;
    let mut total: Option<TensorId> = None;
    for (&e, &r) in ests.iter().zip(refs) {
        let alpha = scale_factor_node(tape, e, r)?;
        let l = pair_loss(tape, e, r, alpha)?;
        total = Some(match total {
            None => l,
            Some(prev) => tape.add(prev, l)?,
        });
    }
    Ok(total.unwrap())
}

/// `si_sdr_se_loss` plus the unweighted mixture-constraint term.
pub fn mc_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ests: &[TensorId],
    refs: &[TensorId],
    mixture: TensorId,
) -> Result<TensorId> {
    let n = check_sources(tape, ests, refs)?;
    if tape.value(mixture)?.shape() != tape.value(ests[0])?.shape() {
        return Err(Error::shape("mc_loss", "mixture shape mismatch"));
    }
    let mut total: Option<TensorId> = None;
    let mut alphas = Vec::with_capacity(ests.len());
    for (&e, &r) in ests.iter().zip(refs) {
        let alpha = scale_factor_node(tape, e, r)?;
        alphas.push(alpha);
        let l = pair_loss(tape, e, r, alpha)?;
        total = Some(match total {
            None => l,
            Some(prev) => tape.add(prev, l)?,
        });
    }
    let mc = mc_term(tape, ests, &alphas, mixture, n)?;
    tape.add(total.unwrap(), mc)
}

/// All permutations of {0..c}, lexicographically ordered.
fn permutations(c: usize) -> Vec<Vec<usize>> {
    fn rec(c: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == c {
            out.push(cur.clone());
            return;
        }
        for i in 0..c {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(c, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(c, &mut Vec::new(), &mut vec![false; c], &mut out);
    out
}

/// Utterance-level permutation-invariant training loss: evaluates `loss`
/// under every assignment of estimates to references (exhaustive, C ≤ 4) and
/// returns the minimizing one. Ties break toward the lexicographically
/// smallest permutation.
pub fn pit<S: Scalar>(
    tape: &mut Tape<S>,
    ests: &[TensorId],
    refs: &[TensorId],
    loss: PitLoss,
) -> Result<PitResult> {
    let n = check_sources(tape, ests, refs)?;
    let c = ests.len();
    if c > 4 {
        return Err(Error::invalid("pit", format!("exhaustive search capped at 4 sources, got {c}")));
    }
    if let PitLoss::MixtureConstraint(x) = loss {
        if tape.value(x)?.shape() != tape.value(ests[0])?.shape() {
            return Err(Error::shape("pit", "mixture shape mismatch"));
        }
    }
    // Pairwise nodes shared by every assignment that uses them.
    let mut alpha: Vec<Vec<TensorId>> = Vec::with_capacity(c);
    let mut pair: Vec<Vec<TensorId>> = Vec::with_capacity(c);
    for e in 0..c {
        let mut arow = Vec::with_capacity(c);
        let mut prow = Vec::with_capacity(c);
        for r in 0..c {
            let a = scale_factor_node(tape, ests[e], refs[r])?;
            prow.push(pair_loss(tape, ests[e], refs[r], a)?);
            arow.push(a);
        }
        alpha.push(arow);
        pair.push(prow);
    }
    let mut best: Option<(f64, TensorId, Vec<usize>)> = None;
    for perm in permutations(c) {
        let mut l = pair[0][perm[0]];
        for e in 1..c {
            l = tape.add(l, pair[e][perm[e]])?;
        }
        if let PitLoss::MixtureConstraint(x) = loss {
            let assigned: Vec<TensorId> = (0..c).map(|e| alpha[e][perm[e]]).collect();
            let t = mc_term(tape, ests, &assigned, x, n)?;
            l = tape.add(l, t)?;
        }
        let lv = Scalar::to_f64(tape.scalar_value(l)?);
        if best.as_ref().is_none_or(|b| lv < b.0) {
            best = Some((lv, l, perm));
        }
    }
    let (_, loss_id, permutation) = best.unwrap();
    let mut alphas = Vec::with_capacity(c);
    for (e, &r) in permutation.iter().enumerate() {
        alphas.push(Scalar::to_f64(tape.scalar_value(alpha[e][r])?));
    }
    Ok(PitResult { loss: loss_id, permutation, alphas })
}

/// Closed-form least-squares scale: (estᵀref)/(estᵀest + ε).
pub fn scale_factor(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape("scale_factor", "length mismatch"));
    }
    Ok(kernels::dot(est, reference) / (kernels::dot(est, est) + LOSS_EPS))
}

/// Scale-the-target SI-SDR in dB: 10·log10(‖βs‖²/‖ŝ−βs‖²) with
/// β = (ŝᵀs)/(sᵀs), ε-capped to ±80 dB.
pub fn si_sdr_metric(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape("si_sdr_metric", "length mismatch"));
    }
    let ref_sq = kernels::sumsq(reference);
    let est_sq = kernels::sumsq(est);
    if ref_sq == 0.0 || est_sq == 0.0 {
        return Err(Error::invalid("si_sdr_metric", "zero-energy input"));
    }
    let beta = kernels::dot(est, reference) / ref_sq;
    let target_sq = beta * beta * ref_sq;
    let mut noise_sq = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let d = e - beta * r;
        noise_sq += d * d;
    }
    let ratio = target_sq / (noise_sq + LOSS_EPS * target_sq);
    Ok((10.0 * ratio.log10()).clamp(-80.0, 80.0))
}

/// SI-SDR improvement over the mixture, averaged across sources under the
/// metric-maximizing assignment (ties toward the lexicographically smallest
/// permutation).
pub fn si_sdri(ests: &[&[f64]], refs: &[&[f64]], mixture: &[f64]) -> Result<f64> {
    if ests.is_empty() || ests.len() != refs.len() {
        return Err(Error::invalid(
            "si_sdri",
            format!("{} estimates vs {} references", ests.len(), refs.len()),
        ));
    }
    let c = ests.len();
    if c > 4 {
        return Err(Error::invalid("si_sdri", format!("exhaustive search capped at 4 sources, got {c}")));
    }
    let mut m = vec![vec![0.0; c]; c];
    let mut mix_m = vec![0.0; c];
    for r in 0..c {
        mix_m[r] = si_sdr_metric(mixture, refs[r])?;
        for e in 0..c {
            m[e][r] = si_sdr_metric(ests[e], refs[r])?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let total: f64 = (0..c).map(|e| m[e][perm[e]]).sum();
        if best.as_ref().is_none_or(|b| total > b.0) {
            best = Some((total, perm));
        }
    }
    let (_, perm) = best.unwrap();
    let improvement: f64 = (0..c).map(|e| m[e][perm[e]] - mix_m[perm[e]]).sum();
    Ok(improvement / c as f64)
}
