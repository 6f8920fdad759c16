//! Objectives for semi-supervised and vanilla GAN training.
//!
//! Class labels are 0-based: real classes are `0..k` and the fake class is
//! index `k` of a `k+1`-wide logit row. Every function records onto the
//! caller's tape and returns a scalar node.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DEFAULT_SMOOTHING: f64 = 0.9;

/// Loss values of one semi-supervised iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Supervised negative log-likelihood on labeled reals.
    pub theta: f64,
    /// Unsupervised real-vs-fake loss.
    pub delta: f64,
    /// `theta + delta`.
    pub total: f64,
    pub gen_loss: f64,
}

fn clamp_probs<T: Real>(tape: &mut Tape<T>, p: Var) -> Var {
    tape.clamp(p, T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP))
}

fn logits_width<T: Real>(tape: &Tape<T>, logits: Var) -> Result<(usize, usize)> {
    match tape.value(logits).shape()[..] {
        [b, w] if w >= 2 => Ok((b, w)),
        _ => Err(Error::shape("loss", &[0, 0], tape.value(logits).shape())),
    }
}

/// `p(fake | x)` column of a `B×(k+1)` logit node, as a `B` vector.
pub fn fake_probability<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let (b, w) = logits_width(tape, logits)?;
    let p = tape.softmax(logits)?;
    let pf = tape.slice_cols(p, w - 1, w)?;
    tape.reshape(pf, &[b])
}

/// Scales the single positive entry of each one-hot row to `alpha`.
pub fn apply_label_smoothing<T: Real>(one_hot: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("smoothing alpha must be in (0, 1], got {alpha}")));
    }
    let [_, w] = one_hot.shape()[..] else {
        return Err(Error::shape("label_smoothing", &[0, 0], one_hot.shape()));
    };
    for (r, row) in one_hot.data().chunks(w).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != w - 1 {
            return Err(Error::invalid(format!("row {r} is not one-hot")));
        }
    }
    let a = T::lit(alpha);
    Ok(one_hot.map(|v| if v == T::one() { a } else { v }))
}

pub fn one_hot<T: Real>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([labels.len(), k]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} outside real classes 0..{k}")));
        }
        t.data_mut()[r * k + y] = T::one();
    }
    Ok(t)
}

/// Supervised term: `−mean log p(y | x, y < k+1)` with the softmax
/// renormalized over the `k` real-class logits. `smoothing = Some(α)`
/// scales the target to `α`. An empty label set contributes 0.
pub fn supervised_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    smoothing: Option<f64>,
) -> Result<Var> {
    let (b, w) = logits_width(tape, logits)?;
    let k = w - 1;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} is the fake class or out of range (k = {k})")));
    }
    let real = tape.slice_cols(logits, 0, k)?;
    let logp = tape.log_softmax(real)?;
    let mut targets = one_hot::<T>(labels, k)?;
    if let Some(alpha) = smoothing {
        targets = apply_label_smoothing(&targets, alpha)?;
    }
    let t = tape.constant(targets);
    let weighted = tape.mul(logp, t)?;
    let total = tape.sum(weighted)?;
    tape.mul_scalar(total, -T::one() / T::lit(b as f64))
}

/// Supervised term over a subset of rows of a larger logit node.
pub fn supervised_loss_on_rows<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    rows: &[usize],
    labels: &[usize],
    smoothing: Option<f64>,
) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let sub = tape.select_rows(logits, rows)?;
    supervised_loss(tape, sub, labels, smoothing)
}

/// Unsupervised term: `−mean_real log(1 − p_fake) − mean_fake log p_fake`.
pub fn unsupervised_loss<T: Real>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let pr = fake_probability(tape, real_logits)?;
    let pr = clamp_probs(tape, pr);
    let not_fake = tape.one_minus(pr)?;
    let lr = tape.log(not_fake)?;
    let real_term = tape.mean(lr)?;

    let pf = fake_probability(tape, fake_logits)?;
    let pf = clamp_probs(tape, pf);
    let lf = tape.log(pf)?;
    let fake_term = tape.mean(lf)?;

    let s = tape.add(real_term, fake_term)?;
    tape.neg(s)
}

/// `L = θ + δ`
pub fn total_loss<T: Real>(tape: &mut Tape<T>, theta: Var, delta: Var) -> Result<Var> {
    tape.add(theta, delta)
}

/// Squared L2 distance between batch-mean feature vectors.
pub fn feature_matching_loss<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let rs = tape.value(real).shape().to_vec();
    let fs = tape.value(fake).shape().to_vec();
    if rs.len() != 2 || fs.len() != 2 || rs[1] != fs[1] {
        return Err(Error::shape("feature_matching", &rs, &fs));
    }
    let mr = tape.reduce(crate::tensor::ReduceOp::Mean, real, &[0])?;
    let mf = tape.reduce(crate::tensor::ReduceOp::Mean, fake, &[0])?;
    let d = tape.sub(mr, mf)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

/// `mean log D(x) + mean log(1 − D(G(z)))`: the quantity the vanilla
/// discriminator ascends.
pub fn vanilla_d_objective<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = clamp_probs(tape, d_real);
    let lr = tape.log(r)?;
    let real_term = tape.mean(lr)?;
    let g = vanilla_g_objective(tape, d_fake)?;
    tape.add(real_term, g)
}

/// `mean log(1 − D(G(z)))`: the quantity the vanilla generator descends.
pub fn vanilla_g_objective<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let f = clamp_probs(tape, d_fake);
    let nf = tape.one_minus(f)?;
    let lf = tape.log(nf)?;
    tape.mean(lf)
}

/// Generator objective for semi-supervised training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenLossMode {
    #[default]
    FeatureMatching,
    Nonsaturating,
}

impl FromStr for GenLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_matching" => Ok(Self::FeatureMatching),
            "nonsaturating" => Ok(Self::Nonsaturating),
            other => Err(Error::invalid(format!("unknown generator loss mode `{other}`"))),
        }
    }
}

/// Feature matching compares tapped features of the real and generated
/// batches; the nonsaturating form is `−mean log(1 − p_fake(G(z)))`.
pub fn generator_loss<T: Real>(
    tape: &mut Tape<T>,
    mode: GenLossMode,
    real_features: Var,
    fake_features: Var,
    fake_logits: Var,
) -> Result<Var> {
    match mode {
        GenLossMode::FeatureMatching => feature_matching_loss(tape, real_features, fake_features),
        GenLossMode::Nonsaturating => {
            let pf = fake_probability(tape, fake_logits)?;
            let pf = clamp_probs(tape, pf);
            let nf = tape.one_minus(pf)?;
            let l = tape.log(nf)?;
            let m = tape.mean(l)?;
            tape.neg(m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn logits(rows: &[&[f64]]) -> Tensor<f64> {
        let w = rows[0].len();
        Tensor::new([rows.len(), w], rows.concat()).unwrap()
    }

    #[test]
    fn supervised_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(logits(&[&[2f64.ln(), 0.0, 0.0]]));
        let th = supervised_loss(&mut tape, l, &[0], None).unwrap();
        assert!((scalar(&tape, th) + (2.0f64 / 3.0).ln()).abs() < 1e-12);

        let l = tape.constant(logits(&[&[60.0, 0.0, 0.0, 5.0]]));
        let th = supervised_loss(&mut tape, l, &[0], None).unwrap();
        assert!(scalar(&tape, th) < 1e-20);

        let l = tape.constant(Tensor::full([3, 6], 0.3));
        let th = supervised_loss(&mut tape, l, &[0, 2, 4], None).unwrap();
        assert!((scalar(&tape, th) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_rejects_fake_label() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros([1, 3]));
        assert!(supervised_loss(&mut tape, l, &[2], None).is_err());
        assert!(supervised_loss(&mut tape, l, &[7], None).is_err());
        assert!(supervised_loss(&mut tape, l, &[0, 1], None).is_err());
    }

    #[test]
    fn supervised_shift_invariance_over_real_logits() {
        let mut tape = Tape::new();
        let a = tape.constant(logits(&[&[0.3, -1.2, 2.0, 0.7]]));
        let b = tape.constant(logits(&[&[5.3, 3.8, 7.0, -9.0]]));
        let la = supervised_loss(&mut tape, a, &[1], None).unwrap();
        let lb = supervised_loss(&mut tape, b, &[1], None).unwrap();
        assert!((scalar(&tape, la) - scalar(&tape, lb)).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_examples() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros([1, 3]));
        let f = tape.constant(Tensor::zeros([1, 3]));
        let d = unsupervised_loss(&mut tape, r, f).unwrap();
        let expect = -(2.0f64 / 3.0).ln() - (1.0f64 / 3.0).ln();
        assert!((scalar(&tape, d) - expect).abs() < 1e-12);

        let r = tape.constant(logits(&[&[50.0, 0.0, -50.0]]));
        let f = tape.constant(logits(&[&[-50.0, -50.0, 50.0]]));
        let d = unsupervised_loss(&mut tape, r, f).unwrap();
        assert!(scalar(&tape, d) < 1e-6);
    }

    #[test]
    fn totals_and_feature_matching() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::scalar(0.4055));
        let d = tape.constant(Tensor::scalar(1.5041));
        let l = total_loss(&mut tape, t, d).unwrap();
        assert!((scalar(&tape, l) - 1.9096).abs() < 1e-12);

        let a = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new([1, 2], vec![0.0, 1.0]).unwrap());
        let fm = feature_matching_loss(&mut tape, a, b).unwrap();
        assert_eq!(scalar(&tape, fm), 2.0);
        let fm0 = feature_matching_loss(&mut tape, a, a).unwrap();
        assert_eq!(scalar(&tape, fm0), 0.0);
        let c = tape.constant(Tensor::zeros([1, 3]));
        assert!(feature_matching_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn vanilla_objectives() {
        let mut tape = Tape::new();
        let half = tape.constant(Tensor::full([4], 0.5));
        let d = vanilla_d_objective(&mut tape, half, half).unwrap();
        assert!((scalar(&tape, d) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let g = vanilla_g_objective(&mut tape, half).unwrap();
        assert!((scalar(&tape, g) - 0.5f64.ln()).abs() < 1e-12);

        let one = tape.constant(Tensor::ones([2]));
        let zero = tape.constant(Tensor::zeros([2]));
        let best = vanilla_d_objective(&mut tape, one, zero).unwrap();
        let v = scalar(&tape, best);
        assert!(v.is_finite() && v <= 0.0 && v > -1e-6);
        let gw = vanilla_g_objective(&mut tape, one).unwrap();
        assert!(scalar(&tape, gw) < -15.0);
    }

    #[test]
    fn generator_modes() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn([3, 4], |i| i as f64));
        let z = tape.constant(Tensor::zeros([3, 3]));
        let fm = generator_loss(&mut tape, GenLossMode::FeatureMatching, f, f, z).unwrap();
        assert_eq!(scalar(&tape, fm), 0.0);
        let ns = generator_loss(&mut tape, GenLossMode::Nonsaturating, f, f, z).unwrap();
        assert!((scalar(&tape, ns) + (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!("bogus".parse::<GenLossMode>().is_err());
        assert_eq!("nonsaturating".parse::<GenLossMode>().unwrap(), GenLossMode::Nonsaturating);
    }

    #[test]
    fn smoothing() {
        let t = Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let s = apply_label_smoothing(&t, 0.9).unwrap();
        assert_eq!(s.data(), &[0.0, 0.9, 0.0]);
        assert_eq!(apply_label_smoothing(&t, 1.0).unwrap(), t);
        let bad = Tensor::new([1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        assert!(apply_label_smoothing(&bad, 0.9).is_err());
        assert!(apply_label_smoothing(&t, 0.0).is_err());
    }
}
