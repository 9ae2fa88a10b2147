//! Cross-entropy, soft Dice and their weighted sum.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Cross-entropy weight.
    pub alpha: f64,
    /// Dice weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.3, beta: 0.7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    /// The weight pairs swept when tuning the loss balance.
    pub fn sweep() -> [LossWeights; 9] {
        std::array::from_fn(|i| {
            let alpha = (i + 1) as f64 / 10.0;
            LossWeights {
                alpha,
                beta: (9 - i) as f64 / 10.0,
            }
        })
    }
}

fn check_target(op: &'static str, logits: &Var<'_>, target: &[usize]) -> Result<(usize, usize), TensorError> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(TensorError::shape(op, format!("logits must be Z×H×W, got {shape:?}")));
    }
    let (z, n) = (shape[0], shape[1] * shape[2]);
    if target.len() != n {
        return Err(TensorError::shape(op, format!("{} labels for {n} pixels", target.len())));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= z) {
        return Err(TensorError::shape(op, format!("label {bad} outside {z} classes")));
    }
    Ok((z, n))
}

/// Mean over pixels of `-log softmax(logits)[y]`.
pub fn cross_entropy<'t>(logits: Var<'t>, target: &[usize]) -> Result<Var<'t>, TensorError> {
    let (_, n) = check_target("cross_entropy", &logits, target)?;
    let index: Rc<[usize]> = target.iter().enumerate().map(|(p, &y)| y * n + p).collect();
    logits.log_softmax(0)?.gather(&[n], index)?.sum()?.scale(-1.0 / n as f64)
}

/// `1 - mean_c (2Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)` with softmax probabilities `p`.
pub fn dice_loss<'t>(logits: Var<'t>, target: &[usize]) -> Result<Var<'t>, TensorError> {
    let (z, n) = check_target("dice_loss", &logits, target)?;
    let tape = logits.tape();
    let probs = logits.softmax(0)?.reshape(&[z, n])?;
    let mut onehot = Tensor::zeros(&[z, n]);
    let mut counts = vec![0.0; z];
    for (p, &y) in target.iter().enumerate() {
        onehot.data_mut()[y * n + p] = 1.0;
        counts[y] += 1.0;
    }
    let inter = probs.mul(tape.constant(onehot))?.sum_axis(1)?;
    let numer = inter.scale(2.0)?.add_scalar(DICE_EPS)?;
    let denom = probs
        .sum_axis(1)?
        .add(tape.constant(Tensor::new(&[z], counts)?))?
        .add_scalar(DICE_EPS)?;
    let dice = numer.div(denom)?;
    dice.mean()?.scale(-1.0)?.add_scalar(1.0)
}

/// Weighted objective with its parts kept for logging.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub ce: f64,
    pub dice: f64,
}

pub fn total_loss<'t>(logits: Var<'t>, target: &[usize], weights: LossWeights) -> Result<LossParts<'t>, TensorError> {
    let ce = cross_entropy(logits, target)?;
    let dice = dice_loss(logits, target)?;
    let total = ce.scale(weights.alpha)?.add(dice.scale(weights.beta)?)?;
    Ok(LossParts {
        total,
        ce: ce.item(),
        dice: dice.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn logits(tape: &Tape, z: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Var<'_> {
        tape.constant(Tensor::from_fn(&[z, h, w], f))
    }

    #[test]
    fn ce_uniform_is_ln_z() {
        let tape = Tape::new();
        let l = logits(&tape, 2, 2, 2, |_| 0.3);
        let ce = cross_entropy(l, &[0, 1, 1, 0]).unwrap().item();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_saturates_to_zero() {
        let tape = Tape::new();
        let target = [1, 0];
        let l = logits(&tape, 2, 1, 2, |i| {
            let (class, pix) = (i / 2, i % 2);
            if class == target[pix] { 60.0 } else { -60.0 }
        });
        assert!(cross_entropy(l, &target).unwrap().item() < 1e-40);
    }

    #[test]
    fn ce_per_pixel_definition() {
        let tape = Tape::new();
        let vals = [0.2, -1.0, 0.7, 1.5, -0.3, 0.4, 0.0, 2.0];
        let l = logits(&tape, 2, 2, 2, |i| vals[i]);
        let target = [1, 0, 0, 1];
        let mut expect = 0.0;
        for p in 0..4 {
            let (a, b) = (vals[p], vals[4 + p]);
            let lse = (a.exp() + b.exp()).ln();
            expect -= [a, b][target[p]] - lse;
        }
        expect /= 4.0;
        assert!((cross_entropy(l, &target).unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn dice_cases() {
        let tape = Tape::new();
        let target = [0, 1, 1, 0];
        let perfect = logits(&tape, 2, 2, 2, |i| if target[i % 4] == i / 4 { 50.0 } else { -50.0 });
        assert!(dice_loss(perfect, &target).unwrap().item() <= 1e-4);

        let disjoint = logits(&tape, 2, 2, 2, |i| if target[i % 4] == i / 4 { -50.0 } else { 50.0 });
        assert!((dice_loss(disjoint, &target).unwrap().item() - 1.0).abs() < 1e-4);

        // hard half overlap on both classes: prediction [0,0,1,1] vs target [0,1,1,0]
        let pred = [0, 0, 1, 1];
        let half = logits(&tape, 2, 2, 2, |i| if pred[i % 4] == i / 4 { 50.0 } else { -50.0 });
        let loss = dice_loss(half, &target).unwrap().item();
        assert!((loss - 0.5).abs() < 1e-5, "{loss}");
    }

    #[test]
    fn total_is_affine_in_weights() {
        let tape = Tape::new();
        let l = logits(&tape, 3, 2, 2, |i| (i as f64 * 0.7).sin());
        let target = [0, 2, 1, 1];
        let only_ce = total_loss(l, &target, LossWeights { alpha: 1.0, beta: 0.0 }).unwrap();
        assert_eq!(only_ce.total.item(), only_ce.ce);
        let d = LossWeights::default();
        assert_eq!((d.alpha, d.beta), (0.3, 0.7));
        let mixed = total_loss(l, &target, d).unwrap();
        assert!((mixed.total.item() - (0.3 * mixed.ce + 0.7 * mixed.dice)).abs() < 1e-15);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let tape = Tape::new();
        let l = logits(&tape, 2, 1, 2, |_| 0.0);
        assert!(cross_entropy(l, &[0, 2]).is_err());
        assert!(dice_loss(l, &[0]).is_err());
    }

    #[test]
    fn sweep_pairs_sum_to_one() {
        let pairs = LossWeights::sweep();
        assert_eq!(pairs[0].alpha, 0.1);
        assert_eq!(pairs[2], LossWeights { alpha: 0.3, beta: 0.7 });
        assert!(pairs.iter().all(|p| (p.alpha + p.beta - 1.0).abs() < 1e-12));
    }
}
