//! Training objectives.
//!
//! Every loss exists twice: a plain `f64` slice version used for matching
//! costs and as a reference, and a differentiable tensor version used for
//! training. The two are cross-checked in tests.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::{format_f64, parse_value, unknown_key, KvConfig};
use crate::matching::Assignment;
use crate::pseudomask::PseudoMaskSet;
use crate::segmodel::nn::{device, log_softmax_last, DTYPE};
use crate::{Error, Result};

/// Floor applied inside every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_contrastive: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub focal_gamma: f64,
    /// `None` weights positives and negatives equally.
    pub focal_alpha: Option<f64>,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 1.0,
            lambda_contrastive: 1.0,
            lambda_dice: 1.0,
            lambda_focal: 20.0,
            focal_gamma: 2.0,
            focal_alpha: Some(0.25),
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_mask", self.lambda_mask),
            ("lambda_contrastive", self.lambda_contrastive),
            ("lambda_dice", self.lambda_dice),
            ("lambda_focal", self.lambda_focal),
            ("focal_gamma", self.focal_gamma),
            ("dice_smooth", self.dice_smooth),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0")));
            }
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config("loss.focal_alpha must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

impl KvConfig for LossWeights {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda_mask" => self.lambda_mask = parse_value(key, value)?,
            "lambda_contrastive" => self.lambda_contrastive = parse_value(key, value)?,
            "lambda_dice" => self.lambda_dice = parse_value(key, value)?,
            "lambda_focal" => self.lambda_focal = parse_value(key, value)?,
            "focal_gamma" => self.focal_gamma = parse_value(key, value)?,
            "focal_alpha" => {
                self.focal_alpha = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "dice_smooth" => self.dice_smooth = parse_value(key, value)?,
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("lambda_mask".into(), format_f64(self.lambda_mask)),
            ("lambda_contrastive".into(), format_f64(self.lambda_contrastive)),
            ("lambda_dice".into(), format_f64(self.lambda_dice)),
            ("lambda_focal".into(), format_f64(self.lambda_focal)),
            ("focal_gamma".into(), format_f64(self.focal_gamma)),
            (
                "focal_alpha".into(),
                self.focal_alpha.map_or("none".into(), format_f64),
            ),
            ("dice_smooth".into(), format_f64(self.dice_smooth)),
        ]
    }
}

/// Values of every term for one step. `total = λ_mask·mask + λ_contrastive·contrastive`
/// and `contrastive = i2t + t2i`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub mask: f64,
    pub dice: f64,
    pub focal: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.mask, self.dice, self.focal, self.i2t, self.t2i, self.contrastive, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total {:.6} mask {:.6} (dice {:.6} focal {:.6}) contrastive {:.6} (i2t {:.6} t2i {:.6})",
            self.total, self.mask, self.dice, self.focal, self.contrastive, self.i2t, self.t2i
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("shape mismatch: {a} vs {b} elements")));
    }
    Ok(())
}

/// `1 − (2·Σpt + s) / (Σp + Σt + s)`.
pub fn dice_loss(probs: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    check_len(probs.len(), target.len())?;
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in probs.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + smooth) / (sp + st + smooth))
}

/// Pixel mean of the binary sigmoid focal loss.
pub fn focal_loss(logits: &[f64], target: &[f64], gamma: f64, alpha: Option<f64>) -> Result<f64> {
    check_len(logits.len(), target.len())?;
    if logits.is_empty() {
        return Err(Error::Input("focal loss over zero pixels".into()));
    }
    let (a_pos, a_neg) = match alpha {
        Some(a) => (a, 1.0 - a),
        None => (1.0, 1.0),
    };
    let sum: f64 = logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| {
            let p = sigmoid(x);
            let q = sigmoid(-x);
            a_pos * t * q.powf(gamma) * -p.max(LOG_EPS).ln()
                + a_neg * (1.0 - t) * p.powf(gamma) * -q.max(LOG_EPS).ln()
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

fn pow_gamma(x: &Tensor, gamma: f64) -> Result<Tensor> {
    Ok(if gamma == 0.0 {
        x.ones_like()?
    } else if gamma == 1.0 {
        x.clone()
    } else if gamma == 2.0 {
        x.sqr()?
    } else {
        x.powf(gamma)?
    })
}

/// Row-wise dice over the last dimension; any leading shape.
pub fn dice_loss_tensor(probs: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    if probs.dims() != target.dims() {
        return Err(Error::Input(format!(
            "dice shapes differ: {:?} vs {:?}",
            probs.dims(),
            target.dims()
        )));
    }
    let inter = (probs * target)?.sum(D::Minus1)?;
    let num = ((inter * 2.0)? + smooth)?;
    let den = ((probs.sum(D::Minus1)? + target.sum(D::Minus1)?)? + smooth)?;
    Ok((1.0 - (num / den)?)?)
}

/// Row-wise focal loss (mean over the last dimension); any leading shape.
pub fn focal_loss_tensor(
    logits: &Tensor,
    target: &Tensor,
    gamma: f64,
    alpha: Option<f64>,
) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::Input(format!(
            "focal shapes differ: {:?} vs {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let (a_pos, a_neg) = match alpha {
        Some(a) => (a, 1.0 - a),
        None => (1.0, 1.0),
    };
    let p = candle_nn::ops::sigmoid(logits)?;
    let q = candle_nn::ops::sigmoid(&logits.neg()?)?;
    let pos = (target * a_pos)?
        .mul(&pow_gamma(&q, gamma)?)?
        .mul(&p.maximum(LOG_EPS)?.log()?.neg()?)?;
    let neg = ((1.0 - target)? * a_neg)?
        .mul(&pow_gamma(&p, gamma)?)?
        .mul(&q.maximum(LOG_EPS)?.log()?.neg()?)?;
    Ok((pos + neg)?.mean(D::Minus1)?)
}

/// Mask loss for one image: dice and focal of each matched prediction against
/// its pseudo-segment, averaged over the K pairs. Unmatched predictions do not
/// enter the computation at all.
///
/// Returns `(mask, dice, focal)` as scalar tensors.
pub fn mask_loss(
    mask_logits: &Tensor,
    pseudo: &PseudoMaskSet,
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, h, w) = mask_logits.dims3()?;
    let labels = &pseudo.label_map;
    if labels.width() != w || labels.height() != h {
        return Err(Error::Input(format!(
            "pseudo-masks are {}x{}, mask logits {w}x{h}",
            labels.width(),
            labels.height()
        )));
    }
    let k = pseudo.k;
    if assignment.pairs.len() != k
        || assignment.pairs.iter().enumerate().any(|(i, &(r, c))| r != i || c >= n)
    {
        return Err(Error::Input(format!(
            "assignment {:?} does not cover {k} pseudo-masks over {n} predictions",
            assignment.pairs
        )));
    }
    let cols: Vec<u32> = assignment.pairs.iter().map(|&(_, c)| c as u32).collect();
    let idx = Tensor::new(cols.as_slice(), &device())?;
    let logits = mask_logits.reshape((n, h * w))?.index_select(&idx, 0)?;
    let targets = pseudo_targets(pseudo)?;
    let dice = dice_loss_tensor(&candle_nn::ops::sigmoid(&logits)?, &targets, weights.dice_smooth)?
        .mean_all()?;
    let focal = focal_loss_tensor(&logits, &targets, weights.focal_gamma, weights.focal_alpha)?
        .mean_all()?;
    let mask = ((&dice * weights.lambda_dice)? + (&focal * weights.lambda_focal)?)?;
    Ok((mask, dice, focal))
}

/// One binary row per pseudo-segment, `(K, H·W)`.
pub fn pseudo_targets(pseudo: &PseudoMaskSet) -> Result<Tensor> {
    let labels = pseudo.label_map.as_slice();
    let p = labels.len();
    let mut data = vec![0.0f64; pseudo.k * p];
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) < pseudo.k {
            data[l as usize * p + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (pseudo.k, p), &device())?)
}

/// Scalar tensors of the two contrastive directions and their sum.
#[derive(Debug, Clone)]
pub struct ContrastiveTerms {
    pub i2t: Tensor,
    pub t2i: Tensor,
    pub contrastive: Tensor,
}

/// Symmetric InfoNCE over a batch of unit rows. `temperature` is a scalar
/// tensor so that σ can receive gradients.
pub fn contrastive_loss(visual: &Tensor, text: &Tensor, temperature: &Tensor) -> Result<ContrastiveTerms> {
    let (b, d) = visual.dims2()?;
    if text.dims() != [b, d] || b == 0 {
        return Err(Error::Input(format!(
            "visual {:?} and text {:?} must be matching non-empty (B, D) arrays",
            visual.dims(),
            text.dims()
        )));
    }
    let sigma = temperature.to_dtype(DTYPE)?.to_scalar::<f64>()?;
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {sigma}")));
    }
    let s = visual.matmul(&text.t()?)?.broadcast_div(temperature)?;
    let eye = Tensor::eye(b, DTYPE, &device())?;
    let diag_mean = |ls: Tensor| -> Result<Tensor> { Ok(((ls * &eye)?.sum_all()? / -(b as f64))?) };
    let i2t = diag_mean(log_softmax_last(&s)?)?;
    let t2i = diag_mean(log_softmax_last(&s.t()?.contiguous()?)?)?;
    let contrastive = (&i2t + &t2i)?;
    Ok(ContrastiveTerms { i2t, t2i, contrastive })
}

/// `λ_mask·mask + λ_contrastive·contrastive`.
pub fn total_loss(mask: &Tensor, contrastive: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok(((mask * weights.lambda_mask)? + (contrastive * weights.lambda_contrastive)?)?)
}

/// Plain-number version of [`total_loss`].
pub fn total_loss_value(mask: f64, contrastive: f64, weights: &LossWeights) -> f64 {
    weights.lambda_mask * mask + weights.lambda_contrastive * contrastive
}

/// Cost of assigning a prediction to a pseudo-segment: the per-pair mask loss.
pub fn pair_cost_value(logits: &[f64], target: &[f64], weights: &LossWeights) -> Result<f64> {
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let dice = dice_loss(&probs, target, weights.dice_smooth)?;
    let focal = focal_loss(logits, target, weights.focal_gamma, weights.focal_alpha)?;
    Ok(weights.lambda_dice * dice + weights.lambda_focal * focal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelMap;
    use crate::matching::{hungarian, CostMatrix};
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &device()).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_loss(&[1.0; 4], &[1.0; 4], 1.0).unwrap(), 0.0);
        assert!((dice_loss(&[0.5; 4], &[1.0; 4], 1.0).unwrap() - 2.0 / 7.0).abs() < 1e-15);
        assert!((dice_loss(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let t = scalar(&dice_loss_tensor(&t1(&[0.5; 4]), &t1(&[1.0; 4]), 1.0).unwrap());
        assert!((t - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let bce = focal_loss(&[0.0], &[1.0], 0.0, None).unwrap();
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
        let logit = (0.9f64 / 0.1).ln();
        let v = focal_loss(&[logit], &[1.0], 2.0, Some(0.25)).unwrap();
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 2.634e-4).abs() < 1e-7);
        let t = scalar(&focal_loss_tensor(&t1(&[logit]), &t1(&[1.0]), 2.0, Some(0.25)).unwrap());
        assert!((t - expected).abs() < 1e-12);
        assert!(focal_loss(&[40.0, -40.0], &[1.0, 0.0], 2.0, Some(0.25)).unwrap() < 1e-30);
    }

    #[test]
    fn contrastive_examples() {
        let sigma = Tensor::new(1.0f64, &device()).unwrap();
        let e = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &device()).unwrap();
        let c = contrastive_loss(&e, &e, &sigma).unwrap();
        let each = (1.0 + (-1.0f64).exp()).ln();
        assert!((scalar(&c.i2t) - each).abs() < 1e-12);
        assert!((scalar(&c.t2i) - each).abs() < 1e-12);
        assert!((scalar(&c.contrastive) - 0.626524).abs() < 1e-5);

        let same = Tensor::new(&[[0.6f64, 0.8]; 8], &device()).unwrap();
        let c = contrastive_loss(&same, &same, &Tensor::new(0.07f64, &device()).unwrap()).unwrap();
        assert!((scalar(&c.contrastive) - 2.0 * 8f64.ln()).abs() < 1e-9);

        assert!(contrastive_loss(&e, &e, &Tensor::new(0.0f64, &device()).unwrap()).is_err());
    }

    #[test]
    fn contrastive_swaps_directions() {
        let sigma = Tensor::new(0.5f64, &device()).unwrap();
        let v = Tensor::new(&[[0.6f64, 0.8], [1.0, 0.0], [0.0, -1.0]], &device()).unwrap();
        let t = Tensor::new(&[[0.8f64, 0.6], [0.0, 1.0], [-0.6, 0.8]], &device()).unwrap();
        let a = contrastive_loss(&v, &t, &sigma).unwrap();
        let b = contrastive_loss(&t, &v, &sigma).unwrap();
        assert!((scalar(&a.i2t) - scalar(&b.t2i)).abs() < 1e-12);
        assert!((scalar(&a.t2i) - scalar(&b.i2t)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_decreases_with_diagonal_similarity() {
        // Similarity matrices with fixed off-diagonals; unit rows are not
        // needed for the monotonicity of the softmax terms.
        let sigma = Tensor::new(1.0f64, &device()).unwrap();
        let mut last = f64::INFINITY;
        for diag in [0.1, 0.5, 0.9] {
            let v = Tensor::new(&[[diag, 0.2, 0.0], [0.0, 0.0, 1.0]], &device()).unwrap();
            let t = Tensor::new(&[[1.0f64, 0.0, 0.0], [0.0, 0.2, diag]], &device()).unwrap();
            // v·tᵀ = [[diag, 0.04],[0, diag]].
            let c = scalar(&contrastive_loss(&v, &t, &sigma).unwrap().contrastive);
            assert!(c < last);
            last = c;
        }
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss_value(0.3, 0.7, &w), 1.0);
        let w0 = LossWeights { lambda_contrastive: 0.0, lambda_mask: 2.0, ..w.clone() };
        assert_eq!(total_loss_value(0.3, 0.7, &w0), 0.6);
        let t = total_loss(&Tensor::new(0.3f64, &device()).unwrap(), &Tensor::new(0.7f64, &device()).unwrap(), &w).unwrap();
        assert_eq!(scalar(&t), 1.0);
        assert_eq!((w.lambda_mask, w.lambda_contrastive, w.lambda_dice, w.lambda_focal), (1.0, 1.0, 1.0, 20.0));
    }

    fn half_pseudo() -> PseudoMaskSet {
        PseudoMaskSet::new(LabelMap::from_vec(4, 2, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap(), 2).unwrap()
    }

    #[test]
    fn mask_loss_single_pair_equals_pair_cost() {
        let w = LossWeights::default();
        let pseudo = half_pseudo();
        let logits = Tensor::zeros((3, 2, 4), DTYPE, &device()).unwrap();
        let one = PseudoMaskSet::new(LabelMap::filled(4, 2, 0), 1).unwrap();
        let a = Assignment::from_pairs(vec![(0, 1)], 3, 0.0).unwrap();
        let (m, _, _) = mask_loss(&logits, &one, &a, &w).unwrap();
        let cost = pair_cost_value(&[0.0; 8], &[1.0; 8], &w).unwrap();
        assert!((scalar(&m) - cost).abs() < 1e-12);

        let a = Assignment::from_pairs(vec![(0, 0), (1, 2)], 3, 0.0).unwrap();
        let (m, dice, focal) = mask_loss(&logits, &pseudo, &a, &w).unwrap();
        let target: Vec<f64> = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0].to_vec();
        let cost = pair_cost_value(&[0.0; 8], &target, &w).unwrap();
        assert!((scalar(&m) - cost).abs() < 1e-12);
        assert!((scalar(&m) - (scalar(&dice) + 20.0 * scalar(&focal))).abs() < 1e-12);
    }

    #[test]
    fn unmatched_predictions_do_not_matter() {
        let w = LossWeights::default();
        let pseudo = half_pseudo();
        let a = Assignment::from_pairs(vec![(0, 2), (1, 0)], 3, 0.0).unwrap();
        let base: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut changed = base.clone();
        for v in &mut changed[8..16] {
            *v += 5.0;
        }
        let l1 = mask_loss(&Tensor::from_vec(base, (3, 2, 4), &device()).unwrap(), &pseudo, &a, &w).unwrap();
        let l2 = mask_loss(&Tensor::from_vec(changed, (3, 2, 4), &device()).unwrap(), &pseudo, &a, &w).unwrap();
        assert_eq!(scalar(&l1.0).to_bits(), scalar(&l2.0).to_bits());
    }

    #[test]
    fn saturated_predictions_give_zero_mask_loss() {
        let w = LossWeights::default();
        let pseudo = half_pseudo();
        let labels = pseudo.label_map.as_slice();
        let mut data = Vec::new();
        for k in 0..2u8 {
            data.extend(labels.iter().map(|&l| if l == k { 60.0 } else { -60.0 }));
        }
        let logits = Tensor::from_vec(data, (2, 2, 4), &device()).unwrap();
        let rows: Vec<Vec<f64>> = logits.reshape((2, 8)).unwrap().to_vec2().unwrap();
        let targets: Vec<Vec<f64>> = pseudo_targets(&pseudo).unwrap().to_vec2().unwrap();
        let mut costs = Vec::new();
        for t in &targets {
            for r in &rows {
                costs.push(pair_cost_value(r, t, &w).unwrap());
            }
        }
        let a = hungarian(&CostMatrix::new(2, 2, costs).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let (m, _, _) = mask_loss(&logits, &pseudo, &a, &w).unwrap();
        // Dice keeps a smoothing residue only when a mask is empty; both are not.
        assert!(scalar(&m) < 1e-10);
        assert!(a.total_cost < 1e-10);
    }

    #[test]
    fn mask_loss_rejects_inconsistent_assignment() {
        let w = LossWeights::default();
        let logits = Tensor::zeros((3, 2, 4), DTYPE, &device()).unwrap();
        let a = Assignment::from_pairs(vec![(0, 0)], 3, 0.0).unwrap();
        assert!(mask_loss(&logits, &half_pseudo(), &a, &w).is_err());
        let small = Tensor::zeros((3, 2, 2), DTYPE, &device()).unwrap();
        let a = Assignment::from_pairs(vec![(0, 0), (1, 1)], 3, 0.0).unwrap();
        assert!(mask_loss(&small, &half_pseudo(), &a, &w).is_err());
    }

    #[test]
    fn weights_kv_round_trip() {
        let mut w = LossWeights::default();
        w.set("focal_alpha", "none").unwrap();
        w.set("lambda_focal", "5").unwrap();
        let mut back = LossWeights::default();
        back.apply_text(&w.to_kv_string(), std::path::Path::new("w.cfg")).unwrap();
        assert_eq!(back, w);
        assert!(back.set("lambda_x", "1").is_err());
        assert!(LossWeights { focal_alpha: Some(1.5), ..LossWeights::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn scalar_and_tensor_versions_agree(
            xs in proptest::collection::vec(-6.0f64..6.0, 1..24),
            bits in proptest::collection::vec(any::<bool>(), 24),
            gamma in 0.0f64..3.0,
            alpha in proptest::option::of(0.0f64..1.0),
        ) {
            let t: Vec<f64> = xs.iter().zip(&bits).map(|(_, &b)| if b { 1.0 } else { 0.0 }).collect();
            let probs: Vec<f64> = xs.iter().map(|&x| sigmoid(x)).collect();
            let d = dice_loss(&probs, &t, 1.0).unwrap();
            let dt = scalar(&dice_loss_tensor(&t1(&probs), &t1(&t), 1.0).unwrap());
            prop_assert!((d - dt).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d));
            let f = focal_loss(&xs, &t, gamma, alpha).unwrap();
            let ft = scalar(&focal_loss_tensor(&t1(&xs), &t1(&t), gamma, alpha).unwrap());
            prop_assert!((f - ft).abs() < 1e-10 * (1.0 + f.abs()));
            prop_assert!(f >= 0.0);
        }

        #[test]
        fn focal_gamma_zero_is_bce(xs in proptest::collection::vec(-8.0f64..8.0, 1..16), seed in 0u64..1000) {
            let t: Vec<f64> = xs.iter().enumerate().map(|(i, _)| ((seed >> (i % 10)) & 1) as f64).collect();
            let f = focal_loss(&xs, &t, 0.0, None).unwrap();
            let bce: f64 = xs.iter().zip(&t).map(|(&x, &y)| {
                -(y * sigmoid(x).ln() + (1.0 - y) * sigmoid(-x).ln())
            }).sum::<f64>() / xs.len() as f64;
            prop_assert!((f - bce).abs() < 1e-10);
        }
    }
}
