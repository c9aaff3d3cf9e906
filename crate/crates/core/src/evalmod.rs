//! Confusion-matrix accumulation and mIoU under the two background protocols.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, LabeledImage};
use crate::inference::SegmentationMap;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every non-ignore pixel is scored; background is a class of its own.
    WithBackground,
    /// Pixels whose ground truth is background (or ignore) are skipped, and the
    /// background class does not enter the mean.
    WithoutBackground,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "with_background" => Ok(Protocol::WithBackground),
            "without_background" => Ok(Protocol::WithoutBackground),
            _ => Err(format!(
                "expected with_background or without_background, got `{s}`"
            )),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::WithBackground => "with_background",
            Protocol::WithoutBackground => "without_background",
        })
    }
}

/// Accumulated confusion counts in ground-truth class space.
/// `confusion[gt][pred]` counts scored pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub background: Option<usize>,
    pub protocol: Protocol,
    /// Background threshold used to produce the predictions, when any.
    pub tau: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn new(
        class_names: Vec<String>,
        background: Option<usize>,
        protocol: Protocol,
        tau: Option<f64>,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Input("evaluation needs at least one class".into()));
        }
        if background.is_some_and(|b| b >= class_names.len()) {
            return Err(Error::Input("background index outside the class list".into()));
        }
        let n = class_names.len();
        Ok(Self {
            class_names,
            background,
            protocol,
            tau,
            confusion: vec![vec![0; n]; n],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Scores a prediction already expressed in ground-truth class indices.
    /// A prediction at a different resolution is resampled (nearest) to the
    /// ground-truth size first.
    pub fn accumulate_labels(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        let pred = if pred.same_shape(gt) {
            std::borrow::Cow::Borrowed(pred)
        } else {
            std::borrow::Cow::Owned(pred.resize_nearest(gt.width(), gt.height()))
        };
        let n = self.num_classes();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == ignore {
                continue;
            }
            if self.protocol == Protocol::WithoutBackground && Some(g as usize) == self.background {
                continue;
            }
            if g as usize >= n || p as usize >= n {
                return Err(Error::Input(format!(
                    "label {} outside {n} classes",
                    (g as usize).max(p as usize)
                )));
            }
            self.confusion[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Scores a segmentation whose legend is matched to the ground truth by class name.
    pub fn accumulate(&mut self, pred: &SegmentationMap, gt: &LabeledImage) -> Result<()> {
        if gt.class_names != self.class_names {
            return Err(Error::Input(format!(
                "ground truth `{}` uses a different class list",
                gt.id
            )));
        }
        if self.protocol == Protocol::WithBackground && pred.background_index.is_none() {
            return Err(Error::Input(
                "with_background evaluation needs predictions with a background index".into(),
            ));
        }
        let mut lut = [u8::MAX; 256];
        for (i, name) in pred.legend.names.iter().enumerate() {
            let g = self
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| {
                    Error::Input(format!(
                        "predicted class `{name}` is not in the ground-truth class list"
                    ))
                })?;
            lut[i] = g as u8;
        }
        if let Some(bg) = pred.background_index {
            let g = self.background.ok_or_else(|| {
                Error::Input("prediction has a background index but the ground truth has none".into())
            })?;
            lut[bg as usize] = g as u8;
        }
        let mapped = pred
            .labels
            .as_slice()
            .iter()
            .map(|&v| {
                let m = lut[v as usize];
                if m == u8::MAX {
                    Err(Error::Input(format!("predicted label {v} has no legend entry")))
                } else {
                    Ok(m)
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let mapped = LabelMap::from_vec(pred.labels.width(), pred.labels.height(), mapped)?;
        self.accumulate_labels(&mapped, &gt.labels, gt.ignore_value)
    }

    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if other.class_names != self.class_names || other.protocol != self.protocol {
            return Err(Error::Input("cannot merge reports over different setups".into()));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scored_pixels(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    fn counted(&self, c: usize) -> bool {
        !(self.protocol == Protocol::WithoutBackground && Some(c) == self.background)
    }

    /// `(TP, TP + FP + FN)` per class; `None` when the class is absent from
    /// both prediction and ground truth, or excluded by the protocol.
    pub fn iou_counts(&self) -> Vec<Option<(u64, u64)>> {
        let n = self.num_classes();
        (0..n)
            .map(|c| {
                if !self.counted(c) {
                    return None;
                }
                let tp = self.confusion[c][c];
                let fn_: u64 = self.confusion[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.confusion[g][c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then_some((tp, denom))
            })
            .collect()
    }

    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        self.iou_counts()
            .into_iter()
            .map(|c| c.map(|(tp, d)| tp as f64 / d as f64))
            .collect()
    }

    /// Mean over the defined per-class IoUs. The mean is formed as an exact
    /// fraction and rounded once, falling back to a float sum on overflow.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<(u64, u64)> = self.iou_counts().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Input("no class has any scored pixel".into()));
        }
        if let Some(v) = exact_mean(&defined) {
            return Ok(v);
        }
        let sum: f64 = defined.iter().map(|&(t, d)| t as f64 / d as f64).sum();
        Ok(sum / defined.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.scored_pixels();
        let diag: u64 = (0..self.num_classes()).map(|c| self.confusion[c][c]).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }

    /// Human-readable table in the per-class IoU style.
    pub fn to_table(&self) -> String {
        let mut out = format!("protocol: {}\n", self.protocol);
        match self.tau {
            Some(t) => out.push_str(&format!("tau: {t}\n")),
            None => out.push_str("tau: none\n"),
        }
        out.push_str(&format!("scored pixels: {}\n", self.scored_pixels()));
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
        for (name, iou) in self.class_names.iter().zip(self.iou_per_class()) {
            match iou {
                Some(v) => out.push_str(&format!("{name:<width$}  {:6.2}\n", 100.0 * v)),
                None => out.push_str(&format!("{name:<width$}  {:>6}\n", "-")),
            }
        }
        match self.miou() {
            Ok(m) => out.push_str(&format!("{:<width$}  {:6.2}\n", "mIoU", 100.0 * m)),
            Err(_) => out.push_str(&format!("{:<width$}  {:>6}\n", "mIoU", "-")),
        }
        out
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ tᵢ/dᵢ / n` rounded once to f64, or `None` if the reduced fraction
/// leaves the range where both parts convert to f64 exactly.
fn exact_mean(fracs: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(t, d) in fracs {
        let (t, d) = (t as u128, d as u128);
        num = num.checked_mul(d)?.checked_add(t.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(fracs.len() as u128)?;
    let g = gcd(num, den).max(1);
    (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}
