//! Training loss and the change-detection metrics (F1, IoU, OA) built on
//! exact integer confusion counts.

use std::fmt::Write as _;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

/// Smoothing constant of the Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Stacks binary masks into a (B, 1, H, W) float tensor.
pub fn masks_to_tensor(masks: &[&Array2<u8>], dtype: DType) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("empty mask batch".into()));
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("mask batch mixes {:?} and {:?}", m.dim(), (h, w))));
        }
        data.extend(m.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean binary cross-entropy on logits plus the per-sample soft Dice loss
/// averaged over the batch. Inputs are (B, …) with matching shapes.
pub fn loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    // max(x, 0) − x·y + ln(1 + e^{−|x|})
    let bce = ((logits.relu()? - (logits * target)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?
        .mean_all()?;

    let b = logits.dims()[0];
    let p = sigmoid(logits)?.reshape((b, ()))?;
    let y = target.reshape((b, ()))?;
    let inter = (&p * &y)?.sum(D::Minus1)?;
    let denom = ((p.sum(D::Minus1)? + y.sum(D::Minus1)?)? + DICE_SMOOTH)?;
    let dice = (1.0 - ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?)?.mean_all()?;
    Ok((bce + dice)?)
}

/// Scalar loss and its gradient with respect to every logit of one H×W map.
pub fn loss_and_grad(logits: &Array2<f64>, mask: &Array2<u8>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != mask.dim() {
        return Err(Error::Shape(format!("logits {:?} vs mask {:?}", logits.dim(), mask.dim())));
    }
    let (h, w) = logits.dim();
    let dev = Device::Cpu;
    let x = Var::from_tensor(&Tensor::from_vec(logits.iter().copied().collect(), (1, 1, h, w), &dev)?)?;
    let y = masks_to_tensor(&[mask], DType::F64)?;
    let l = loss(x.as_tensor(), &y)?;
    let grads = l.backward()?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| Error::Contract("loss has no gradient w.r.t. logits".into()))?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let g = Array2::from_shape_vec((h, w), g).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((l.to_scalar::<f64>()?, g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

impl Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), Add::add)
    }
}

/// Per-pixel counts of prediction against ground truth.
pub fn confusion(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Confusion> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::validation(
                    "confusion",
                    format!("non-binary values (pred {p}, gt {g})"),
                ))
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from counts. Any 0/0 evaluates to 0.
pub fn report(c: Confusion) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        confusion: c,
        precision,
        recall,
        f1,
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        oa: ratio(c.tp + c.tn, c.total()),
    })
}

impl MetricsReport {
    /// JSON object with integer counts and six-decimal metrics.
    pub fn to_json(&self) -> String {
        let c = &self.confusion;
        let mut s = String::new();
        write!(
            s,
            "{{\"tp\": {}, \"fp\": {}, \"fn\": {}, \"tn\": {}, \"precision\": {:.6}, \"recall\": {:.6}, \"f1\": {:.6}, \"iou\": {:.6}, \"oa\": {:.6}}}",
            c.tp, c.fp, c.fn_, c.tn, self.precision, self.recall, self.f1, self.iou, self.oa
        )
        .expect("writing to a String");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// OA as a percentage with two decimals.
    pub fn oa_percent(&self) -> String {
        format!("{:.2}", self.oa * 100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn confusion_hand_enumerated() {
        let pred = array![[1u8, 0], [0, 1]];
        let gt = array![[1u8, 1], [0, 0]];
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let r = report(c).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.oa), (0.5, 0.5, 0.5, 0.5));
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let r = report(Confusion { tp: 0, fp: 0, fn_: 0, tn: 4 }).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou, r.oa), (0.0, 0.0, 0.0, 0.0, 1.0));
        assert!(matches!(report(Confusion::default()), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn confusion_rejects_non_binary() {
        let a = array![[2u8]];
        let b = array![[0u8]];
        assert!(matches!(confusion(&a, &b), Err(Error::Validation { .. })));
    }

    #[test]
    fn report_json_round_trip() {
        let r = report(Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 }).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"iou\": 0.333333"));
        assert!(json.contains("\"fn\": 1"));
        let back = MetricsReport::from_json(&json).unwrap();
        assert_eq!(back.confusion, r.confusion);
        assert!((back.iou - r.iou).abs() < 1e-6);
    }
}
