use super::volume::LabelVolume;
use crate::error::{Error, Result};

/// Dice overlap `2|P∩G| / (|P| + |G|)` of one class; 1 when both are empty.
pub fn dice_metric(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class, b == class);
        inter += usize::from(ia && ib);
        p += usize::from(ia);
        g += usize::from(ib);
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}
