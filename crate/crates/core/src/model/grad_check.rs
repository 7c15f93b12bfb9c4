//! Analytic-vs-numeric gradient verification on small f64 models.

use crate::error::Result;

use super::{Batch, Model, Tensors};

/// Compare analytic gradients against central finite differences over
/// every parameter. Returns the maximum relative error
/// |ga - gn| / max(|ga|, |gn|, floor).
pub fn grad_check(model: &mut Model<f64>, batch: &Batch, h: f64) -> Result<f64> {
    let mut grads = Tensors::zeros_like(&model.config);
    let mut total_masked = 0usize;
    for seq in &batch.sequences {
        let (_, count) = model.backward_sequence(seq, &mut grads, None)?;
        total_masked += count;
    }
    grads.scale(1.0 / total_masked as f64);

    let floor = 1e-8;
    let mut max_rel = 0.0f64;
    for mat_idx in 0..model.params.mats.len() {
        for i in 0..model.params.mats[mat_idx].data.len() {
            let orig = model.params.mats[mat_idx].data[i];
            model.params.mats[mat_idx].data[i] = orig + h;
            let up = model.sft_loss(batch)?;
            model.params.mats[mat_idx].data[i] = orig - h;
            let down = model.sft_loss(batch)?;
            model.params.mats[mat_idx].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.mats[mat_idx].data[i];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
