use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Weighted elementwise mean of client models (parameters and running
/// statistics), weights normalized to sum 1.
///
/// Accumulates in `f64` in the order the models are given; callers pass
/// them sorted by client id so the reduction order is fixed.
pub fn fedavg_aggregate(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or(Error::EmptyDataset("no client models to aggregate"))?;
    if weights.len() != models.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("aggregation weights must be finite and ≥ 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("aggregation weights sum to zero".into()));
    }
    for m in &models[1..] {
        if !first.same_manifest(m) {
            return Err(Error::ManifestMismatch("client models differ in layout".into()));
        }
    }
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let params = average(models, &norm, |m| m.entries())?;
    let buffers = average(models, &norm, |m| m.buffers())?;
    first.with_tensors(params)?.with_buffers(buffers)
}

/// Weighted mean of one tensor list across models, accumulated in `f64`.
fn average(
    models: &[ModelParams],
    weights: &[f64],
    list: impl Fn(&ModelParams) -> &[(String, Tensor)],
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for (p, (_, t)) in list(&models[0]).iter().enumerate() {
        let mut acc = vec![0.0f64; t.numel()];
        for (m, &w) in models.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(list(m)[p].1.data()) {
                *a += w * v as f64;
            }
        }
        out.push(Tensor::new(t.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())?);
    }
    Ok(out)
}
