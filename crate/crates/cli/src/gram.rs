//! Replaces `L/acts` entries by precomputed `L/gram` entries.

use cloq_core::calibration::gram_from_bundle;
use cloq_core::tensor_store::{discover_layers, names, DType, Tensor, TensorBundle};

use crate::error::{CliError, CliResult};

/// Copies `input`, swapping every layer's activations for `XᵀX` (f32).
///
/// Layers that already carry a Gram are copied unchanged. The number of
/// accumulated rows is kept as metadata `L/gram_rows`.
pub fn precompute_grams(input: &TensorBundle) -> CliResult<TensorBundle> {
    let layers = discover_layers(input)?;
    let mut out = TensorBundle::new();
    for (k, v) in input.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    let mut replaced = Vec::new();
    for rec in &layers {
        if rec.activation_name.is_none() {
            continue;
        }
        let acc = gram_from_bundle::<f64>(input, rec).map_err(|source| CliError::Layer {
            layer: rec.layer_id.clone(),
            source,
        })?;
        out.insert(names::gram(&rec.layer_id), Tensor::from_matrix(acc.gram(), DType::F32)?)?;
        out.set_metadata(format!("{}/gram_rows", rec.layer_id), acc.sample_rows().to_string());
        replaced.push(names::acts(&rec.layer_id));
    }
    for (name, t) in input.iter() {
        if !replaced.iter().any(|r| r == name) {
            out.insert(name, t.clone())?;
        }
    }
    Ok(out)
}
