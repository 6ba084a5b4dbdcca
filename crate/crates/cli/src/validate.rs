//! Configuration checks that run nothing.

use std::path::Path;

use cloq_core::ptq_solver::PtqMethod;
use cloq_core::tensor_store::read_bundle_file;

use crate::config::{Diagnostic, RunConfig};
use crate::error::CliResult;
use crate::run::select_layers;

/// Schema and range checks, plus per-layer checks when the input bundle
/// named by the config can be read.
pub fn validate_config(cfg: &RunConfig) -> Vec<Diagnostic> {
    let mut out = cfg.diagnostics();
    let Some(input) = cfg.input.as_deref() else {
        return out;
    };
    let Ok(bundle) = read_bundle_file(input) else {
        return out;
    };
    let layers = match select_layers(&bundle, &cfg.layers) {
        Ok(l) => l,
        Err(e) => {
            out.push(Diagnostic {
                field: "layers".into(),
                message: e.to_string(),
            });
            return out;
        }
    };
    for rec in layers {
        let limit = rec.m.min(rec.n);
        if cfg.init.rank > limit {
            out.push(Diagnostic {
                field: "init.rank".into(),
                message: format!(
                    "rank {} exceeds min(m, n) = {limit} for layer {} ({}x{})",
                    cfg.init.rank, rec.layer_id, rec.m, rec.n
                ),
            });
        }
        let calibrated = rec.gram_name.is_some() || rec.activation_name.is_some();
        if !calibrated && cfg.ptq.method == PtqMethod::Optq {
            out.push(Diagnostic {
                field: "ptq.method".into(),
                message: format!("layer {} has no calibration data, which optq requires", rec.layer_id),
            });
        }
        if rec.gram_name.is_some() && rec.activation_name.is_some() {
            out.push(Diagnostic {
                field: "input".into(),
                message: format!("layer {} has both a Gram and activations", rec.layer_id),
            });
        }
    }
    out
}

pub fn validate(config_path: &Path) -> CliResult<Vec<Diagnostic>> {
    let cfg = RunConfig::load(config_path)?;
    Ok(validate_config(&cfg))
}
