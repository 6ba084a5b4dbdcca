//! Per-layer pipeline scheduling and output assembly.

use cloq_core::calibration::{gram_from_bundle, DampedGram};
use cloq_core::diagnostics::{LayerReport, RunReport};
use cloq_core::lowrank_init::{altmin_with_root, build_root};
use cloq_core::ptq_solver::{self, PtqMethod, PtqResult};
use cloq_core::tensor_store::{
    discover_layers, names, read_bundle_file, write_bundle_file, DType, LayerRecord, Tensor,
    TensorBundle,
};
use cloq_core::{Error, Matrix};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_KEY: &str = "report";
pub const MODE_KEY: &str = "mode";
pub const FAILED_KEY: &str = "failed_layers";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Quantization only.
    Quantize,
    /// Quantization followed by adapter initialization.
    Init,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Quantize => "quantize",
            Mode::Init => "init",
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub bundle: TensorBundle,
    pub report: RunReport,
    /// Layers skipped under `keep_going`, in layer order.
    pub failures: Vec<(String, Error)>,
}

struct LayerOutput {
    entries: Vec<(String, Tensor)>,
    row: LayerReport,
}

/// Layers of `bundle` whose id matches any of the patterns, in bundle order.
pub fn select_layers(bundle: &TensorBundle, patterns: &[String]) -> CliResult<Vec<LayerRecord>> {
    let compiled = patterns
        .iter()
        .map(|p| glob::Pattern::new(p).map_err(|e| CliError::Config(format!("layers: bad pattern {p:?}: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let all = discover_layers(bundle)?;
    let picked: Vec<LayerRecord> = all
        .into_iter()
        .filter(|r| compiled.iter().any(|p| p.matches(&r.layer_id)))
        .collect();
    if picked.is_empty() {
        return Err(CliError::Config(format!(
            "layers: no layer matches {patterns:?}"
        )));
    }
    Ok(picked)
}

/// Damped Gram for a layer, or `I` for a calibration-free rtn layer.
fn layer_gram(bundle: &TensorBundle, rec: &LayerRecord, cfg: &RunConfig) -> Result<Option<DampedGram<f64>>, Error> {
    let has_calibration = rec.gram_name.is_some() || rec.activation_name.is_some();
    if !has_calibration && cfg.ptq.method == PtqMethod::Rtn {
        return Ok(None);
    }
    gram_from_bundle::<f64>(bundle, rec)?.damp(cfg.ptq.damp_ratio).map(Some)
}

fn grid_entries(layer: &str, ptq: &PtqResult<f64>, emit_codes: bool) -> Result<Vec<(String, Tensor)>, Error> {
    let mut out = vec![
        (names::quantized(layer), Tensor::from_matrix(&ptq.q, DType::F32)?),
        (names::scales(layer), Tensor::from_matrix(&ptq.grids.scales(), DType::F32)?),
        (names::zeros(layer), Tensor::from_matrix(&ptq.grids.zeros(), DType::F32)?),
    ];
    if emit_codes {
        let c = &ptq.codes;
        let row_major: Vec<u8> = (0..c.nrows()).flat_map(|i| (0..c.ncols()).map(move |j| c[(i, j)])).collect();
        out.push((names::codes(layer), Tensor::from_u8(vec![c.nrows(), c.ncols()], row_major)?));
    }
    Ok(out)
}

fn process_layer(bundle: &TensorBundle, rec: &LayerRecord, cfg: &RunConfig, mode: Mode) -> Result<LayerOutput, Error> {
    let id = &rec.layer_id;
    let w: Matrix = bundle
        .matrix::<f64>(&rec.weight_name)
        .ok_or_else(|| Error::MissingTensor {
            layer: id.clone(),
            entry: rec.weight_name.clone(),
        })??;
    let calibrated = layer_gram(bundle, rec, cfg)?;
    let gram = calibrated
        .clone()
        .unwrap_or_else(|| DampedGram::scaled_identity(rec.m, 1.0));
    let bits = cfg.ptq.quant.bits;
    let group = cfg.ptq.quant.group_size();

    match mode {
        Mode::Quantize => {
            let ptq = ptq_solver::solve(&w, calibrated.as_ref(), &cfg.ptq)?;
            let root = build_root(&gram, cfg.init.eig_floor_ratio)?;
            let row = LayerReport::quantization_only(id, &w, &ptq.q, &gram, &root, bits, group)?;
            Ok(LayerOutput {
                entries: grid_entries(id, &ptq, cfg.emit_codes)?,
                row,
            })
        }
        Mode::Init => {
            let root = build_root(&gram, cfg.init.eig_floor_ratio)?;
            let result = altmin_with_root(&w, &gram, &root, &cfg.ptq, &cfg.init)?;
            let row = LayerReport::from_result(id, &w, &result, &gram, &root, bits, group)?;
            let mut entries = grid_entries(id, &result.ptq, cfg.emit_codes)?;
            entries.push((names::adapter_a(id), Tensor::from_matrix(&result.adapters.a, DType::F16)?));
            entries.push((names::adapter_b(id), Tensor::from_matrix(&result.adapters.b, DType::F16)?));
            Ok(LayerOutput { entries, row })
        }
    }
}

/// Runs the pipeline on an in-memory bundle.
pub fn run_bundle(input: &TensorBundle, cfg: &RunConfig, mode: Mode) -> CliResult<RunOutcome> {
    cfg.check()?;
    let layers = select_layers(input, &cfg.layers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    let results: Vec<Result<LayerOutput, Error>> = pool.install(|| {
        layers
            .par_iter()
            .map(|rec| process_layer(input, rec, cfg, mode))
            .collect()
    });

    let mut bundle = TensorBundle::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rec, res) in layers.iter().zip(results) {
        match res {
            Ok(out) => {
                for (name, t) in out.entries {
                    bundle.insert(name, t)?;
                }
                rows.push(out.row);
            }
            Err(e) if cfg.keep_going => failures.push((rec.layer_id.clone(), e)),
            Err(e) => {
                return Err(CliError::Layer {
                    layer: rec.layer_id.clone(),
                    source: e,
                })
            }
        }
    }
    if rows.is_empty() {
        let (layer, source) = failures.into_iter().next().expect("at least one layer was selected");
        return Err(CliError::Layer { layer, source });
    }
    let report = RunReport::new(rows, cfg.echo(mode.as_str()))?;
    let json = serde_json::to_string(&report).map_err(|e| Error::Report(e.to_string()))?;
    bundle.set_metadata(REPORT_KEY, json);
    bundle.set_metadata(MODE_KEY, mode.as_str());
    if !failures.is_empty() {
        let ids: Vec<&str> = failures.iter().map(|(l, _)| l.as_str()).collect();
        bundle.set_metadata(FAILED_KEY, ids.join(","));
    }
    Ok(RunOutcome {
        bundle,
        report,
        failures,
    })
}

/// Reads the input bundle, runs, and writes the output bundle atomically.
pub fn run(cfg: &RunConfig, mode: Mode) -> CliResult<RunOutcome> {
    cfg.check()?;
    let input = read_bundle_file(cfg.input_path()?)?;
    let out_path = cfg.output_path()?.to_path_buf();
    let outcome = run_bundle(&input, cfg, mode)?;
    write_bundle_file(&outcome.bundle, &out_path)?;
    Ok(outcome)
}

/// The report stored in an output bundle.
pub fn stored_report(bundle: &TensorBundle) -> CliResult<RunReport> {
    let json = bundle
        .metadata()
        .get(REPORT_KEY)
        .ok_or_else(|| Error::Report("bundle carries no report".into()))?;
    Ok(RunReport::from_json(json.as_bytes())?)
}
