//! Run configuration: JSON file form, defaults, and validation.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `CLOQ_WORKERS` environment variable, command-line flags.

use std::path::{Path, PathBuf};

use cloq_core::lowrank_init::InitConfig;
use cloq_core::ptq_solver::PtqConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Glob patterns over layer ids; an exact id is its own pattern.
    pub layers: Vec<String>,
    pub ptq: PtqConfig,
    pub init: InitConfig,
    pub workers: usize,
    /// Only consumed by fixture generation; the pipeline is deterministic.
    pub seed: u64,
    pub keep_going: bool,
    /// Also export `L/codes` (u8).
    pub emit_codes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            layers: vec!["*".into()],
            ptq: PtqConfig::default(),
            init: InitConfig::default(),
            workers: 1,
            seed: 0,
            keep_going: false,
            emit_codes: false,
        }
    }
}

/// One problem found by [`RunConfig::diagnostics`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// Dotted path of the offending field, e.g. `ptq.quant.bits`.
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Schema and cross-field checks that need no data.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(Diagnostic {
                field: field.into(),
                message,
            })
        };
        let q = &self.ptq.quant;
        if !(2..=8).contains(&q.bits) {
            push("ptq.quant.bits", format!("{} is outside the range [2, 8]", q.bits));
        }
        if let cloq_core::quant_grid::Granularity::PerGroup(g) = q.granularity {
            if g < 2 {
                push("ptq.quant.granularity.per_group", format!("group size {g} must be >= 2"));
            }
        }
        if !(self.ptq.damp_ratio >= 0.0 && self.ptq.damp_ratio.is_finite()) {
            push("ptq.damp_ratio", format!("{} must be finite and >= 0", self.ptq.damp_ratio));
        }
        if let Some(m) = &self.ptq.magr {
            if m.iters == 0 {
                push("ptq.magr.iters", "must be >= 1".into());
            }
            if let Some(a) = m.alpha {
                if !(a > 0.0 && a.is_finite()) {
                    push("ptq.magr.alpha", format!("{a} must be > 0"));
                }
            }
            if !(m.tol >= 0.0) {
                push("ptq.magr.tol", format!("{} must be >= 0", m.tol));
            }
        }
        if self.init.rank == 0 {
            push("init.rank", "must be >= 1".into());
        }
        if self.init.altmin_iters == 0 {
            push("init.altmin_iters", "must be >= 1".into());
        }
        if !(self.init.eig_floor_ratio >= 0.0 && self.init.eig_floor_ratio < 1.0) {
            push("init.eig_floor_ratio", format!("{} must lie in [0, 1)", self.init.eig_floor_ratio));
        }
        if self.workers == 0 {
            push("workers", "must be >= 1".into());
        }
        if self.layers.is_empty() {
            push("layers", "at least one pattern is required".into());
        }
        for (i, p) in self.layers.iter().enumerate() {
            if let Err(e) = glob::Pattern::new(p) {
                push(&format!("layers[{i}]"), format!("bad pattern {p:?}: {e}"));
            }
        }
        for (name, p) in [("input", &self.input), ("output", &self.output)] {
            if matches!(p, Some(p) if p.as_os_str().is_empty()) {
                push(name, "path must be nonempty".into());
            }
        }
        out
    }

    /// Fails with the first diagnostic, if any.
    pub fn check(&self) -> CliResult<()> {
        match self.diagnostics().into_iter().next() {
            Some(d) => Err(CliError::Config(d.to_string())),
            None => Ok(()),
        }
    }

    pub fn input_path(&self) -> CliResult<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Config("input: no input bundle given".into()))
    }

    pub fn output_path(&self) -> CliResult<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Config("output: no output bundle given".into()))
    }

    /// The part of the configuration echoed into reports: everything that
    /// can change the numbers, nothing that depends on where or how fast the
    /// run happens.
    pub fn echo(&self, mode: &str) -> serde_json::Value {
        serde_json::json!({
            "mode": mode,
            "layers": self.layers,
            "ptq": self.ptq,
            "init": self.init,
            "emit_codes": self.emit_codes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.ptq.quant.bits, 4);
        assert_eq!(c.ptq.quant.group_size(), 64);
        assert_eq!(c.init.rank, 64);
        assert_eq!(c.ptq.damp_ratio, 0.01);
        assert_eq!(c.init.altmin_iters, 1);
        assert!(c.diagnostics().is_empty());
    }

    #[test]
    fn file_form_round_trips() {
        let mut c = RunConfig::default();
        c.input = Some("a.clqb".into());
        c.ptq.magr = Some(Default::default());
        c.layers = vec!["blk.*".into(), "head".into()];
        let back = RunConfig::from_json(&c.to_json(), "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"ptq": {"quant": {"bits": 3, "granularity": "per_channel"}}}"#, "mem")
            .unwrap();
        assert_eq!(c.ptq.quant.bits, 3);
        assert_eq!(c.init.rank, 64);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = RunConfig::from_json("{\n  \"workers\": 2,\n  \"bitz\": 3\n}", "c.json").unwrap_err();
        match err {
            CliError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("bitz"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn range_violation_names_field() {
        let mut c = RunConfig::default();
        c.ptq.quant.bits = 9;
        let d = c.diagnostics();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].field, "ptq.quant.bits");
    }
}
