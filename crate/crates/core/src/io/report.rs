//! JSON summary of a compression run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::archive::write_atomic;
use crate::model::TensorReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorShapeEntry {
    pub a: [usize; 2],
    pub b: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub original_shape: [usize; 2],
    pub factor_shapes: FactorShapeEntry,
    pub params_before: usize,
    pub params_after: usize,
    pub relative_residual: f64,
    pub power_iterations: usize,
    pub converged: bool,
}

/// Sums over the factored tensors only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params_before: usize,
    pub params_after: usize,
    pub compression_factor: f64,
}

/// Whole-model counts, LM head excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTotals {
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReportFile {
    pub tensors: Vec<TensorEntry>,
    pub totals: Totals,
    pub model: ModelTotals,
}

impl CompressionReportFile {
    pub fn new(reports: &[TensorReport], model: ModelTotals) -> Self {
        let tensors: Vec<TensorEntry> = reports
            .iter()
            .map(|r| TensorEntry {
                name: r.name.clone(),
                original_shape: [r.original_shape.0, r.original_shape.1],
                factor_shapes: FactorShapeEntry {
                    a: [r.factor_shapes.m1, r.factor_shapes.n1],
                    b: [r.factor_shapes.m2, r.factor_shapes.n2],
                },
                params_before: r.params_before,
                params_after: r.params_after,
                relative_residual: r.decomposition.relative_residual,
                power_iterations: r.decomposition.power_iterations_used,
                converged: r.decomposition.converged,
            })
            .collect();
        let before: usize = tensors.iter().map(|t| t.params_before).sum();
        let after: usize = tensors.iter().map(|t| t.params_after).sum();
        Self {
            tensors,
            totals: Totals {
                params_before: before,
                params_after: after,
                compression_factor: if after > 0 {
                    before as f64 / after as f64
                } else {
                    1.0
                },
            },
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_atomic(path.as_ref(), s.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
