//! JSON model file written by `fit` and read by `posterior`.

use std::path::Path;

use fpglmm::em::FitResult;
use fpglmm::{Error, QualityScheme, Result, Tau};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "fpglmm-model/1";

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub manifest: String,
    pub scheme: QualityScheme,
    pub param_names: Vec<String>,
    pub tau_hat: Vec<f64>,
    /// Coordinates held at their starting values.
    pub held: Vec<bool>,
    /// Rows of the profile curvature at `tau_hat`.
    pub tau_hessian: Vec<Vec<f64>>,
    pub converged: bool,
    pub em_iterations: usize,
    pub refine_iterations: usize,
    pub objective_trace: Vec<f64>,
    pub b_hat: Vec<f64>,
}

impl ModelFile {
    pub fn from_fit(fit: &FitResult, scheme: QualityScheme, manifest: String) -> Self {
        let h = &fit.tau_hessian;
        Self {
            format: FORMAT.to_string(),
            manifest,
            scheme,
            param_names: scheme.param_names(),
            tau_hat: fit.tau_hat.to_vec(),
            held: fit.fixed.clone(),
            tau_hessian: (0..h.nrows()).map(|r| (0..h.ncols()).map(|c| h[(r, c)]).collect()).collect(),
            converged: fit.converged,
            em_iterations: fit.em_iterations,
            refine_iterations: fit.refine_iterations,
            objective_trace: fit.objective_trace.clone(),
            b_hat: fit.b_hat.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::Input { line: Some(e.line()), message: format!("{}: {e}", path.display()) })?;
        if model.format != FORMAT {
            return Err(Error::Input { line: None, message: format!("unsupported model format '{}'", model.format) });
        }
        let n = model.scheme.n_params();
        if model.tau_hat.len() != n || model.tau_hessian.len() != n || model.tau_hessian.iter().any(|r| r.len() != n) {
            return Err(Error::Input { line: None, message: format!("model file dimensions do not match scheme {}", model.scheme) });
        }
        Ok(model)
    }

    pub fn to_fit(&self) -> Result<FitResult> {
        let n = self.tau_hat.len();
        Ok(FitResult {
            tau_hat: Tau::from_slice(&self.tau_hat, &self.scheme)?,
            tau_hessian: DMatrix::from_fn(n, n, |r, c| self.tau_hessian[r][c]),
            em_iterations: self.em_iterations,
            converged: self.converged,
            objective_trace: self.objective_trace.clone(),
            b_hat: self.b_hat.clone(),
            refine_iterations: self.refine_iterations,
            fixed: self.held.clone(),
        })
    }
}
