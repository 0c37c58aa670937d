//! Run configuration, serialized reports and the command entry points.

mod commands;
mod config;

pub use commands::{cmd_audit, cmd_heldout_bench, cmd_synth_check, AuditOutcome};
pub use config::{parse_seeds, Command, ProxyKind, RunConfig};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::block::{Block, MembershipMatrix, PoleMatrix, ResidualMatrix};
use crate::decoder::{relation_mix_weight, ProxyMatrix};
use crate::diagnostics::{
    assignment_entropy, component_mass, dominant_component, proxy_mae, relative_reconstruction_error,
    residual_ranking, witness_report, Neighbor, RankedItem, WitnessRecord,
};
use crate::error::{Result, RsdError};
use crate::pullback::pullback_poles;
use crate::trainer::{loss_a, loss_x};

/// Row-major matrix with an explicit shape header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixRecord {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| RsdError::Contract(format!("matrix record {}x{}: {e}", self.rows, self.cols)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMatrices {
    pub x: MatrixRecord,
    pub s: MatrixRecord,
    pub c: MatrixRecord,
    pub a: MatrixRecord,
    pub a_hat: MatrixRecord,
    pub gate: MatrixRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullbackSummary {
    pub rho_x: f64,
    pub energy_x: f64,
    pub energy_proj: f64,
    pub energy_res: f64,
    pub orthogonality_error: f64,
    pub energy_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallMassFlag {
    pub component: usize,
    pub mass: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub direction: String,
    pub words: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub rho_x: f64,
    pub proxy_mae: f64,
    pub bilinear_w: MatrixRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub rho_x: f64,
    pub proxy_loss: f64,
    pub proxy_mae: f64,
    pub component_masses: Vec<f64>,
    pub top_residual_item: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStability {
    pub runs: Vec<SeedRun>,
    /// `(min, max)` of each mass-canonical component mass over the runs.
    pub mass_ranges: Vec<(f64, f64)>,
    pub rho_x_range: (f64, f64),
    pub proxy_mae_range: (f64, f64),
    /// Runs whose top residual item equals the primary run's.
    pub top_residual_agreement: usize,
}

/// Self-contained audit record: the audit unit, the fitted matrices and
/// every derived readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub block_name: String,
    pub proxy_source: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub items: Vec<String>,
    pub coverage: Vec<f64>,
    pub mean_coverage: f64,
    pub rho_x: f64,
    pub coordinate_loss: f64,
    pub proxy_loss: f64,
    pub total_loss: f64,
    /// MAE over held-out pairs when a holdout is set, else off-diagonal.
    pub proxy_mae: f64,
    pub holdout_pairs: Option<Vec<(usize, usize)>>,
    pub converged: bool,
    /// Mass-canonical order, descending.
    pub component_masses: Vec<f64>,
    pub per_item_entropy: Vec<f64>,
    pub dominant_component: Vec<usize>,
    pub residual_ranking: Vec<RankedItem>,
    pub mix_weight: f64,
    pub gate_symmetrization: String,
    pub witness: WitnessRecord,
    pub pullback: PullbackSummary,
    pub small_mass: Vec<SmallMassFlag>,
    pub warnings: Vec<String>,
    pub readouts: Option<Vec<Readout>>,
    pub baseline: Option<BaselineSummary>,
    pub seed_stability: Option<SeedStability>,
    pub matrices: ReportMatrices,
    pub config: RunConfig,
}

fn check(name: &str, stored: f64, fresh: f64, tol: f64) -> Result<()> {
    if (stored - fresh).abs() <= tol {
        Ok(())
    } else {
        Err(RsdError::Assertion(format!(
            "report field {name}: stored {stored}, recomputed {fresh}"
        )))
    }
}

fn check_all(name: &str, stored: &[f64], fresh: &[f64], tol: f64) -> Result<()> {
    if stored.len() != fresh.len() {
        return Err(RsdError::Assertion(format!("report field {name}: length differs")));
    }
    stored
        .iter()
        .zip(fresh)
        .enumerate()
        .try_for_each(|(i, (s, f))| check(&format!("{name}[{i}]"), *s, *f, tol))
}

impl AuditReport {
    /// Recomputes every derived field from the stored matrices and checks
    /// it against the stored value within `tol`.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let m = &self.matrices;
        let block = Block::new(self.items.clone(), m.x.to_array()?)?;
        let s = MembershipMatrix::new(m.s.to_array()?)?;
        let c = PoleMatrix::new(m.c.to_array()?)?;
        let proxy = ProxyMatrix::new(m.a.to_array()?, self.proxy_source.clone())?;
        let a_hat = m.a_hat.to_array()?;
        let eps = self.config.epsilon;
        let mask = self.holdout_pairs.as_deref();

        check("rho_x", self.rho_x, relative_reconstruction_error(&block, &s, &c, eps)?, tol)?;
        let lx = loss_x(&block, &s, &c, eps)?;
        let la = loss_a(&proxy, &a_hat, eps, mask)?;
        check("coordinate_loss", self.coordinate_loss, lx, tol)?;
        check("proxy_loss", self.proxy_loss, la, tol)?;
        check("total_loss", self.total_loss, lx + self.config.lambda * la, tol)?;
        check("proxy_mae", self.proxy_mae, proxy_mae(proxy.matrix(), &a_hat, mask)?, tol)?;
        check_all("component_masses", &self.component_masses, &component_mass(&s).to_vec(), tol)?;
        let total: f64 = self.component_masses.iter().sum();
        check("sum(component_masses)", total, 1.0, 1e-9)?;
        if self.component_masses.windows(2).any(|w| w[0] < w[1]) {
            return Err(RsdError::Assertion("component masses are not descending".into()));
        }
        check_all("per_item_entropy", &self.per_item_entropy, &assignment_entropy(&s).to_vec(), tol)?;
        if self.dominant_component != dominant_component(&s) {
            return Err(RsdError::Assertion("dominant components differ".into()));
        }
        let r = ResidualMatrix::from_residual(block.coords() - &s.matrix().dot(c.matrix()));
        let ranking = residual_ranking(&block, &r, self.residual_ranking.len())?;
        for (stored, fresh) in self.residual_ranking.iter().zip(&ranking) {
            if stored.index != fresh.index {
                return Err(RsdError::Assertion("residual ranking order differs".into()));
            }
            check("residual_ranking.norm", stored.residual_norm, fresh.residual_norm, tol)?;
        }
        check("mix_weight", self.mix_weight, relation_mix_weight(&m.gate.to_array()?)?, tol)?;
        let w = witness_report(self.coordinate_loss, self.proxy_loss, self.witness.budget_x, self.witness.budget_a)?;
        if w.witness != self.witness.witness
            || w.coordinate_ok != self.witness.coordinate_ok
            || w.proxy_ok != self.witness.proxy_ok
        {
            return Err(RsdError::Assertion("witness flags inconsistent with losses".into()));
        }
        let pb = pullback_poles(&block, &s)?;
        let p = &self.pullback;
        check("pullback.energy_x", p.energy_x, pb.energy_x, tol)?;
        check("pullback.energy_proj", p.energy_proj, pb.energy_proj, tol)?;
        check("pullback.energy_res", p.energy_res, pb.energy_res, tol)?;
        check(
            "pullback.rho_x",
            p.rho_x,
            relative_reconstruction_error(&block, &s, &pb.c_star, eps)?,
            tol,
        )?;
        Ok(())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| RsdError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// `dir/name.json` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn load_report(path: &Path) -> Result<AuditReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
