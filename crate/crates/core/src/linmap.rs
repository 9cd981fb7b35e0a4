//! Closed-form linear visual-semantic maps `f(x) = Vᵀx`.
//!
//! Two objectives are available:
//!
//! * [`solve_ridge_map`] fits label scores: it minimises
//!   `‖XᵀVK − Y‖² + γ‖VK‖² + η‖XᵀV‖² + γη‖V‖²`, whose minimiser is
//!   `V = (XXᵀ + γI)⁻¹ X Y Kᵀ (KKᵀ + ηI)⁻¹`.
//! * [`solve_embedding_regression`] regresses every instance onto its class
//!   embedding: it minimises `‖VᵀX − K_y‖² + γ‖V‖²`, giving
//!   `V = (XXᵀ + γI)⁻¹ X K_yᵀ`. This map sends a class prototype onto its
//!   embedding when the data are realisable.
//!
//! Both are solved with one Cholesky factorisation per Gram matrix.

use nalgebra::DMatrix;

use crate::error::{DmapError, Result};
use crate::linalg::{all_finite, gram_outer, SpdFactor};
use crate::model::LabelMatrix;

/// Parameter `V` (`d × p`) of a linear map from a `d`-dimensional feature space
/// into a `p`-dimensional target space.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatrix {
    data: DMatrix<f64>,
    gamma: f64,
    eta: f64,
}

impl MapMatrix {
    pub fn new(data: DMatrix<f64>, gamma: f64, eta: f64) -> Result<Self> {
        if !all_finite(&data) {
            return Err(DmapError::InvalidInput("map matrix has non-finite entries".into()));
        }
        Ok(Self { data, gamma, eta })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Feature dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.data.nrows()
    }

    /// Target dimension `p`.
    pub fn output_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

fn check_reg(name: &str, value: f64) -> Result<()> {
    if !(value >= 0.0) || !value.is_finite() {
        return Err(DmapError::InvalidInput(format!(
            "{name} must be a finite non-negative number, got {value}"
        )));
    }
    Ok(())
}

pub fn solve_ridge_map(
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    y: &LabelMatrix,
    gamma: f64,
    eta: f64,
) -> Result<MapMatrix> {
    solve_ridge_map_targets(x, k, y.data(), gamma, eta)
}

/// Same closed form with an arbitrary `n × k` target matrix in place of the
/// ±1 label matrix.
pub fn solve_ridge_map_targets(
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
    eta: f64,
) -> Result<MapMatrix> {
    check_reg("gamma", gamma)?;
    check_reg("eta", eta)?;
    if y.nrows() != x.ncols() {
        return Err(DmapError::DimensionMismatch(format!(
            "label matrix has {} rows for {} instances",
            y.nrows(),
            x.ncols()
        )));
    }
    if y.ncols() != k.ncols() {
        return Err(DmapError::DimensionMismatch(format!(
            "label matrix has {} columns for {} class embeddings",
            y.ncols(),
            k.ncols()
        )));
    }
    let feature_gram = SpdFactor::new(gram_outer(x, gamma), "X Xᵀ + γI")?;
    let embed_gram = SpdFactor::new(gram_outer(k, eta), "K Kᵀ + ηI")?;

    let rhs = (x * y) * k.transpose();
    let left = feature_gram.solve(&rhs);
    // V (KKᵀ + ηI) = left  ⇔  (KKᵀ + ηI) Vᵀ = leftᵀ
    let v = embed_gram.solve(&left.transpose()).transpose();
    MapMatrix::new(v, gamma, eta)
}

/// `labels[i]` is the column of `k` that instance `i` is regressed onto.
pub fn solve_embedding_regression(
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    labels: &[usize],
    gamma: f64,
) -> Result<MapMatrix> {
    check_reg("gamma", gamma)?;
    if labels.len() != x.ncols() {
        return Err(DmapError::DimensionMismatch(format!(
            "{} labels for {} instances",
            labels.len(),
            x.ncols()
        )));
    }
    // X K_yᵀ = (per-class feature sums) Kᵀ
    let mut class_sums = DMatrix::zeros(x.nrows(), k.ncols());
    for (i, &c) in labels.iter().enumerate() {
        if c >= k.ncols() {
            return Err(DmapError::DimensionMismatch(format!(
                "label index {c} out of range for {} classes",
                k.ncols()
            )));
        }
        let mut col = class_sums.column_mut(c);
        col += x.column(i);
    }
    let rhs = class_sums * k.transpose();
    let feature_gram = SpdFactor::new(gram_outer(x, gamma), "X Xᵀ + γI")?;
    MapMatrix::new(feature_gram.solve(&rhs), gamma, 0.0)
}

/// `Vᵀ X`, one predicted column per instance.
pub fn predict_semantic(map: &MapMatrix, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != map.input_dim() {
        return Err(DmapError::DimensionMismatch(format!(
            "map expects {}-dimensional features, got {}",
            map.input_dim(),
            x.nrows()
        )));
    }
    Ok(map.data().tr_mul(x))
}

/// Value of the label-score objective at `v`.
pub fn ridge_objective(
    v: &DMatrix<f64>,
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
    eta: f64,
) -> f64 {
    let vk = v * k;
    let xtv = x.tr_mul(v);
    let fit = (x.tr_mul(&vk) - y).norm_squared();
    fit + gamma * vk.norm_squared() + eta * xtv.norm_squared() + gamma * eta * v.norm_squared()
}

/// Gradient of [`ridge_objective`]:
/// `2X(XᵀVK − Y)Kᵀ + 2γVKKᵀ + 2ηXXᵀV + 2γηV`.
pub fn stationarity_residual(
    v: &DMatrix<f64>,
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
    eta: f64,
) -> DMatrix<f64> {
    let vk = v * k;
    let kkt = k * k.transpose();
    let xxt = x * x.transpose();
    (x * (x.tr_mul(&vk) - y) * k.transpose()) * 2.0
        + (v * &kkt) * (2.0 * gamma)
        + (&xxt * v) * (2.0 * eta)
        + v * (2.0 * gamma * eta)
}
