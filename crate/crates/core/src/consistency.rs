//! Inter-class relationships and semantic-space diagnostics.
//!
//! An unseen class is described by ridge coefficients over the seen class
//! prototypes. Comparing the coefficients obtained in feature space (`R_x`)
//! with those obtained in embedding space (`R_k`) tells how well the two
//! spaces agree on the relationships between classes; [`consistency_measure`]
//! condenses that into a score in `(0, 1]`.
//!
//! [`preinspect`] looks for unseen classes whose embeddings share the same
//! orthogonal projection onto the span of the seen embeddings. A linear map
//! learned from seen classes only produces outputs inside that span, so such
//! classes always receive identical scores.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DmapError, Result};
use crate::linalg::{gram_inner, SpdFactor};
use crate::model::{ClassId, EmbeddingMatrix, PrototypeSet};

/// Default ridge weight for relationship extraction.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Norms below this are treated as zero by the consistency measure.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpace {
    Feature,
    Semantic,
}

/// `k × l` coefficients; column `i` expresses unseen class `i` over the seen
/// prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipMatrix {
    data: DMatrix<f64>,
    lambda: f64,
    source_space: SourceSpace,
}

impl RelationshipMatrix {
    pub fn new(data: DMatrix<f64>, lambda: f64, source_space: SourceSpace) -> Self {
        Self {
            data,
            lambda,
            source_space,
        }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn source_space(&self) -> SourceSpace {
        self.source_space
    }

    pub fn num_seen(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_unseen(&self) -> usize {
        self.data.ncols()
    }
}

/// Factored `(BᵀB + λI)` for repeated ridge solves against one basis `B`.
struct RidgeSystem<'a> {
    basis: &'a DMatrix<f64>,
    factor: SpdFactor,
}

impl<'a> RidgeSystem<'a> {
    fn new(basis: &'a DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(DmapError::InvalidInput(format!(
                "lambda must be a finite non-negative number, got {lambda}"
            )));
        }
        let factor = SpdFactor::new(gram_inner(basis, lambda), "X̃ᵀX̃ + λI")?;
        Ok(Self { basis, factor })
    }

    fn solve(&self, target: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vector(&self.basis.tr_mul(target))
    }
}

/// `argmin_α ‖target − Bα‖² + λ‖α‖²` where the columns of `seen` form `B`.
pub fn extract_relationship(
    seen: &DMatrix<f64>,
    target: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    if target.len() != seen.nrows() {
        return Err(DmapError::DimensionMismatch(format!(
            "target has dimension {}, prototypes have {}",
            target.len(),
            seen.nrows()
        )));
    }
    Ok(RidgeSystem::new(seen, lambda)?.solve(target))
}

pub fn build_relationship_matrix(
    seen: &DMatrix<f64>,
    unseen: &DMatrix<f64>,
    lambda: f64,
    source_space: SourceSpace,
) -> Result<RelationshipMatrix> {
    if seen.nrows() != unseen.nrows() {
        return Err(DmapError::DimensionMismatch(format!(
            "seen prototypes have dimension {}, unseen have {}",
            seen.nrows(),
            unseen.nrows()
        )));
    }
    let system = RidgeSystem::new(seen, lambda)?;
    let columns: Vec<DVector<f64>> = (0..unseen.ncols())
        .into_par_iter()
        .map(|i| system.solve(&unseen.column(i).clone_owned()))
        .collect();
    let data = if columns.is_empty() {
        DMatrix::zeros(seen.ncols(), 0)
    } else {
        DMatrix::from_columns(&columns)
    };
    Ok(RelationshipMatrix::new(data, lambda, source_space))
}

fn check_shapes(seen: &DMatrix<f64>, r_x: &RelationshipMatrix, r_k: &RelationshipMatrix) -> Result<()> {
    if r_x.data.shape() != r_k.data.shape() {
        return Err(DmapError::DimensionMismatch(format!(
            "R_x is {:?}, R_k is {:?}",
            r_x.data.shape(),
            r_k.data.shape()
        )));
    }
    if seen.ncols() != r_x.num_seen() {
        return Err(DmapError::DimensionMismatch(format!(
            "{} seen prototypes for {} relationship rows",
            seen.ncols(),
            r_x.num_seen()
        )));
    }
    Ok(())
}

/// Per-unseen-class terms `exp(−‖X̃α − X̃β‖ / (‖X̃α‖·‖X̃β‖))`.
pub fn consistency_terms(
    seen: &DMatrix<f64>,
    r_x: &RelationshipMatrix,
    r_k: &RelationshipMatrix,
) -> Result<Vec<f64>> {
    check_shapes(seen, r_x, r_k)?;
    let a = seen * r_x.data();
    let b = seen * r_k.data();
    Ok(a.column_iter()
        .zip(b.column_iter())
        .enumerate()
        .map(|(i, (ca, cb))| {
            let na = ca.norm();
            let nb = cb.norm();
            match (na < DEGENERATE_NORM, nb < DEGENERATE_NORM) {
                (true, true) => {
                    warn!("unseen class {i}: both relationship images vanish, term set to 1");
                    1.0
                }
                (true, false) | (false, true) => {
                    warn!("unseen class {i}: one relationship image vanishes, term set to 0");
                    0.0
                }
                (false, false) => (-(ca - cb).norm() / (na * nb)).exp(),
            }
        })
        .collect())
}

/// Mean of [`consistency_terms`]; 1 means the two spaces agree exactly.
pub fn consistency_measure(
    seen: &DMatrix<f64>,
    r_x: &RelationshipMatrix,
    r_k: &RelationshipMatrix,
) -> Result<f64> {
    let terms = consistency_terms(seen, r_x, r_k)?;
    if terms.is_empty() {
        return Err(DmapError::InvalidInput("no unseen classes".into()));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// `‖X̃R_x − X̃R_k‖_F / ‖X̃R_k‖_F`; zero exactly when the relationships agree.
pub fn irc_gap(seen: &DMatrix<f64>, r_x: &RelationshipMatrix, r_k: &RelationshipMatrix) -> Result<f64> {
    check_shapes(seen, r_x, r_k)?;
    let b = seen * r_k.data();
    let diff = seen * r_x.data() - &b;
    Ok(diff.norm() / b.norm().max(f64::MIN_POSITIVE))
}

/// CM and IRC gap for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub cm: f64,
    pub irc_gap: f64,
    pub lambda: f64,
    pub unseen_classes: Vec<ClassId>,
    pub terms: Vec<f64>,
}

/// Relationships of unseen over seen prototypes in feature space against the
/// same relationships in embedding space.
pub fn consistency_report(
    seen_prototypes: &PrototypeSet,
    unseen_prototypes: &PrototypeSet,
    seen_embeddings: &EmbeddingMatrix,
    unseen_embeddings: &EmbeddingMatrix,
    lambda: f64,
) -> Result<ConsistencyReport> {
    if seen_prototypes.class_ids() != seen_embeddings.class_ids()
        || unseen_prototypes.class_ids() != unseen_embeddings.class_ids()
    {
        return Err(DmapError::InvalidInput(
            "prototype and embedding class orders differ".into(),
        ));
    }
    let seen = seen_prototypes.data();
    let r_x = build_relationship_matrix(seen, unseen_prototypes.data(), lambda, SourceSpace::Feature)?;
    let r_k = build_relationship_matrix(
        seen_embeddings.data(),
        unseen_embeddings.data(),
        lambda,
        SourceSpace::Semantic,
    )?;
    let terms = consistency_terms(seen, &r_x, &r_k)?;
    let cm = terms.iter().sum::<f64>() / terms.len() as f64;
    Ok(ConsistencyReport {
        cm,
        irc_gap: irc_gap(seen, &r_x, &r_k)?,
        lambda,
        unseen_classes: unseen_prototypes.class_ids().to_vec(),
        terms,
    })
}

/// `k_u = u + v` with `u` in the span of the seen embeddings and `v` orthogonal
/// to it; `u = K_s α` with `α` of minimum norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionDecomposition {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub alpha: DVector<f64>,
}

/// SVD-based description of `span(K_s)`, reusable across projections.
pub struct SeenSpan {
    basis: DMatrix<f64>,
    // α = coeff · Uᵣᵀ k
    coeff: DMatrix<f64>,
}

impl SeenSpan {
    pub fn new(seen: &DMatrix<f64>) -> Self {
        let (p, k) = seen.shape();
        if p == 0 || k == 0 {
            return Self {
                basis: DMatrix::zeros(p, 0),
                coeff: DMatrix::zeros(k, 0),
            };
        }
        let svd = seen.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested Vᵀ");
        let sigma = &svd.singular_values;
        let max = sigma.max();
        let tol = (p.max(k) as f64) * f64::EPSILON * max;
        let kept: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > tol).collect();
        let basis = DMatrix::from_fn(p, kept.len(), |r, c| u[(r, kept[c])]);
        let coeff = DMatrix::from_fn(k, kept.len(), |r, c| v_t[(kept[c], r)] / sigma[kept[c]]);
        Self { basis, coeff }
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthonormal basis of the span.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn project(&self, k_u: &DVector<f64>) -> ProjectionDecomposition {
        let coords = self.basis.tr_mul(k_u);
        let alpha = &self.coeff * &coords;
        let mut v = k_u - &self.basis * &coords;
        let correction = self.basis.tr_mul(&v);
        v -= &self.basis * correction;
        let u = k_u - &v;
        ProjectionDecomposition { u, v, alpha }
    }
}

pub fn project_onto_seen_span(
    seen: &DMatrix<f64>,
    k_u: &DVector<f64>,
) -> Result<ProjectionDecomposition> {
    if seen.nrows() != k_u.len() {
        return Err(DmapError::DimensionMismatch(format!(
            "embedding has dimension {}, seen embeddings have {}",
            k_u.len(),
            seen.nrows()
        )));
    }
    Ok(SeenSpan::new(seen).project(k_u))
}

/// Flagging threshold for [`preinspect`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Absolute(f64),
    /// Multiple of the median off-diagonal distance.
    RelativeToMedian(f64),
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::RelativeToMedian(1e-6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub class_i: ClassId,
    pub class_j: ClassId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub classes: Vec<ClassId>,
    /// Euclidean distances between the projections of unseen embeddings onto
    /// the seen span.
    pub pairwise_distances: Vec<Vec<f64>>,
    pub flagged_pairs: Vec<FlaggedPair>,
    pub epsilon: f64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

pub fn preinspect(
    seen: &DMatrix<f64>,
    unseen: &EmbeddingMatrix,
    epsilon: Epsilon,
) -> Result<DefectReport> {
    if seen.nrows() != unseen.dim() {
        return Err(DmapError::DimensionMismatch(format!(
            "seen embeddings have dimension {}, unseen have {}",
            seen.nrows(),
            unseen.dim()
        )));
    }
    let span = SeenSpan::new(seen);
    let projections: Vec<DVector<f64>> = (0..unseen.num_classes())
        .into_par_iter()
        .map(|i| span.project(&unseen.data().column(i).clone_owned()).u)
        .collect();

    let l = projections.len();
    let mut dist = vec![vec![0.0; l]; l];
    let mut off_diagonal = Vec::with_capacity(l * l.saturating_sub(1) / 2);
    for i in 0..l {
        for j in (i + 1)..l {
            let d = (&projections[i] - &projections[j]).norm();
            dist[i][j] = d;
            dist[j][i] = d;
            off_diagonal.push(d);
        }
    }
    let eps = match epsilon {
        Epsilon::Absolute(e) => e,
        Epsilon::RelativeToMedian(f) => f * median(&mut off_diagonal),
    };
    if !(eps >= 0.0) {
        return Err(DmapError::InvalidInput(format!("epsilon must be non-negative, got {eps}")));
    }
    let classes = unseen.class_ids().to_vec();
    let mut flagged_pairs = Vec::new();
    for i in 0..l {
        for j in (i + 1)..l {
            if dist[i][j] <= eps {
                flagged_pairs.push(FlaggedPair {
                    class_i: classes[i].clone(),
                    class_j: classes[j].clone(),
                    distance: dist[i][j],
                });
            }
        }
    }
    Ok(DefectReport {
        classes,
        pairwise_distances: dist,
        flagged_pairs,
        epsilon: eps,
    })
}
