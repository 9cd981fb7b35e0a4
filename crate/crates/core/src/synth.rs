//! Seeded synthetic zero-shot datasets.
//!
//! Construction, for `K` the `p × (k + l)` class embeddings:
//!
//! 1. Embedding columns are standard Gaussian draws scaled to unit norm.
//! 2. `M = feature_scale · Q` where `Q` is an orthonormalized `d × p` Gaussian
//!    matrix. Because `M` is a scaled isometry, least-squares coefficients over
//!    the seen prototypes are identical in both spaces, so `M k_c` prototypes
//!    have exactly consistent inter-class relationships.
//! 3. Defect pairs: for unseen pair `(2i, 2i+1)` the second embedding is
//!    replaced by the first one's projection onto `span(K_s)` plus a fresh
//!    residual orthogonal to that span, keeping unit norm. Both classes are then
//!    indistinguishable to any map whose image lies in `span(K_s)`.
//! 4. Distortion: every unseen prototype becomes `M (k_u + t w)` with `w` a
//!    unit direction inside `span(K_s)` orthogonal to the projection of `k_u`.
//!    This moves the feature-space relationship away from the semantic one and
//!    lowers the consistency measure monotonically in `t`.
//! 5. Instances are prototypes plus `noise_sigma` times standard Gaussian noise.
//!
//! Randomness comes from ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Uniforms take the top 53 bits of `next_u64`; Gaussians use the Box–Muller
//! transform, consuming draws in pairs. The draw sequence is fixed by the
//! shape parameters alone: changing `noise_sigma` or `irc_distortion` never
//! shifts later draws.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmapError, Result};
use crate::io::index_ids;
use crate::linalg::{orthogonalize_against, orthonormal_basis, ORTHO_TOL};
use crate::model::{ClassId, ClassSplit, EmbeddingMatrix, FeatureMatrix, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Feature dimension.
    pub d: usize,
    /// Embedding dimension.
    pub p: usize,
    /// Seen classes.
    pub k: usize,
    /// Unseen classes.
    pub l: usize,
    /// Instances per class, for both train (seen) and test (unseen).
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub irc_distortion: f64,
    pub defect_pairs: usize,
    /// Norm of a feature prototype relative to its unit-norm embedding.
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 30,
            p: 10,
            k: 15,
            l: 5,
            n_per_class: 10,
            noise_sigma: 0.0,
            irc_distortion: 0.0,
            defect_pairs: 0,
            feature_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Noise-free, exactly consistent data.
    pub fn exact(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Low-rank seen span with `pairs` indistinguishable unseen pairs.
    pub fn with_defects(pairs: usize, seed: u64) -> Self {
        Self {
            d: 20,
            p: 12,
            k: 6,
            l: 6,
            n_per_class: 10,
            defect_pairs: pairs,
            seed,
            ..Self::default()
        }
    }

    /// Noisy clusters with distorted unseen prototypes.
    pub fn noisy(distortion: f64, seed: u64) -> Self {
        Self {
            d: 16,
            p: 12,
            k: 8,
            l: 8,
            n_per_class: 40,
            noise_sigma: 0.5,
            irc_distortion: distortion,
            feature_scale: 4.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("p", self.p),
            ("k", self.k),
            ("l", self.l),
            ("n_per_class", self.n_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DmapError::InfeasibleConfig(format!("{name} must be at least 1")));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("irc_distortion", self.irc_distortion)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DmapError::InfeasibleConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.feature_scale > 0.0) || !self.feature_scale.is_finite() {
            return Err(DmapError::InfeasibleConfig(format!(
                "feature_scale must be positive, got {}",
                self.feature_scale
            )));
        }
        if self.p > self.d {
            return Err(DmapError::InfeasibleConfig(format!(
                "embedding dimension p = {} exceeds feature dimension d = {}",
                self.p, self.d
            )));
        }
        if 2 * self.defect_pairs > self.l {
            return Err(DmapError::InfeasibleConfig(format!(
                "{} defect pairs need {} unseen classes, have {}",
                self.defect_pairs,
                2 * self.defect_pairs,
                self.l
            )));
        }
        if self.defect_pairs > 0 && self.k >= self.p {
            return Err(DmapError::InfeasibleConfig(format!(
                "defects need room outside the seen span (k = {} must be below p = {})",
                self.k, self.p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub test_features: FeatureMatrix,
    pub test_labels: Vec<ClassId>,
    /// Seen classes followed by unseen classes.
    pub embeddings: EmbeddingMatrix,
    /// Noise-free feature prototypes, same column order as `embeddings`.
    pub feature_prototypes: DMatrix<f64>,
    pub defect_pairs: Vec<(ClassId, ClassId)>,
}

struct Gaussian {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on (0, 1].
    fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform_open0();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    fn vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.sample())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        // from_fn visits entries in column-major order
        DMatrix::from_fn(rows, cols, |_, _| self.sample())
    }
}

pub fn seen_id(i: usize) -> ClassId {
    format!("s{i}")
}

pub fn unseen_id(i: usize) -> ClassId {
    format!("u{i}")
}

/// Unit vector along `v` made orthogonal to `basis` and `extra`, or `None` when
/// nothing is left.
fn unit_residual(mut v: DVector<f64>, basis: &DMatrix<f64>, extra: Option<&DVector<f64>>) -> Option<DVector<f64>> {
    let scale = v.norm();
    orthogonalize_against(&mut v, basis);
    if let Some(e) = extra {
        for _ in 0..2 {
            let proj = e.dot(&v);
            v.axpy(-proj, e, 1.0);
        }
    }
    let norm = v.norm();
    (norm > ORTHO_TOL * scale.max(1.0)).then(|| v / norm)
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let SynthConfig { d, p, k, l, n_per_class: npc, .. } = *config;
    let mut g = Gaussian::new(config.seed);

    let mut emb = g.matrix(p, k + l);
    for mut col in emb.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        } else {
            col[0] = 1.0;
        }
    }

    let q = orthonormal_basis(&g.matrix(d, p));
    if q.ncols() < p {
        return Err(DmapError::InfeasibleConfig(
            "random feature map is rank deficient".into(),
        ));
    }
    let m = q * config.feature_scale;

    let seen_basis = orthonormal_basis(&emb.columns(0, k).clone_owned());
    let rank = seen_basis.ncols();
    let project = |v: &DVector<f64>| &seen_basis * seen_basis.tr_mul(v);

    let mut defect_pairs = Vec::with_capacity(config.defect_pairs);
    for pair in 0..config.defect_pairs {
        let (a, b) = (k + 2 * pair, k + 2 * pair + 1);
        let first = emb.column(a).clone_owned();
        let u = project(&first);
        let first_residual = unit_residual(&first - &u, &seen_basis, None);
        let draw = g.vector(p);
        let direction = unit_residual(draw, &seen_basis, first_residual.as_ref())
            .or_else(|| first_residual.as_ref().map(|r| -r))
            .ok_or_else(|| {
                DmapError::InfeasibleConfig("no direction left outside the seen span".into())
            })?;
        let residual_norm = (1.0 - u.norm_squared()).max(0.0).sqrt();
        emb.set_column(b, &(u + direction * residual_norm));
        defect_pairs.push((unseen_id(2 * pair), unseen_id(2 * pair + 1)));
    }

    let mut distorted = emb.clone();
    for j in 0..l {
        let coeffs = g.vector(rank);
        if config.irc_distortion == 0.0 {
            continue;
        }
        let w = &seen_basis * coeffs;
        let u = project(&emb.column(k + j).clone_owned());
        let u_norm = u.norm();
        let along_u = (u_norm > ORTHO_TOL).then(|| DMatrix::from_columns(&[u / u_norm]));
        let direction = along_u
            .and_then(|b| unit_residual(w.clone(), &b, None))
            .or_else(|| {
                let n = w.norm();
                (n > 0.0).then(|| &w / n)
            });
        if let Some(dir) = direction {
            let mut col = distorted.column_mut(k + j);
            col.axpy(config.irc_distortion, &dir, 1.0);
        }
    }

    let prototypes = &m * &distorted;
    let sample = |g: &mut Gaussian, classes: std::ops::Range<usize>| {
        let n = classes.len() * npc;
        let mut x = DMatrix::zeros(d, n);
        let mut labels = Vec::with_capacity(n);
        for (slot, c) in classes.enumerate() {
            for i in 0..npc {
                let noise = g.vector(d);
                x.set_column(slot * npc + i, &(prototypes.column(c) + noise * config.noise_sigma));
                labels.push(c);
            }
        }
        (x, labels)
    };
    let (x_train, train_idx) = sample(&mut g, 0..k);
    let (x_test, test_idx) = sample(&mut g, k..k + l);

    let class_ids: Vec<ClassId> = (0..k).map(seen_id).chain((0..l).map(unseen_id)).collect();
    let embeddings = EmbeddingMatrix::new(emb, class_ids.clone())?;
    let split = ClassSplit::new(class_ids[..k].to_vec(), class_ids[k..].to_vec())?;
    let train_ids = index_ids(x_train.ncols());
    let test_ids = index_ids(x_test.ncols());
    let train = LabeledDataset::new(
        FeatureMatrix::new(x_train, train_ids)?,
        train_idx.iter().map(|&c| class_ids[c].clone()).collect(),
        split,
        embeddings.clone(),
    )?;
    Ok(SyntheticData {
        train,
        test_features: FeatureMatrix::new(x_test, test_ids)?,
        test_labels: test_idx.iter().map(|&c| class_ids[c].clone()).collect(),
        embeddings,
        feature_prototypes: prototypes,
        defect_pairs,
    })
}
