//! The nulling head: per-class prototypes, error vectors, the
//! episode-specific null-space projector, and projected-distance logits.
//!
//! For an episode with classes 0..N_c, reference rows φ_k, and prototype
//! rows ḡ_k, the error vector of class k is
//!
//! ```text
//! v_k = (N_c - 1)·φ_k - Σ_{l≠k} φ_l - ḡ_k
//! ```
//!
//! (on unit-normalized copies of φ and ḡ when normalization is on, the
//! default). The projector P = I - V(VᵀV)⁺Vᵀ onto the null space of the
//! error vectors annihilates every v_k, so the matching reference and
//! prototype align maximally in the projection space. Queries are scored by
//! distance to the references under P, without normalizing the query.

use crate::error::{MlnError, Result};
use crate::num::linalg;
use crate::num::matrix::{dot, l2_normalize, Matrix};

/// How query/reference agreement is turned into a logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitMode {
    /// score_k = -(φ̂_k - g_q) P (φ̂_k - g_q)ᵀ
    #[default]
    ProjectedEuclidean,
    /// score_k = φ̂_k P g_qᵀ
    ProjectedInnerProduct,
}

/// Whether training gradients flow through the projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// P is an episode constant during backpropagation.
    #[default]
    StopGradientProjector,
    /// Differentiate through P = I - V(VᵀV)⁺Vᵀ.
    DifferentiateProjector,
}

/// Head hyperparameters shared by the trainer and evaluator.
#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub dim: usize,
    pub n_ref: usize,
    pub logit_mode: LogitMode,
    pub gradient_mode: GradientMode,
    /// Normalize φ and ḡ before building the projector (the default).
    pub normalize: bool,
}

impl HeadConfig {
    pub fn new(dim: usize, n_ref: usize) -> Self {
        HeadConfig {
            dim,
            n_ref,
            logit_mode: LogitMode::default(),
            gradient_mode: GradientMode::default(),
            normalize: true,
        }
    }
}

/// The learned bank Φ: one fixed-label reference row per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    /// N_ref x D, row k is φ_k. Row index is the label; it never changes
    /// during a training run.
    pub refs: Matrix,
}

impl ReferenceBank {
    /// Random unit-norm rows.
    pub fn init(n_ref: usize, dim: usize, rng: &mut crate::num::rng::RngStream) -> Result<Self> {
        let mut refs = Matrix::zeros(n_ref, dim);
        for r in 0..n_ref {
            let row: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
            let row = l2_normalize(&row)?;
            for (c, v) in row.into_iter().enumerate() {
                refs.set(r, c, v);
            }
        }
        Ok(ReferenceBank { refs })
    }

    pub fn n_ref(&self) -> usize {
        self.refs.rows()
    }

    pub fn dim(&self) -> usize {
        self.refs.cols()
    }

    /// The first `way` rows, in slot order (the training-time positional
    /// binding: episode slot k ↔ reference row k).
    pub fn episode_rows(&self, way: usize) -> Result<Matrix> {
        if way > self.n_ref() {
            return Err(MlnError::BankTooSmall { n_ref: self.n_ref(), way });
        }
        let rows: Vec<Vec<f64>> = (0..way).map(|r| self.refs.row(r).to_vec()).collect();
        Matrix::from_rows(&rows)
    }
}

/// Per-class average embeddings for one episode.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// N_c x D, row k is ḡ_k for episode slot k.
    pub protos: Matrix,
}

/// D x N_c matrix whose columns are the error vectors v_k.
#[derive(Debug, Clone)]
pub struct ErrorMatrix {
    pub errs: Matrix,
}

/// Episode-specific projector onto null({v_k}).
#[derive(Debug, Clone)]
pub struct NullProjector {
    /// D x D, symmetric and idempotent.
    pub projector: Matrix,
    /// Orthonormal null-space basis, when requested.
    pub basis: Option<Matrix>,
    /// Rank of the nulled space, i.e. rank(V).
    pub rank: usize,
}

/// Averages support embeddings per episode slot. `way` fixes the number of
/// slots; every slot must receive at least one embedding.
pub fn class_averages(support: &[(Vec<f64>, usize)], way: usize) -> Result<PrototypeSet> {
    if support.is_empty() {
        return Err(MlnError::EmptyClassSlot { slot: 0 });
    }
    let dim = support[0].0.len();
    let mut sums = Matrix::zeros(way, dim);
    let mut counts = vec![0usize; way];
    for (v, slot) in support {
        if *slot >= way {
            return Err(MlnError::Sampling(format!("class slot {slot} out of range for way {way}")));
        }
        if v.len() != dim {
            return Err(MlnError::DimensionMismatch {
                op: "class_averages",
                detail: format!("embedding of length {} among length {dim}", v.len()),
            });
        }
        for (c, x) in v.iter().enumerate() {
            let s = sums.get(*slot, c) + x;
            sums.set(*slot, c, s);
        }
        counts[*slot] += 1;
    }
    for (slot, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(MlnError::EmptyClassSlot { slot });
        }
        for c in 0..dim {
            let v = sums.get(slot, c) / n as f64;
            sums.set(slot, c, v);
        }
    }
    Ok(PrototypeSet { protos: sums })
}

/// Unit-normalizes every row, erroring on a near-zero row.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = l2_normalize(m.row(r))?;
        for (c, v) in row.into_iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Builds the D x N_c error matrix with columns
/// v_k = (N_c-1)φ_k - Σ_{l≠k} φ_l - ḡ_k, on normalized copies of the
/// inputs when `normalize` is set.
pub fn error_vectors(refs: &Matrix, protos: &PrototypeSet, normalize: bool) -> Result<ErrorMatrix> {
    let way = refs.rows();
    let dim = refs.cols();
    if protos.protos.rows() != way || protos.protos.cols() != dim {
        return Err(MlnError::DimensionMismatch {
            op: "error_vectors",
            detail: format!(
                "refs {}x{} vs protos {}x{}",
                way,
                dim,
                protos.protos.rows(),
                protos.protos.cols()
            ),
        });
    }
    let (phi, g) = if normalize {
        (normalize_rows(refs)?, normalize_rows(&protos.protos)?)
    } else {
        (refs.clone(), protos.protos.clone())
    };
    // (N_c-1)φ_k - Σ_{l≠k} φ_l = N_c·φ_k - Σ_l φ_l
    let mut col_sum = vec![0.0; dim];
    for r in 0..way {
        for (c, s) in col_sum.iter_mut().enumerate() {
            *s += phi.get(r, c);
        }
    }
    let mut errs = Matrix::zeros(dim, way);
    for k in 0..way {
        for c in 0..dim {
            let v = way as f64 * phi.get(k, c) - col_sum[c] - g.get(k, c);
            errs.set(c, k, v);
        }
    }
    Ok(ErrorMatrix { errs })
}

/// Projector onto the null space of the error vectors:
/// P = I - V(VᵀV)⁺Vᵀ. Warns and proceeds when D ≤ N_c, where the null
/// space may be trivial.
pub fn build_projector(errs: &ErrorMatrix, tol: f64) -> Result<NullProjector> {
    build_projector_impl(errs, tol, false)
}

/// Same as [`build_projector`], additionally materializing an orthonormal
/// null-space basis M (P = MMᵀ).
pub fn build_projector_with_basis(errs: &ErrorMatrix, tol: f64) -> Result<NullProjector> {
    build_projector_impl(errs, tol, true)
}

fn build_projector_impl(errs: &ErrorMatrix, tol: f64, want_basis: bool) -> Result<NullProjector> {
    let v = &errs.errs;
    let d = v.rows();
    if d <= v.cols() {
        log::warn!(
            "projection space may not exist: embedding dim {} <= {} error vectors",
            d,
            v.cols()
        );
    }
    let rank = linalg::rank(v, tol);
    let vt = v.transpose();
    let gram = vt.matmul(v)?;
    let gram_pinv = linalg::pseudo_inverse(&gram, tol);
    let p_range = v.matmul(&gram_pinv)?.matmul(&vt)?;
    let projector = Matrix::identity(d).sub(&p_range)?;
    projector.check_finite("build_projector")?;
    let basis = if want_basis { Some(linalg::nullspace_basis(v, tol)) } else { None };
    Ok(NullProjector { projector, basis, rank })
}

/// Oracle-route projector: P = MMᵀ from an explicit orthonormal basis.
pub fn projector_from_basis(errs: &ErrorMatrix, tol: f64) -> Result<Matrix> {
    let m = linalg::nullspace_basis(&errs.errs, tol);
    m.matmul(&m.transpose())
}

/// Scores one (unnormalized) query against the episode references under the
/// projector. `refs_hat` must carry the same normalization state used to
/// build the projector.
pub fn nulled_logits(
    query: &[f64],
    refs_hat: &Matrix,
    proj: &NullProjector,
    mode: LogitMode,
) -> Result<Vec<f64>> {
    let d = refs_hat.cols();
    if query.len() != d || proj.projector.rows() != d {
        return Err(MlnError::DimensionMismatch {
            op: "nulled_logits",
            detail: format!(
                "query {} vs refs {}x{} vs projector {}x{}",
                query.len(),
                refs_hat.rows(),
                d,
                proj.projector.rows(),
                proj.projector.cols()
            ),
        });
    }
    let p = &proj.projector;
    let mut scores = Vec::with_capacity(refs_hat.rows());
    for k in 0..refs_hat.rows() {
        let phi = refs_hat.row(k);
        let s = match mode {
            LogitMode::ProjectedEuclidean => {
                let diff: Vec<f64> = phi.iter().zip(query).map(|(a, b)| a - b).collect();
                let pd = apply(p, &diff);
                -dot(&diff, &pd)
            }
            LogitMode::ProjectedInnerProduct => {
                let pq = apply(p, query);
                dot(phi, &pq)
            }
        };
        scores.push(s);
    }
    Ok(scores)
}

/// Diagnostic Δ_k = [(N_c-1)φ̂_k - Σ_{l≠k}φ̂_l] P ĝ_kᵀ. After nulling this
/// equals ‖Pĝ_k‖² for every k.
pub fn alignment_score(
    refs_hat: &Matrix,
    protos_hat: &Matrix,
    proj: &NullProjector,
) -> Result<Vec<f64>> {
    let way = refs_hat.rows();
    let dim = refs_hat.cols();
    let mut col_sum = vec![0.0; dim];
    for r in 0..way {
        for (c, s) in col_sum.iter_mut().enumerate() {
            *s += refs_hat.get(r, c);
        }
    }
    let mut deltas = Vec::with_capacity(way);
    for k in 0..way {
        let bracket: Vec<f64> = (0..dim)
            .map(|c| way as f64 * refs_hat.get(k, c) - col_sum[c])
            .collect();
        let pg = apply(&proj.projector, protos_hat.row(k));
        deltas.push(dot(&bracket, &pg));
    }
    Ok(deltas)
}

fn apply(p: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..p.rows()).map(|r| dot(p.row(r), v)).collect()
}
