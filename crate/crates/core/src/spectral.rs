//! Left null vectors of Laplacians and the symmetric matrices built from
//! them, with numerical certificates for the matrix inequalities the
//! convergence argument relies on.
//!
//! For an irreducible Laplacian `L` with positive left null vector `left_vector`
//! (summing to one):
//!
//! ```text
//! Xi = diag(left_vector)
//! U  = Xi - left_vector left_vector^T
//! R  = (Xi L + L^T Xi) / 2  ( = (U L + L^T U) / 2 )
//! U >= (rho2(U) / rho(L^T L)) L^T L >= 0
//! R >= (rho2(R) / rho(U)) U >= 0
//! ```
//!
//! For a graph with a spanning tree the same quantities are computed per
//! diagonal block of the block upper-triangular form, see
//! [`build_block_spectral`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::graph::{GraphError, PfDecomposition, WeightedDigraph};

/// Residual at which inverse iteration stops early.
pub const RESIDUAL_TARGET: f64 = 1e-12;
pub const MAX_INVERSE_ITERATIONS: usize = 200;
/// Accepted `||left_vector^T L||_inf`, relative to `max(1, max |L_ii|)`.
pub const NULL_VECTOR_TOLERANCE: f64 = 1e-9;
/// Eigenvalues at or below this fraction of the spectral radius count as zero.
pub const ZERO_CLUSTER_RELATIVE: f64 = 1e-9;
/// Largest tolerated `|M - M^T|` entry, relative to `max(1, max |M|)`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Minimum eigenvalue accepted as positive semidefinite.
pub const PSD_TOLERANCE: f64 = 1e-9;
/// Minimum eigenvalue accepted for the difference matrices of the
/// inequality chains.
pub const INEQUALITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("laplacian is not irreducible")]
    NotIrreducible,
    #[error("left null vector not found: residual {residual:e}")]
    EigensolverFailure { residual: f64 },
    #[error("matrix is not symmetric: max asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix has no positive eigenvalue")]
    NoPositiveEigenvalue,
    #[error("certificate `{certificate}` failed: margin {margin:e}")]
    CertificateFailure { certificate: String, margin: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn check_square(m: &DMatrix<f64>) -> Result<(), SpectralError> {
    if m.nrows() != m.ncols() {
        return Err(SpectralError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn symmetrized(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SpectralError> {
    check_square(m)?;
    let scale = m.amax().max(1.0);
    let asymmetry = (m - m.transpose()).amax();
    if asymmetry > SYMMETRY_TOLERANCE * scale {
        return Err(SpectralError::NotSymmetric { asymmetry });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>, SpectralError> {
    let s = symmetrized(m)?;
    if s.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, SpectralError> {
    Ok(symmetric_eigenvalues(m)?
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs())))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64, SpectralError> {
    Ok(symmetric_eigenvalues(m)?.first().copied().unwrap_or(0.0))
}

/// Smallest eigenvalue above the zero cluster `ZERO_CLUSTER_RELATIVE * rho(M)`.
pub fn min_positive_eigenvalue(m: &DMatrix<f64>) -> Result<f64, SpectralError> {
    let ev = symmetric_eigenvalues(m)?;
    let rho = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cutoff = ZERO_CLUSTER_RELATIVE * rho;
    ev.into_iter()
        .find(|&v| v > cutoff)
        .ok_or(SpectralError::NoPositiveEigenvalue)
}

fn pattern_is_irreducible(l: &DMatrix<f64>) -> bool {
    let n = l.nrows();
    if n == 1 {
        return true;
    }
    let a = DMatrix::from_fn(
        n,
        n,
        |i, j| if i == j { 0.0 } else { (-l[(i, j)]).max(0.0) },
    );
    WeightedDigraph::from_adjacency(a)
        .map(|g| g.is_strongly_connected())
        .unwrap_or(false)
}

/// Positive `left_vector` with `left_vector^T L = 0` and entries summing to one.
///
/// Shifted inverse iteration on `L^T + sigma I` (`sigma` a tiny positive
/// shift; every eigenvalue of a Laplacian has nonnegative real part so the
/// shifted matrix is invertible) starting from the uniform vector.
pub fn left_eigenvector(l: &DMatrix<f64>) -> Result<DVector<f64>, SpectralError> {
    check_square(l)?;
    let n = l.nrows();
    if n == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    if !pattern_is_irreducible(l) {
        return Err(SpectralError::NotIrreducible);
    }
    let scale = l.diagonal().amax().max(1.0);
    let sigma = 1e-10 * scale;
    let lt = l.transpose();
    let shifted = &lt + DMatrix::identity(n, n) * sigma;
    let lu = shifted.lu();

    let residual_of = |v: &DVector<f64>| (&lt * v).amax() / v.amax();
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut best = v.clone();
    let mut best_residual = residual_of(&v);
    for _ in 0..MAX_INVERSE_ITERATIONS {
        let Some(y) = lu.solve(&v) else {
            break;
        };
        let norm = y.norm();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        v = y / norm;
        let r = residual_of(&v);
        if r < best_residual {
            best_residual = r;
            best = v.clone();
        }
        if r <= RESIDUAL_TARGET * 1e-3 {
            break;
        }
    }

    if best.sum() < 0.0 {
        best = -best;
    }
    let total = best.sum();
    let left_vector = best / total;
    let residual = (l.transpose() * &left_vector).amax();
    if left_vector.iter().any(|&v| v <= 0.0)
        || residual > NULL_VECTOR_TOLERANCE * scale
        || !residual.is_finite()
    {
        return Err(SpectralError::EigensolverFailure { residual });
    }
    Ok(left_vector)
}

/// Margins (minimum eigenvalues, or max entry error for identities) of the
/// checks performed by [`SpectralData::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrreducibleCertificate {
    /// `||left_vector^T L||_inf`.
    pub null_residual: f64,
    pub disagreement_min_eigenvalue: f64,
    pub symmetric_min_eigenvalue: f64,
    /// `max |R - (U L + L^T U) / 2|`.
    pub symmetric_identity_error: f64,
    /// `lambda_min(U - (rho2(U) / rho(L^T L)) L^T L)`.
    pub disagreement_dominates_gram: f64,
    /// `lambda_min(R - (rho2(R) / rho(U)) U)`.
    pub symmetric_dominates_disagreement: f64,
}

/// Spectral quantities of an irreducible Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub laplacian: DMatrix<f64>,
    pub left_vector: DVector<f64>,
    pub left_diag: DMatrix<f64>,
    pub disagreement: DMatrix<f64>,
    pub symmetric: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub disagreement_radius: f64,
    /// `None` only for a single agent, where `U` vanishes.
    pub disagreement_gap: Option<f64>,
    pub symmetric_gap: Option<f64>,
    pub gram_radius: f64,
    pub certificate: IrreducibleCertificate,
}

impl SpectralData {
    /// Computes `left_vector`, `U`, `R` and the eigenvalue quantities, then checks every
    /// certificate; a violation beyond tolerance is an error.
    pub fn build(l: &DMatrix<f64>) -> Result<Self, SpectralError> {
        let data = Self::compute(l)?;
        data.check()?;
        Ok(data)
    }

    /// Same as [`SpectralData::build`] without failing on certificate
    /// violations, for reporting.
    pub fn compute(l: &DMatrix<f64>) -> Result<Self, SpectralError> {
        let left_vector = left_eigenvector(l)?;
        let left_diag = DMatrix::from_diagonal(&left_vector);
        let u = &left_diag - &left_vector * left_vector.transpose();
        let r = (&left_diag * l + l.transpose() * &left_diag) * 0.5;
        let gram = l.transpose() * l;

        let disagreement_radius = spectral_radius(&u)?;
        let disagreement_gap = optional_rho2(&u)?;
        let symmetric_gap = optional_rho2(&r)?;
        let gram_radius = spectral_radius(&gram)?;

        let r_alt = (&u * l + l.transpose() * &u) * 0.5;
        let disagreement_dominates_gram = match disagreement_gap {
            Some(r2) if gram_radius > 0.0 => min_eigenvalue(&(&u - &gram * (r2 / gram_radius)))?,
            _ => 0.0,
        };
        let symmetric_dominates_disagreement = match symmetric_gap {
            Some(r2) if disagreement_radius > 0.0 => {
                min_eigenvalue(&(&r - &u * (r2 / disagreement_radius)))?
            }
            _ => 0.0,
        };
        let certificate = IrreducibleCertificate {
            null_residual: (l.transpose() * &left_vector).amax(),
            disagreement_min_eigenvalue: min_eigenvalue(&u)?,
            symmetric_min_eigenvalue: min_eigenvalue(&r)?,
            symmetric_identity_error: (&r - r_alt).amax(),
            disagreement_dominates_gram,
            symmetric_dominates_disagreement,
        };
        Ok(Self {
            laplacian: l.clone(),
            left_vector,
            left_diag,
            disagreement: u,
            symmetric: r,
            gram,
            disagreement_radius,
            disagreement_gap,
            symmetric_gap,
            gram_radius,
            certificate,
        })
    }

    /// Every certificate with its pass/fail verdict.
    pub fn certificate_checks(&self) -> Vec<(&'static str, f64, bool)> {
        let c = &self.certificate;
        vec![
            (
                "null_residual",
                c.null_residual,
                c.null_residual <= NULL_VECTOR_TOLERANCE * self.scale(),
            ),
            (
                "disagreement_psd",
                c.disagreement_min_eigenvalue,
                c.disagreement_min_eigenvalue >= -PSD_TOLERANCE,
            ),
            (
                "symmetric_psd",
                c.symmetric_min_eigenvalue,
                c.symmetric_min_eigenvalue >= -PSD_TOLERANCE,
            ),
            (
                "symmetric_identity",
                c.symmetric_identity_error,
                c.symmetric_identity_error <= NULL_VECTOR_TOLERANCE * self.scale(),
            ),
            (
                "disagreement_dominates_gram",
                c.disagreement_dominates_gram,
                c.disagreement_dominates_gram >= -INEQUALITY_TOLERANCE,
            ),
            (
                "symmetric_dominates_disagreement",
                c.symmetric_dominates_disagreement,
                c.symmetric_dominates_disagreement >= -INEQUALITY_TOLERANCE,
            ),
        ]
    }

    fn check(&self) -> Result<(), SpectralError> {
        for (name, margin, ok) in self.certificate_checks() {
            if !ok {
                return Err(SpectralError::CertificateFailure {
                    certificate: name.to_string(),
                    margin,
                });
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.laplacian.diagonal().amax().max(1.0)
    }

    pub fn agent_count(&self) -> usize {
        self.left_vector.len()
    }

    /// Guaranteed decay rate `2 rho2(R) / rho(U)` of the disagreement
    /// energy once no input is clamped.
    pub fn theory_rate(&self) -> Option<f64> {
        match self.symmetric_gap {
            Some(r2) if self.disagreement_radius > 0.0 => Some(2.0 * r2 / self.disagreement_radius),
            _ => None,
        }
    }

    /// `max_i xi_i L_ii`.
    pub fn max_weighted_degree(&self) -> f64 {
        (0..self.agent_count())
            .map(|i| self.left_vector[i] * self.laplacian[(i, i)])
            .fold(0.0, f64::max)
    }
}

fn optional_rho2(m: &DMatrix<f64>) -> Result<Option<f64>, SpectralError> {
    match min_positive_eigenvalue(m) {
        Ok(v) => Ok(Some(v)),
        Err(SpectralError::NoPositiveEigenvalue) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn build_spectral(l: &DMatrix<f64>) -> Result<SpectralData, SpectralError> {
    SpectralData::build(l)
}

/// Per-block data: `left_vector^m` is the left null vector of the auxiliary block
/// `L~^{m,m}` and `Q^m = (Xi^m L^{m,m} + (Xi^m L^{m,m})^T) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpectrum {
    pub left_vector: DVector<f64>,
    pub symmetric: DMatrix<f64>,
    pub symmetric_min_eigenvalue: f64,
    pub symmetric_gap: Option<f64>,
}

/// Closed (last) block: `U^M = Xi^M - left_vector^M (left_vector^M)^T` and the inequality
/// `Q^M >= (rho2(Q^M) / rho(U^M)) U^M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSpectrum {
    pub disagreement: DMatrix<f64>,
    pub disagreement_radius: f64,
    pub disagreement_min_eigenvalue: f64,
    /// `rho2(Q^M) / rho(U^M)`; `None` for a single closed agent.
    pub conditioning: Option<f64>,
    /// `lambda_min(Q^M - conditioning * U^M)`.
    pub inequality_margin: f64,
}

/// Weights used by the two-block Lyapunov function of the event-triggered
/// protocol. `follower` is the block index whose inputs are bounded; the
/// leader side is block `follower + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingWeights {
    pub follower: usize,
    pub leader_threshold_gain: f64,
    pub follower_gain: f64,
    pub coupling_gain: f64,
    pub follower_threshold_gain: f64,
    /// Set when the graph has more than two blocks; these weights then only
    /// feed diagnostics.
    pub extension: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpectralData {
    pub blocks: Vec<BlockSpectrum>,
    pub leader: LeaderSpectrum,
    pub weights: Vec<CouplingWeights>,
    pub gram_radius: f64,
}

impl BlockSpectralData {
    pub fn certificate_checks(&self) -> Vec<(String, f64, bool)> {
        let last = self.blocks.len() - 1;
        let mut out = Vec::new();
        for (m, b) in self.blocks.iter().enumerate().take(last) {
            out.push((
                format!("block{}_symmetric_positive_definite", m + 1),
                b.symmetric_min_eigenvalue,
                b.symmetric_min_eigenvalue > 0.0,
            ));
        }
        let ql = self.blocks[last].symmetric_min_eigenvalue;
        out.push(("leader_symmetric_psd".into(), ql, ql >= -PSD_TOLERANCE));
        out.push((
            "leader_disagreement_psd".into(),
            self.leader.disagreement_min_eigenvalue,
            self.leader.disagreement_min_eigenvalue >= -PSD_TOLERANCE,
        ));
        out.push((
            "leader_symmetric_dominates_disagreement".into(),
            self.leader.inequality_margin,
            self.leader.inequality_margin >= -INEQUALITY_TOLERANCE,
        ));
        out
    }
}

/// Computes the per-block spectra of a block decomposition, failing when a
/// non-closed block's `Q^m` is not positive definite or the closed block's
/// inequality is violated.
pub fn build_block_spectral(pf: &PfDecomposition) -> Result<BlockSpectralData, SpectralError> {
    let data = compute_block_spectral(pf)?;
    for (name, margin, ok) in data.certificate_checks() {
        if !ok {
            return Err(SpectralError::CertificateFailure {
                certificate: name,
                margin,
            });
        }
    }
    Ok(data)
}

/// [`build_block_spectral`] without the certificate gate.
pub fn compute_block_spectral(pf: &PfDecomposition) -> Result<BlockSpectralData, SpectralError> {
    let count = pf.block_count();
    let mut blocks = Vec::with_capacity(count);
    for m in 0..count {
        let left_vector = left_eigenvector(pf.auxiliary_block(m))?;
        let weighted = DMatrix::from_diagonal(&left_vector) * pf.diagonal_block(m);
        let q = (&weighted + weighted.transpose()) * 0.5;
        blocks.push(BlockSpectrum {
            symmetric_min_eigenvalue: min_eigenvalue(&q)?,
            symmetric_gap: optional_rho2(&q)?,
            left_vector,
            symmetric: q,
        });
    }

    let last = &blocks[count - 1];
    let u = DMatrix::from_diagonal(&last.left_vector)
        - &last.left_vector * last.left_vector.transpose();
    let disagreement_radius = spectral_radius(&u)?;
    let conditioning = match last.symmetric_gap {
        Some(r2) if disagreement_radius > 0.0 => Some(r2 / disagreement_radius),
        _ => None,
    };
    let inequality_margin = match conditioning {
        Some(c) => min_eigenvalue(&(&last.symmetric - &u * c))?,
        None => 0.0,
    };
    let leader = LeaderSpectrum {
        disagreement_min_eigenvalue: min_eigenvalue(&u)?,
        disagreement: u,
        disagreement_radius,
        conditioning,
        inequality_margin,
    };

    let l = pf.permuted();
    let gram_radius = spectral_radius(&(l.transpose() * l))?;
    let mut weights = Vec::new();
    for m in 0..count.saturating_sub(1) {
        weights.push(coupling_weights(pf, &blocks, m, gram_radius)?);
    }
    Ok(BlockSpectralData {
        blocks,
        leader,
        weights,
        gram_radius,
    })
}

fn coupling_weights(
    pf: &PfDecomposition,
    blocks: &[BlockSpectrum],
    m: usize,
    gram_radius: f64,
) -> Result<CouplingWeights, SpectralError> {
    let follower = &blocks[m];
    let leader = &blocks[m + 1];
    let lead_block = pf.diagonal_block(m + 1);
    let follow_block = pf.diagonal_block(m);
    let coupling = pf.coupling_to_later(m);
    let n_follow = follow_block.nrows() as f64;
    let n_rest = coupling.ncols() as f64;
    let symmetric_gap = follower.symmetric_min_eigenvalue;

    let lead_degree = (0..lead_block.nrows())
        .map(|i| leader.left_vector[i] * lead_block[(i, i)])
        .fold(0.0, f64::max);
    let leader_threshold_gain =
        2.0 * lead_degree * spectral_radius(&(lead_block.transpose() * lead_block))?;

    let max_sq = |mat: &DMatrix<f64>| {
        let mut best: f64 = 0.0;
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                best = best.max((follower.left_vector[i] * mat[(i, j)]).powi(2));
            }
        }
        best
    };
    let follower_gain = 0.25 + n_follow * n_follow * max_sq(follow_block) / symmetric_gap;
    let coupling_gain = 2.0 * n_follow * n_rest * max_sq(&coupling) * (1.0 / symmetric_gap + 1.0);
    let follower_threshold_gain = follower_gain * gram_radius;
    Ok(CouplingWeights {
        follower: m,
        leader_threshold_gain,
        follower_gain,
        coupling_gain,
        follower_threshold_gain,
        extension: pf.block_count() > 2,
    })
}
