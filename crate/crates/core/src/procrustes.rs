//! Orthogonal Procrustes: the semi-orthogonal `W` minimizing `‖W·V̂ − T̂‖_F`
//! is `U·Vᵀ` where `U·Σ·Vᵀ` is the SVD of `T̂·V̂ᵀ`.

use nalgebra::{DMatrix, SVD};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::map::AlignmentMap;
use crate::space::EmbeddingSpace;

/// Column-aligned source and target matrices; column `i` holds pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedMatrices {
    /// `d1 × p`.
    pub v_hat: DMatrix<f64>,
    /// `d2 × p`.
    pub t_hat: DMatrix<f64>,
}

impl PairedMatrices {
    pub fn new(v_hat: DMatrix<f64>, t_hat: DMatrix<f64>) -> Result<Self> {
        if v_hat.ncols() != t_hat.ncols() {
            return Err(Error::Contract(format!(
                "{} source columns but {} target columns",
                v_hat.ncols(),
                t_hat.ncols()
            )));
        }
        if v_hat.ncols() == 0 {
            return Err(Error::Contract("no pairs to align".into()));
        }
        Ok(Self { v_hat, t_hat })
    }

    pub fn len(&self) -> usize {
        self.v_hat.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gathers the vectors of every dictionary pair. For a semantic dictionary,
/// pass the averaged noun space as `target`.
pub fn assemble_pairs(
    dict: &Dictionary,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
) -> Result<PairedMatrices> {
    if dict.is_empty() {
        return Err(Error::Contract("cannot assemble an empty dictionary".into()));
    }
    let p = dict.len();
    let mut v_hat = DMatrix::zeros(source.dim(), p);
    let mut t_hat = DMatrix::zeros(target.dim(), p);
    for (col, (s, t)) in dict.iter().enumerate() {
        let si = source.lookup(s)?;
        let ti = target.lookup(t)?;
        v_hat.column_mut(col).copy_from_slice(source.vector(si));
        t_hat.column_mut(col).copy_from_slice(target.vector(ti));
    }
    PairedMatrices::new(v_hat, t_hat)
}

/// Closed-form solution. With fewer pairs than `d2` the problem is
/// underdetermined and the returned map is one of many minimizers.
pub fn solve_procrustes(pm: &PairedMatrices) -> Result<AlignmentMap> {
    let m = &pm.t_hat * pm.v_hat.transpose();
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("T̂·V̂ᵀ has non-finite entries".into()));
    }
    // Work on the wide orientation; a tall problem is solved transposed.
    let tall = m.nrows() > m.ncols();
    let m = if tall { m.transpose() } else { m };
    let svd = SVD::try_new(m, true, true, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.ok_or_else(|| Error::Numeric("SVD returned no U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD returned no Vᵀ".into()))?;
    let w = u * v_t;
    let w = if tall { w.transpose() } else { w };
    Ok(AlignmentMap::from_parts(w, true))
}

/// `‖W·V̂ − T̂‖_F²`.
pub fn frobenius_loss(map: &AlignmentMap, pm: &PairedMatrices) -> Result<f64> {
    if map.d1() != pm.v_hat.nrows() {
        return Err(Error::Dimension {
            expected: map.d1(),
            got: pm.v_hat.nrows(),
        });
    }
    if map.d2() != pm.t_hat.nrows() {
        return Err(Error::Dimension {
            expected: map.d2(),
            got: pm.t_hat.nrows(),
        });
    }
    Ok((map.matrix() * &pm.v_hat - &pm.t_hat).norm_squared())
}
