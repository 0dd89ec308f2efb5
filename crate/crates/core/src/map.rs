//! The linear map taking source vectors into the target space.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::space::EmbeddingSpace;

const MAP_MAGIC: &[u8; 4] = b"VALW";
const MAP_VERSION: u32 = 1;

/// Tolerance used when a map is flagged semi-orthogonal.
pub const SEMI_ORTHOGONAL_TOL: f64 = 1e-6;

/// A `d2 × d1` matrix mapping `d1`-dimensional source vectors to the
/// `d2`-dimensional target space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    matrix: DMatrix<f64>,
    semi_orthogonal: bool,
}

impl AlignmentMap {
    pub fn new(matrix: DMatrix<f64>, semi_orthogonal: bool) -> Result<Self> {
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("alignment map has non-finite entries".into()));
        }
        let map = Self {
            matrix,
            semi_orthogonal,
        };
        if semi_orthogonal && map.orthogonality_residual() > SEMI_ORTHOGONAL_TOL {
            return Err(Error::Contract(format!(
                "map flagged semi-orthogonal has residual {:.3e}",
                map.orthogonality_residual()
            )));
        }
        Ok(map)
    }

    /// Builds a map without re-checking the orthogonality flag.
    pub(crate) fn from_parts(matrix: DMatrix<f64>, semi_orthogonal: bool) -> Self {
        Self {
            matrix,
            semi_orthogonal,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_parts(DMatrix::identity(dim, dim), true)
    }

    pub fn zeros(d2: usize, d1: usize) -> Self {
        Self::from_parts(DMatrix::zeros(d2, d1), false)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn is_semi_orthogonal(&self) -> bool {
        self.semi_orthogonal
    }

    /// Output (target) dimension.
    pub fn d2(&self) -> usize {
        self.matrix.nrows()
    }

    /// Input (source) dimension.
    pub fn d1(&self) -> usize {
        self.matrix.ncols()
    }

    /// ‖W·Wᵀ − I‖_F, or ‖Wᵀ·W − I‖_F when the map is taller than wide.
    pub fn orthogonality_residual(&self) -> f64 {
        let w = &self.matrix;
        let gram = if w.nrows() <= w.ncols() {
            w * w.transpose()
        } else {
            w.transpose() * w
        };
        let n = gram.nrows();
        (gram - DMatrix::<f64>::identity(n, n)).norm()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d1() {
            return Err(Error::Dimension {
                expected: self.d1(),
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.d2()];
        for (c, x) in v.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let col = self.matrix.column(c);
            for (o, w) in out.iter_mut().zip(col.iter()) {
                *o += w * x;
            }
        }
        Ok(out)
    }

    /// Maps every vector of `space`, keeping ids and frequencies.
    pub fn apply_space(&self, space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
        if space.dim() != self.d1() {
            return Err(Error::Dimension {
                expected: self.d1(),
                got: space.dim(),
            });
        }
        let n = space.len();
        let src = DMatrix::from_row_slice(n, self.d1(), space.as_slice());
        let mapped = src * self.matrix.transpose();
        let mut data = Vec::with_capacity(n * self.d2());
        for r in 0..n {
            data.extend(mapped.row(r).iter());
        }
        Ok(space.with_data(format!("{}->mapped", space.name()), self.d2(), data))
    }

    /// SHA-256 over the serialized map, hex encoded.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to Vec");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let as_u32 = |n: usize| {
            u32::try_from(n).map_err(|_| Error::Config(format!("dimension {n} exceeds u32")))
        };
        w.write_all(MAP_MAGIC)?;
        w.write_all(&MAP_VERSION.to_le_bytes())?;
        w.write_all(&as_u32(self.d2())?.to_le_bytes())?;
        w.write_all(&as_u32(self.d1())?.to_le_bytes())?;
        w.write_all(&[self.semi_orthogonal as u8])?;
        for r in 0..self.d2() {
            for c in 0..self.d1() {
                w.write_all(&self.matrix[(r, c)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "alignment map",
            msg,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header".into()))?;
        if &magic != MAP_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)
                .map_err(|_| bad("truncated header".into()))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(r)?;
        if version != MAP_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let d2 = next_u32(r)? as usize;
        let d1 = next_u32(r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|_| bad("truncated header".into()))?;
        let mut bytes = vec![0u8; d2 * d1 * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| bad("truncated matrix".into()))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let matrix = DMatrix::from_row_slice(d2, d1, &values);
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("stored map has non-finite entries".into()));
        }
        Ok(Self::from_parts(matrix, flag[0] != 0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
