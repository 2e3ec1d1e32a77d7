//! Precomputed `N × D` catalog matrix and its `RTAP` file.

use std::path::Path;

use rayon::prelude::*;

use super::Representer;
use crate::binio::{read_file, write_atomic};
use crate::error::{Result, RtaError};
use crate::init::{decode_matrices, encode_matrices, MatrixRef};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"RTAP";
const CHUNK: usize = 2048;

/// Row `i` is `h_i = φ(song i)`. `checkpoint_hash` names the model the rows
/// were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogMatrix {
    pub vectors: Tensor,
    pub checkpoint_hash: String,
}

impl CatalogMatrix {
    pub fn new(vectors: Tensor, checkpoint_hash: impl Into<String>) -> Self {
        CatalogMatrix {
            vectors,
            checkpoint_hash: checkpoint_hash.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, song: usize) -> Result<&[f32]> {
        if song >= self.len() {
            return Err(RtaError::UnknownSong(song));
        }
        Ok(self.vectors.row(song))
    }
}

/// Represents every catalog song. Chunks are independent, so the parallel
/// and sequential paths produce identical bits.
pub fn precompute_catalog(
    representer: &Representer,
    params: &ParamStore,
    checkpoint_hash: &str,
    parallel: bool,
) -> Result<CatalogMatrix> {
    let n = representer.n_songs();
    let dim = representer.dim;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let run = |&(s, e): &(usize, usize)| -> Result<Vec<f32>> {
        let ids: Vec<usize> = (s..e).collect();
        let h = representer.represent_many(params, &ids)?;
        if !h.is_finite() {
            let bad = (0..h.rows()).find(|&i| h.row(i).iter().any(|v| !v.is_finite())).unwrap_or(0);
            return Err(RtaError::Domain(format!("song {} has a non-finite representation", s + bad)));
        }
        Ok(h.into_data())
    };
    let parts: Vec<Vec<f32>> = if parallel {
        chunks.par_iter().map(run).collect::<Result<_>>()?
    } else {
        chunks.iter().map(run).collect::<Result<_>>()?
    };
    let mut data = Vec::with_capacity(n * dim);
    for p in parts {
        data.extend_from_slice(&p);
    }
    Ok(CatalogMatrix::new(Tensor::matrix(n, dim, data)?, checkpoint_hash))
}

pub fn write_catalog_matrix(path: &Path, catalog: &CatalogMatrix) -> Result<()> {
    let present = vec![true; catalog.len()];
    let table = MatrixRef {
        name: "catalog",
        present: &present,
        values: &catalog.vectors,
    };
    write_atomic(path, &encode_matrices(MAGIC, catalog.dim(), &catalog.checkpoint_hash, &[table]))
}

pub fn read_catalog_matrix(path: &Path) -> Result<CatalogMatrix> {
    let bytes = read_file(path)?;
    let (_, hash, mut tables) = decode_matrices(path, &bytes, MAGIC)?;
    if tables.len() != 1 || tables[0].name != "catalog" {
        return Err(RtaError::format(path, "expected a single `catalog` table"));
    }
    Ok(CatalogMatrix::new(tables.remove(0).values, hash))
}
