use std::path::Path;

use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::corpus::{Catalog, MetaField};
use crate::error::{Result, RtaError};
use crate::numerics::Tensor;

pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// Embedding table for one metadata family. Rows whose value was never
/// observed in training are marked absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTable {
    pub field: MetaField,
    pub vectors: Tensor,
    pub present: Vec<bool>,
}

/// Initial song vectors `e_s` and metadata vectors `e_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub song_vectors: Tensor,
    pub metadata: Vec<MetaTable>,
}

impl EmbeddingStore {
    pub fn from_song_vectors(song_vectors: Tensor, catalog: &Catalog) -> Result<Self> {
        let dim = song_vectors.cols();
        let metadata = init_metadata_embeddings(&song_vectors, catalog)?;
        Ok(EmbeddingStore {
            dim,
            song_vectors,
            metadata,
        })
    }

    pub fn table(&self, field: MetaField) -> &MetaTable {
        self.metadata.iter().find(|t| t.field == field).expect("all four families present")
    }

    pub fn is_finite(&self) -> bool {
        self.song_vectors.is_finite() && self.metadata.iter().all(|t| t.vectors.is_finite())
    }
}

/// Per metadata value, the mean of `e_s` over training-observed songs that
/// carry it. Values with no such song are left as absent zero rows.
pub fn init_metadata_embeddings(song_vectors: &Tensor, catalog: &Catalog) -> Result<Vec<MetaTable>> {
    if song_vectors.rows() != catalog.len() {
        return Err(RtaError::Shape {
            op: "init_metadata_embeddings",
            left: song_vectors.shape().to_vec(),
            right: vec![catalog.len()],
        });
    }
    let dim = song_vectors.cols();
    let mut tables = Vec::with_capacity(4);
    for field in MetaField::ALL {
        let rows = catalog.table_size(field);
        let mut sums = vec![0.0f64; rows * dim];
        let mut counts = vec![0usize; rows];
        for song in catalog.songs.iter().filter(|s| s.popularity > 0) {
            let m = Catalog::meta_index(song, field);
            counts[m] += 1;
            for (acc, &v) in sums[m * dim..(m + 1) * dim].iter_mut().zip(song_vectors.row(song.song_id)) {
                *acc += v as f64;
            }
        }
        let mut data = vec![0.0f32; rows * dim];
        for m in 0..rows {
            if counts[m] > 0 {
                for j in 0..dim {
                    data[m * dim + j] = (sums[m * dim + j] / counts[m] as f64) as f32;
                }
            }
        }
        tables.push(MetaTable {
            field,
            vectors: Tensor::matrix(rows, dim, data)?,
            present: counts.iter().map(|&c| c > 0).collect(),
        });
    }
    Ok(tables)
}

/// A named matrix inside an `RTAE`/`RTAP` file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub present: Vec<bool>,
    pub values: Tensor,
}

/// Borrowed view of a table to encode.
pub(crate) struct MatrixRef<'a> {
    pub name: &'a str,
    pub present: &'a [bool],
    pub values: &'a Tensor,
}

/// `magic | version u32 | D u32 | header: len u32 + utf-8 | n_tables u32 |
/// per table: name, rows u64, rows × present u8 | per table: rows·D f32`.
pub(crate) fn encode_matrices(magic: &[u8; 4], dim: usize, header: &str, tables: &[MatrixRef]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(magic);
    w.u32(EMBEDDING_FORMAT_VERSION);
    w.u32(dim as u32);
    w.str(header);
    w.u32(tables.len() as u32);
    for t in tables {
        w.str(t.name);
        w.u64(t.values.rows() as u64);
        for &p in t.present {
            w.u8(p as u8);
        }
    }
    for t in tables {
        w.f32s(t.values.data());
    }
    w.into_inner()
}

pub(crate) fn decode_matrices(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, String, Vec<NamedMatrix>)> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(magic)?;
    let version = r.u32()?;
    if version != EMBEDDING_FORMAT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let header = r.str()?;
    let n = r.u32()? as usize;
    let mut heads = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let rows = r.u64()? as usize;
        let present = (0..rows).map(|_| r.u8().map(|b| b != 0)).collect::<Result<Vec<_>>>()?;
        heads.push((name, rows, present));
    }
    let mut tables = Vec::with_capacity(n);
    for (name, rows, present) in heads {
        let values = Tensor::matrix(rows, dim, r.f32s(rows * dim)?)?;
        tables.push(NamedMatrix { name, present, values });
    }
    r.finish()?;
    Ok((dim, header, tables))
}

const STORE_MAGIC: &[u8; 4] = b"RTAE";

pub fn write_embedding_store(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let all = vec![true; store.song_vectors.rows()];
    let mut tables = vec![MatrixRef {
        name: "song",
        present: &all,
        values: &store.song_vectors,
    }];
    tables.extend(store.metadata.iter().map(|t| MatrixRef {
        name: t.field.name(),
        present: &t.present,
        values: &t.vectors,
    }));
    write_atomic(path, &encode_matrices(STORE_MAGIC, store.dim, "", &tables))
}

pub fn read_embedding_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = read_file(path)?;
    let (dim, _, mut tables) = decode_matrices(path, &bytes, STORE_MAGIC)?;
    if tables.len() != 5 || tables[0].name != "song" {
        return Err(RtaError::format(path, "expected a song table followed by four metadata tables"));
    }
    let song = tables.remove(0);
    let metadata = tables
        .into_iter()
        .zip(MetaField::ALL)
        .map(|(t, field)| {
            if t.name != field.name() {
                return Err(RtaError::format(path, format!("expected table `{}`, found `{}`", field.name(), t.name)));
            }
            Ok(MetaTable {
                field,
                vectors: t.values,
                present: t.present,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingStore {
        dim,
        song_vectors: song.values,
        metadata,
    })
}
