//! Initial song embeddings from WRMF and metadata embeddings by averaging.

mod store;
mod wrmf;

pub use store::{
    init_metadata_embeddings, read_embedding_store, write_embedding_store, EmbeddingStore, MetaTable, NamedMatrix,
    EMBEDDING_FORMAT_VERSION,
};
pub(crate) use store::{decode_matrices, encode_matrices, MatrixRef};
pub use wrmf::{wrmf_factorize, Occurrences, WrmfConfig, WrmfFactors};

use crate::corpus::{Corpus, Role};
use crate::error::Result;

/// Occurrence matrix of the training playlists.
pub fn training_occurrences(corpus: &Corpus) -> Result<Occurrences> {
    Occurrences::new(
        corpus.n_songs(),
        corpus.playlists_with_role(Role::Train).into_iter().map(|p| p.songs.clone()),
    )
}
