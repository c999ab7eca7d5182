//! Dataset ingestion in the COCO-style person-search schema, open-set
//! train/val splitting, retrieval partitions and embedding persistence.

mod dataset;
mod retrieval_spec;
mod split;
mod store;

pub use dataset::{
    load_dataset, save_dataset, AnnId, Category, DatasetBundle, DuplicateBox, PersonAnnotation, PersonId,
    RepeatedPersonId, SceneId, SceneRecord, ValidationReport,
};
pub use retrieval_spec::{resolve_retrieval_spec, QueryEntry, ResolvedQuery, RetrievalFormat, RetrievalSpec};
pub use split::{build_identity_graph, leaked_identities, split_components, IdentityGraph, SceneSplit, SPLIT_TOLERANCE};
pub use store::{load_embeddings, save_embeddings, EmbeddingStore, StoreKind, StoreManifest, DTYPE_F32LE};
