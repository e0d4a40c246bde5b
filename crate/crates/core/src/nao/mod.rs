//! Neural architecture optimization: surrogate-guided gradient search over
//! genotypes with weight-shared evaluation.

pub mod codec;
pub mod search;
pub mod surrogate;

pub use codec::{decode_genotype, encode_genotype, seq_len, slot_layout, ArchTok, Slot};
pub use search::{
    load_archive, save_archive, shared_weight_eval, NaoConfig, NaoSearch, PerfRecord,
    SearchPersistence, Supernet,
};
pub use surrogate::{Surrogate, SurrogateConfig};
