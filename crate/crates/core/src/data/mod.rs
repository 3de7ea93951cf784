//! Tokenizer training, token shards, batching, and the synthetic corpus.

pub mod batch;
pub mod corpus;
pub mod shard;
pub mod tokenizer;

pub use batch::{sequential_batches, Batch, BatchIterator, BatchSpec, DataPosition};
pub use corpus::synth_corpus;
pub use shard::{read_shard, read_shard_for, write_shard, TokenShard};
pub use tokenizer::{train_bpe, Tokenizer};
