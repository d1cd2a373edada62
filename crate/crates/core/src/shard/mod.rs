//! Sharded linear algebra over the model axis and parameter sharding over
//! the data axis.

pub mod block;
pub mod matrix;
pub mod matvec;
pub mod plan;
pub mod store;

pub use block::{sharded_block_backward, sharded_block_forward, ShardedBlock, ShardedRunner};
pub use matrix::{ShardMode, ShardedMatrix, ShardedVector, VectorSpace};
pub use matvec::{
    choose_sharding, col_sharded_matvec, col_sharded_matvec_sign_flipped, linear_comm_floats, row_sharded_matvec, schedule_linear, sharded_matvec,
};
pub use plan::{plan_csv, sharding_plan, simulate, LayerPlan, SimulationReport};
pub use store::{check_prefetch, prefetch_overlaps, schedule_prefetch, ShardPolicy, ShardedParamStore, DEFAULT_SHARD_THRESHOLD};
