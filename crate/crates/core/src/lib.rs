//! Multi-agent draft generation, peer scoring, learned draft selection and
//! PPO training over a synthetic chain-arithmetic task.

pub mod checkpoint;
pub mod config;
pub mod draft;
pub mod env;
pub mod orchestrator;
pub mod peer_eval;
pub mod policy;
pub mod reward_model;
pub mod rl_update;
pub mod run_dir;
pub mod seed;
