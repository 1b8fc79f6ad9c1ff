//! Execution of an operating procedure over a shared message pool.

mod action;
mod pool;
mod run;
pub mod tools;

pub use action::{parse_action, Act, ActionContext, ActionError, AgentAction};
pub use pool::{MessagePool, PoolError, PurgeReport};
pub use run::{
    AgentState, Engine, EnginePolicy, ExecutionState, Observation, ReplaceError, SupervisionLimits, Supervisor,
    DEFAULT_MAX_ROUNDS,
};
pub use tools::{ToolError, ToolRegistry, ToolSettings};
