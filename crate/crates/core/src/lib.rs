//! Grammars, schema checks and dataset analytics for synthetic multi-turn
//! tool-use trajectories.
//!
//! Everything in this crate is pure and allocation-only (`no_std` + `alloc`):
//! parsing of the tagged model-output grammars, conformance of tool calls
//! against OpenAI-style tool definitions, the turn-order state machine,
//! argument grounding, statistics, export record construction and the
//! deterministic mock generator. IO, backends and orchestration live in the
//! `tooltraj` crate.

#![no_std]

extern crate alloc;

pub mod analytics;
pub mod corpus;
pub mod export;
pub mod grounding;
pub mod markup;
pub mod mock;
pub mod prompts;
pub mod stage;
pub mod toolschema;
pub mod trajectory;
pub mod workflow;

pub use serde_json::{Map, Value};

pub use stage::Stage;
pub use toolschema::{ToolCall, ToolDef};
pub use trajectory::{Message, Role, Trajectory};
pub use workflow::Workflow;
