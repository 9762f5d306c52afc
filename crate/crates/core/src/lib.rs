//! Rule- and context-driven business process simulation.
//!
//! No activity sequence is stored anywhere: each step evaluates selection
//! rules against a snapshot of the internal and external context, filters the
//! candidates through veto rules and labelled history, and executes the best
//! ranked one. Rules and context may be edited between steps of a live instance.

pub mod activity;
pub mod context;
pub mod engine;
pub mod history;
pub mod rng;
pub mod rules;
pub mod scenario;
pub mod schema;
pub mod storage;
pub mod value;
pub mod view;

pub use engine::{Mode, Session, SessionStatus, SimCommand};
pub use history::{HistoryStore, Label};
pub use scenario::{load_scenario, scenario_hash, Scenario};
pub use value::Value;
