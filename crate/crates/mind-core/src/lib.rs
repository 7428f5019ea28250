//! Retrieval-grounded multi-turn consultation environment and reward
//! engine: criteria-grounded reasoning bank, two-stage tagged turn
//! protocol, five-part reward algebra, value-aware trajectory
//! rectification, profile-driven patient simulators, and a GRPO trainer
//! verified on a toy tabular policy. All model roles sit behind mockable
//! wire contracts so everything runs offline.

pub mod case;
pub mod clients;
pub mod config;
pub mod judge;
pub mod patientsim;
pub mod prb;
pub mod protocol;
pub mod rectify;
pub mod rewards;
pub mod runner;
pub mod util;

pub use case::{Action, CaseProfile, CueField, CueItem, CueStatus, DiagnosisLabel, DialogueHistory};
