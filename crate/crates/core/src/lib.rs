//! Gaze-driven assistive robot pipeline: stream ingestion, per-object intent
//! classification, intention inference, gaze confirmation, and planning
//! against a simulated world.

pub mod confirmation;
pub mod eval;
pub mod features;
pub mod inference;
pub mod intent_net;
pub mod perception;
pub mod planner;
pub mod session;
