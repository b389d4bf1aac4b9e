//! Teleoperation backend: one simulated arm per websocket session, driven by
//! spatial-velocity commands through the resolved-velocity QP, streaming
//! inverse-dynamics compensation and the feedback law.
//!
//! The tick logic lives in [`Session`] and is shared by the live service and
//! headless [`replay`] of recorded command logs.

pub mod config;
pub mod error;
pub mod protocol;
pub mod replay;
pub mod server;
pub mod session;

pub use config::{ResolvedConfig, SessionConfig, TeleopConfig, NEUTRAL_POSE};
pub use error::{Result, TeleopError};
pub use protocol::{StateMessage, TeleopMessage};
pub use replay::{replay, CommandLog, LogEntry, ReplayOutput};
pub use server::TeleopServer;
pub use session::{Session, TickOutput};
