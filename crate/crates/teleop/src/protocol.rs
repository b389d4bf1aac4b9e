use serde::{Deserialize, Serialize};

/// JSON text frames exchanged on `/teleop`, tagged by `type`.
///
/// `vel_cmd.v` is a spatial velocity stacked angular first:
/// `[ωx, ωy, ωz, vx, vy, vz]` in rad/s and m/s, base frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TeleopMessage {
    VelCmd {
        v: [f64; 6],
        seq: u64,
    },
    ToggleComp {
        on: bool,
    },
    SetOrientationLock {
        on: bool,
    },
    State(StateMessage),
    SessionInfo {
        n_joints: usize,
        rate_hz: f64,
        #[serde(rename = "window_T")]
        window_t: usize,
    },
    Error {
        code: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    /// Seconds since the session started.
    pub t: f64,
    pub q: Vec<f64>,
    /// Reference the loop is tracking on this tick.
    pub q_d: Vec<f64>,
    pub q_c: Vec<f64>,
    /// ℓ2 norm of the tracking error over the recent metrics window.
    pub err_l2_window: f64,
    pub comp_on: bool,
    pub latency_samples: usize,
}

impl TeleopMessage {
    pub fn error(code: impl Into<String>, detail: impl Into<String>) -> Self {
        TeleopMessage::Error {
            code: code.into(),
            detail: detail.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Messages a client may send.
    pub fn is_client_message(&self) -> bool {
        matches!(
            self,
            TeleopMessage::VelCmd { .. } | TeleopMessage::ToggleComp { .. } | TeleopMessage::SetOrientationLock { .. }
        )
    }
}
