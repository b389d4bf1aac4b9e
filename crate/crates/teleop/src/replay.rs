use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;
use crate::error::{Result, TeleopError};
use crate::protocol::{StateMessage, TeleopMessage};
use crate::session::Session;

/// A client message and the tick before which it was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: u64,
    pub message: TeleopMessage,
}

/// Timestamped client messages, one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandLog {
    pub entries: Vec<LogEntry>,
}

impl CommandLog {
    pub fn push(&mut self, tick: u64, message: TeleopMessage) {
        self.entries.push(LogEntry { tick, message });
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.entries.last().map(|e| e.tick)
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut entries: Vec<LogEntry> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = serde_json::from_str(&line).map_err(|e| TeleopError::Log {
                line: i + 1,
                detail: e.to_string(),
            })?;
            if !entry.message.is_client_message() {
                return Err(TeleopError::Log {
                    line: i + 1,
                    detail: "only client messages can be replayed".into(),
                });
            }
            if entries.last().is_some_and(|p| p.tick > entry.tick) {
                return Err(TeleopError::Log {
                    line: i + 1,
                    detail: "ticks must be non-decreasing".into(),
                });
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write(&self, mut writer: impl Write) -> Result<()> {
        for e in &self.entries {
            writeln!(writer, "{}", serde_json::to_string(e).expect("log entries serialize"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayOutput {
    pub states: Vec<StateMessage>,
    /// Error frames with the tick they were produced on.
    pub errors: Vec<(u64, TeleopMessage)>,
}

/// Runs `ticks` ticks of a fresh session, applying each log entry right
/// before its tick, exactly as the live service does.
pub fn replay(resolved: &ResolvedConfig, log: &CommandLog, ticks: u64) -> Result<ReplayOutput> {
    let mut session = Session::new(resolved)?;
    let mut out = ReplayOutput::default();
    let mut next = 0;
    for tick in 0..ticks {
        while let Some(entry) = log.entries.get(next).filter(|e| e.tick <= tick) {
            if let Some(err) = session.handle_message(&entry.message) {
                out.errors.push((tick, err));
            }
            next += 1;
        }
        let step = session.tick()?;
        if let Some(err) = step.error {
            out.errors.push((tick, err));
        }
        out.states.push(step.state);
    }
    Ok(out)
}
