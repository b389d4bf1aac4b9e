use std::future::Future;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tokio::time::MissedTickBehavior;

use crate::config::{ResolvedConfig, TeleopConfig};
use crate::error::{Result, TeleopError};
use crate::protocol::TeleopMessage;
use crate::replay::LogEntry;
use crate::session::Session;

struct AppState {
    resolved: ResolvedConfig,
    rate_hz: f64,
    window_t: usize,
    record_dir: Option<PathBuf>,
    next_id: AtomicU64,
    shutdown: watch::Receiver<bool>,
    /// Each live session holds a clone; the server waits for all to drop.
    alive: mpsc::Sender<()>,
}

pub struct TeleopServer {
    listener: TcpListener,
    resolved: ResolvedConfig,
    rate_hz: f64,
    window_t: usize,
    record_dir: Option<PathBuf>,
}

impl TeleopServer {
    /// Loads checkpoints and binds the port; fails before accepting anything.
    pub async fn bind(cfg: &TeleopConfig) -> Result<Self> {
        let resolved = cfg.resolve()?;
        Self::bind_resolved(resolved, cfg).await
    }

    pub async fn bind_resolved(resolved: ResolvedConfig, cfg: &TeleopConfig) -> Result<Self> {
        resolved.check(cfg.rate_hz, cfg.window_t)?;
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = TcpListener::bind(&addr)
            .await
            .map_err(|source| TeleopError::Bind { addr, source })?;
        if let Some(dir) = &cfg.record_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            listener,
            resolved,
            rate_hz: cfg.rate_hz,
            window_t: cfg.window_t,
            record_dir: cfg.record_dir.clone(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `shutdown` resolves, then closes every session and waits
    /// for them to finish.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
        let (stop_tx, stop_rx) = watch::channel(false);
        let (alive_tx, mut alive_rx) = mpsc::channel::<()>(1);
        let state = Arc::new(AppState {
            resolved: self.resolved,
            rate_hz: self.rate_hz,
            window_t: self.window_t,
            record_dir: self.record_dir,
            next_id: AtomicU64::new(0),
            shutdown: stop_rx,
            alive: alive_tx,
        });
        let app = Router::new()
            .route("/healthz", get(healthz))
            .route("/teleop", get(upgrade))
            .with_state(state.clone());
        axum::serve(self.listener, app)
            .with_graceful_shutdown(async move {
                shutdown.await;
                let _ = stop_tx.send(true);
            })
            .await?;
        drop(state);
        // Sessions still running hold `alive` senders; recv yields None once all are gone.
        let _ = alive_rx.recv().await;
        Ok(())
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| run_session(socket, app)).into_response()
}

enum Incoming {
    Message(TeleopMessage),
    Malformed(String),
}

struct Recorder {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl Recorder {
    fn record(&mut self, tick: u64, message: &TeleopMessage) {
        if let Some(f) = &mut self.file {
            let entry = LogEntry {
                tick,
                message: message.clone(),
            };
            let line = serde_json::to_string(&entry).expect("log entries serialize");
            if writeln!(f, "{line}").is_err() {
                self.file = None;
            }
        }
    }
}

async fn run_session(socket: WebSocket, app: Arc<AppState>) {
    let _alive = app.alive.clone();
    let id = app.next_id.fetch_add(1, Ordering::Relaxed);
    let (mut tx, mut rx) = socket.split();
    let send = |m: &TeleopMessage| Message::Text(m.to_json().into());

    let mut session = match Session::new(&app.resolved) {
        Ok(s) => s,
        Err(e) => {
            let _ = tx.send(send(&TeleopMessage::error(e.code(), e.to_string()))).await;
            return;
        }
    };
    let mut recorder = Recorder {
        file: app.record_dir.as_ref().and_then(|dir| {
            std::fs::File::create(dir.join(format!("session-{id:04}.jsonl")))
                .ok()
                .map(std::io::BufWriter::new)
        }),
    };
    let info = TeleopMessage::SessionInfo {
        n_joints: session.n_joints(),
        rate_hz: app.rate_hz,
        window_t: app.window_t,
    };
    if tx.send(send(&info)).await.is_err() {
        return;
    }

    // Reader task: parses frames as they arrive; effects wait for the next tick.
    let (in_tx, mut in_rx) = mpsc::unbounded_channel();
    let reader = tokio::spawn(async move {
        while let Some(Ok(frame)) = rx.next().await {
            let item = match frame {
                Message::Text(text) => match TeleopMessage::from_json(text.as_str()) {
                    Ok(m) if m.is_client_message() => Incoming::Message(m),
                    Ok(_) => Incoming::Malformed("servers do not accept telemetry frames".into()),
                    Err(e) => Incoming::Malformed(e.to_string()),
                },
                Message::Binary(_) => Incoming::Malformed("binary frames are not supported".into()),
                Message::Close(_) => break,
                _ => continue,
            };
            if in_tx.send(item).is_err() {
                break;
            }
        }
    });

    let mut shutdown = app.shutdown.clone();
    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / app.rate_hz));
    interval.set_missed_tick_behavior(MissedTickBehavior::Burst);
    'ticks: loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = shutdown.changed() => break 'ticks,
        }
        let mut replies = Vec::new();
        loop {
            match in_rx.try_recv() {
                Ok(Incoming::Message(m)) => {
                    recorder.record(session.ticks(), &m);
                    replies.extend(session.handle_message(&m));
                }
                Ok(Incoming::Malformed(detail)) => replies.push(TeleopMessage::error("malformed", detail)),
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => break 'ticks,
            }
        }
        let out = match session.tick() {
            Ok(out) => out,
            Err(e) => {
                let _ = tx.send(send(&TeleopMessage::error(e.code(), e.to_string()))).await;
                break;
            }
        };
        replies.extend(out.error);
        replies.push(TeleopMessage::State(out.state));
        for m in &replies {
            if tx.send(send(m)).await.is_err() {
                break 'ticks;
            }
        }
    }
    if let Some(f) = &mut recorder.file {
        let _ = f.flush();
    }
    let _ = tx.send(Message::Close(None)).await;
    reader.abort();
}
