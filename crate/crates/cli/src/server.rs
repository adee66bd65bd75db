//! HTTP and WebSocket gateway around a wall-clock [`Engine`] loop.

use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequest, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hydrarm_core::{KinematicModel, PressureVector, ValveVector};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;

use crate::engine::{Command, Conflict, Engine, Reply, StreamFrame};

/// Tick period of the live loop.
pub const FRAME_PERIOD: Duration = Duration::from_millis(100);

const QUEUE_DEPTH: usize = 64;

struct Queued {
    cmd: Command,
    reply: oneshot::Sender<Result<Reply>>,
}

#[derive(Clone)]
pub struct AppState {
    commands: mpsc::Sender<Queued>,
    frames: watch::Receiver<StreamFrame>,
    ik: Option<Arc<KinematicModel>>,
}

/// Starts the stepping loop and returns the router serving it. The loop
/// stops once every router clone is dropped.
pub fn start(mut engine: Engine, ik: Option<KinematicModel>) -> Result<(Router, JoinHandle<()>)> {
    let first = engine.tick()?;
    let (frame_tx, frame_rx) = watch::channel(first);
    let (cmd_tx, mut cmd_rx) = mpsc::channel::<Queued>(QUEUE_DEPTH);
    let handle = tokio::spawn(async move {
        let mut clock = tokio::time::interval(FRAME_PERIOD);
        clock.set_missed_tick_behavior(MissedTickBehavior::Delay);
        clock.tick().await;
        loop {
            clock.tick().await;
            loop {
                match cmd_rx.try_recv() {
                    Ok(req) => {
                        let _ = req.reply.send(engine.apply(req.cmd));
                    }
                    Err(mpsc::error::TryRecvError::Empty) => break,
                    Err(mpsc::error::TryRecvError::Disconnected) => return,
                }
            }
            match engine.tick() {
                Ok(frame) => {
                    frame_tx.send_replace(frame);
                }
                Err(e) => {
                    eprintln!("plant loop stopped: {e:#}");
                    return;
                }
            }
        }
    });
    let state = AppState {
        commands: cmd_tx,
        frames: frame_rx,
        ik: ik.map(Arc::new),
    };
    Ok((router(state), handle))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/valves", post(post_valves))
        .route("/ik", post(post_ik))
        .route("/regulate", post(post_regulate))
        .route("/record", post(post_record))
        .route("/stream", get(stream))
        .fallback(|| async { ApiError(StatusCode::NOT_FOUND, "no such route".into()) })
        .with_state(state)
}

pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

/// JSON body whose every rejection is a 400.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(bad_request(e.body_text())),
        }
    }
}

async fn send(state: &AppState, cmd: Command) -> Result<Json<Reply>, ApiError> {
    let (tx, rx) = oneshot::channel();
    let unavailable = || {
        ApiError(
            StatusCode::SERVICE_UNAVAILABLE,
            "plant loop is not running".into(),
        )
    };
    state
        .commands
        .send(Queued { cmd, reply: tx })
        .await
        .map_err(|_| unavailable())?;
    match rx.await.map_err(|_| unavailable())? {
        Ok(reply) => Ok(Json(reply)),
        Err(e) if e.downcast_ref::<Conflict>().is_some() => {
            Err(ApiError(StatusCode::CONFLICT, e.to_string()))
        }
        Err(e) => Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("{e:#}"),
        )),
    }
}

async fn get_state(State(state): State<AppState>) -> Json<StreamFrame> {
    Json(state.frames.borrow().clone())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValvesBody {
    u: ValveVector,
}

async fn post_valves(
    State(state): State<AppState>,
    Body(body): Body<ValvesBody>,
) -> Result<Json<Reply>, ApiError> {
    send(&state, Command::Valves(body.u)).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IkBody {
    markers: Vec<[f64; 2]>,
}

async fn post_ik(
    State(state): State<AppState>,
    Body(body): Body<IkBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Some(ik) = &state.ik else {
        return Err(ApiError(
            StatusCode::CONFLICT,
            "no inverse model loaded".into(),
        ));
    };
    let xy: Vec<(f64, f64)> = body.markers.iter().map(|m| (m[0], m[1])).collect();
    let p = ik.predict_ik(&xy).map_err(|e| bad_request(e.to_string()))?;
    Ok(Json(json!({ "pressures": p })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegulateBody {
    targets: PressureVector,
}

async fn post_regulate(
    State(state): State<AppState>,
    Body(body): Body<RegulateBody>,
) -> Result<Json<Reply>, ApiError> {
    if body.targets.iter().any(|p| !p.is_finite()) {
        return Err(bad_request("targets must be finite"));
    }
    send(&state, Command::Regulate(body.targets)).await
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum RecordAction {
    Start,
    Stop,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordBody {
    action: RecordAction,
    #[serde(default)]
    name: Option<String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

async fn post_record(
    State(state): State<AppState>,
    Body(body): Body<RecordBody>,
) -> Result<Json<Reply>, ApiError> {
    let cmd = match body.action {
        RecordAction::Start => {
            let name = body.name.ok_or_else(|| bad_request("start needs a name"))?;
            if !valid_name(&name) {
                return Err(bad_request(
                    "name may use letters, digits, '-', '_' and '.'",
                ));
            }
            Command::RecordStart(name)
        }
        RecordAction::Stop => Command::RecordStop,
    };
    send(&state, cmd).await
}

async fn stream(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| push_frames(socket, state.frames))
}

/// Sends every frame the client can keep up with; slow clients skip frames.
async fn push_frames(mut socket: WebSocket, mut frames: watch::Receiver<StreamFrame>) {
    loop {
        tokio::select! {
            changed = frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let text = match serde_json::to_string(&*frames.borrow_and_update()) {
                    Ok(t) => t,
                    Err(_) => break,
                };
                if socket.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
