use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use futures::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

use piwm::eval::start_from;
use piwm::nn::{Denoiser, DenoiserConfig};
use piwm::sample::{denoise_next_frame, RolloutState, SamplerConfig};
use piwm::service::{router, AppState, SessionConfig, SessionMode};
use piwm::sim::{self, Action, SimConfig};
use piwm::{BevFrame, MaskMode, MaskParams};

fn tiny_model(dir: &tempfile::TempDir) -> PathBuf {
    let cfg = DenoiserConfig {
        base_width: 4,
        embed_dim: 8,
        groups: 1,
        ..DenoiserConfig::default()
    };
    let path = dir.path().join("tiny.pw");
    let mut m = Denoiser::new(cfg, 0.5, 11).unwrap();
    // fresh models ignore their inputs; perturb every weight so actions matter
    for (k, (_, t)) in m.params.iter_mut().enumerate() {
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += 0.2 * ((k * 7919 + i * 104729) as f32).sin();
        }
    }
    m.save(&path).unwrap();
    path
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let res = app.oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), 1 << 24).await.unwrap();
    let json = if bytes.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, json)
}

fn post_session(cfg: serde_json::Value) -> Request<Body> {
    Request::post("/session")
        .header("content-type", "application/json")
        .body(Body::from(cfg.to_string()))
        .unwrap()
}

fn decode(b64: &str) -> BevFrame {
    let png = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    BevFrame::from_png(&png).unwrap()
}

#[tokio::test]
async fn health_reports_ok() {
    let app = router(Arc::new(AppState::new(SimConfig::default(), None)));
    let (s, body) = call(app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn created_sim_session_shows_spawn_frame() {
    let app = router(Arc::new(AppState::new(SimConfig::default(), None)));
    let (s, body) = call(app, post_session(serde_json::json!({"mode": "sim", "seed": 3}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let frame = decode(body["frames"][0]["png_b64"].as_str().unwrap());
    let want = sim::render_bev(&sim::spawn(&SimConfig::default(), 3).unwrap());
    assert_eq!(frame.to_u8_hwc(), want.to_u8_hwc());
}

#[tokio::test]
async fn world_model_session_needs_model() {
    let app = router(Arc::new(AppState::new(SimConfig::default(), None)));
    let (s, body) = call(app, post_session(serde_json::json!({"mode": "wm"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_config");
}

#[tokio::test]
async fn unloadable_model_reports_format_detail() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.pw");
    std::fs::write(&bad, b"not a model").unwrap();
    let app = router(Arc::new(AppState::new(SimConfig::default(), None)));
    let (s, body) = call(app, post_session(serde_json::json!({"mode": "wm", "model": bad}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "model_load");
    assert!(body["msg"].as_str().unwrap().contains("bad.pw"));
}

#[tokio::test]
async fn delete_session() {
    let st = Arc::new(AppState::new(SimConfig::default(), None));
    let (id, _) = st.create_session(SessionConfig::default()).unwrap();
    let del = |id: &str| Request::delete(format!("/session/{id}")).body(Body::empty()).unwrap();
    assert_eq!(call(router(st.clone()), del(&id)).await.0, StatusCode::NO_CONTENT);
    let (s, body) = call(router(st.clone()), del(&id)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

struct Server {
    addr: std::net::SocketAddr,
    state: Arc<AppState>,
}

async fn start_server(default_model: Option<PathBuf>) -> Server {
    let state = Arc::new(AppState::new(SimConfig::default(), default_model));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { addr, state }
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(srv: &Server, id: &str) -> Ws {
    let url = format!("ws://{}/session/{id}/stream", srv.addr);
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn send_action(ws: &mut Ws, code: i64) {
    let msg = serde_json::json!({"type": "action", "action": code}).to_string();
    ws.send(Message::Text(msg.into())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> serde_json::Value {
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            _ => continue,
        }
    }
}

#[tokio::test]
async fn idle_over_socket_matches_simulator() {
    let srv = start_server(None).await;
    let (id, _) = srv.state.create_session(SessionConfig { seed: 5, ..Default::default() }).unwrap();
    let mut ws = connect(&srv, &id).await;
    send_action(&mut ws, Action::Idle.code() as i64).await;
    let m = recv(&mut ws).await;
    assert_eq!(m["type"], "frame");
    assert_eq!(m["step"], 1);
    assert_eq!(m["mode"], "sim");
    assert!(m["latency_ms"].as_f64().unwrap() >= 0.0);
    let cfg = SimConfig::default();
    let want = sim::render_bev(&sim::step(&sim::spawn(&cfg, 5).unwrap(), Action::Idle).unwrap());
    assert_eq!(decode(m["png_b64"].as_str().unwrap()), want.quantized());
}

#[tokio::test]
async fn invalid_messages_get_error_replies() {
    let srv = start_server(None).await;
    let (id, _) = srv.state.create_session(SessionConfig::default()).unwrap();
    let mut ws = connect(&srv, &id).await;
    send_action(&mut ws, 9).await;
    let m = recv(&mut ws).await;
    assert_eq!((m["type"].as_str(), m["code"].as_str()), (Some("error"), Some("bad_action")));
    ws.send(Message::Text("{\"type\":\"dance\"}".into())).await.unwrap();
    assert_eq!(recv(&mut ws).await["code"], "bad_message");
    // the session is still usable and no frame was generated for bad input
    send_action(&mut ws, 4).await;
    assert_eq!(recv(&mut ws).await["step"], 1);
}

#[tokio::test]
async fn unknown_session_stream_is_rejected() {
    let srv = start_server(None).await;
    let url = format!("ws://{}/session/nope/stream", srv.addr);
    assert!(tokio_tungstenite::connect_async(url).await.is_err());
}

fn direct_rollout(model: &Denoiser, seed: u64, actions: &[Action]) -> Vec<BevFrame> {
    let start = start_from(sim::spawn(&SimConfig::default(), seed).unwrap(), 4, seed).unwrap();
    let mut st = RolloutState::new(start.context, &start.prior_actions, seed).unwrap();
    let mask = MaskParams::with_mode(MaskMode::Soft);
    let cfg = SamplerConfig {
        warm_start: true,
        ..SamplerConfig::default()
    };
    actions
        .iter()
        .map(|a| denoise_next_frame(&mut st, *a, model, &mask, &cfg).unwrap().quantized())
        .collect()
}

fn script(n: usize, k: u64) -> Vec<Action> {
    (0..n).map(|i| Action::ALL[((i as u64 * 7 + k) % 5) as usize]).collect()
}

#[tokio::test]
async fn scripted_session_matches_direct_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_model(&dir);
    let model = Denoiser::load(&path).unwrap();
    let srv = start_server(Some(path)).await;
    let cfg = SessionConfig {
        mode: SessionMode::Wm,
        warm_start: true,
        seed: 21,
        ..Default::default()
    };
    let (id, _) = srv.state.create_session(cfg).unwrap();
    let mut ws = connect(&srv, &id).await;
    let acts = script(50, 1);
    let want = direct_rollout(&model, 21, &acts);
    for (i, a) in acts.iter().enumerate() {
        send_action(&mut ws, a.code() as i64).await;
        let m = recv(&mut ws).await;
        assert_eq!(m["mode"], "wm");
        assert_eq!(m["step"], i as u64 + 1);
        assert_eq!(decode(m["png_b64"].as_str().unwrap()), want[i], "frame {i}");
    }
}

#[tokio::test]
async fn interleaved_sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_model(&dir);
    let model = Denoiser::load(&path).unwrap();
    let srv = start_server(Some(path)).await;
    let cfg = SessionConfig {
        mode: SessionMode::Wm,
        warm_start: true,
        seed: 4,
        ..Default::default()
    };
    let (a, fa) = srv.state.create_session(cfg.clone()).unwrap();
    let (b, fb) = srv.state.create_session(cfg).unwrap();
    assert_eq!(fa, fb);
    let (mut wa, mut wb) = (connect(&srv, &a).await, connect(&srv, &b).await);
    let (sa, sb) = (script(12, 0), script(12, 3));
    let (ea, eb) = (direct_rollout(&model, 4, &sa), direct_rollout(&model, 4, &sb));
    for i in 0..12 {
        send_action(&mut wa, sa[i].code() as i64).await;
        send_action(&mut wb, sb[i].code() as i64).await;
        assert_eq!(decode(recv(&mut wa).await["png_b64"].as_str().unwrap()), ea[i]);
        assert_eq!(decode(recv(&mut wb).await["png_b64"].as_str().unwrap()), eb[i]);
    }
    assert_ne!(ea, eb);
}

#[tokio::test]
async fn side_by_side_sends_both_streams() {
    let dir = tempfile::tempdir().unwrap();
    let srv = start_server(Some(tiny_model(&dir))).await;
    let cfg = SessionConfig {
        mode: SessionMode::SideBySide,
        seed: 2,
        ..Default::default()
    };
    let (id, first) = srv.state.create_session(cfg).unwrap();
    assert_eq!(first.len(), 2);
    assert_eq!(first[0].1, first[1].1);
    let mut ws = connect(&srv, &id).await;
    send_action(&mut ws, Action::Idle.code() as i64).await;
    let (m1, m2) = (recv(&mut ws).await, recv(&mut ws).await);
    assert_eq!((m1["mode"].as_str(), m2["mode"].as_str()), (Some("sim"), Some("wm")));
    assert_eq!((m1["step"].as_u64(), m2["step"].as_u64()), (Some(1), Some(1)));
}
