#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use oncall_service::{server, App, ServiceConfig, ServiceError};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub const LIFECYCLE_Q: &str = "How do I add a lifecycle rule to my storage bucket?";
pub const LIFECYCLE_A: &str = "Open the bucket, choose Lifecycle, then add a rule that expires objects after N days.";
pub const VERSIONING_Q: &str = "How do I enable object versioning for a bucket?";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../eval/fixtures").join(name)
}

/// Writes a two-entry seed list into `dir` and returns its path.
pub fn seed_file(dir: &Path) -> PathBuf {
    let path = dir.join("seed.json");
    let seed = json!([
        {"question": LIFECYCLE_Q, "content": LIFECYCLE_A},
        {"question": VERSIONING_Q, "content": "Set object versioning to Enabled in the bucket settings."}
    ]);
    std::fs::write(&path, seed.to_string()).unwrap();
    path
}

pub fn base_config(dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::default();
    cfg.server.listen = "127.0.0.1:0".into();
    cfg.server.seed = Some(seed_file(dir));
    cfg
}

pub struct Running {
    pub app: Arc<App>,
    pub base: String,
    pub ws: String,
    pub http: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<Result<(), ServiceError>>>,
}

impl Running {
    pub async fn start(cfg: ServiceConfig) -> Self {
        let app = Arc::new(App::build(cfg).expect("app builds"));
        let listener = server::bind(&app).await.expect("bind");
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(server::serve(app.clone(), listener, async {
            let _ = rx.await;
        }));
        Self {
            app,
            base: format!("http://{addr}"),
            ws: format!("ws://{addr}"),
            http: reqwest::Client::new(),
            stop: Some(tx),
            handle: Some(handle),
        }
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.take().unwrap().await.unwrap().expect("clean shutdown");
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_empty(&self, path: &str) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn open(&self, id: &str) {
        let (s, body) = self.post("/sessions", json!({"session_id": id})).await;
        assert_eq!(s, 201, "{body}");
    }

    pub async fn say(&self, session: &str, author: &str, text: &str) -> Value {
        let (s, body) = self.post(&format!("/sessions/{session}/messages"), json!({"author": author, "text": text})).await;
        assert_eq!(s, 202, "{body}");
        body
    }

    /// Waits until the engine has finished `n` closure reviews.
    pub async fn await_reviews(&self, n: u64) {
        for _ in 0..500 {
            let (_, m) = self.get("/metrics").await;
            if m["engine"]["reviews"].as_u64().unwrap() >= n && m["pending_reviews"] == 0 {
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("reviews did not finish");
    }

    pub async fn subscribe(&self, session: &str, after: u64) -> Ws {
        let (ws, _) =
            tokio_tungstenite::connect_async(format!("{}/sessions/{session}/stream?after={after}", self.ws)).await.expect("ws connects");
        Ws(ws)
    }
}

pub struct Ws(pub WebSocketStream<MaybeTlsStream<TcpStream>>);

impl Ws {
    /// Next JSON event, or `None` once the server closes the stream.
    pub async fn next(&mut self) -> Option<Value> {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(5), self.0.next()).await.expect("stream event in time")?;
            match msg.expect("ws frame") {
                WsMessage::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
                WsMessage::Close(_) => return None,
                _ => {}
            }
        }
    }

    pub async fn take(&mut self, n: usize) -> Vec<Value> {
        let mut out = Vec::new();
        for _ in 0..n {
            out.push(self.next().await.expect("stream still open"));
        }
        out
    }
}
