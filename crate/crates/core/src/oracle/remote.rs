//! JSON-over-HTTP oracle protocol: a blocking client and a small server.
//!
//! Routes (all `POST`, JSON bodies):
//!
//! * `/v1/decide`: `{"image": {...}, "label": y, "targeted": b}` answers
//!   `{"adversarial": bool}`
//! * `/v1/loss`: same plus `"target": t`, answers `{"loss": float}`
//!
//! Images travel as `{"channels": c, "side": d, "data": [...]}` with planar
//! row-major floats. The server answers 400 when the data length does not
//! match `c*d*d` or a label is out of range.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{AttackGoal, Classifier, DefenseTransform, Oracle, QueryBudget};
use crate::tensorimg::{ImageTensor, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl ImagePayload {
    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            channels: img.channels(),
            side: img.side(),
            data: img.as_slice().to_vec(),
        }
    }

    pub fn into_image(self) -> Result<ImageTensor> {
        let shape = Shape::new(self.channels, self.side)?;
        ImageTensor::from_shape(shape, self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideRequest {
    pub image: ImagePayload,
    pub label: usize,
    pub targeted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRequest {
    pub image: ImagePayload,
    pub label: usize,
    pub targeted: bool,
    /// Class the cross-entropy is taken against. Ignored for untargeted
    /// requests, whose loss is the negated cross-entropy of `label`.
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecideResponse {
    pub adversarial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossResponse {
    pub loss: f64,
}

fn goal_of(label: usize, targeted: bool) -> AttackGoal {
    if targeted {
        AttackGoal::Targeted { target: label }
    } else {
        AttackGoal::Untargeted { label }
    }
}

/// Oracle that forwards every query to a remote server.
///
/// A query is reserved from the budget before the request goes out and
/// refunded if the request fails, so transport errors never cost budget.
pub struct RemoteOracle {
    agent: ureq::Agent,
    base: String,
    goal: AttackGoal,
    queries: u64,
    budget: QueryBudget,
    max_retries: u32,
    backoff: Duration,
}

impl RemoteOracle {
    /// `endpoint` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(endpoint: &str, goal: AttackGoal, budget: QueryBudget) -> Self {
        Self {
            agent: build_agent(Duration::from_secs(10)),
            base: endpoint.trim_end_matches('/').to_string(),
            goal,
            queries: 0,
            budget,
            max_retries: 3,
            backoff: Duration::from_millis(100),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = build_agent(timeout);
        self
    }

    /// Retries after timeouts and connection failures, waiting
    /// `backoff * 2^attempt` between attempts.
    pub fn with_retry(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn post<T: DeserializeOwned>(&mut self, path: &str, body: &impl Serialize) -> Result<T> {
        self.budget.try_consume()?;
        match self.send(path, body) {
            Ok(value) => {
                self.queries += 1;
                Ok(value)
            }
            Err(e) => {
                self.budget.refund();
                Err(e)
            }
        }
    }

    fn send<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let mut attempt = 0;
        loop {
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if !(200..300).contains(&status) {
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(Error::Transport(format!("{url} answered {status}: {}", text.trim())));
                    }
                    return resp
                        .body_mut()
                        .read_json::<T>()
                        .map_err(|e| Error::Transport(format!("malformed response from {url}: {e}")));
                }
                Err(e) if is_retryable(&e) && attempt < self.max_retries => {
                    log::warn!("request to {url} failed ({e}), retrying");
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(Error::Transport(format!("{url}: {e}"))),
            }
        }
    }
}

fn build_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn is_retryable(e: &ureq::Error) -> bool {
    matches!(e, ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)
}

impl Oracle for RemoteOracle {
    fn decide(&mut self, img: &ImageTensor) -> Result<bool> {
        let req = DecideRequest {
            image: ImagePayload::from_image(img),
            label: self.goal.label(),
            targeted: self.goal.is_targeted(),
        };
        let resp: DecideResponse = self.post("/v1/decide", &req)?;
        Ok(resp.adversarial)
    }

    fn loss(&mut self, img: &ImageTensor) -> Result<f64> {
        let req = LossRequest {
            image: ImagePayload::from_image(img),
            label: self.goal.label(),
            targeted: self.goal.is_targeted(),
            target: self.goal.label(),
        };
        let resp: LossResponse = self.post("/v1/loss", &req)?;
        Ok(resp.loss)
    }

    fn query_count(&self) -> u64 {
        self.queries
    }

    fn budget(&self) -> &QueryBudget {
        &self.budget
    }

    fn goal(&self) -> AttackGoal {
        self.goal
    }
}

/// Evaluates one request body against a model. Returns the HTTP status and
/// the JSON (or plain-text error) response body.
pub fn handle_request(
    model: &dyn Classifier,
    defense: DefenseTransform,
    path: &str,
    body: &[u8],
) -> (u16, String) {
    let result = match path {
        "/v1/decide" => serde_json::from_slice::<DecideRequest>(body)
            .map_err(|e| Error::Format(e.to_string()))
            .and_then(|req| {
                let logits = defended_logits(model, defense, req.image, req.label)?;
                let adversarial = goal_of(req.label, req.targeted).is_adversarial(&logits);
                Ok(serde_json::to_string(&DecideResponse { adversarial }).expect("serializable"))
            }),
        "/v1/loss" => serde_json::from_slice::<LossRequest>(body)
            .map_err(|e| Error::Format(e.to_string()))
            .and_then(|req| {
                let goal = if req.targeted {
                    AttackGoal::Targeted { target: req.target }
                } else {
                    AttackGoal::Untargeted { label: req.label }
                };
                let logits = defended_logits(model, defense, req.image, goal.label())?;
                let loss = goal.loss(&logits);
                Ok(serde_json::to_string(&LossResponse { loss }).expect("serializable"))
            }),
        _ => return (404, format!("no route {path}")),
    };
    match result {
        Ok(json) => (200, json),
        Err(e) => (400, e.to_string()),
    }
}

fn defended_logits(
    model: &dyn Classifier,
    defense: DefenseTransform,
    image: ImagePayload,
    label: usize,
) -> Result<Vec<f64>> {
    if label >= model.num_classes() {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let img = image.into_image()?;
    model.logits(&defense.apply(&img)?)
}

/// Background HTTP server exposing a model through the oracle protocol.
/// Requests are served sequentially on one thread. Dropping the server
/// stops it.
pub struct OracleServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl OracleServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, model: Arc<dyn Classifier>, defense: DefenseTransform) -> Result<Self> {
        defense.validate()?;
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Transport("server is not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let worker = Arc::clone(&server);
        let handle = std::thread::spawn(move || {
            for mut request in worker.incoming_requests() {
                let mut body = Vec::new();
                let (status, text) = if *request.method() != tiny_http::Method::Post {
                    (405, "only POST is supported".to_string())
                } else if let Err(e) = std::io::Read::read_to_end(request.as_reader(), &mut body) {
                    (400, e.to_string())
                } else {
                    handle_request(model.as_ref(), defense, request.url(), &body)
                };
                let content_type = if status == 200 { "application/json" } else { "text/plain; charset=utf-8" };
                let header = tiny_http::Header::from_bytes("Content-Type", content_type).expect("static header");
                let response = tiny_http::Response::from_string(text)
                    .with_status_code(status)
                    .with_header(header);
                if let Err(e) = request.respond(response) {
                    log::warn!("failed to send response: {e}");
                }
            }
        });
        Ok(Self { server, addr: local, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the serving thread exits.
    pub fn join(mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }

    pub fn shutdown(self) {
        drop(self);
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}
