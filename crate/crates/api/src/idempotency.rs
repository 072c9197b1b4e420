//! Replays the stored response when a client retries a mutation with the
//! same idempotency key.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use axum::body::{Body, Bytes};
use axum::extract::{Request, State};
use axum::http::header::AUTHORIZATION;
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};

use crate::error::ApiError;
use crate::AppState;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replayed";

/// Caller token, method, path and client key.
type Key = (String, Method, String, String);

#[derive(Clone)]
struct Stored {
    status: StatusCode,
    headers: HeaderMap,
    body: Bytes,
}

enum Slot {
    InFlight,
    Done(Stored),
}

pub struct Replies {
    capacity: usize,
    slots: Mutex<(HashMap<Key, Slot>, VecDeque<Key>)>,
}

enum Begin {
    Fresh,
    InFlight,
    Replay(Stored),
}

impl Replies {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), slots: Mutex::new((HashMap::new(), VecDeque::new())) }
    }

    fn begin(&self, key: &Key) -> Begin {
        let mut guard = self.slots.lock().unwrap();
        let (map, order) = &mut *guard;
        match map.get(key) {
            Some(Slot::InFlight) => Begin::InFlight,
            Some(Slot::Done(s)) => Begin::Replay(s.clone()),
            None => {
                map.insert(key.clone(), Slot::InFlight);
                order.push_back(key.clone());
                while order.len() > self.capacity {
                    if let Some(old) = order.pop_front() {
                        map.remove(&old);
                    }
                }
                Begin::Fresh
            }
        }
    }

    fn finish(&self, key: Key, stored: Option<Stored>) {
        let mut guard = self.slots.lock().unwrap();
        let (map, order) = &mut *guard;
        match stored {
            Some(s) => {
                if let Some(slot) = map.get_mut(&key) {
                    *slot = Slot::Done(s);
                }
            }
            None => {
                map.remove(&key);
                order.retain(|k| *k != key);
            }
        }
    }
}

pub async fn middleware(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let method = req.method().clone();
    if matches!(method, Method::GET | Method::HEAD | Method::OPTIONS) {
        return next.run(req).await;
    }
    let Some(client_key) = req.headers().get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()) else {
        return next.run(req).await;
    };
    let caller = req
        .headers()
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_string();
    let key: Key = (caller, method, req.uri().to_string(), client_key.to_string());

    match state.replies.begin(&key) {
        Begin::InFlight => return ApiError::InFlight.into_response(),
        Begin::Replay(s) => {
            let mut resp = Response::new(Body::from(s.body));
            *resp.status_mut() = s.status;
            *resp.headers_mut() = s.headers;
            resp.headers_mut().insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
            return resp;
        }
        Begin::Fresh => {}
    }

    let (parts, body) = next.run(req).await.into_parts();
    let bytes = match axum::body::to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => {
            state.replies.finish(key, None);
            return ApiError::Internal(e.to_string()).into_response();
        }
    };
    // server faults are not remembered; a retry should run again
    let stored = (!parts.status.is_server_error()).then(|| Stored {
        status: parts.status,
        headers: parts.headers.clone(),
        body: bytes.clone(),
    });
    state.replies.finish(key, stored);
    Response::from_parts(parts, Body::from(bytes))
}
