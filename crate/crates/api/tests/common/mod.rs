#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::response::Response;
use axum::Router;
use chrono::TimeDelta;
use http_body_util::BodyExt;
use mta_api::{router, ApiConfig, AppState, CredentialBackend};
use mta_core::archive::write_zip;
use mta_core::clock::{Clock, ManualClock};
use mta_core::domain::{Timestamp, UserId};
use mta_core::engine::Engine;
use mta_core::sim::{choice_rubric, term_start, weekly_assignment};
use mta_core::store::Store;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const OPERATOR: &str = "operator";
const OPERATOR_TOKEN: &str = "operator-token-for-tests";

/// Accepts `pw-<name>` as the password of any user.
struct NamedPasswords;

impl CredentialBackend for NamedPasswords {
    fn verify(&self, username: &str, password: &str) -> Option<UserId> {
        (password == format!("pw-{username}")).then(|| UserId::new(username))
    }
}

/// In-process client for the router with a controllable clock.
pub struct Harness {
    pub app: Router,
    pub clock: Arc<ManualClock>,
    pub engine: Engine,
    tokens: Mutex<HashMap<String, String>>,
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

impl Harness {
    pub fn new() -> Self {
        Self::with_ttl(TimeDelta::days(3650))
    }

    pub fn with_ttl(ttl: TimeDelta) -> Self {
        let clock = Arc::new(ManualClock::new(term_start() - TimeDelta::days(1)));
        let engine = Engine::new(Store::in_memory(), clock.clone() as Arc<dyn Clock>);
        let config = ApiConfig {
            session_ttl: ttl,
            operator_token: Some(OPERATOR_TOKEN.into()),
            ..ApiConfig::default()
        };
        let app = router(AppState::new(engine.clone(), NamedPasswords, config));
        Self { app, clock, engine, tokens: Mutex::new(HashMap::new()) }
    }

    pub fn at(&self, t: Timestamp) {
        self.clock.set(t);
    }

    pub async fn send(&self, req: Request<Body>) -> Reply {
        let resp: Response = self.app.clone().oneshot(req).await.unwrap();
        let (parts, body) = resp.into_parts();
        let bytes = body.collect().await.unwrap().to_bytes().to_vec();
        Reply { status: parts.status, headers: parts.headers, bytes }
    }

    pub async fn login(&self, who: &str) -> String {
        if who == OPERATOR {
            return OPERATOR_TOKEN.into();
        }
        if let Some(t) = self.tokens.lock().unwrap().get(who) {
            return t.clone();
        }
        let req = Request::post("/auth/login")
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(json!({ "username": who, "password": format!("pw-{who}") }).to_string()))
            .unwrap();
        let reply = self.send(req).await;
        assert_eq!(reply.status, StatusCode::OK, "login {who}: {}", reply.text());
        let token = reply.json()["token"].as_str().unwrap().to_string();
        self.tokens.lock().unwrap().insert(who.into(), token.clone());
        token
    }

    pub async fn request(&self, who: &str, method: Method, path: &str, body: Option<Value>) -> Reply {
        let mut b = Request::builder().method(method).uri(path);
        if !who.is_empty() {
            b = b.header(header::AUTHORIZATION, format!("Bearer {}", self.login(who).await));
        }
        let req = match body {
            Some(v) => b.header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())),
            None => b.body(Body::empty()),
        }
        .unwrap();
        self.send(req).await
    }

    pub async fn bytes(&self, who: &str, path: &str, data: Vec<u8>) -> Reply {
        let req = Request::post(path)
            .header(header::AUTHORIZATION, format!("Bearer {}", self.login(who).await))
            .header(header::CONTENT_TYPE, "application/octet-stream")
            .body(Body::from(data))
            .unwrap();
        self.send(req).await
    }

    pub async fn get(&self, who: &str, path: &str) -> Reply {
        self.request(who, Method::GET, path, None).await
    }

    pub async fn post(&self, who: &str, path: &str, body: Value) -> Reply {
        self.request(who, Method::POST, path, Some(body)).await
    }

    /// POST that must succeed; returns the JSON body.
    pub async fn ok(&self, who: &str, path: &str, body: Value) -> Value {
        let r = self.post(who, path, body).await;
        assert!(r.status.is_success(), "POST {path} as {who}: {} {}", r.status, r.text());
        r.json()
    }

    pub async fn fetch(&self, who: &str, path: &str) -> Value {
        let r = self.get(who, path).await;
        assert!(r.status.is_success(), "GET {path} as {who}: {} {}", r.status, r.text());
        r.json()
    }
}

/// A course built entirely through the API: `prof` teaches, students and
/// TAs join with enrollment codes, and rubric 2 is one 0..=10 question
/// with an optional rationale.
pub struct Course {
    pub h: Harness,
    pub id: u64,
    pub rubric: u64,
    calibration_counter: Mutex<usize>,
}

impl Course {
    pub async fn new(students: &[&str], tas: &[&str], pools: bool) -> Self {
        let h = Harness::new();
        let mut features = json!({"pools": pools, "calibration": true, "spot_checking": true, "flagging": true, "consensus_reward": false});
        if !pools {
            features["pools"] = json!(false);
        }
        let course = h
            .ok(
                "prof",
                "/courses",
                json!({
                    "name": "CS101",
                    "visible_to_students": true,
                    "enrollment_codes": {"student": "S-xyz", "ta": "T-abc"},
                    "late_day_budget": 3,
                    "features": features,
                }),
            )
            .await;
        let id = course["id"].as_u64().unwrap();
        for s in students {
            h.ok(s, "/enroll", json!({"code": "S-xyz"})).await;
        }
        for t in tas {
            h.ok(t, "/enroll", json!({"code": "T-abc"})).await;
        }
        let mut spec = serde_json::to_value(choice_rubric(1, 11)).unwrap();
        spec["questions"][0]["reasoning"] = json!({"min": 0, "max": 500});
        let rubric = h.ok("prof", &format!("/courses/{id}/rubrics"), spec).await["id"].as_u64().unwrap();
        Self { h, id, rubric, calibration_counter: Mutex::new(0) }
    }

    pub fn path(&self, rest: &str) -> String {
        format!("/courses/{}{rest}", self.id)
    }

    /// Weekly assignment released at the start of term.
    pub async fn assignment(&self, name: &str) -> Value {
        let spec = weekly_assignment(name, mta_core::domain::RubricId(self.rubric), term_start());
        self.h.ok("prof", &self.path("/assignments"), serde_json::to_value(spec).unwrap()).await
    }

    pub async fn submit_text(&self, who: &str, aid: u64, body: &str) -> u64 {
        let s = self
            .h
            .ok(who, &self.path(&format!("/assignments/{aid}/submissions")), json!({"kind": "text", "body": body}))
            .await;
        s["id"].as_u64().unwrap()
    }

    pub async fn step(&self, aid: u64, step: Value) -> Value {
        self.h.ok("prof", &self.path(&format!("/assignments/{aid}/steps")), step).await
    }

    /// The caller's open tasks as JSON task views.
    pub async fn open_tasks(&self, who: &str) -> Vec<Value> {
        let all = self.h.fetch(who, &self.path("/reviews")).await;
        all.as_array()
            .unwrap()
            .iter()
            .filter(|t| {
                let done = t["completed"].as_bool().or_else(|| t["task"]["status"].as_str().map(|s| s == "done"));
                done == Some(false)
            })
            .cloned()
            .collect()
    }

    pub fn task_id(view: &Value) -> u64 {
        view["task_id"].as_u64().or_else(|| view["task"]["id"].as_u64()).unwrap()
    }

    /// Open peer task of a student on a submission, looked up by its text.
    pub async fn task_on(&self, who: &str, body: &str) -> u64 {
        let tasks = self.open_tasks(who).await;
        let t = tasks
            .iter()
            .find(|t| t["content"]["body"] == body)
            .unwrap_or_else(|| panic!("{who} has no task on {body:?}"));
        Self::task_id(t)
    }

    pub async fn review(&self, who: &str, task: u64, choice: usize, reasoning: &str) -> Value {
        self.h
            .ok(
                who,
                &self.path(&format!("/tasks/{task}/review")),
                json!({"answers": [{"question_id": "q1", "choice": choice, "reasoning": reasoning}]}),
            )
            .await
    }

    /// Five calibration essays with truth 5, scheduled for `who` and graded
    /// perfectly, which promotes them.
    pub async fn promote(&self, who: &str) {
        let start = {
            let mut c = self.calibration_counter.lock().unwrap();
            let s = *c;
            *c += 5;
            s
        };
        let mut files: Vec<(String, Vec<u8>)> =
            (start..start + 5).map(|i| (format!("cal{i}.txt"), format!("calibration essay {i}").into_bytes())).collect();
        let mut table = String::from("file,q1,q1_rationale\n");
        for (name, _) in &files {
            table.push_str(&format!("{name},5,solid middle\n"));
        }
        files.push(("truth.csv".into(), table.into_bytes()));
        let zip = write_zip(files.iter().map(|(n, d)| (n.as_str(), d.as_slice()))).unwrap();
        let r = self.h.bytes("prof", &self.path(&format!("/calibration?rubric_id={}", self.rubric)), zip).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        self.h
            .ok(
                "prof",
                &self.path("/calibration/schedule"),
                json!({"students": [who], "count": 5, "mode": "separate", "seed": 1}),
            )
            .await;
        for t in self.open_tasks(who).await {
            if t["label"] == "calibration" {
                self.review(who, Self::task_id(&t), 5, "").await;
            }
        }
        assert_eq!(self.pool(who).await, "independent");
    }

    pub async fn pool(&self, who: &str) -> String {
        let d = self.h.fetch(who, &self.path("/dashboard")).await;
        d["pool"].as_str().unwrap_or("").to_string()
    }
}
