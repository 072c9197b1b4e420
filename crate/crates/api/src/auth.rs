//! Token sessions and the pluggable credential check behind them.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use chrono::TimeDelta;
use mta_core::authz::Caller;
use mta_core::domain::{Timestamp, UserId};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::AppState;

/// Checks a username and password. Single sign-on providers plug in here.
pub trait CredentialBackend: Send + Sync {
    fn verify(&self, username: &str, password: &str) -> Option<UserId>;
}

/// Fixed username/password pairs for development and tests.
#[derive(Debug, Clone, Default)]
pub struct StaticUsers {
    users: BTreeMap<String, String>,
}

impl StaticUsers {
    pub fn new<I, U, P>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (U, P)>,
        U: Into<String>,
        P: Into<String>,
    {
        Self { users: pairs.into_iter().map(|(u, p)| (u.into(), p.into())).collect() }
    }

    /// Parses `alice:secret,bob:hunter2`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut users = BTreeMap::new();
        for entry in list.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (u, p) = entry
                .split_once(':')
                .ok_or_else(|| format!("expected user:password, got {entry:?}"))?;
            if u.is_empty() {
                return Err("empty username".into());
            }
            users.insert(u.to_string(), p.to_string());
        }
        Ok(Self { users })
    }

    pub fn insert(&mut self, user: impl Into<String>, password: impl Into<String>) {
        self.users.insert(user.into(), password.into());
    }
}

fn same_bytes(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl CredentialBackend for StaticUsers {
    fn verify(&self, username: &str, password: &str) -> Option<UserId> {
        let expected = self.users.get(username)?;
        same_bytes(expected.as_bytes(), password.as_bytes()).then(|| UserId::new(username))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: UserId,
    pub expires_at: Timestamp,
}

/// Live sessions. Expiry is checked against the engine clock, so tests
/// that move time forward see tokens lapse.
#[derive(Debug)]
pub struct Sessions {
    ttl: TimeDelta,
    live: Mutex<HashMap<String, Session>>,
}

impl Sessions {
    pub fn new(ttl: TimeDelta) -> Self {
        Self { ttl, live: Mutex::new(HashMap::new()) }
    }

    pub fn issue(&self, user_id: UserId, now: Timestamp) -> Session {
        let token = hex::encode(rand::random::<[u8; 32]>());
        let session = Session { token: token.clone(), user_id, expires_at: now + self.ttl };
        let mut live = self.live.lock().unwrap();
        live.retain(|_, s| s.expires_at > now);
        live.insert(token, session.clone());
        session
    }

    pub fn resolve(&self, token: &str, now: Timestamp) -> Option<UserId> {
        let mut live = self.live.lock().unwrap();
        match live.get(token) {
            Some(s) if s.expires_at > now => Some(s.user_id.clone()),
            Some(_) => {
                live.remove(token);
                None
            }
            None => None,
        }
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.live.lock().unwrap().remove(token).is_some()
    }
}

pub(crate) fn bearer(parts: &Parts) -> Option<&str> {
    parts
        .headers
        .get(AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

/// The authenticated caller of a request.
pub struct Auth(pub Caller);

impl FromRequestParts<AppState> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = bearer(parts).ok_or(ApiError::Unauthorized)?;
        if let Some(op) = &state.operator_token {
            if same_bytes(op.as_bytes(), token.as_bytes()) {
                return Ok(Auth(Caller::Operator));
            }
        }
        state
            .sessions
            .resolve(token, state.engine.now())
            .map(|u| Auth(Caller::User(u)))
            .ok_or(ApiError::Unauthorized)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    #[test]
    fn static_users_check_passwords() {
        let users = StaticUsers::parse("alice:pw, bob:x:y").unwrap();
        assert_eq!(users.verify("alice", "pw"), Some(UserId::new("alice")));
        assert_eq!(users.verify("bob", "x:y"), Some(UserId::new("bob")));
        assert_eq!(users.verify("alice", "pW"), None);
        assert_eq!(users.verify("carol", ""), None);
        assert!(StaticUsers::parse("nopassword").is_err());
    }

    #[test]
    fn sessions_expire() {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let sessions = Sessions::new(TimeDelta::hours(1));
        let s = sessions.issue(UserId::new("a"), t0);
        assert_eq!(s.token.len(), 64);
        assert_eq!(sessions.resolve(&s.token, t0 + TimeDelta::minutes(59)), Some(UserId::new("a")));
        assert_eq!(sessions.resolve(&s.token, t0 + TimeDelta::hours(1)), None);
        // expired tokens are gone for good
        assert_eq!(sessions.resolve(&s.token, t0), None);
        let s2 = sessions.issue(UserId::new("a"), t0);
        assert!(sessions.revoke(&s2.token));
        assert_eq!(sessions.resolve(&s2.token, t0), None);
    }
}
