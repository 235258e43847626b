use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;

/// 128 random bits from the thread-local CSPRNG, hex encoded.
pub fn random_token() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

/// Compares without an early exit on the first differing byte.
fn same(a: &str, b: &str) -> bool {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    let mut diff = a.len() ^ b.len();
    for i in 0..a.len().max(b.len()) {
        diff |= (a.get(i).copied().unwrap_or(0) ^ b.get(i).copied().unwrap_or(0)) as usize;
    }
    diff == 0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub token: String,
    pub user: String,
    pub expires_at: DateTime<Utc>,
}

pub struct Sessions {
    user: String,
    pass: String,
    ttl: Duration,
    live: Mutex<HashMap<String, Session>>,
}

impl Sessions {
    pub fn new(user: &str, pass: &str, ttl_secs: i64) -> Self {
        Sessions {
            user: user.to_string(),
            pass: pass.to_string(),
            ttl: Duration::seconds(ttl_secs),
            live: Mutex::new(HashMap::new()),
        }
    }

    pub fn login(&self, user: &str, pass: &str) -> Option<Session> {
        // Evaluate both so timing does not reveal which one was wrong.
        let ok = same(user, &self.user) & same(pass, &self.pass);
        if !ok {
            return None;
        }
        let now = Utc::now();
        let session = Session {
            token: random_token(),
            user: user.to_string(),
            expires_at: now + self.ttl,
        };
        let mut live = self.live.lock().unwrap_or_else(|p| p.into_inner());
        live.retain(|_, s| s.expires_at > now);
        live.insert(session.token.clone(), session.clone());
        Some(session)
    }

    pub fn check(&self, token: &str) -> Option<Session> {
        self.check_at(token, Utc::now())
    }

    pub fn check_at(&self, token: &str, now: DateTime<Utc>) -> Option<Session> {
        let mut live = self.live.lock().unwrap_or_else(|p| p.into_inner());
        match live.get(token) {
            Some(s) if s.expires_at > now => Some(s.clone()),
            Some(_) => {
                live.remove(token);
                None
            }
            None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn login_check_expire() {
        let s = Sessions::new("doc", "pw", 60);
        assert!(s.login("doc", "nope").is_none());
        assert!(s.login("do", "pw").is_none());
        let session = s.login("doc", "pw").unwrap();
        assert_eq!(session.token.len(), 32);
        assert!(s.check(&session.token).is_some());
        assert!(s.check("0123").is_none());
        let later = session.expires_at + Duration::seconds(1);
        assert!(s.check_at(&session.token, later).is_none());
        // Expired sessions are forgotten, not revived.
        assert!(s.check(&session.token).is_none());
    }

    #[test]
    fn tokens_differ() {
        assert_ne!(random_token(), random_token());
    }
}
