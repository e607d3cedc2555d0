//! Single-administrator authentication: credential file, sessions and
//! login throttling.
//!
//! The credential file holds one line, `username:<PHC string>`, where the
//! PHC string is an Argon2id hash carrying its own random salt.

use std::collections::{HashMap, VecDeque};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use argon2::password_hash::{rand_core::OsRng, PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use thiserror::Error;

pub const MIN_PASSWORD_LEN: usize = 8;
pub const SESSION_LIFETIME: Duration = Duration::from_secs(12 * 3600);
pub const MAX_FAILURES: usize = 5;
pub const FAILURE_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Error, PartialEq)]
pub enum AuthError {
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("too many failed attempts; retry later")]
    Throttled,
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("missing, unknown or expired session")]
    Unauthorized,
    #[error("credential file: {0}")]
    Store(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Credential {
    pub username: String,
    /// Argon2id PHC string, salt included.
    pub password_hash: String,
}

impl Credential {
    pub fn new(username: &str, password: &str) -> Result<Self, AuthError> {
        if username.is_empty() || username.contains([':', '\n']) {
            return Err(AuthError::Store(format!("invalid username {username:?}")));
        }
        Ok(Credential { username: username.to_owned(), password_hash: hash_password(password)? })
    }

    pub fn parse(text: &str) -> Result<Self, AuthError> {
        let line = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
        let (user, hash) =
            line.and_then(|l| l.split_once(':')).ok_or_else(|| AuthError::Store("expected `username:hash`".into()))?;
        PasswordHash::new(hash).map_err(|e| AuthError::Store(format!("bad hash: {e}")))?;
        Ok(Credential { username: user.to_owned(), password_hash: hash.to_owned() })
    }

    pub fn render(&self) -> String {
        format!("{}:{}\n", self.username, self.password_hash)
    }

    pub fn load(path: &Path) -> Result<Self, AuthError> {
        let text = std::fs::read_to_string(path).map_err(|e| AuthError::Store(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Atomic replace; the file is created owner-readable only.
    pub fn save(&self, path: &Path) -> Result<(), AuthError> {
        let io = |e: std::io::Error| AuthError::Store(format!("{}: {e}", path.display()));
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        std::io::Write::write_all(&mut tmp, self.render().as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Checks both fields. The hash is always verified so that an unknown
    /// username costs the same as a wrong password.
    fn matches(&self, username: &str, password: &str) -> bool {
        let hash_ok = verify_password(&self.password_hash, password);
        let user_ok = constant_time_eq(self.username.as_bytes(), username.as_bytes());
        hash_ok & user_ok
    }
}

fn hash_password(password: &str) -> Result<String, AuthError> {
    let salt = SaltString::generate(&mut OsRng);
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| AuthError::Store(format!("hashing failed: {e}")))
}

fn verify_password(phc: &str, password: &str) -> bool {
    PasswordHash::new(phc).is_ok_and(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    let mut diff = a.len() ^ b.len();
    for (i, x) in a.iter().enumerate() {
        diff |= usize::from(x ^ b.get(i).copied().unwrap_or(!x));
    }
    diff == 0
}

/// 128 random bits, URL-safe base64 without padding.
fn new_token() -> String {
    let mut bytes = [0u8; 16];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionToken {
    pub token: String,
    pub expires_at: Instant,
}

/// Credential, session table and per-source failure log.
pub struct Auth {
    credential: RwLock<Credential>,
    path: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Instant>>,
    failures: Mutex<HashMap<IpAddr, VecDeque<Instant>>>,
    session_lifetime: Duration,
}

impl Auth {
    pub fn new(credential: Credential, path: Option<PathBuf>) -> Self {
        Auth {
            credential: RwLock::new(credential),
            path,
            sessions: Mutex::default(),
            failures: Mutex::default(),
            session_lifetime: SESSION_LIFETIME,
        }
    }

    pub fn in_memory(username: &str, password: &str) -> Result<Self, AuthError> {
        Ok(Self::new(Credential::new(username, password)?, None))
    }

    /// Loads `path`, or creates it from `bootstrap` when it does not exist.
    pub fn open(path: &Path, bootstrap: Option<(&str, &str)>) -> Result<Self, AuthError> {
        let cred = if path.exists() {
            Credential::load(path)?
        } else {
            let (user, pass) = bootstrap.ok_or_else(|| {
                AuthError::Store(format!("{} does not exist and no initial password was given", path.display()))
            })?;
            if pass.chars().count() < MIN_PASSWORD_LEN {
                return Err(AuthError::WeakPassword);
            }
            let cred = Credential::new(user, pass)?;
            cred.save(path)?;
            cred
        };
        Ok(Self::new(cred, Some(path.to_owned())))
    }

    pub fn with_session_lifetime(mut self, d: Duration) -> Self {
        self.session_lifetime = d;
        self
    }

    pub fn username(&self) -> String {
        self.credential.read().username.clone()
    }

    fn throttled(&self, source: IpAddr, now: Instant) -> bool {
        let mut f = self.failures.lock();
        let Some(log) = f.get_mut(&source) else { return false };
        while log.front().is_some_and(|t| now.duration_since(*t) >= FAILURE_WINDOW) {
            log.pop_front();
        }
        if log.is_empty() {
            f.remove(&source);
            return false;
        }
        log.len() >= MAX_FAILURES
    }

    fn record_failure(&self, source: IpAddr, now: Instant) {
        self.failures.lock().entry(source).or_default().push_back(now);
    }

    pub fn login(&self, username: &str, password: &str, source: IpAddr) -> Result<SessionToken, AuthError> {
        let now = Instant::now();
        if self.throttled(source, now) {
            return Err(AuthError::Throttled);
        }
        let cred = self.credential.read().clone();
        if !cred.matches(username, password) {
            self.record_failure(source, now);
            return Err(AuthError::InvalidCredentials);
        }
        let token = new_token();
        let expires_at = now + self.session_lifetime;
        let mut sessions = self.sessions.lock();
        sessions.retain(|_, exp| *exp > now);
        sessions.insert(token.clone(), expires_at);
        Ok(SessionToken { token, expires_at })
    }

    /// Expired and unknown tokens are rejected identically.
    pub fn validate(&self, token: &str) -> Result<(), AuthError> {
        let now = Instant::now();
        let mut sessions = self.sessions.lock();
        match sessions.get(token) {
            Some(exp) if *exp > now => Ok(()),
            Some(_) => {
                sessions.remove(token);
                Err(AuthError::Unauthorized)
            }
            None => Err(AuthError::Unauthorized),
        }
    }

    pub fn logout(&self, token: &str) {
        self.sessions.lock().remove(token);
    }

    /// Replaces the password and ends every session except `token`'s.
    pub fn change_password(&self, token: &str, old: &str, new: &str, source: IpAddr) -> Result<(), AuthError> {
        self.validate(token)?;
        let now = Instant::now();
        if self.throttled(source, now) {
            return Err(AuthError::Throttled);
        }
        if new.chars().count() < MIN_PASSWORD_LEN {
            return Err(AuthError::WeakPassword);
        }
        let mut cred = self.credential.write();
        if !verify_password(&cred.password_hash, old) {
            drop(cred);
            self.record_failure(source, now);
            return Err(AuthError::InvalidCredentials);
        }
        let next = Credential { username: cred.username.clone(), password_hash: hash_password(new)? };
        if let Some(path) = &self.path {
            next.save(path)?;
        }
        *cred = next;
        drop(cred);
        self.sessions.lock().retain(|t, _| t == token);
        Ok(())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: IpAddr = IpAddr::V4(std::net::Ipv4Addr::LOCALHOST);

    fn auth() -> Auth {
        Auth::in_memory("admin", "correct horse").unwrap()
    }

    #[test]
    fn login_and_validate() {
        let a = auth();
        let t = a.login("admin", "correct horse", SRC).unwrap();
        assert_eq!(URL_SAFE_NO_PAD.decode(&t.token).unwrap().len(), 16);
        assert!(a.validate(&t.token).is_ok());
        assert_eq!(a.validate("nope"), Err(AuthError::Unauthorized));
        a.logout(&t.token);
        assert_eq!(a.validate(&t.token), Err(AuthError::Unauthorized));
    }

    #[test]
    fn bad_user_and_bad_password_look_the_same() {
        let a = auth();
        assert_eq!(a.login("admin", "wrong", SRC), Err(AuthError::InvalidCredentials));
        assert_eq!(a.login("root", "correct horse", SRC), Err(AuthError::InvalidCredentials));
    }

    #[test]
    fn sixth_failure_is_throttled() {
        let a = auth();
        for _ in 0..MAX_FAILURES {
            assert_eq!(a.login("admin", "wrong", SRC), Err(AuthError::InvalidCredentials));
        }
        assert_eq!(a.login("admin", "wrong", SRC), Err(AuthError::Throttled));
        assert_eq!(a.login("admin", "correct horse", SRC), Err(AuthError::Throttled));
        let other: IpAddr = "10.0.0.9".parse().unwrap();
        assert!(a.login("admin", "correct horse", other).is_ok());
    }

    #[test]
    fn expired_session_is_unknown() {
        let a = auth().with_session_lifetime(Duration::from_millis(20));
        let t = a.login("admin", "correct horse", SRC).unwrap();
        std::thread::sleep(Duration::from_millis(40));
        assert_eq!(a.validate(&t.token), Err(AuthError::Unauthorized));
    }

    #[test]
    fn password_change_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("credentials");
        let a = Auth::open(&path, Some(("admin", "correct horse"))).unwrap();
        let mine = a.login("admin", "correct horse", SRC).unwrap().token;
        let other = a.login("admin", "correct horse", SRC).unwrap().token;
        let before = std::fs::read_to_string(&path).unwrap();

        assert_eq!(a.change_password(&mine, "correct horse", "short12", SRC), Err(AuthError::WeakPassword));
        assert_eq!(a.change_password(&mine, "wrong", "battery staple", SRC), Err(AuthError::InvalidCredentials));
        assert_eq!(std::fs::read_to_string(&path).unwrap(), before);

        a.change_password(&mine, "correct horse", "battery staple", SRC).unwrap();
        assert!(a.validate(&mine).is_ok());
        assert_eq!(a.validate(&other), Err(AuthError::Unauthorized));
        assert_eq!(a.login("admin", "correct horse", SRC), Err(AuthError::InvalidCredentials));
        assert!(a.login("admin", "battery staple", SRC).is_ok());

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("battery staple"));
        let reopened = Auth::open(&path, None).unwrap();
        assert!(reopened.login("admin", "battery staple", SRC).is_ok());
    }

    #[test]
    fn salts_differ() {
        let a = Credential::new("admin", "same password").unwrap();
        let b = Credential::new("admin", "same password").unwrap();
        assert_ne!(a.password_hash, b.password_hash);
        assert!(a.password_hash.starts_with("$argon2id$"));
    }

    #[test]
    fn missing_file_needs_bootstrap() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Auth::open(&dir.path().join("c"), None), Err(AuthError::Store(_))));
        assert_eq!(Auth::open(&dir.path().join("c"), Some(("admin", "short"))).err(), Some(AuthError::WeakPassword));
    }

    #[test]
    fn constant_time_eq_behaves_like_eq() {
        for (a, b) in [("", ""), ("a", ""), ("", "a"), ("abc", "abc"), ("abc", "abd"), ("ab", "abc")] {
            assert_eq!(constant_time_eq(a.as_bytes(), b.as_bytes()), a == b, "{a:?} {b:?}");
        }
    }
}
