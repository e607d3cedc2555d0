//! Cloudlet membership.
//!
//! The registry is the only place that knows which host belongs to which
//! cloudlet. Agents never see it: moving a host is a registry write followed
//! by an atomic file rewrite, and every aggregation resolves members from
//! the current snapshot at query time.
//!
//! Clusters file format, one cloudlet per line:
//!
//! ```text
//! # comment
//! MySQL: node01 node02
//! MPI:
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::{IndexMap, IndexSet};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conf::strip_comment;
use crate::protocol::valid_hostname;

/// The implicit pool of every known host outside an explicit cloudlet.
pub const INITIAL: &str = "Initial";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cloudlet {0} already exists")]
    DuplicateName(String),
    #[error("{INITIAL} is reserved")]
    ReservedName,
    #[error("invalid cloudlet name {0:?}")]
    InvalidName(String),
    #[error("invalid hostname {0:?}")]
    InvalidHost(String),
    #[error("unknown cloudlet {0}")]
    UnknownCloudlet(String),
    #[error("{host} is already a member of {cloudlet}")]
    AlreadyMember { host: String, cloudlet: String },
    #[error("{host} is not a member of {cloudlet}")]
    NotAMember { host: String, cloudlet: String },
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("host {0} listed in more than one cloudlet")]
    DisjointnessViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn valid_cloudlet_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cloudlet {
    pub name: String,
    pub members: Vec<String>,
}

/// An immutable view of the registry at one revision.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegistrySnapshot {
    cloudlets: IndexMap<String, IndexSet<String>>,
    pub revision: u64,
}

impl RegistrySnapshot {
    pub fn cloudlets(&self) -> Vec<Cloudlet> {
        self.cloudlets
            .iter()
            .map(|(name, m)| Cloudlet { name: name.clone(), members: m.iter().cloned().collect() })
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.cloudlets.keys().map(String::as_str)
    }

    pub fn contains(&self, cloudlet: &str) -> bool {
        self.cloudlets.contains_key(cloudlet)
    }

    pub fn members(&self, cloudlet: &str) -> Option<Vec<String>> {
        self.cloudlets.get(cloudlet).map(|m| m.iter().cloned().collect())
    }

    /// The explicit cloudlet holding `host`, if any.
    pub fn cloudlet_of(&self, host: &str) -> Option<&str> {
        self.cloudlets.iter().find(|(_, m)| m.contains(host)).map(|(n, _)| n.as_str())
    }

    /// Hosts from `known` that belong to no explicit cloudlet, in input order.
    pub fn initial_pool<'a>(&self, known: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        known.into_iter().filter(|h| self.cloudlet_of(h).is_none()).map(str::to_owned).collect()
    }

    /// Same cloudlets and members in the same order, ignoring revision.
    pub fn same_layout(&self, other: &RegistrySnapshot) -> bool {
        self.cloudlets() == other.cloudlets()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, members) in &self.cloudlets {
            out.push_str(name);
            out.push(':');
            for m in members {
                out.push(' ');
                out.push_str(m);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let mut cloudlets: IndexMap<String, IndexSet<String>> = IndexMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let Some((name, rest)) = line.split_once(':') else {
                return Err(RegistryError::Parse { line: line_no, msg: "missing `:`".into() });
            };
            let name = name.trim();
            if name == INITIAL {
                return Err(RegistryError::Parse { line: line_no, msg: format!("{INITIAL} is reserved") });
            }
            if !valid_cloudlet_name(name) {
                return Err(RegistryError::Parse { line: line_no, msg: format!("invalid cloudlet name {name:?}") });
            }
            if cloudlets.contains_key(name) {
                return Err(RegistryError::Parse { line: line_no, msg: format!("duplicate cloudlet {name}") });
            }
            let mut members = IndexSet::new();
            for host in rest.split_whitespace() {
                if cloudlets.values().any(|m| m.contains(host)) || !members.insert(host.to_owned()) {
                    return Err(RegistryError::DisjointnessViolation(host.to_owned()));
                }
            }
            cloudlets.insert(name.to_owned(), members);
        }
        Ok(RegistrySnapshot { cloudlets, revision: 0 })
    }
}

type HostCheck = Arc<dyn Fn(&str) -> bool + Send + Sync>;

/// Authoritative host-to-cloudlet mapping.
///
/// Mutations are serialized; readers clone an `Arc` of the current snapshot
/// and so never observe a half-applied move.
pub struct Registry {
    current: RwLock<Arc<RegistrySnapshot>>,
    write: Mutex<()>,
    path: Option<PathBuf>,
    known_hosts: Option<HostCheck>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry {
            current: RwLock::new(Arc::new(RegistrySnapshot::default())),
            write: Mutex::new(()),
            path: None,
            known_hosts: None,
        }
    }

    /// Opens a registry backed by a clusters file. A missing file is an
    /// empty registry; it is created on the first mutation.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let path = path.into();
        let snapshot = match std::fs::read_to_string(&path) {
            Ok(text) => RegistrySnapshot::parse(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RegistrySnapshot::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(Registry { current: RwLock::new(Arc::new(snapshot)), path: Some(path), ..Self::in_memory() })
    }

    /// Strict mode: `add_member` only accepts hosts this predicate knows.
    pub fn with_host_check(mut self, check: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.known_hosts = Some(Arc::new(check));
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        self.current.read().clone()
    }

    pub fn revision(&self) -> u64 {
        self.current.read().revision
    }

    fn mutate(
        &self,
        f: impl FnOnce(&mut IndexMap<String, IndexSet<String>>) -> Result<(), RegistryError>,
    ) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        let _serial = self.write.lock();
        let mut next = (**self.current.read()).clone();
        f(&mut next.cloudlets)?;
        next.revision += 1;
        if let Some(path) = &self.path {
            persist_to(path, &next)?;
        }
        let next = Arc::new(next);
        *self.current.write() = next.clone();
        Ok(next)
    }

    pub fn create_cloudlet(&self, name: &str) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        if name == INITIAL {
            return Err(RegistryError::ReservedName);
        }
        if !valid_cloudlet_name(name) {
            return Err(RegistryError::InvalidName(name.to_owned()));
        }
        self.mutate(|c| {
            if c.contains_key(name) {
                return Err(RegistryError::DuplicateName(name.to_owned()));
            }
            c.insert(name.to_owned(), IndexSet::new());
            Ok(())
        })
    }

    /// Removes a cloudlet; its members fall back to the Initial pool.
    pub fn delete_cloudlet(&self, name: &str) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        self.mutate(|c| c.shift_remove(name).map(|_| ()).ok_or_else(|| RegistryError::UnknownCloudlet(name.to_owned())))
    }

    pub fn add_member(&self, cloudlet: &str, host: &str) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        if !valid_hostname(host) {
            return Err(RegistryError::InvalidHost(host.to_owned()));
        }
        if let Some(known) = &self.known_hosts {
            if !known(host) {
                return Err(RegistryError::UnknownHost(host.to_owned()));
            }
        }
        self.mutate(|c| {
            if !c.contains_key(cloudlet) {
                return Err(RegistryError::UnknownCloudlet(cloudlet.to_owned()));
            }
            if let Some((owner, _)) = c.iter().find(|(_, m)| m.contains(host)) {
                return Err(RegistryError::AlreadyMember { host: host.to_owned(), cloudlet: owner.clone() });
            }
            c[cloudlet].insert(host.to_owned());
            Ok(())
        })
    }

    pub fn remove_member(&self, cloudlet: &str, host: &str) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        self.mutate(|c| {
            let members = c.get_mut(cloudlet).ok_or_else(|| RegistryError::UnknownCloudlet(cloudlet.to_owned()))?;
            if !members.shift_remove(host) {
                return Err(RegistryError::NotAMember { host: host.to_owned(), cloudlet: cloudlet.to_owned() });
            }
            Ok(())
        })
    }

    /// Moves `host` between explicit cloudlets in a single revision.
    pub fn move_member(&self, host: &str, from: &str, to: &str) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        self.mutate(|c| {
            if !c.contains_key(to) {
                return Err(RegistryError::UnknownCloudlet(to.to_owned()));
            }
            let source = c.get_mut(from).ok_or_else(|| RegistryError::UnknownCloudlet(from.to_owned()))?;
            if !source.shift_remove(host) {
                return Err(RegistryError::NotAMember { host: host.to_owned(), cloudlet: from.to_owned() });
            }
            c[to].insert(host.to_owned());
            Ok(())
        })
    }

    /// Replaces the in-memory state with the file's content.
    pub fn load(&self, path: &Path) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        let parsed = RegistrySnapshot::parse(&std::fs::read_to_string(path)?)?;
        self.mutate(|c| {
            *c = parsed.cloudlets;
            Ok(())
        })
    }

    pub fn persist(&self, path: &Path) -> Result<(), RegistryError> {
        persist_to(path, &self.snapshot())
    }
}

/// Write-to-temp then rename, so readers see the old or the new file, never a mix.
fn persist_to(path: &Path, snapshot: &RegistrySnapshot) -> Result<(), RegistryError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, snapshot.render().as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
