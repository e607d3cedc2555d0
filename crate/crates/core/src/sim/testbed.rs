//! A complete server in one process: UDP listener, aggregator, control
//! engine and HTTP API, all on loopback ports chosen by the OS.

use std::net::SocketAddr;
use std::sync::Arc;

use rand::distributions::{Alphanumeric, DistString};
use tokio::net::{TcpListener, UdpSocket};
use tokio::task::JoinHandle;

use super::client::{ApiClient, ClientError};
use crate::agent::Shutdown;
use crate::aggregator::listener::serve_udp;
use crate::aggregator::{Aggregator, HostTable, DEFAULT_DOWN_THRESHOLD};
use crate::api::auth::{Auth, AuthError};
use crate::api::{self, ApiState};
use crate::clock::{Clock, SystemClock};
use crate::control::{ControlEngine, EngineConfig};
use crate::registry::Registry;
use crate::rrd::RrdStore;

pub struct TestbedOptions {
    pub clock: Arc<dyn Clock>,
    pub down_threshold: u64,
    pub allow_all_scope: bool,
    pub engine: EngineConfig,
    pub username: String,
    /// Random when `None`.
    pub password: Option<String>,
}

impl Default for TestbedOptions {
    fn default() -> Self {
        TestbedOptions {
            clock: Arc::new(SystemClock),
            down_threshold: DEFAULT_DOWN_THRESHOLD,
            allow_all_scope: false,
            engine: EngineConfig::default(),
            username: "admin".into(),
            password: None,
        }
    }
}

pub struct Testbed {
    pub aggregator: Arc<Aggregator>,
    pub control: Arc<ControlEngine>,
    pub auth: Arc<Auth>,
    pub udp_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub username: String,
    pub password: String,
    shutdown: Shutdown,
    tasks: Vec<JoinHandle<()>>,
}

impl Testbed {
    pub async fn start(opts: TestbedOptions) -> std::io::Result<Self> {
        let password = opts.password.unwrap_or_else(|| Alphanumeric.sample_string(&mut rand::thread_rng(), 20));
        let auth =
            Auth::in_memory(&opts.username, &password).map_err(|e: AuthError| std::io::Error::other(e.to_string()))?;
        let aggregator = Arc::new(Aggregator::new(
            Arc::new(RrdStore::default()),
            Arc::new(Registry::in_memory()),
            Arc::new(HostTable::default()),
            opts.clock,
            opts.down_threshold,
        ));
        let control = Arc::new(ControlEngine::new(opts.engine));
        let auth = Arc::new(auth);
        let mut state = ApiState::new(aggregator.clone(), control.clone(), auth.clone());
        state.allow_all_scope = opts.allow_all_scope;

        let udp = UdpSocket::bind("127.0.0.1:0").await?;
        let http = TcpListener::bind("127.0.0.1:0").await?;
        let (udp_addr, http_addr) = (udp.local_addr()?, http.local_addr()?);
        let (shutdown, rx) = Shutdown::new();
        let tasks = vec![
            tokio::spawn(serve_udp(aggregator.clone(), udp, rx.clone())),
            tokio::spawn(async move {
                if let Err(e) = api::serve(http, api::router(Arc::new(state), None), rx).await {
                    tracing::error!(error = %e, "api server stopped");
                }
            }),
        ];
        Ok(Testbed {
            aggregator,
            control,
            auth,
            udp_addr,
            http_addr,
            username: opts.username,
            password,
            shutdown,
            tasks,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// A logged-in client.
    pub async fn client(&self) -> Result<ApiClient, ClientError> {
        ApiClient::login(self.base_url(), &self.username, &self.password).await
    }

    pub async fn stop(self) {
        self.shutdown.trigger();
        for t in self.tasks {
            let _ = t.await;
        }
    }
}
