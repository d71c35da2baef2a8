//! HTTP service for the classroom ML experiments.
//!
//! Sessions live in per-session worker threads (see [`worker`]), persist to
//! plain files (see [`store`]) and are reachable over REST and a WebSocket
//! event stream (see [`api`]).

pub mod api;
pub mod app;
pub mod error;
pub mod store;
pub mod worker;

use std::future::Future;
use std::net::SocketAddr;

use tokio::net::TcpListener;
use tracing::info;

pub use api::router;
pub use app::{App, CreateSession, ServiceConfig};
pub use error::ServiceError;
pub use store::{BackendKind, SessionDescriptor, Store};
pub use worker::{CommandReply, EventRef, SessionHandle};

/// A bound listener plus the restored application state.
pub struct Server {
    listener: TcpListener,
    app: App,
}

impl Server {
    /// Binds the listen address, then restores stored sessions.
    pub async fn bind(config: ServiceConfig) -> Result<Self, ServiceError> {
        if let Some(origin) = &config.cors_origin {
            axum::http::HeaderValue::from_str(origin)
                .map_err(|_| ServiceError::Malformed(format!("invalid CORS origin `{origin}`")))?;
        }
        let listener =
            TcpListener::bind(config.listen)
                .await
                .map_err(|source| ServiceError::Bind {
                    addr: config.listen.to_string(),
                    source,
                })?;
        let app = App::open(config)?;
        Ok(Self { listener, app })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    pub fn app(&self) -> &App {
        &self.app
    }

    /// Serves until `shutdown` resolves, then stops all session workers.
    pub async fn run<F>(self, shutdown: F) -> Result<(), ServiceError>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let addr = self.local_addr();
        let app = self.app.clone();
        let signal_app = self.app.clone();
        info!(%addr, "listening");
        axum::serve(self.listener, router(self.app))
            .with_graceful_shutdown(async move {
                shutdown.await;
                signal_app.begin_shutdown();
            })
            .await
            .map_err(|source| ServiceError::Bind {
                addr: addr.to_string(),
                source,
            })?;
        tokio::task::spawn_blocking(move || app.shutdown())
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        info!("stopped");
        Ok(())
    }
}
