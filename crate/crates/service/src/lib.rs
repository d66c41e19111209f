//! Session service: one actor per session, a durable change log, and an
//! HTTP API with a server-sent event stream.

pub mod error;
mod http;
mod manager;
pub mod store;

pub use error::ServiceError;
pub use http::{
    router, Accepted, CreateSession, MessageAction, NeedBody, PostMessage, Problem, BUSY_HEADER, EVENT_SEQ_HEADER,
};
pub use manager::{PanelsAt, ServiceConfig, SessionHandle, SessionManager};
pub use store::{FileStore, MemoryStore, SessionStore};

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    manager: SessionManager,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(shutdown)
        .await
}
