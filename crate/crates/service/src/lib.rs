//! HTTP JSON service for live search sessions over a trained model.
//!
//! `POST /sessions` opens a session, `POST /sessions/{id}/query` ranks and
//! suggests, `POST /sessions/{id}/click` records a click and refreshes the
//! suggestion, and `GET /sessions/{id}` returns the transcript with a hash of
//! the replayed recurrent state.

pub mod api;
pub mod engine;

pub use api::{router, AppState, ServiceConfig};
pub use engine::{Engine, EngineError, Event};

/// Serves `state` on an already bound listener until the process stops.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
