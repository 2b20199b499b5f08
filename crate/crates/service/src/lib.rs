//! Network plumbing around `fsb-core`.
//!
//! * [`remote::HttpBackend`] talks to an LM server over the `/v1` wire
//!   protocol and implements [`fsb_core::backend::LanguageModel`].
//! * [`wire::router`] serves any `LanguageModel` over that same protocol.
//! * [`api::router`] is the chat session API used by the browser UI.
//! * [`search::HttpSearch`] is a rate-limited live search adapter.

pub mod api;
pub mod remote;
pub mod search;
pub mod store;
pub mod wire;

use std::net::SocketAddr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("refusing to bind {0}: the bot has no safety layer; pass the public-bind acknowledgement to expose it beyond loopback")]
    NotLoopback(SocketAddr),
    #[error("bind {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
    #[error("server: {0}")]
    Server(std::io::Error),
}

/// Non-loopback addresses need an explicit acknowledgement.
pub fn check_bind(addr: &SocketAddr, acknowledge_public: bool) -> Result<(), ServeError> {
    if addr.ip().is_loopback() || acknowledge_public {
        Ok(())
    } else {
        Err(ServeError::NotLoopback(*addr))
    }
}

/// Binds `addr` and serves `app` until the process ends.
pub async fn serve(app: axum::Router, addr: SocketAddr, acknowledge_public: bool) -> Result<(), ServeError> {
    check_bind(&addr, acknowledge_public)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServeError::Bind(addr, e))?;
    axum::serve(listener, app).await.map_err(ServeError::Server)
}

/// Serves `app` on a loopback port from a background thread. Returns the
/// bound address once the listener is up.
pub fn spawn_local(app: axum::Router) -> std::io::Result<SocketAddr> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    std::thread::spawn(move || {
        runtime.block_on(async move {
            let _ = axum::serve(listener, app).await;
        })
    });
    Ok(addr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_loopback_without_acknowledgement() {
        let local: SocketAddr = "127.0.0.1:8080".parse().unwrap();
        let v6: SocketAddr = "[::1]:8080".parse().unwrap();
        let public: SocketAddr = "0.0.0.0:8080".parse().unwrap();
        assert!(check_bind(&local, false).is_ok());
        assert!(check_bind(&v6, false).is_ok());
        assert!(matches!(check_bind(&public, false), Err(ServeError::NotLoopback(_))));
        assert!(check_bind(&public, true).is_ok());
    }
}
