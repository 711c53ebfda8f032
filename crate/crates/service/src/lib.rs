//! HTTP service over a file-backed project store.
//!
//! [`store::Store`] owns the on-disk layout and the single-writer discipline;
//! [`api::router`] exposes it under `/v1`.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::router;
pub use error::ApiError;
pub use store::Store;

/// Serves the store rooted at `root` until ctrl-c.
pub async fn serve(root: PathBuf, addr: SocketAddr) -> std::io::Result<()> {
    let store = Store::open(root).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
