//! Minimal HTTP/1.1 search endpoint. Models and index are loaded once and
//! shared read-only between requests.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use rrsearch::cascade::{CascadeConfig, SearchEngine, SearchMode};
use serde_json::json;

use crate::commands::{load_engine, request_config, search_body, CliResult};
use crate::config::AppConfig;
use crate::error::CliError;

struct AppState {
    engine: SearchEngine,
    cascade: CascadeConfig,
}

pub fn router(engine: SearchEngine, cascade: CascadeConfig) -> Router {
    let state = Arc::new(AppState { engine, cascade });
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/search", get(search))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn int_param(params: &HashMap<String, String>, name: &str) -> Result<Option<usize>, Response> {
    params
        .get(name)
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| error(StatusCode::BAD_REQUEST, format!("{name} must be a non-negative integer, got {v:?}")))
        })
        .transpose()
}

/// `GET /search?q=<text>&k=<int>&n=<int>`
async fn search(State(state): State<Arc<AppState>>, Query(params): Query<HashMap<String, String>>) -> Response {
    let Some(q) = params.get("q").cloned() else {
        return error(StatusCode::BAD_REQUEST, "missing query parameter q");
    };
    let (k, n) = match (int_param(&params, "k"), int_param(&params, "n")) {
        (Ok(k), Ok(n)) => (k, n),
        (Err(r), _) | (_, Err(r)) => return r,
    };
    let cfg = request_config(&state.cascade, k, n);
    let st = Arc::clone(&state);
    let outcome = tokio::task::spawn_blocking(move || search_body(&st.engine, SearchMode::Rr, &q, &cfg)).await;
    match outcome {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("search task failed: {e}")),
    }
}

/// Blocks until interrupted. Prints the bound address once listening.
pub fn serve(cfg: &AppConfig) -> CliResult {
    let engine = load_engine(cfg)?;
    let app = router(engine, cfg.cascade);
    let addr = SocketAddr::new(cfg.bind, cfg.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(rrsearch::Error::from)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
    .map_err(|e| CliError::Data(e.into()))
}
