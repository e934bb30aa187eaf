use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::service::{AtmService, Credentials};
use crate::model::SignedRequest;
use crate::protocol::{self, ApiError, Health, UpdateRequest, UpdateResponse};

type Shared = State<Arc<AtmService>>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.to_body())).into_response()
    }
}

fn decode<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

/// Runs a blocking handler off the reactor and encodes its result.
async fn blocking<T, F>(svc: Arc<AtmService>, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&AtmService) -> Result<T, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&svc)).await {
        Ok(Ok(value)) => (StatusCode::OK, Json(value)).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::Internal(e.to_string()).into_response(),
    }
}

async fn user_register(State(svc): Shared, body: Bytes) -> Response {
    match decode::<SignedRequest>(&body) {
        Ok(req) => blocking(svc, move |s| s.handle_user_register(&req)).await,
        Err(e) => e.into_response(),
    }
}

async fn job_register(State(svc): Shared, body: Bytes) -> Response {
    match decode::<SignedRequest>(&body) {
        Ok(req) => blocking(svc, move |s| s.handle_job_register(&req)).await,
        Err(e) => e.into_response(),
    }
}

async fn job_update(State(svc): Shared, body: Bytes) -> Response {
    match decode::<UpdateRequest>(&body) {
        Ok(req) => {
            blocking(svc, move |s| {
                s.handle_job_update(&req.job_id, &req.password, req.event)
                    .map(|seq| UpdateResponse { seq })
            })
            .await
        }
        Err(e) => e.into_response(),
    }
}

async fn job_status(State(svc): Shared, Query(params): Query<HashMap<String, String>>) -> Response {
    let (Some(job_id), Some(password)) = (params.get("job_id"), params.get("password")) else {
        return ApiError::BadRequest("job_id and password are required".into()).into_response();
    };
    let creds = Credentials::Ticket {
        job_id: job_id.clone(),
        password: password.clone(),
    };
    blocking(svc, move |s| s.handle_status_query(&creds)).await
}

async fn job_query(State(svc): Shared, body: Bytes) -> Response {
    match decode::<SignedRequest>(&body) {
        Ok(req) => {
            let creds = Credentials::Signed(req);
            blocking(svc, move |s| s.handle_status_query(&creds)).await
        }
        Err(e) => e.into_response(),
    }
}

async fn healthz(State(svc): Shared) -> Json<Health> {
    Json(Health {
        server_id: svc.server_id().to_string(),
    })
}

pub(super) fn router(service: Arc<AtmService>) -> Router {
    Router::new()
        .route(protocol::USER_REGISTER, post(user_register))
        .route(protocol::JOB_REGISTER, post(job_register))
        .route(protocol::JOB_UPDATE, post(job_update))
        .route(protocol::JOB_STATUS, get(job_status))
        .route(protocol::JOB_QUERY, post(job_query))
        .route(protocol::HEALTHZ, get(healthz))
        .with_state(service)
}
