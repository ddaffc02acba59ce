// SPDX-License-Identifier: Apache-2.0

//! HTTP routes over one captured interpreter.
//!
//! | route | payload |
//! |---|---|
//! | `GET /api/meta` | JSON: name, shapes, class count, layers |
//! | `GET /api/input` | 8-bit image of the reference input |
//! | `GET /api/residual` | preview of `r` |
//! | `GET /api/row?c=&y=&x=` | preview of the row for an output element |
//! | `GET /api/column?c=&y=&x=` | preview of the column for an input element |
//! | `GET /api/svd?k=` | JSON spectrum; with `&index=i&side=input\|output` a preview |
//! | `GET /api/votes` | PGM of vote labels |
//!
//! Map previews carry `x-max-abs` and `x-shape` headers; `format=json`
//! returns the sidecar instead of the image.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use lru::LruCache;
use serde_json::json;

use crate::attribution::{Attribution, PdNormalization};
use crate::engine::InterpreterHandle;
use crate::error::Error;
use crate::io::{encode_8bit, encode_netpbm, preview_pgm, Sidecar};
use crate::spectral::{svd_topk, SvdConfig, SvdResult};
use crate::tensor::{flat_index, image_dims, Tensor};

const CACHE_ENTRIES: usize = 64;
const MAX_SVD_K: usize = 16;

enum Phase {
    Capturing,
    Ready(InterpreterHandle),
    Failed(String),
}

#[derive(Clone)]
enum Cached {
    Map(Arc<Tensor>),
    Svd(Arc<SvdResult>),
    Votes(Arc<Vec<u8>>),
}

/// Shared between handlers; the probe cache is the only mutable part once
/// capture has finished.
#[derive(Clone)]
pub struct ServiceState {
    phase: Arc<RwLock<Phase>>,
    cache: Arc<Mutex<LruCache<String, Cached>>>,
}

impl ServiceState {
    pub fn pending() -> Self {
        Self {
            phase: Arc::new(RwLock::new(Phase::Capturing)),
            cache: Arc::new(Mutex::new(LruCache::new(
                NonZeroUsize::new(CACHE_ENTRIES).expect("nonzero"),
            ))),
        }
    }

    pub fn ready(handle: InterpreterHandle) -> Self {
        let s = Self::pending();
        s.set_ready(handle);
        s
    }

    pub fn set_ready(&self, handle: InterpreterHandle) {
        *self.phase.write().expect("phase lock") = Phase::Ready(handle);
    }

    pub fn set_failed(&self, msg: String) {
        *self.phase.write().expect("phase lock") = Phase::Failed(msg);
    }

    fn handle(&self) -> Result<InterpreterHandle, ApiError> {
        match &*self.phase.read().expect("phase lock") {
            Phase::Ready(h) => Ok(h.clone()),
            Phase::Capturing => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "capture in progress".into())),
            Phase::Failed(m) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("capture failed: {m}"))),
        }
    }

    async fn cached(
        &self,
        key: String,
        compute: impl FnOnce() -> crate::Result<Cached> + Send + 'static,
    ) -> Result<Cached, ApiError> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = tokio::task::spawn_blocking(compute)
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
        self.cache.lock().expect("cache lock").put(key, v.clone());
        Ok(v)
    }
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Index { .. } | Error::Config(_) | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::Refused(_) | Error::Contract(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], self.1).into_response()
    }
}

type Params = Query<HashMap<String, String>>;

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn param(q: &HashMap<String, String>, name: &str) -> Result<usize, ApiError> {
    let v = q.get(name).ok_or_else(|| bad(format!("missing query parameter '{name}'")))?;
    v.parse()
        .map_err(|_| bad(format!("query parameter '{name}' must be a non-negative integer, got '{v}'")))
}

fn pixel(q: &HashMap<String, String>, shape: &[usize], domain: &str) -> Result<usize, ApiError> {
    let (c, y, x) = (param(q, "c")?, param(q, "y")?, param(q, "x")?);
    let (ch, h, w) = image_dims(shape)?;
    if c >= ch || y >= h || x >= w {
        return Err(bad(format!(
            "pixel (c={c}, y={y}, x={x}) is outside the {domain} domain {ch}×{h}×{w}"
        )));
    }
    Ok(flat_index(shape, c, y, x)?)
}

fn wants_json(q: &HashMap<String, String>) -> bool {
    q.get("format").is_some_and(|f| f == "json")
}

const PGM: &str = "image/x-portable-graymap";

fn map_response(map: &Tensor, q: &HashMap<String, String>) -> Result<Response, ApiError> {
    let side = Sidecar::of(map);
    if wants_json(q) {
        return Ok(Json(side).into_response());
    }
    let shape = map.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
    let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, PGM)], preview_pgm(map)?).into_response();
    let headers = resp.headers_mut();
    headers.insert("x-max-abs", HeaderValue::from_str(&side.max_abs.to_string()).expect("ascii"));
    headers.insert("x-shape", HeaderValue::from_str(&shape).expect("ascii"));
    Ok(resp)
}

async fn meta(State(st): State<ServiceState>) -> Result<Response, ApiError> {
    let h = st.handle()?;
    let m = h.model();
    let classes = (m.output_shape().len() == 1).then(|| h.output_len());
    let layers: Vec<_> = m
        .layers()
        .iter()
        .map(|l| json!({ "id": l.id, "kind": l.kind().name() }))
        .collect();
    Ok(Json(json!({
        "name": m.name(),
        "input_shape": m.input_shape(),
        "output_shape": m.output_shape(),
        "classes": classes,
        "top_score": h.reference_output().argmax(),
        "sequential": m.is_sequential(),
        "layers": layers,
    }))
    .into_response())
}

async fn input(State(st): State<ServiceState>, Query(q): Params) -> Result<Response, ApiError> {
    let h = st.handle()?;
    let x0 = h.reference_input();
    if wants_json(&q) {
        return Ok(Json(Sidecar::of(x0)).into_response());
    }
    let (c, height, w) = image_dims(x0.shape())?;
    let (kind, img) = if c == 3 {
        ("image/x-portable-pixmap", x0.clone())
    } else {
        (PGM, x0.clone().reshape(&[1, c * height, w])?)
    };
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, kind)], encode_8bit(&img)?).into_response())
}

async fn residual(State(st): State<ServiceState>, Query(q): Params) -> Result<Response, ApiError> {
    let h = st.handle()?;
    map_response(h.residual()?, &q)
}

async fn probe(st: ServiceState, q: HashMap<String, String>, row: bool) -> Result<Response, ApiError> {
    let h = st.handle()?;
    let (shape, domain, kind) = if row {
        (h.output_shape().to_vec(), "output", "row")
    } else {
        (h.input_shape().to_vec(), "input", "column")
    };
    let k = pixel(&q, &shape, domain)?;
    let v = st
        .cached(format!("{kind}:{k}"), move || {
            let t = if row { h.row(k)? } else { h.column(k)? };
            Ok(Cached::Map(Arc::new(t)))
        })
        .await?;
    let Cached::Map(t) = v else { unreachable!("map key") };
    map_response(&t, &q)
}

async fn row(State(st): State<ServiceState>, Query(q): Params) -> Result<Response, ApiError> {
    probe(st, q, true).await
}

async fn column(State(st): State<ServiceState>, Query(q): Params) -> Result<Response, ApiError> {
    probe(st, q, false).await
}

async fn svd(State(st): State<ServiceState>, Query(q): Params) -> Result<Response, ApiError> {
    let h = st.handle()?;
    let k = param(&q, "k")?;
    if k == 0 || k > MAX_SVD_K.min(h.input_len()).min(h.output_len()) {
        return Err(bad(format!(
            "k must be in 1..={}",
            MAX_SVD_K.min(h.input_len()).min(h.output_len())
        )));
    }
    let v = st
        .cached(format!("svd:{k}"), move || {
            let cfg = SvdConfig { k, ..SvdConfig::default() };
            Ok(Cached::Svd(Arc::new(svd_topk(&h, &cfg)?)))
        })
        .await?;
    let Cached::Svd(res) = v else { unreachable!("svd key") };
    match q.get("index") {
        None => {
            let triplets: Vec<_> = res
                .triplets
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    json!({
                        "index": i,
                        "sigma": t.sigma,
                        "iterations": t.iterations,
                        "converged": t.converged,
                        "degenerate": t.degenerate,
                    })
                })
                .collect();
            Ok(Json(json!({ "k": k, "sigmas": res.sigmas(), "triplets": triplets })).into_response())
        }
        Some(_) => {
            let i = param(&q, "index")?;
            let t = res
                .triplets
                .get(i)
                .ok_or_else(|| bad(format!("index {i} out of range for k={k}")))?;
            match q.get("side").map(String::as_str) {
                Some("input") => map_response(&t.v, &q),
                Some("output") => map_response(&t.u, &q),
                _ => Err(bad("side must be 'input' or 'output'")),
            }
        }
    }
}

async fn votes(State(st): State<ServiceState>, Query(q): Params) -> Result<Response, ApiError> {
    let h = st.handle()?;
    if h.output_shape().len() != 1 {
        return Err(bad("votes need a classifier (vector output)"));
    }
    let classes = h.output_len();
    let shape = h.input_shape().to_vec();
    let v = st
        .cached("votes".into(), move || {
            let vm = Attribution::new(&h)?.votes(PdNormalization::PerStage)?;
            Ok(Cached::Votes(Arc::new(vm.labels.iter().map(|&l| l.min(255) as u8).collect())))
        })
        .await?;
    let Cached::Votes(labels) = v else { unreachable!("votes key") };
    if wants_json(&q) {
        let mut counts = vec![0usize; classes];
        for &l in labels.iter() {
            counts[l as usize] += 1;
        }
        return Ok(Json(json!({ "classes": classes, "counts": counts })).into_response());
    }
    let (c, hh, w) = image_dims(&shape)?;
    let body = encode_netpbm(w, c * hh, 1, &labels)?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, PGM)], body).into_response())
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "unknown route".into())
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/input", get(input))
        .route("/api/residual", get(residual))
        .route("/api/row", get(row))
        .route("/api/column", get(column))
        .route("/api/svd", get(svd))
        .route("/api/votes", get(votes))
        .fallback(not_found)
        .with_state(state)
}
