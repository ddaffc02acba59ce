// SPDX-License-Identifier: Apache-2.0

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use linterp::fixtures::{fixture, sample_image};
use linterp::io::{decode_image, preview_pgm};
use linterp::service::{router, ServiceState};
use linterp::{capture, InterpreterHandle};
use tower::ServiceExt;

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

async fn get(app: &Router, uri: &str) -> Reply {
    let resp = app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

fn handle(name: &str) -> InterpreterHandle {
    capture(fixture(name).unwrap(), &sample_image()).unwrap()
}

fn app(name: &str) -> Router {
    router(ServiceState::ready(handle(name)))
}

#[tokio::test]
async fn meta_reports_domains() {
    let r = get(&app("tiny-sr"), "/api/meta").await;
    assert_eq!(r.status, StatusCode::OK);
    let m = r.json();
    assert_eq!(m["name"], "tiny-sr");
    assert_eq!(m["input_shape"], serde_json::json!([1, 8, 8]));
    assert_eq!(m["output_shape"], serde_json::json!([1, 16, 16]));
    assert!(m["classes"].is_null());
    assert_eq!(m["layers"].as_array().unwrap().len(), 4);

    let m = get(&app("tiny-classifier"), "/api/meta").await.json();
    assert_eq!(m["classes"], 3);
}

#[tokio::test]
async fn maps_match_the_engine() {
    let h = handle("tiny-sr");
    let app = router(ServiceState::ready(h.clone()));
    let r = get(&app, "/api/row?c=0&y=5&x=9").await;
    assert_eq!(r.status, StatusCode::OK);
    let row = h.row(5 * 16 + 9).unwrap();
    assert_eq!(r.body, preview_pgm(&row).unwrap());
    assert_eq!(r.headers["x-shape"], "1x8x8");
    let max_abs: f64 = r.headers["x-max-abs"].to_str().unwrap().parse().unwrap();
    assert_eq!(max_abs, row.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));

    let side = get(&app, "/api/column?c=0&y=2&x=3&format=json").await.json();
    assert_eq!(side["shape"], serde_json::json!([1, 16, 16]));

    let r = get(&app, "/api/residual").await;
    assert_eq!(decode_image(&r.body).unwrap().shape(), &[1, 16, 16]);

    let r = get(&app, "/api/input").await;
    assert_eq!(decode_image(&r.body).unwrap(), sample_image());
}

#[tokio::test]
async fn bad_requests_explain_themselves() {
    let app = app("tiny-sr");
    let r = get(&app, "/api/row?c=0&y=0&x=16").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.text().contains("x=16"), "{}", r.text());
    let r = get(&app, "/api/column?c=0&y=8&x=0").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.text().contains("input"));
    let r = get(&app, "/api/row?c=0&y=-1&x=0").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/row?c=0&y=1").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/svd?k=0").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/svd?k=17").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/votes").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/nothing").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pending_and_failed_capture() {
    let st = ServiceState::pending();
    let app = router(st.clone());
    assert_eq!(get(&app, "/api/meta").await.status, StatusCode::SERVICE_UNAVAILABLE);
    st.set_failed("boom".into());
    let r = get(&app, "/api/residual").await;
    assert_eq!(r.status, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(r.text().contains("boom"));
    st.set_ready(handle("tiny-sr"));
    assert_eq!(get(&app, "/api/meta").await.status, StatusCode::OK);
}

#[tokio::test]
async fn svd_spectrum_and_eigen_maps() {
    let app = app("tiny-sr");
    let s = get(&app, "/api/svd?k=2").await.json();
    let sigmas = s["sigmas"].as_array().unwrap();
    assert_eq!(sigmas.len(), 2);
    assert!(sigmas[0].as_f64().unwrap() >= sigmas[1].as_f64().unwrap());
    let v = get(&app, "/api/svd?k=2&index=1&side=input").await;
    assert_eq!(v.headers["x-shape"], "1x8x8");
    let u = get(&app, "/api/svd?k=2&index=0&side=output").await;
    assert_eq!(u.headers["x-shape"], "1x16x16");
    assert_eq!(get(&app, "/api/svd?k=2&index=2&side=input").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/svd?k=2&index=0&side=up").await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn classifier_votes() {
    let app = app("tiny-classifier");
    let r = get(&app, "/api/votes").await;
    assert_eq!(r.status, StatusCode::OK);
    let labels = decode_image(&r.body).unwrap();
    assert_eq!(labels.shape(), &[1, 8, 8]);
    let counts = get(&app, "/api/votes?format=json").await.json();
    let total: u64 = counts["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total, 64);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_ones() {
    let app = app("tiny-i2i");
    let uris: Vec<String> = (0..24)
        .map(|i| {
            let kind = if i % 2 == 0 { "row" } else { "column" };
            format!("/api/{kind}?c=0&y={}&x={}", i % 8, (i * 3) % 8)
        })
        .collect();
    let mut serial = Vec::new();
    for u in &uris {
        serial.push(get(&app, u).await.body);
    }
    let fresh = self::app("tiny-i2i");
    let tasks: Vec<_> = uris
        .iter()
        .cloned()
        .map(|u| {
            let a = fresh.clone();
            tokio::spawn(async move { get(&a, &u).await.body })
        })
        .collect();
    for (t, want) in tasks.into_iter().zip(&serial) {
        assert_eq!(&t.await.unwrap(), want);
    }
    // cached replies are identical to the first ones
    for (u, want) in uris.iter().zip(&serial) {
        assert_eq!(&get(&app, u).await.body, want);
    }
}
