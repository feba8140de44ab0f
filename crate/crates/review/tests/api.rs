use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use lance_core::backends::stub::make_stub_suite;
use lance_core::fixtures::write_fixture_suite;
use lance_core::model::{LogicalClock, PipelineConfig};
use lance_core::pipeline::{run_lance, RunOptions};
use lance_core::review::ReviewStore;
use lance_review::router;

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
}

fn generated_run(images: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let suite_dir = dir.path().join("suite");
    let suite = write_fixture_suite(&suite_dir, images).unwrap();
    let out = dir.path().join("out");
    let opts = RunOptions { sync: false, ..Default::default() };
    let summary = run_lance(&suite, &suite_dir, &PipelineConfig::default(), &make_stub_suite(0), &out, &opts).unwrap();
    Fixture {
        _dir: dir,
        manifest: summary.manifest,
    }
}

fn app(f: &Fixture) -> Router {
    let store = ReviewStore::open(&f.manifest, Box::new(LogicalClock::default())).unwrap();
    router(Arc::new(store))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value, rater: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::post(uri).header("content-type", "application/json");
    if let Some(r) = rater {
        req = req.header("x-rater-id", r);
    }
    call(app, req.body(Body::from(body.to_string())).unwrap()).await
}

fn rating(record: &str, rater: &str, realism: u8) -> Value {
    json!({
        "record_id": record,
        "rater_id": rater,
        "realism": realism,
        "edit_success": 4,
        "fidelity": 4,
        "label_consistent": true,
    })
}

fn ids(page: &Value) -> Vec<String> {
    page["items"].as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn type_filter_returns_exactly_that_type() {
    let f = generated_run(4);
    let app = app(&f);
    let (status, body) = get(&app, "/records?type=DOMAIN&page_size=100").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["schema_version"], 1);
    let items = body["items"].as_array().unwrap();
    assert!(!items.is_empty());
    assert!(items.iter().all(|i| i["perturbation_type"] == "DOMAIN"));
    let (_, all) = get(&app, "/records?page_size=100").await;
    let domain_total = all["items"].as_array().unwrap().iter().filter(|i| i["perturbation_type"] == "DOMAIN").count();
    assert_eq!(items.len(), domain_total);
}

#[tokio::test]
async fn pagination_is_deterministic() {
    let f = generated_run(5);
    let app = app(&f);
    let (_, first) = get(&app, "/records?type=DOMAIN&page_size=100").await;
    assert_eq!(first["total"], 5);
    let mut seen = Vec::new();
    let mut sizes = Vec::new();
    for p in 0..3 {
        let (_, page) = get(&app, &format!("/records?type=DOMAIN&page_size=2&page={p}")).await;
        sizes.push(page["items"].as_array().unwrap().len());
        seen.extend(ids(&page));
    }
    assert_eq!(sizes, vec![2, 2, 1]);
    assert_eq!(seen, ids(&first));
}

#[tokio::test]
async fn bad_filter_values_are_rejected() {
    let f = generated_run(1);
    let app = app(&f);
    let (status, body) = get(&app, "/records?type=COLOUR").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("COLOUR"));
    assert_eq!(get(&app, "/records?accepted=maybe").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/records?page_size=0").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn record_detail_has_captions_and_images() {
    let f = generated_run(1);
    let app = app(&f);
    let (_, page) = get(&app, "/records").await;
    let id = ids(&page)[0].clone();
    let (status, body) = get(&app, &format!("/records/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!body["record"]["caption"].as_str().unwrap().is_empty());
    assert!(!body["record"]["edited_caption"].as_str().unwrap().is_empty());
    for key in ["image", "original", "reconstruction"] {
        let url = body["urls"][key].as_str().unwrap();
        let resp = app.clone().oneshot(Request::get(url).body(Body::empty()).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK, "{url}");
    }
    assert_eq!(get(&app, "/records/nope").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ratings_validate_and_aggregate() {
    let f = generated_run(3);
    let app = app(&f);
    let (_, page) = get(&app, "/records?type=SUBJECT").await;
    let subjects = ids(&page);
    assert_eq!(subjects.len(), 3);

    let (status, body) = post(&app, "/ratings", rating(&subjects[0], "r1", 6), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("realism"));
    let (status, _) = post(&app, "/ratings", rating("missing", "r1", 3), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    for (id, score) in subjects.iter().zip([4, 4, 5]) {
        let (status, body) = post(&app, "/ratings", rating(id, "r1", score), None).await;
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!(body["schema_version"], 1);
    }
    let (_, agg) = get(&app, "/aggregate").await;
    let realism = &agg["per_type"]["SUBJECT"]["realism"];
    assert!((realism["mean"].as_f64().unwrap() - 13.0 / 3.0).abs() < 1e-12);
    assert!((realism["std"].as_f64().unwrap() - (2.0f64 / 9.0).sqrt()).abs() < 1e-12);
    assert_eq!(agg["per_type"]["SUBJECT"]["label_consistent_pct"], 100.0);
    assert!(agg["table"].as_str().unwrap().contains("4.33±0.47"));

    let (_, unrated) = get(&app, "/records?type=SUBJECT&unrated_by=r1").await;
    assert_eq!(unrated["total"], 0);
}

#[tokio::test]
async fn resubmission_overwrites_and_persists() {
    let f = generated_run(1);
    let app = app(&f);
    let (_, page) = get(&app, "/records").await;
    let id = ids(&page)[0].clone();
    post(&app, "/ratings", rating(&id, "r1", 2), None).await;
    post(&app, "/ratings", rating(&id, "r1", 5), None).await;
    let (_, agg) = get(&app, "/aggregate").await;
    assert_eq!(agg["overall"]["n_ratings"], 1);
    assert_eq!(agg["overall"]["realism"]["mean"], 5.0);

    // a fresh store replays the ratings from the manifest
    let reopened = self::app(&f);
    let (_, agg) = get(&reopened, "/aggregate").await;
    assert_eq!(agg["overall"]["realism"]["mean"], 5.0);
}

#[tokio::test]
async fn rater_header_supplies_rater() {
    let f = generated_run(1);
    let app = app(&f);
    let (_, page) = get(&app, "/records").await;
    let id = ids(&page)[0].clone();
    let (status, _) = post(&app, "/ratings", rating(&id, "", 3), Some("hdr")).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, unrated) = get(&app, "/records?unrated_by=hdr&page_size=100").await;
    assert!(!ids(&unrated).contains(&id));
    let (status, _) = post(&app, "/ratings", rating(&id, "other", 3), Some("hdr")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn exclusion_removes_record_from_export() {
    let f = generated_run(2);
    let app = app(&f);
    let (_, page) = get(&app, "/records?accepted=true").await;
    let accepted = ids(&page);
    let (_, before) = post(&app, "/export", json!({}), None).await;
    let members = |v: &Value| -> Vec<String> {
        v["suite"]["samples"].as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(members(&before), accepted);

    let mut r = rating(&accepted[0], "r1", 3);
    r["excluded"] = json!(true);
    r["ethical_issue"] = json!("depicts a stereotype");
    post(&app, "/ratings", r, None).await;
    let (_, after) = post(&app, "/export", json!({}), None).await;
    assert_eq!(members(&after), accepted[1..].to_vec());
    assert_eq!(after["excluded"], json!([accepted[0]]));
    let (_, again) = post(&app, "/export", json!({}), None).await;
    assert_eq!(again, after);
}
