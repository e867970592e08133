use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{NaiveDate, TimeZone, Utc};
use citypulse_core::profiles::Resolution;
use citypulse_core::store::{build_store, city_dir, BuildOptions, Layout, SeriesExport};
use citypulse_core::synth::{Scenario, ScenarioSpec};
use citypulse_core::ActivityType;
use citypulse_server::{router, Store, STORE_VERSION_HEADER};
use http_body_util::BodyExt;
use tower::ServiceExt;

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    store: Arc<Store>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("store");
        for (id, seed) in [("alpha", 1), ("beta", 2)] {
            let mut spec = ScenarioSpec::default_city();
            spec.seed = seed;
            spec.city.city_id = id.into();
            spec.n_antennas = 80;
            spec.city.period_end = NaiveDate::from_ymd_opt(2013, 4, 22).unwrap();
            spec.events[0].start = Utc.with_ymd_and_hms(2013, 4, 13, 18, 0, 0).unwrap();
            spec.holidays.clear();
            let data = tmp.path().join(id);
            Scenario::new(spec.clone()).unwrap().write_to(&data).unwrap();
            let opts = BuildOptions { k: 3, k_range: vec![2, 3, 4], ..Default::default() };
            build_store(&spec.city, &data, &root, &opts).unwrap();
        }
        let store = Arc::new(Store::open(&root).unwrap());
        Fixture { _tmp: tmp, root, store }
    })
}

async fn get(uri: &str) -> (StatusCode, String, Vec<u8>) {
    let f = fixture();
    let res = router(f.store.clone(), None)
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let version = res.headers().get(STORE_VERSION_HEADER).expect("store version header").to_str().unwrap().to_string();
    assert_eq!(version, "1");
    let ctype = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let status = res.status();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

fn layout(city: &str) -> Layout {
    Layout::new(city_dir(&fixture().root, city))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn error_code(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["error"]["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn lists_cities() {
    let (status, _, body) = get("/api/cities").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["city_id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["alpha", "beta"]);
}

#[tokio::test]
async fn typical_week_is_the_stored_file() {
    let (status, ctype, body) = get("/api/cities/alpha/regions/city/typicalweek?type=CALLS").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "application/json");
    assert_eq!(body, read(&layout("alpha").profile("city", ActivityType::Calls, true)));
    let (_, _, raw) = get("/api/cities/alpha/regions/city/typicalweek?type=sms&normalized=false").await;
    assert_eq!(raw, read(&layout("alpha").profile("city", ActivityType::Sms, false)));
}

#[tokio::test]
async fn region_ids_with_colons_resolve() {
    let regions: serde_json::Value = serde_json::from_slice(&read(&layout("alpha").regions())).unwrap();
    let cell = regions.as_array().unwrap()[0]["region_id"].as_str().unwrap().to_string();
    assert!(cell.contains(':'));
    let (status, _, body) = get(&format!("/api/cities/alpha/regions/{cell}/residuals?type=DATA_UP")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, read(&layout("alpha").residuals(&cell, ActivityType::DataUp)));
    let (_, ctype, body) = get(&format!("/api/cities/alpha/regions/{cell}/events")).await;
    assert_eq!(ctype, "application/x-ndjson");
    assert_eq!(body, read(&layout("alpha").events(&cell, ActivityType::Calls)));
}

#[tokio::test]
async fn series_full_and_sliced() {
    let (_, _, body) = get("/api/cities/alpha/regions/city/series?type=DATA_DOWN&res=day").await;
    assert_eq!(body, read(&layout("alpha").series("city", ActivityType::DataDown, Resolution::Day)));
    let (_, _, body) = get("/api/cities/alpha/regions/city/series").await;
    let full: SeriesExport = serde_json::from_slice(&body).unwrap();
    assert_eq!(body, read(&layout("alpha").series("city", ActivityType::Calls, Resolution::Min15)));

    let (status, _, body) =
        get("/api/cities/alpha/regions/city/series?from=2013-04-02T00:00:00Z&to=2013-04-02T01:00:00Z").await;
    assert_eq!(status, StatusCode::OK);
    let cut: SeriesExport = serde_json::from_slice(&body).unwrap();
    assert_eq!(cut.values, full.values[96..100].to_vec());
    assert_eq!(cut.start, Some(Utc.with_ymd_and_hms(2013, 4, 2, 0, 0, 0).unwrap()));
}

#[tokio::test]
async fn clusters_density_and_meta() {
    let (_, _, body) = get("/api/cities/alpha/clusters?k=2").await;
    assert_eq!(body, read(&layout("alpha").cluster_model(2)));
    let (_, _, body) = get("/api/cities/alpha/clusters").await;
    assert_eq!(body, read(&layout("alpha").cluster_model(3)));
    let (_, _, body) = get("/api/cities/alpha/clusters/select_k").await;
    assert_eq!(body, read(&layout("alpha").select_k()));
    let (_, _, body) = get("/api/cities/alpha/meta").await;
    assert_eq!(body, read(&layout("alpha").meta()));
    let (_, _, body) = get("/api/cities/alpha/regions").await;
    assert_eq!(body, read(&layout("alpha").regions()));

    use citypulse_core::density::Metric;
    let (_, _, body) = get("/api/cities/alpha/density").await;
    assert_eq!(body, read(&layout("alpha").density(Metric::Volume, ActivityType::Calls, None, "all")));
    let (_, _, body) = get("/api/cities/alpha/density?metric=ratio&type=SMS").await;
    assert_eq!(body, read(&layout("alpha").density(Metric::Ratio, ActivityType::Sms, None, "all")));
    let (_, _, body) =
        get("/api/cities/alpha/density?metric=pair_ratio&type=SMS&other=CALLS&from=2013-04-08T00:00:00Z&to=2013-04-15T00:00:00Z")
            .await;
    assert_eq!(
        body,
        read(&layout("alpha").density(Metric::PairRatio, ActivityType::Sms, Some(ActivityType::Calls), "2013-W15"))
    );
}

#[tokio::test]
async fn compare_with_self_and_other_city() {
    let (status, _, body) = get("/api/cities/alpha/clusters/3/compare").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    for m in v["matches"].as_array().unwrap() {
        assert_eq!(m["distance"].as_f64().unwrap(), 0.0);
        assert_eq!(m["a"], m["b"]);
    }
    let (status, _, body) = get("/api/cities/alpha/clusters/3/compare?other_city=beta&other_k=2").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["matches"].as_array().unwrap().len(), 2);
    assert_eq!(v["distances"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn structured_errors() {
    let cases = [
        ("/api/cities/alpha/regions/UNKNOWN/series", StatusCode::NOT_FOUND, "region_not_found"),
        ("/api/cities/nowhere/meta", StatusCode::NOT_FOUND, "city_not_found"),
        ("/api/cities/alpha/clusters?k=9", StatusCode::NOT_FOUND, "k_not_found"),
        ("/api/cities/alpha/clusters?k=x", StatusCode::BAD_REQUEST, "invalid_parameter"),
        ("/api/cities/alpha/regions/city/series?type=FAX", StatusCode::BAD_REQUEST, "invalid_parameter"),
        ("/api/cities/alpha/regions/city/series?res=month", StatusCode::BAD_REQUEST, "invalid_parameter"),
        ("/api/cities/alpha/regions/city/series?from=yesterday", StatusCode::BAD_REQUEST, "invalid_parameter"),
        ("/api/cities/alpha/density?metric=pair_ratio", StatusCode::BAD_REQUEST, "invalid_parameter"),
        ("/api/cities/alpha/density?from=2013-04-03T00:00:00Z", StatusCode::NOT_FOUND, "period_not_found"),
        ("/api/cities/alpha/clusters/3/compare?other_city=nowhere", StatusCode::NOT_FOUND, "city_not_found"),
        ("/api/nothing/here", StatusCode::NOT_FOUND, "not_found"),
        ("/index.html", StatusCode::NOT_FOUND, "not_found"),
    ];
    for (uri, status, code) in cases {
        let (s, ctype, body) = get(uri).await;
        assert_eq!(s, status, "{uri}");
        assert_eq!(ctype, "application/json", "{uri}");
        assert_eq!(error_code(&body), code, "{uri}");
    }
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let uri = "/api/cities/beta/regions/city/residuals?type=SMS";
    let handles: Vec<_> = (0..8).map(|_| tokio::spawn(get(uri))).collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap().2);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn missing_store_fails_to_open() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(Store::open(&tmp.path().join("absent")).is_err());
    assert!(Store::open(tmp.path()).is_err());
}

#[tokio::test]
async fn static_ui_is_served_when_configured() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html></html>").unwrap();
    let app = router(fixture().store.clone(), Some(ui.path()));
    let res = app.oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert!(res.headers().contains_key(STORE_VERSION_HEADER));
}
