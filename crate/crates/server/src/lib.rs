//! Read-only HTTP/JSON API over a computed store.
//!
//! Artifacts are served as the exact bytes found on disk. The only
//! responses assembled at request time are the city list, error bodies,
//! time-sliced series (`from`/`to`) and cross-model comparisons.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{middleware, Json, Router};
use citypulse_core::clusters::{compare_models, ClusterModel};
use citypulse_core::density::Metric;
use citypulse_core::ingest::parse_timestamp;
use citypulse_core::profiles::Resolution;
use citypulse_core::store::{Layout, Manifest, Meta, RegionInfo, SeriesExport, STORE_VERSION};
use citypulse_core::ActivityType;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub const STORE_VERSION_HEADER: &str = "x-store-version";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("store directory {0} does not exist")]
    Missing(PathBuf),
    #[error("no built city found under {0}")]
    Empty(PathBuf),
    #[error("{path}: store version {found} is not supported (expected {STORE_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error(transparent)]
    Core(#[from] citypulse_core::Error),
}

/// One city directory, with its small index files held in memory.
#[derive(Debug)]
pub struct City {
    pub layout: Layout,
    pub manifest: Manifest,
    pub meta: Meta,
    pub regions: Vec<RegionInfo>,
    region_ids: HashSet<String>,
}

impl City {
    fn open(dir: &Path) -> Result<Self, LoadError> {
        let layout = Layout::new(dir);
        let manifest = Manifest::load(&layout.manifest())?;
        if manifest.store_version != STORE_VERSION {
            return Err(LoadError::Version {
                path: dir.to_path_buf(),
                found: manifest.store_version,
            });
        }
        let read = |p: PathBuf| std::fs::read(&p).map_err(|e| citypulse_core::Error::io(p, e));
        let meta: Meta = serde_json::from_slice(&read(layout.meta())?).map_err(citypulse_core::Error::from)?;
        let regions: Vec<RegionInfo> =
            serde_json::from_slice(&read(layout.regions())?).map_err(citypulse_core::Error::from)?;
        let region_ids = regions.iter().map(|r| r.region_id.clone()).collect();
        Ok(City {
            layout,
            manifest,
            meta,
            regions,
            region_ids,
        })
    }
}

/// Every city of a store root, keyed by city id.
#[derive(Debug)]
pub struct Store {
    pub root: PathBuf,
    pub cities: BTreeMap<String, City>,
}

impl Store {
    /// Opens a store root holding one directory per city, or a single city
    /// directory.
    pub fn open(root: &Path) -> Result<Self, LoadError> {
        if !root.is_dir() {
            return Err(LoadError::Missing(root.to_path_buf()));
        }
        let mut cities = BTreeMap::new();
        if root.join("manifest.json").is_file() {
            let c = City::open(root)?;
            cities.insert(c.manifest.city_id.clone(), c);
        } else {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
                .map_err(|e| citypulse_core::Error::io(root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("manifest.json").is_file())
                .collect();
            dirs.sort();
            for d in dirs {
                let c = City::open(&d)?;
                log::info!("loaded city {} from {}", c.manifest.city_id, d.display());
                cities.insert(c.manifest.city_id.clone(), c);
            }
        }
        if cities.is_empty() {
            return Err(LoadError::Empty(root.to_path_buf()));
        }
        Ok(Store {
            root: root.to_path_buf(),
            cities,
        })
    }
}

/// Error response body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_parameter", message)
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;
type Params = Query<HashMap<String, String>>;

type Shared = Arc<Store>;

fn city<'a>(store: &'a Store, id: &str) -> Result<&'a City, ApiError> {
    store
        .cities
        .get(id)
        .ok_or_else(|| ApiError::not_found("city_not_found", format!("unknown city `{id}`")))
}

fn region<'a>(c: &'a City, id: &str) -> Result<&'a str, ApiError> {
    c.region_ids
        .get(id)
        .map(String::as_str)
        .ok_or_else(|| ApiError::not_found("region_not_found", format!("unknown region `{id}` in city `{}`", c.meta.city_id)))
}

fn activity(q: &HashMap<String, String>, key: &str) -> Result<Option<ActivityType>, ApiError> {
    q.get(key)
        .map(|s| s.parse::<ActivityType>().map_err(|e| ApiError::bad(e.to_string())))
        .transpose()
}

fn activity_or_default(q: &HashMap<String, String>) -> Result<ActivityType, ApiError> {
    Ok(activity(q, "type")?.unwrap_or(ActivityType::Calls))
}

fn timestamp(q: &HashMap<String, String>, key: &str) -> Result<Option<chrono::DateTime<chrono::Utc>>, ApiError> {
    q.get(key)
        .map(|s| parse_timestamp(s).ok_or_else(|| ApiError::bad(format!("`{key}` must be an ISO-8601 UTC timestamp"))))
        .transpose()
}

fn json_bytes(bytes: Vec<u8>, content_type: &'static str) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

async fn artifact(path: PathBuf, content_type: &'static str) -> ApiResult {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(json_bytes(bytes, content_type)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(ApiError::not_found(
            "artifact_not_found",
            format!("{} is not in the store", path.file_name().unwrap_or_default().to_string_lossy()),
        )),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", e.to_string())),
    }
}

const JSON: &str = "application/json";
const NDJSON: &str = "application/x-ndjson";

#[derive(Serialize)]
struct CityEntry<'a> {
    city_id: &'a str,
    stage: &'a citypulse_core::store::Stage,
    config: &'a citypulse_core::CityConfig,
    n_rows: u32,
    n_cols: u32,
}

async fn cities(State(store): State<Shared>) -> Json<Vec<serde_json::Value>> {
    Json(
        store
            .cities
            .values()
            .map(|c| {
                serde_json::to_value(CityEntry {
                    city_id: &c.meta.city_id,
                    stage: &c.manifest.stage,
                    config: &c.manifest.config,
                    n_rows: c.meta.n_rows,
                    n_cols: c.meta.n_cols,
                })
                .unwrap()
            })
            .collect(),
    )
}

async fn meta(State(store): State<Shared>, UrlPath(c): UrlPath<String>) -> ApiResult {
    artifact(city(&store, &c)?.layout.meta(), JSON).await
}

async fn manifest(State(store): State<Shared>, UrlPath(c): UrlPath<String>) -> ApiResult {
    artifact(city(&store, &c)?.layout.manifest(), JSON).await
}

async fn regions(State(store): State<Shared>, UrlPath(c): UrlPath<String>) -> ApiResult {
    artifact(city(&store, &c)?.layout.regions(), JSON).await
}

async fn series(State(store): State<Shared>, UrlPath((c, r)): UrlPath<(String, String)>, Query(q): Params) -> ApiResult {
    let city = city(&store, &c)?;
    let r = region(city, &r)?;
    let t = activity_or_default(&q)?;
    let res = match q.get("res") {
        Some(s) => s.parse::<Resolution>().map_err(|e| ApiError::bad(e.to_string()))?,
        None => Resolution::Min15,
    };
    let (from, to) = (timestamp(&q, "from")?, timestamp(&q, "to")?);
    let path = city.layout.series(r, t, res);
    if from.is_none() && to.is_none() {
        return artifact(path, JSON).await;
    }
    let full = artifact(path, JSON).await?;
    let bytes = axum::body::to_bytes(full.into_body(), usize::MAX)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", e.to_string()))?;
    let export: SeriesExport = serde_json::from_slice(&bytes)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "corrupt_artifact", e.to_string()))?;
    Ok(json_bytes(serde_json::to_vec(&export.slice(from, to)).unwrap(), JSON))
}

async fn typical_week(
    State(store): State<Shared>,
    UrlPath((c, r)): UrlPath<(String, String)>,
    Query(q): Params,
) -> ApiResult {
    let city = city(&store, &c)?;
    let r = region(city, &r)?;
    let t = activity_or_default(&q)?;
    let normalized = match q.get("normalized").map(String::as_str) {
        None | Some("true") | Some("1") => true,
        Some("false") | Some("0") => false,
        Some(other) => return Err(ApiError::bad(format!("`normalized` must be true or false, got `{other}`"))),
    };
    artifact(city.layout.profile(r, t, normalized), JSON).await
}

async fn residuals(State(store): State<Shared>, UrlPath((c, r)): UrlPath<(String, String)>, Query(q): Params) -> ApiResult {
    let city = city(&store, &c)?;
    let r = region(city, &r)?;
    artifact(city.layout.residuals(r, activity_or_default(&q)?), JSON).await
}

async fn events(State(store): State<Shared>, UrlPath((c, r)): UrlPath<(String, String)>, Query(q): Params) -> ApiResult {
    let city = city(&store, &c)?;
    let r = region(city, &r)?;
    artifact(city.layout.events(r, activity_or_default(&q)?), NDJSON).await
}

fn parse_k(s: &str) -> Result<usize, ApiError> {
    s.parse().map_err(|_| ApiError::bad(format!("`k` must be a positive integer, got `{s}`")))
}

fn model_k(city: &City, k: usize) -> Result<PathBuf, ApiError> {
    if !city.meta.cluster_ks.contains(&k) {
        return Err(ApiError::not_found(
            "k_not_found",
            format!("no model for k = {k}; available: {:?}", city.meta.cluster_ks),
        ));
    }
    Ok(city.layout.cluster_model(k))
}

async fn clusters(State(store): State<Shared>, UrlPath(c): UrlPath<String>, Query(q): Params) -> ApiResult {
    let city = city(&store, &c)?;
    let k = match q.get("k") {
        Some(s) => parse_k(s)?,
        None => city.manifest.options.as_ref().map_or(5, |o| o.k),
    };
    artifact(model_k(city, k)?, JSON).await
}

async fn select_k(State(store): State<Shared>, UrlPath(c): UrlPath<String>) -> ApiResult {
    artifact(city(&store, &c)?.layout.select_k(), JSON).await
}

async fn load_model(path: PathBuf) -> Result<ClusterModel, ApiError> {
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "corrupt_artifact", e.to_string()))
}

async fn compare(
    State(store): State<Shared>,
    UrlPath((c, k)): UrlPath<(String, String)>,
    Query(q): Params,
) -> ApiResult {
    let here = city(&store, &c)?;
    let k = parse_k(&k)?;
    let other_id = q.get("other_city").cloned().unwrap_or_else(|| c.clone());
    let other = city(&store, &other_id)?;
    let other_k = match q.get("other_k") {
        Some(s) => parse_k(s)?,
        None => k,
    };
    let a = load_model(model_k(here, k)?).await?;
    let b = load_model(model_k(other, other_k)?).await?;
    let cmp = compare_models(&a, &b)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "incompatible_models", e.to_string()))?;
    let body = json!({
        "city": c,
        "k": k,
        "labels": a.labels,
        "other_city": other_id,
        "other_k": other_k,
        "other_labels": b.labels,
        "distances": cmp.distances,
        "matches": cmp.matches,
    });
    Ok(Json(body).into_response())
}

async fn density(State(store): State<Shared>, UrlPath(c): UrlPath<String>, Query(q): Params) -> ApiResult {
    let city = city(&store, &c)?;
    let metric = match q.get("metric") {
        Some(s) => s.parse::<Metric>().map_err(|e| ApiError::bad(e.to_string()))?,
        None => Metric::Volume,
    };
    let t = activity_or_default(&q)?;
    let other = activity(&q, "other")?;
    match (metric, other) {
        (Metric::PairRatio, None) => return Err(ApiError::bad("pair_ratio needs `other`")),
        (Metric::PairRatio, Some(o)) if o == t => return Err(ApiError::bad("`other` must differ from `type`")),
        (Metric::Volume | Metric::Ratio, Some(_)) => return Err(ApiError::bad("`other` applies to pair_ratio only")),
        _ => {}
    }
    let (from, to) = (timestamp(&q, "from")?, timestamp(&q, "to")?);
    let periods = &city.meta.density_periods;
    let start = from.unwrap_or(city.meta.period_start);
    let end = to.unwrap_or(city.meta.period_end);
    let entry = periods.iter().find(|p| p.start == start && p.end == end).ok_or_else(|| {
        ApiError::not_found(
            "period_not_found",
            format!(
                "no density map for that period; available: {}",
                periods.iter().map(|p| p.key.as_str()).collect::<Vec<_>>().join(", ")
            ),
        )
    })?;
    artifact(city.layout.density(metric, t, other, &entry.key), JSON).await
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("not_found", "no such resource")
}

async fn stamp_version(mut res: Response) -> Response {
    res.headers_mut().insert(STORE_VERSION_HEADER, HeaderValue::from(STORE_VERSION));
    res
}

/// Builds the API router; with `ui`, non-API paths serve static files from
/// that directory.
pub fn router(store: Arc<Store>, ui: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/cities", get(cities))
        .route("/api/cities/{c}/meta", get(meta))
        .route("/api/cities/{c}/manifest", get(manifest))
        .route("/api/cities/{c}/regions", get(regions))
        .route("/api/cities/{c}/regions/{r}/series", get(series))
        .route("/api/cities/{c}/regions/{r}/typicalweek", get(typical_week))
        .route("/api/cities/{c}/regions/{r}/residuals", get(residuals))
        .route("/api/cities/{c}/regions/{r}/events", get(events))
        .route("/api/cities/{c}/clusters", get(clusters))
        .route("/api/cities/{c}/clusters/select_k", get(select_k))
        .route("/api/cities/{c}/clusters/{k}/compare", get(compare))
        .route("/api/cities/{c}/density", get(density))
        .route("/api/{*rest}", get(api_not_found))
        .with_state(store);
    let app = match ui {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(api_not_found),
    };
    app.layer(middleware::map_response(stamp_version))
}

/// Serves the store until the process is stopped.
pub async fn serve(store_dir: &Path, addr: SocketAddr, ui: Option<&Path>) -> Result<(), ServeError> {
    let store = Arc::new(Store::open(store_dir)?);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(ServeError::Bind)?;
    log::info!(
        "serving {} cities from {} on http://{}",
        store.cities.len(),
        store_dir.display(),
        listener.local_addr().map_err(ServeError::Bind)?
    );
    axum::serve(listener, router(store, ui)).await.map_err(ServeError::Serve)
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("cannot bind: {0}")]
    Bind(io::Error),
    #[error("server error: {0}")]
    Serve(io::Error),
}
