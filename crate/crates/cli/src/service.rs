//! HTTP+JSON service over frozen checkpoints: generation, transitions, style
//! mixing, inversion, direction discovery, editing and slice previews.
//!
//! Heavy work runs on blocking threads behind a bounded worker pool. Every
//! response names the checkpoint it was computed from; generated volumes are
//! persisted in the content-addressed store and referenced by id.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use voxgan::inversion::{self, InversionConfig};
use voxgan::latent::{self, DirectionSet, TruncationConfig, DEFAULT_PSI, DEFAULT_STRENGTH, DEFAULT_TRUNCATION};
use voxgan::nn::checkpoint::MANIFEST;
use voxgan::nn::{Arch, Checkpoint, NoiseMode, LATENT_DIM, NUM_STYLES};
use voxgan::training::W_BAR_SAMPLES;
use voxgan::volume::decode_volume;
use voxgan::{Real, Tensor, Volume};

use crate::store::{render_slice, Axis, VolumeStore};

/// Upper bound on volumes produced by one request.
pub const MAX_VOLUMES_PER_REQUEST: usize = 64;
/// Directions returned when `k` is not given.
pub const DEFAULT_DIRECTIONS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<voxgan::Error> for ApiError {
    fn from(e: voxgan::Error) -> Self {
        use voxgan::Error as E;
        match e {
            E::Format(_) => ApiError::BadRequest(e.to_string()),
            E::Param(_) | E::Shape(_) | E::NonFinite(_) | E::Checkpoint(_) | E::Invariant(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, Serialize)]
pub struct RequestRecord {
    pub endpoint: &'static str,
    pub checkpoint: Option<String>,
    pub status: u16,
}

pub struct AppState {
    checkpoints: HashMap<String, Arc<Checkpoint>>,
    directions: Mutex<HashMap<(String, usize), Arc<DirectionSet>>>,
    w_bars: Mutex<HashMap<String, Arc<Vec<f32>>>>,
    store: VolumeStore,
    log: Mutex<Vec<RequestRecord>>,
    workers: Semaphore,
    inversion: InversionConfig,
}

impl AppState {
    pub fn new(
        checkpoints: impl IntoIterator<Item = (String, Checkpoint)>,
        store: VolumeStore,
        inversion: InversionConfig,
        workers: usize,
    ) -> Self {
        Self {
            checkpoints: checkpoints.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            directions: Mutex::default(),
            w_bars: Mutex::default(),
            store,
            log: Mutex::default(),
            workers: Semaphore::new(workers.max(1)),
            inversion,
        }
    }

    /// Load `dir` itself if it is a checkpoint, else every sub-directory that is
    /// one; names are directory names.
    pub fn load_checkpoints(dir: &Path) -> voxgan::Result<Vec<(String, Checkpoint)>> {
        let name_of = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "default".into());
        if dir.join(MANIFEST).exists() {
            return Ok(vec![(name_of(dir), Checkpoint::load(dir)?)]);
        }
        let mut out = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| voxgan::Error::io(dir, e))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths {
            if p.join(MANIFEST).exists() {
                out.push((name_of(&p), Checkpoint::load(&p)?));
            }
        }
        Ok(out)
    }

    pub fn checkpoint_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.checkpoints.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.log.lock().expect("request log").clone()
    }

    fn checkpoint(&self, name: &str) -> ApiResult<Arc<Checkpoint>> {
        self.checkpoints
            .get(name)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown checkpoint {name:?}")))
    }

    fn record(&self, endpoint: &'static str, checkpoint: Option<&str>, status: StatusCode) {
        log::info!("{endpoint} checkpoint={checkpoint:?} status={}", status.as_u16());
        self.log.lock().expect("request log").push(RequestRecord {
            endpoint,
            checkpoint: checkpoint.map(str::to_string),
            status: status.as_u16(),
        });
    }

    fn noise(&self) -> NoiseMode {
        self.inversion.noise()
    }

    fn w_bar(&self, name: &str, ck: &Checkpoint) -> ApiResult<Arc<Vec<f32>>> {
        if let Some(w) = self.w_bars.lock().expect("w_bar cache").get(name) {
            return Ok(w.clone());
        }
        let w = match (&ck.w_bar, ck.generator.as_style()) {
            (Some((w, _)), _) => w.clone(),
            (None, Some(g)) => g.estimate_w_bar(W_BAR_SAMPLES, ck.seed)?,
            (None, None) => return Err(ApiError::Unprocessable("psi truncation needs a style-based checkpoint".into())),
        };
        let w = Arc::new(w);
        self.w_bars.lock().expect("w_bar cache").insert(name.to_string(), w.clone());
        Ok(w)
    }

    fn directions(&self, name: &str, ck: &Checkpoint, k: usize) -> ApiResult<Arc<DirectionSet>> {
        if k == 0 || k > LATENT_DIM {
            return Err(ApiError::Unprocessable(format!("k = {k} outside 1..={LATENT_DIM}")));
        }
        let key = (name.to_string(), k);
        if let Some(d) = self.directions.lock().expect("direction cache").get(&key) {
            return Ok(d.clone());
        }
        let d = Arc::new(latent::generator_directions(&ck.generator, k, ck.seed)?);
        self.directions.lock().expect("direction cache").insert(key, d.clone());
        Ok(d)
    }

    fn store_volume(&self, v: &Volume, checkpoint: &str) -> ApiResult<String> {
        Ok(self.store.put(v, checkpoint)?)
    }
}

/// Run `f` on a blocking thread once a worker slot is free.
async fn work<T, F>(st: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(Arc<AppState>) -> ApiResult<T> + Send + 'static,
{
    let _permit = st
        .workers
        .acquire()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let st = st.clone();
    tokio::task::spawn_blocking(move || f(st))
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn logged<T: IntoResponse>(st: &AppState, endpoint: &'static str, ck: Option<&str>, r: ApiResult<T>) -> Response {
    let resp = r.into_response();
    st.record(endpoint, ck, resp.status());
    resp
}

fn code_tensor(codes: &[Vec<f32>]) -> ApiResult<Tensor> {
    let mut data = Vec::with_capacity(codes.len() * LATENT_DIM);
    for c in codes {
        if c.len() != LATENT_DIM {
            return Err(ApiError::Unprocessable(format!("code has {} values, expected {LATENT_DIM}", c.len())));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::Unprocessable("code contains non-finite values".into()));
        }
        data.extend(c.iter().map(|&v| v as Real));
    }
    Ok(Tensor::new(&[codes.len(), LATENT_DIM], data))
}

fn code_values(code: &[f32]) -> ApiResult<Vec<Real>> {
    Ok(code_tensor(&[code.to_vec()])?.into_data())
}

fn to_f32(v: &[Real]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn preview_url(id: &str, shape: [usize; 3]) -> String {
    format!("/slice/{id}?axis=axial&index={}", shape[0] / 2)
}

#[derive(Serialize)]
struct VolumeRef {
    id: String,
    shape: [usize; 3],
    preview: String,
}

fn volume_ref(st: &AppState, v: &Volume, checkpoint: &str) -> ApiResult<VolumeRef> {
    let id = st.store_volume(v, checkpoint)?;
    Ok(VolumeRef {
        preview: preview_url(&id, v.shape()),
        shape: v.shape(),
        id,
    })
}

// ---------------------------------------------------------------------------
// Handlers

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "checkpoints": st.checkpoint_names(), "requests": st.requests().len() }))
}

async fn list_checkpoints(State(st): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = st
        .checkpoint_names()
        .into_iter()
        .map(|name| {
            let ck = &st.checkpoints[&name];
            json!({
                "checkpoint": name,
                "arch": ck.cfg.arch,
                "full_shape": ck.cfg.full_shape,
                "stage": ck.stage.stage,
                "has_encoder": ck.encoder.is_some(),
            })
        })
        .collect();
    Json(json!({ "checkpoints": list }))
}

fn default_count() -> usize {
    1
}

#[derive(Deserialize)]
struct GenerateReq {
    checkpoint: String,
    #[serde(default)]
    arch: Option<Arch>,
    #[serde(default)]
    truncation: Option<f64>,
    #[serde(default)]
    psi: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_count")]
    count: usize,
    /// Decode these codes instead of sampling.
    #[serde(default)]
    codes: Option<Vec<Vec<f32>>>,
}

async fn generate(State(st): State<Arc<AppState>>, Json(req): Json<GenerateReq>) -> Response {
    let name = req.checkpoint.clone();
    let r = work(&st, move |st| {
        let ck = st.checkpoint(&req.checkpoint)?;
        let arch = ck.cfg.arch;
        if let Some(a) = req.arch {
            if a != arch {
                return Err(ApiError::Unprocessable(format!("checkpoint is {arch}, request says {a}")));
            }
        }
        let codes = match &req.codes {
            Some(c) if c.is_empty() || c.len() > MAX_VOLUMES_PER_REQUEST => {
                return Err(ApiError::Unprocessable(format!("between 1 and {MAX_VOLUMES_PER_REQUEST} codes required")));
            }
            Some(c) => code_tensor(c)?,
            None => {
                if req.count == 0 || req.count > MAX_VOLUMES_PER_REQUEST {
                    return Err(ApiError::Unprocessable(format!("count must lie in 1..={MAX_VOLUMES_PER_REQUEST}")));
                }
                let cfg = match (arch, req.truncation, req.psi) {
                    (_, Some(_), Some(_)) => {
                        return Err(ApiError::Unprocessable("give either truncation or psi, not both".into()))
                    }
                    (Arch::ProGan, t, None) => TruncationConfig::truncnorm(t.unwrap_or(DEFAULT_TRUNCATION)),
                    (Arch::StyleGan, None, p) => {
                        TruncationConfig::psi(p.unwrap_or(DEFAULT_PSI), st.w_bar(&req.checkpoint, &ck)?.to_vec())
                    }
                    (Arch::ProGan, None, Some(_)) => {
                        return Err(ApiError::Unprocessable("psi applies to style-based checkpoints".into()))
                    }
                    (Arch::StyleGan, Some(_), None) => {
                        return Err(ApiError::Unprocessable("truncation level applies to progressive checkpoints".into()))
                    }
                };
                latent::sample_truncated(&cfg, &ck.generator, req.count, req.seed)?
            }
        };
        let vols = latent::generate_each(&ck.generator, &codes, st.noise())?;
        let mut out = Vec::with_capacity(vols.len());
        for (i, v) in vols.iter().enumerate() {
            let r = volume_ref(&st, v, &req.checkpoint)?;
            out.push(json!({
                "id": r.id,
                "shape": r.shape,
                "preview": r.preview,
                "code": to_f32(codes.batch_item(i).data()),
            }));
        }
        Ok(Json(json!({ "checkpoint": req.checkpoint, "arch": arch, "volumes": out })))
    })
    .await;
    logged(&st, "generate", Some(&name), r)
}

#[derive(Deserialize)]
struct TransitionReq {
    checkpoint: String,
    code_a: Vec<f32>,
    code_b: Vec<f32>,
    steps: usize,
}

async fn transition(State(st): State<Arc<AppState>>, Json(req): Json<TransitionReq>) -> Response {
    let name = req.checkpoint.clone();
    let r = work(&st, move |st| {
        let ck = st.checkpoint(&req.checkpoint)?;
        if req.steps > MAX_VOLUMES_PER_REQUEST {
            return Err(ApiError::Unprocessable(format!("steps must lie in 1..={MAX_VOLUMES_PER_REQUEST}")));
        }
        let alphas = latent::transition_alphas(req.steps)?;
        let (a, b) = (code_values(&req.code_a)?, code_values(&req.code_b)?);
        let vols = latent::transition(&ck.generator, &a, &b, &alphas, st.noise())?;
        let mut frames = Vec::with_capacity(vols.len());
        for (alpha, v) in alphas.iter().zip(&vols) {
            let r = volume_ref(&st, v, &req.checkpoint)?;
            frames.push(json!({ "alpha": alpha, "id": r.id, "preview": r.preview }));
        }
        Ok(Json(json!({ "checkpoint": req.checkpoint, "volumes": frames })))
    })
    .await;
    logged(&st, "transition", Some(&name), r)
}

#[derive(Deserialize)]
struct MixReq {
    checkpoint: String,
    source_code: Vec<f32>,
    target_code: Vec<f32>,
    boundary: usize,
}

async fn mix(State(st): State<Arc<AppState>>, Json(req): Json<MixReq>) -> Response {
    let name = req.checkpoint.clone();
    let r = work(&st, move |st| {
        let ck = st.checkpoint(&req.checkpoint)?;
        let g = ck
            .generator
            .as_style()
            .ok_or_else(|| ApiError::Unprocessable("style mixing needs a style-based checkpoint".into()))?;
        if req.boundary > NUM_STYLES {
            return Err(ApiError::Unprocessable(format!("boundary {} outside 0..={NUM_STYLES}", req.boundary)));
        }
        let (s, t) = (code_values(&req.source_code)?, code_values(&req.target_code)?);
        let v = latent::style_mix(g, &s, &t, req.boundary, st.noise())?;
        let r = volume_ref(&st, &v, &req.checkpoint)?;
        Ok(Json(json!({
            "checkpoint": req.checkpoint,
            "boundary": req.boundary,
            "id": r.id,
            "preview": r.preview,
        })))
    })
    .await;
    logged(&st, "mix", Some(&name), r)
}

#[derive(Deserialize)]
struct InvertQuery {
    checkpoint: String,
    #[serde(default)]
    steps: Option<usize>,
}

async fn invert(State(st): State<Arc<AppState>>, Query(q): Query<InvertQuery>, body: Bytes) -> Response {
    let name = q.checkpoint.clone();
    let r = work(&st, move |st| {
        let ck = st.checkpoint(&q.checkpoint)?;
        let (x, _) = decode_volume(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        if x.shape() != ck.cfg.full_shape {
            return Err(ApiError::Unprocessable(format!(
                "volume {:?} does not match checkpoint shape {:?}",
                x.shape(),
                ck.cfg.full_shape
            )));
        }
        let cfg = InversionConfig {
            refine_steps: q.steps.unwrap_or(st.inversion.refine_steps),
            ..st.inversion.clone()
        };
        let input = st.store_volume(&x, &q.checkpoint)?;
        let inv = inversion::invert(&ck, &[&x], &cfg)?;
        let recon = latent::generate_each(&ck.generator, &inv.codes, st.noise())?.remove(0);
        let recon_id = volume_ref(&st, &recon, &q.checkpoint)?;
        let trace: Vec<f64> = inv.trace.iter().map(|o| o[0]).collect();
        let best: Vec<f64> = trace
            .iter()
            .scan(f64::INFINITY, |b, &o| {
                *b = b.min(o);
                Some(*b)
            })
            .collect();
        Ok(Json(json!({
            "checkpoint": q.checkpoint,
            "arch": ck.cfg.arch,
            "volume": input,
            "code": to_f32(inv.codes.data()),
            "reconstruction": recon_id.id,
            "preview": recon_id.preview,
            "updates": inv.updates,
            "init_objective": inv.init_objective[0],
            "objective": inv.objective[0],
            "init_dist": inv.init_dist[0],
            "dist": inv.dist[0],
            "objective_trace": trace,
            "best_trace": best,
            "warning": inv.warning,
        })))
    })
    .await;
    logged(&st, "invert", Some(&name), r)
}

async fn volume(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let r = match st.store.get_bytes(&id) {
        Some(b) => Ok(([(header::CONTENT_TYPE, "application/octet-stream")], b)),
        None => Err(ApiError::NotFound(format!("unknown volume {id}"))),
    };
    logged(&st, "volume", None, r)
}

#[derive(Deserialize)]
struct SliceQuery {
    #[serde(default)]
    axis: Axis,
    #[serde(default)]
    index: Option<usize>,
}

async fn slice(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<SliceQuery>) -> Response {
    let r = (|| {
        let v = st.store.get(&id).ok_or_else(|| ApiError::NotFound(format!("unknown volume {id}")))?;
        let index = q.index.unwrap_or(q.axis.extent(v.shape()) / 2);
        let png = render_slice(&v, q.axis, index).ok_or_else(|| {
            ApiError::NotFound(format!("slice {index} outside 0..{} along {:?}", q.axis.extent(v.shape()), q.axis))
        })?;
        Ok(([(header::CONTENT_TYPE, "image/png")], png))
    })();
    logged(&st, "slice", None, r)
}

#[derive(Deserialize)]
struct DirectionsQuery {
    checkpoint: String,
    #[serde(default)]
    k: Option<usize>,
}

async fn directions(State(st): State<Arc<AppState>>, Query(q): Query<DirectionsQuery>) -> Response {
    let name = q.checkpoint.clone();
    let r = work(&st, move |st| {
        let ck = st.checkpoint(&q.checkpoint)?;
        let k = q.k.unwrap_or(DEFAULT_DIRECTIONS);
        let d = st.directions(&q.checkpoint, &ck, k)?;
        Ok(Json(json!({
            "checkpoint": q.checkpoint,
            "k": k,
            "source": d.source,
            "eigenvalues": d.eigenvalues,
            "directions": d.directions,
        })))
    })
    .await;
    logged(&st, "directions", Some(&name), r)
}

fn default_strength() -> f64 {
    DEFAULT_STRENGTH
}

#[derive(Deserialize)]
struct EditReq {
    checkpoint: String,
    #[serde(default)]
    volume_id: Option<String>,
    #[serde(default)]
    code: Option<Vec<f32>>,
    /// 1-based index into the eigenvalue-sorted directions.
    direction_index: usize,
    #[serde(default = "default_strength")]
    strength: f64,
    #[serde(default)]
    steps: Option<usize>,
}

async fn edit(State(st): State<Arc<AppState>>, Json(req): Json<EditReq>) -> Response {
    let name = req.checkpoint.clone();
    let r = work(&st, move |st| {
        let ck = st.checkpoint(&req.checkpoint)?;
        if req.direction_index == 0 || req.direction_index > LATENT_DIM {
            return Err(ApiError::Unprocessable(format!(
                "direction_index {} outside 1..={LATENT_DIM}",
                req.direction_index
            )));
        }
        let dirs = st.directions(&req.checkpoint, &ck, req.direction_index.max(DEFAULT_DIRECTIONS))?;
        let n = dirs.direction(req.direction_index - 1)?;
        let code = match (&req.volume_id, &req.code) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(ApiError::Unprocessable("give exactly one of volume_id and code".into()))
            }
            (None, Some(c)) => code_values(c)?,
            (Some(id), None) => {
                let x = st.store.get(id).ok_or_else(|| ApiError::NotFound(format!("unknown volume {id}")))?;
                let cfg = InversionConfig {
                    refine_steps: req.steps.unwrap_or(st.inversion.refine_steps),
                    ..st.inversion.clone()
                };
                inversion::invert(&ck, &[&x], &cfg)?.codes.into_data()
            }
        };
        let e = latent::edit_code(&ck.generator, &code, n, req.strength, st.noise())?;
        let edited = volume_ref(&st, &e.edited, &req.checkpoint)?;
        let recon = volume_ref(&st, &e.reconstruction, &req.checkpoint)?;
        let residual = volume_ref(&st, &e.residual, &req.checkpoint)?;
        Ok(Json(json!({
            "checkpoint": req.checkpoint,
            "direction_index": req.direction_index,
            "strength": req.strength,
            "code": to_f32(&e.code),
            "edited_code": to_f32(&e.edited_code),
            "edited": edited.id,
            "reconstruction": recon.id,
            "residual": residual.id,
            "preview": edited.preview,
        })))
    })
    .await;
    logged(&st, "edit", Some(&name), r)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/checkpoints", get(list_checkpoints))
        .route("/generate", post(generate))
        .route("/transition", post(transition))
        .route("/mix", post(mix))
        .route("/invert", post(invert))
        .route("/directions", get(directions))
        .route("/edit", post(edit))
        .route("/volumes/{id}", get(volume))
        .route("/slice/{id}", get(slice))
        .with_state(state)
}

/// Bind `addr` and serve until interrupted; returns the bound address via `on_bind`.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, on_bind: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bind(listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
