//! C interface to `axisline`.
//!
//! Scenes and factor graphs cross the boundary as opaque handles. Every
//! fallible call returns an [`AxlStatus`]; on failure the message is kept
//! per thread and read back with [`axl_last_error_message`]. Strings handed
//! out by the library are released with [`axl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use axisline::ba::{self, FactorGraph, LMConfig, Termination};
use axisline::synth::{self, BenchSettings, Parameterization, Scenario, Scene, SceneConfig};
use axisline::Error;

/// Result of a library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    InvalidArgument = 4,
    /// A geometric precondition failed (degenerate line, point behind the camera, ...).
    Geometry = 5,
    InvalidGraph = 6,
    EmptyScene = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxlScenario {
    Fixed = 0,
    Small = 1,
    Large = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxlParameterization {
    /// Direction fixed, two positional scalars per line.
    TwoP = 0,
    /// Orthonormal representation, four scalars per line.
    FourP = 1,
    /// Inverse depth per line plus two scalars per shared axis.
    ThreeP = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxlTermination {
    ZeroCost = 0,
    CostTolerance = 1,
    ParamTolerance = 2,
    MaxIterations = 3,
    DampingExhausted = 4,
    NonFinite = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxlLmConfig {
    pub max_iters: u32,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub cost_tolerance: f64,
    pub param_tolerance: f64,
    /// Huber width in pixels; 0 disables the kernel.
    pub robust_width_px: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxlReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: u32,
    pub accepted_steps: u32,
    pub wall_time_s: f64,
    pub termination: AxlTermination,
    pub diverged: bool,
    /// True when no accepted step raised the cost.
    pub monotone: bool,
    pub line_params: u32,
    pub dropped_residuals: u32,
}

/// Accuracy of a solved graph against the scene it was built from.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxlMetrics {
    pub error_l: f64,
    pub trans_rmse: f64,
}

/// Synthetic scene with ground truth. Opaque.
pub struct AxlScene(Scene);

/// Factor graph. Opaque.
pub struct AxlGraph(FactorGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: AxlStatus,
    message: String,
}

impl Failure {
    fn new(status: AxlStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidConfig(_) => AxlStatus::InvalidArgument,
            Error::InconsistentGraph(_) | Error::InvalidGraph(_) | Error::Mismatch(_) => AxlStatus::InvalidGraph,
            Error::EmptyScene => AxlStatus::EmptyScene,
            _ => AxlStatus::Geometry,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(AxlStatus::InvalidJson, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AxlStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure::new(AxlStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => AxlStatus::Ok,
        Err(f) => {
            set_last_error(&f.message);
            f.status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(AxlStatus::NullPointer, format!("{name} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(AxlStatus::NullPointer, format!("{name} is null")))
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(AxlStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(AxlStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(AxlStatus::InvalidArgument, "output contains a nul byte"))
}

unsafe fn out_ptr<'a, T>(out: *mut *mut T, name: &str) -> Result<&'a mut *mut T, Failure> {
    let slot = deref_mut(out, name)?;
    *slot = ptr::null_mut();
    Ok(slot)
}

impl From<AxlScenario> for Scenario {
    fn from(s: AxlScenario) -> Self {
        match s {
            AxlScenario::Fixed => Scenario::Fixed,
            AxlScenario::Small => Scenario::Small,
            AxlScenario::Large => Scenario::Large,
        }
    }
}

impl From<AxlParameterization> for Parameterization {
    fn from(p: AxlParameterization) -> Self {
        match p {
            AxlParameterization::TwoP => Parameterization::TwoP,
            AxlParameterization::FourP => Parameterization::FourP,
            AxlParameterization::ThreeP => Parameterization::ThreeP,
        }
    }
}

impl From<Termination> for AxlTermination {
    fn from(t: Termination) -> Self {
        match t {
            Termination::ZeroCost => AxlTermination::ZeroCost,
            Termination::CostTolerance => AxlTermination::CostTolerance,
            Termination::ParamTolerance => AxlTermination::ParamTolerance,
            Termination::MaxIterations => AxlTermination::MaxIterations,
            Termination::DampingExhausted => AxlTermination::DampingExhausted,
            Termination::NonFinite => AxlTermination::NonFinite,
        }
    }
}

impl From<&LMConfig> for AxlLmConfig {
    fn from(c: &LMConfig) -> Self {
        AxlLmConfig {
            max_iters: c.max_iters.try_into().unwrap_or(u32::MAX),
            initial_damping: c.initial_damping,
            damping_up: c.damping_up,
            damping_down: c.damping_down,
            cost_tolerance: c.cost_tolerance,
            param_tolerance: c.param_tolerance,
            robust_width_px: c.robust_width_px,
        }
    }
}

impl From<&AxlLmConfig> for LMConfig {
    fn from(c: &AxlLmConfig) -> Self {
        LMConfig {
            max_iters: c.max_iters as usize,
            initial_damping: c.initial_damping,
            damping_up: c.damping_up,
            damping_down: c.damping_down,
            cost_tolerance: c.cost_tolerance,
            param_tolerance: c.param_tolerance,
            robust_width_px: c.robust_width_px,
        }
    }
}

fn count(n: usize) -> u32 {
    n.try_into().unwrap_or(u32::MAX)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn axl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn axl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn axl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn axl_lm_config_default() -> AxlLmConfig {
    AxlLmConfig::from(&LMConfig::default())
}

/// Generates a scene. `config_json` holds a (possibly partial) scene
/// configuration; NULL uses the defaults.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_scene_generate(
    config_json: *const c_char,
    scenario: AxlScenario,
    out: *mut *mut AxlScene,
) -> AxlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg: SceneConfig = if config_json.is_null() {
            SceneConfig::default()
        } else {
            serde_json::from_str(read_str(config_json, "config_json")?)?
        };
        let scene = synth::generate_scene(&cfg, scenario.into())?;
        *out = Box::into_raw(Box::new(AxlScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` is NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn axl_scene_free(scene: *mut AxlScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Serializes a scene as JSON. Free the result with `axl_string_free`.
///
/// # Safety
/// `scene` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_scene_to_json(scene: *const AxlScene, out: *mut *mut c_char) -> AxlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let scene = deref(scene, "scene")?;
        *out = into_c_string(serde_json::to_string(&scene.0)?)?;
        Ok(())
    })
}

/// Builds the initial factor graph of a scene for one line parameterization.
///
/// # Safety
/// `scene` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_scene_build_graph(
    scene: *const AxlScene,
    param: AxlParameterization,
    out: *mut *mut AxlGraph,
) -> AxlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let scene = deref(scene, "scene")?;
        let graph = scene.0.build_graph(param.into(), &BenchSettings::default())?;
        *out = Box::into_raw(Box::new(AxlGraph(graph)));
        Ok(())
    })
}

/// Line and camera position errors of `graph` against the scene's ground
/// truth. The graph must have been built from this scene.
///
/// # Safety
/// `scene` and `graph` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_scene_evaluate(
    scene: *const AxlScene,
    graph: *const AxlGraph,
    out: *mut AxlMetrics,
) -> AxlStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let scene = &deref(scene, "scene")?.0;
        let graph = &deref(graph, "graph")?.0;
        let lines = graph.world_lines()?;
        let mut free = std::collections::BTreeMap::new();
        for id in scene.free_poses() {
            let v = graph
                .poses
                .get(&id)
                .ok_or_else(|| Failure::new(AxlStatus::InvalidGraph, format!("graph has no {id}")))?;
            free.insert(id, v.pose);
        }
        *out = AxlMetrics {
            error_l: synth::error_l(&lines, &scene.true_world_lines()?)?,
            trans_rmse: synth::trans_rmse(&free, &scene.truth.poses)?,
        };
        Ok(())
    })
}

/// Parses a factor graph from JSON.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_graph_from_json(json: *const c_char, out: *mut *mut AxlGraph) -> AxlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let graph: FactorGraph = serde_json::from_str(read_str(json, "json")?)?;
        graph.validate()?;
        *out = Box::into_raw(Box::new(AxlGraph(graph)));
        Ok(())
    })
}

/// Serializes a factor graph as JSON. Free the result with `axl_string_free`.
///
/// # Safety
/// `graph` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_graph_to_json(graph: *const AxlGraph, out: *mut *mut c_char) -> AxlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let graph = deref(graph, "graph")?;
        *out = into_c_string(serde_json::to_string(&graph.0)?)?;
        Ok(())
    })
}

/// # Safety
/// `graph` is NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn axl_graph_free(graph: *mut AxlGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Robustified total cost at the current state.
///
/// # Safety
/// `graph` is a live handle; `out_cost` is writable.
#[no_mangle]
pub unsafe extern "C" fn axl_graph_cost(graph: *const AxlGraph, robust_width_px: f64, out_cost: *mut f64) -> AxlStatus {
    guard(|| {
        let out = deref_mut(out_cost, "out_cost")?;
        let graph = deref(graph, "graph")?;
        if robust_width_px.is_nan() || robust_width_px < 0.0 {
            return Err(Failure::new(AxlStatus::InvalidArgument, "robust_width_px must be >= 0"));
        }
        *out = ba::linearize(&graph.0, robust_width_px)?.cost;
        Ok(())
    })
}

/// Runs Levenberg–Marquardt in place. `config` may be NULL for the
/// defaults and `report` may be NULL when the caller does not need it.
///
/// # Safety
/// `graph` is a live handle; `config` and `report` are NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn axl_graph_solve(
    graph: *mut AxlGraph,
    config: *const AxlLmConfig,
    report: *mut AxlReport,
) -> AxlStatus {
    guard(|| {
        let graph = deref_mut(graph, "graph")?;
        let cfg = config.as_ref().map(LMConfig::from).unwrap_or_default();
        let r = ba::solve(&mut graph.0, &cfg)?;
        if let Some(out) = report.as_mut() {
            *out = AxlReport {
                initial_cost: r.initial_cost,
                final_cost: r.final_cost,
                iterations: count(r.iterations),
                accepted_steps: count(r.accepted_steps),
                wall_time_s: r.wall_time_s,
                termination: r.termination.into(),
                diverged: r.diverged,
                monotone: r.monotone(),
                line_params: count(r.params.line_related()),
                dropped_residuals: count(r.dropped_residuals),
            };
        }
        Ok(())
    })
}
