//! C interface: hypergrid construction, flow-network training, exact and
//! sampled terminal distributions.
//!
//! Every fallible function returns a [`GfnStatus`]. On failure a message is
//! kept per thread and can be read with [`gfn_last_error_message`].
//! Handles are opaque and must be released with the matching `_free`.
//! Distributions are indexed by cell, coordinate 0 varying fastest.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gflownet::experiments::{l1_error, target_probs, terminal_slots};
use gflownet::flownet::{exact_terminal_dist, sample_terminals, train, Control, MlpFlow, TrainConfig, TrainingData};
use gflownet::hypergrid::{GridSpec, GridState, HyperGrid};
use gflownet::nn::Mlp;
use gflownet::oracles::{enumerate_states, OracleError, StateGraph, DEFAULT_STATE_CAP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    TooLarge = 3,
    BufferSize = 4,
    TrainingFailed = 5,
    Io = 6,
    Panic = 7,
}

/// A hypergrid together with its enumerated state graph.
pub struct GfnGrid {
    grid: HyperGrid,
    graph: StateGraph<GridState>,
    slots: Vec<usize>,
}

/// A neural flow model.
pub struct GfnModel {
    model: MlpFlow,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: GfnStatus, msg: impl Into<String>) -> GfnStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GfnStatus) -> GfnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == GfnStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(GfnStatus::Panic, "internal panic"),
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn gfn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn make_grid(spec: GridSpec, out: *mut *mut GfnGrid) -> GfnStatus {
    if out.is_null() {
        return fail(GfnStatus::NullPointer, "out is null");
    }
    let grid = match HyperGrid::new(spec) {
        Ok(g) => g,
        Err(e) => return fail(GfnStatus::InvalidArgument, e.to_string()),
    };
    let graph = match enumerate_states(&grid, DEFAULT_STATE_CAP) {
        Ok(g) => g,
        Err(e @ OracleError::TooLarge { .. }) => return fail(GfnStatus::TooLarge, e.to_string()),
        Err(e) => return fail(GfnStatus::InvalidArgument, e.to_string()),
    };
    let slots = terminal_slots(&grid, &graph);
    // SAFETY: `out` was checked non-null; the caller owns the new handle.
    unsafe { *out = Box::into_raw(Box::new(GfnGrid { grid, graph, slots })) };
    GfnStatus::Ok
}

/// Corners reward with `R1 = 0.5`, `R2 = 2`.
#[no_mangle]
pub extern "C" fn gfn_grid_new_corners(n: usize, h: usize, r0: f64, out: *mut *mut GfnGrid) -> GfnStatus {
    guard(|| make_grid(GridSpec::corners(n, h, r0), out))
}

#[no_mangle]
pub extern "C" fn gfn_grid_new_cosine(n: usize, h: usize, out: *mut *mut GfnGrid) -> GfnStatus {
    guard(|| make_grid(GridSpec::cosine(n, h), out))
}

/// Releases a grid. Null is ignored.
///
/// # Safety
/// `grid` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gfn_grid_free(grid: *mut GfnGrid) {
    if !grid.is_null() {
        // SAFETY: non-null handles come from `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// # Safety
/// `p` must be null or a live handle from this library.
unsafe fn borrow<'a, T>(p: *const T) -> Result<&'a T, GfnStatus> {
    p.as_ref().ok_or_else(|| fail(GfnStatus::NullPointer, "handle is null"))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], GfnStatus> {
    if p.is_null() {
        return Err(fail(GfnStatus::NullPointer, "output buffer is null"));
    }
    if len != need {
        return Err(fail(GfnStatus::BufferSize, format!("buffer holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// # Safety
/// `grid` must be a live grid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gfn_grid_num_cells(grid: *const GfnGrid, out: *mut usize) -> GfnStatus {
    guard(|| {
        let g = tri!(borrow(grid));
        if out.is_null() {
            return fail(GfnStatus::NullPointer, "out is null");
        }
        *out = g.grid.num_cells();
        GfnStatus::Ok
    })
}

fn by_cell(g: &GfnGrid, aligned: &[f64], out: &mut [f64]) {
    for (cell, slot) in g.slots.iter().enumerate() {
        out[cell] = aligned[*slot];
    }
}

/// Writes `R(x)/Z` for every cell into `out[0..len]`; `len` must equal the
/// cell count.
///
/// # Safety
/// `grid` must be a live grid handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gfn_grid_target_distribution(grid: *const GfnGrid, out: *mut f64, len: usize) -> GfnStatus {
    guard(|| {
        let g = tri!(borrow(grid));
        let dst = tri!(out_slice(out, len, g.grid.num_cells()));
        by_cell(g, &target_probs(&g.graph), dst);
        GfnStatus::Ok
    })
}

/// A fresh model with two hidden layers of `hidden` units.
///
/// # Safety
/// `grid` must be a live grid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_new(grid: *const GfnGrid, hidden: usize, seed: u64, out: *mut *mut GfnModel) -> GfnStatus {
    guard(|| {
        let g = tri!(borrow(grid));
        if out.is_null() {
            return fail(GfnStatus::NullPointer, "out is null");
        }
        if hidden == 0 {
            return fail(GfnStatus::InvalidArgument, "hidden width must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match MlpFlow::new(&g.grid, &[hidden, hidden], &mut rng) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(GfnModel { model }));
                GfnStatus::Ok
            }
            Err(e) => fail(GfnStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_free(model: *mut GfnModel) {
    if !model.is_null() {
        // SAFETY: non-null handles come from `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Online training with default settings apart from the given values.
/// `final_loss` may be null.
///
/// # Safety
/// Handles must be live; `final_loss` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_train(
    model: *mut GfnModel,
    grid: *const GfnGrid,
    trajectories: usize,
    learning_rate: f64,
    seed: u64,
    final_loss: *mut f64,
) -> GfnStatus {
    guard(|| {
        let g = tri!(borrow(grid));
        let m = match model.as_mut() {
            Some(m) => m,
            None => return fail(GfnStatus::NullPointer, "model is null"),
        };
        let cfg = TrainConfig { total_trajectories: trajectories, learning_rate, seed, ..TrainConfig::default() };
        if let Err(e) = cfg.validate() {
            return fail(GfnStatus::InvalidArgument, e.to_string());
        }
        match train(&g.grid, &mut m.model, &cfg, TrainingData::Online, |_, _| Control::Continue) {
            Ok(s) => {
                if !final_loss.is_null() {
                    *final_loss = s.final_loss;
                }
                GfnStatus::Ok
            }
            Err(e) => fail(GfnStatus::TrainingFailed, e.to_string()),
        }
    })
}

/// Exact terminal distribution of the model's policy, per cell.
///
/// # Safety
/// Handles must be live; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_terminal_distribution(
    model: *const GfnModel,
    grid: *const GfnGrid,
    out: *mut f64,
    len: usize,
) -> GfnStatus {
    guard(|| {
        let (m, g) = (tri!(borrow(model)), tri!(borrow(grid)));
        let dst = tri!(out_slice(out, len, g.grid.num_cells()));
        match exact_terminal_dist(&m.model, &g.grid, &g.graph) {
            Ok(d) => {
                by_cell(g, &d, dst);
                GfnStatus::Ok
            }
            Err(e) => fail(GfnStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Samples `count` terminal cells, writing their cell indices.
///
/// # Safety
/// Handles must be live; `out_cells` valid for `count` writes.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_sample(
    model: *const GfnModel,
    grid: *const GfnGrid,
    count: usize,
    seed: u64,
    out_cells: *mut usize,
) -> GfnStatus {
    guard(|| {
        let (m, g) = (tri!(borrow(model)), tri!(borrow(grid)));
        if out_cells.is_null() && count > 0 {
            return fail(GfnStatus::NullPointer, "output buffer is null");
        }
        match sample_terminals(&m.model, &g.grid, count, seed) {
            Ok(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    *out_cells.add(i) = g.grid.cell_index(&x.coords);
                }
                GfnStatus::Ok
            }
            Err(e) => fail(GfnStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `path` must be null or a NUL-terminated string.
unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, GfnStatus> {
    if path.is_null() {
        return Err(fail(GfnStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path).to_str().map(Path::new).map_err(|_| fail(GfnStatus::InvalidArgument, "path is not UTF-8"))
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_save(model: *const GfnModel, path: *const c_char, seed: u64) -> GfnStatus {
    guard(|| {
        let m = tri!(borrow(model));
        let p = tri!(path_arg(path));
        match m.model.net.save_to(p, seed, 0) {
            Ok(()) => GfnStatus::Ok,
            Err(e) => fail(GfnStatus::Io, e.to_string()),
        }
    })
}

/// Loads a checkpoint whose shape fits `grid`.
///
/// # Safety
/// `grid` must be live, `path` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gfn_model_load(grid: *const GfnGrid, path: *const c_char, out: *mut *mut GfnModel) -> GfnStatus {
    guard(|| {
        let g = tri!(borrow(grid));
        let p = tri!(path_arg(path));
        if out.is_null() {
            return fail(GfnStatus::NullPointer, "out is null");
        }
        let net = match Mlp::load_from(p) {
            Ok((net, _)) => net,
            Err(e) => return fail(GfnStatus::Io, e.to_string()),
        };
        match MlpFlow::from_net(&g.grid, net) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(GfnModel { model }));
                GfnStatus::Ok
            }
            Err(e) => fail(GfnStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Mean absolute difference of two distributions of length `len`.
///
/// # Safety
/// `p` and `q` valid for `len` reads; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gfn_l1_error(p: *const f64, q: *const f64, len: usize, out: *mut f64) -> GfnStatus {
    guard(|| {
        if p.is_null() || q.is_null() || out.is_null() {
            return fail(GfnStatus::NullPointer, "null argument");
        }
        let (a, b) = (std::slice::from_raw_parts(p, len), std::slice::from_raw_parts(q, len));
        match l1_error(a, b) {
            Ok(v) => {
                *out = v;
                GfnStatus::Ok
            }
            Err(e) => fail(GfnStatus::InvalidArgument, e.to_string()),
        }
    })
}
