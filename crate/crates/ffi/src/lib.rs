//! C interface to the readmit library.
//!
//! Every fallible call returns a [`ReadmitStatus`]; on failure the message is
//! kept per thread and can be copied out with [`readmit_last_error`].
//! Objects cross the boundary as opaque handles that must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use readmit::cli::{load_graph, load_prepared};
use readmit::graph::{gaussian_edge_weights, sparsify_topk};
use readmit::metrics;
use readmit::model::{Checkpoint, Model};
use readmit::nn::GraphCtx;
use readmit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadmitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidData = 3,
    Numeric = 4,
    Degenerate = 5,
    Io = 6,
    Panic = 7,
}

impl From<&Error> for ReadmitStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => ReadmitStatus::InvalidConfig,
            Error::Data(_) | Error::UnavailableEdgeSource(_) | Error::Json(_) | Error::Csv(_) => {
                ReadmitStatus::InvalidData
            }
            Error::Io { .. } => ReadmitStatus::Io,
            Error::Shape { .. } | Error::Numeric(_) => ReadmitStatus::Numeric,
            Error::DegenerateComparison(_) => ReadmitStatus::Degenerate,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(ReadmitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(ReadmitStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ReadmitStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ReadmitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ReadmitStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside readmit".into());
            ReadmitStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_in(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ReadmitStatus::InvalidData, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn labels_in(p: *const u8, n: usize) -> Result<Vec<bool>, Fail> {
    Ok(slice_in(p, n, "labels")?.iter().map(|&y| y != 0).collect())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL, or
/// 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn readmit_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// AUROC of `scores` against 0/1 `labels`, ties counting one half.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn readmit_auroc(scores: *const f64, labels: *const u8, n: usize, auc: *mut f64) -> ReadmitStatus {
    guard(|| {
        let s = slice_in(scores, n, "scores")?;
        let y = labels_in(labels, n)?;
        *out(auc, "auc")? = metrics::auroc(s, &y)?;
        Ok(())
    })
}

/// # Safety
/// `scores` and `labels` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn readmit_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    ap: *mut f64,
) -> ReadmitStatus {
    guard(|| {
        let s = slice_in(scores, n, "scores")?;
        let y = labels_in(labels, n)?;
        *out(ap, "ap")? = metrics::average_precision(s, &y)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReadmitDelong {
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Paired DeLong test of equal AUROC.
///
/// # Safety
/// `scores_a`, `scores_b` and `labels` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn readmit_delong(
    scores_a: *const f64,
    scores_b: *const f64,
    labels: *const u8,
    n: usize,
    result: *mut ReadmitDelong,
) -> ReadmitStatus {
    guard(|| {
        let a = slice_in(scores_a, n, "scores_a")?;
        let b = slice_in(scores_b, n, "scores_b")?;
        let y = labels_in(labels, n)?;
        let d = metrics::delong(a, b, &y)?;
        *out(result, "result")? = ReadmitDelong {
            auroc_a: d.auroc_a,
            auroc_b: d.auroc_b,
            var_a: d.var_a,
            var_b: d.var_b,
            cov: d.cov,
            z: d.z,
            p_value: d.p_value,
        };
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReadmitCutPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Cut-point maximizing Youden's J.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn readmit_youden(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    point: *mut ReadmitCutPoint,
) -> ReadmitStatus {
    guard(|| {
        let s = slice_in(scores, n, "scores")?;
        let y = labels_in(labels, n)?;
        let p = metrics::youden(s, &y)?;
        *out(point, "point")? =
            ReadmitCutPoint { threshold: p.threshold, sensitivity: p.sensitivity, specificity: p.specificity };
        Ok(())
    })
}

/// Highest cut-point whose sensitivity reaches `sens_target`.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn readmit_operating_point(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    sens_target: f64,
    point: *mut ReadmitCutPoint,
) -> ReadmitStatus {
    guard(|| {
        let s = slice_in(scores, n, "scores")?;
        let y = labels_in(labels, n)?;
        let p = metrics::operating_point(s, &y, sens_target)?;
        *out(point, "point")? =
            ReadmitCutPoint { threshold: p.threshold, sensitivity: p.sensitivity, specificity: p.specificity };
        Ok(())
    })
}

/// Sparse similarity graph over row vectors.
pub struct ReadmitGraph {
    sigma: f64,
    edges: Vec<(usize, usize, f64)>,
}

/// Builds a Gaussian-kernel graph over the `n` rows of the row-major
/// `n x d` matrix `vectors`, keeping the top `kappa_percent` of pairs.
///
/// # Safety
/// `vectors` must point to `n * d` readable doubles and `graph` to a
/// writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn readmit_graph_from_vectors(
    vectors: *const f64,
    n: usize,
    d: usize,
    kappa_percent: f64,
    graph: *mut *mut ReadmitGraph,
) -> ReadmitStatus {
    guard(|| {
        let slot = out(graph, "graph")?;
        *slot = ptr::null_mut();
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Fail(ReadmitStatus::InvalidData, format!("{n} x {d} overflows")))?;
        let flat = slice_in(vectors, len, "vectors")?;
        let rows: Vec<Vec<f64>> = if d == 0 { vec![Vec::new(); n] } else { flat.chunks(d).map(<[f64]>::to_vec).collect() };
        let w = gaussian_edge_weights(&rows)?;
        let edges = sparsify_topk(&w, kappa_percent)?;
        *slot = Box::into_raw(Box::new(ReadmitGraph { sigma: w.sigma, edges }));
        Ok(())
    })
}

/// # Safety
/// `graph` must be a live handle from [`readmit_graph_from_vectors`].
#[no_mangle]
pub unsafe extern "C" fn readmit_graph_edge_count(graph: *const ReadmitGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.edges.len())
}

/// Kernel bandwidth, or NaN for a null handle.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn readmit_graph_sigma(graph: *const ReadmitGraph) -> f64 {
    graph.as_ref().map_or(f64::NAN, |g| g.sigma)
}

/// Copies up to `cap` edges `(src[k], dst[k], weight[k])` with `src < dst`,
/// sorted by endpoints. `copied` receives the number written.
///
/// # Safety
/// `graph` must be a live handle; `src`, `dst` and `weight` must point to
/// `cap` writable elements.
#[no_mangle]
pub unsafe extern "C" fn readmit_graph_edges(
    graph: *const ReadmitGraph,
    src: *mut usize,
    dst: *mut usize,
    weight: *mut f64,
    cap: usize,
    copied: *mut usize,
) -> ReadmitStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let n = g.edges.len().min(cap);
        if n > 0 && (src.is_null() || dst.is_null() || weight.is_null()) {
            return Err(null("edge buffer"));
        }
        for (k, &(i, j, w)) in g.edges.iter().take(n).enumerate() {
            *src.add(k) = i;
            *dst.add(k) = j;
            *weight.add(k) = w;
        }
        *out(copied, "copied")? = n;
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn readmit_graph_free(graph: *mut ReadmitGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Trained model bound to a prepared cohort and its graph.
pub struct ReadmitPredictor {
    node_ids: Vec<CString>,
    probabilities: Vec<f64>,
}

/// Loads a checkpoint directory, a prepared-cohort directory and a graph
/// file (or directory holding `graph.json`) and scores every admission.
///
/// # Safety
/// Paths must be NUL-terminated strings; `predictor` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn readmit_predictor_open(
    checkpoint_dir: *const c_char,
    prepared_dir: *const c_char,
    graph_path: *const c_char,
    predictor: *mut *mut ReadmitPredictor,
) -> ReadmitStatus {
    guard(|| {
        let slot = out(predictor, "predictor")?;
        *slot = ptr::null_mut();
        let ck = Checkpoint::load(&path_in(checkpoint_dir, "checkpoint_dir")?)?;
        let p = load_prepared(&path_in(prepared_dir, "prepared_dir")?)?;
        let g = load_graph(&path_in(graph_path, "graph_path")?)?;
        if g.node_ids != p.features.node_ids {
            return Err(Error::Data("graph nodes do not match the prepared admissions".into()).into());
        }
        let features = p.features_at(ck.spec.dims.t_ehr, ck.spec.dims.t_cxr)?;
        let model = Model::new(ck.spec)?;
        let pred = model.predict(&ck.params, &features, &GraphCtx::new(g.neighborhood()?))?;
        let node_ids = pred
            .node_ids
            .iter()
            .map(|id| CString::new(id.as_str()).map_err(|_| Fail(ReadmitStatus::InvalidData, format!("bad id {id:?}"))))
            .collect::<Result<_, _>>()?;
        *slot = Box::into_raw(Box::new(ReadmitPredictor { node_ids, probabilities: pred.probabilities }));
        Ok(())
    })
}

/// # Safety
/// `predictor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn readmit_predictor_len(predictor: *const ReadmitPredictor) -> usize {
    predictor.as_ref().map_or(0, |p| p.probabilities.len())
}

/// Copies up to `cap` probabilities in node order.
///
/// # Safety
/// `predictor` must be a live handle and `probabilities` point to `cap`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn readmit_predictor_probabilities(
    predictor: *const ReadmitPredictor,
    probabilities: *mut f64,
    cap: usize,
    copied: *mut usize,
) -> ReadmitStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        let n = p.probabilities.len().min(cap);
        if n > 0 && probabilities.is_null() {
            return Err(null("probabilities"));
        }
        ptr::copy_nonoverlapping(p.probabilities.as_ptr(), probabilities, n);
        *out(copied, "copied")? = n;
        Ok(())
    })
}

/// Admission id of node `index`, borrowed from the handle (valid until it is
/// freed). Null when out of range.
///
/// # Safety
/// `predictor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn readmit_predictor_node_id(predictor: *const ReadmitPredictor, index: usize) -> *const c_char {
    predictor
        .as_ref()
        .and_then(|p| p.node_ids.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `predictor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn readmit_predictor_free(predictor: *mut ReadmitPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}
