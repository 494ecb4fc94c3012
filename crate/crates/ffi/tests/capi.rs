use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use readmit::cli::{cmd_graph, cmd_prepare, cmd_synth, cmd_train, RunConfig};
use readmit::metrics;
use readmit_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { readmit_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(s.len(), n.min(255));
    s
}

fn toy() -> (Vec<f64>, Vec<u8>) {
    let scores = vec![0.9, 0.8, 0.8, 0.3, 0.7, 0.2, 0.4, 0.1];
    let labels = vec![1, 1, 0, 1, 0, 0, 1, 0];
    (scores, labels)
}

fn bools(y: &[u8]) -> Vec<bool> {
    y.iter().map(|&v| v == 1).collect()
}

#[test]
fn metrics_match_the_library() {
    let (s, y) = toy();
    let mut auc = 0.0;
    let st = unsafe { readmit_auroc(s.as_ptr(), y.as_ptr(), s.len(), &mut auc) };
    assert_eq!(st, ReadmitStatus::Ok);
    assert_eq!(auc, metrics::auroc(&s, &bools(&y)).unwrap());

    let mut ap = 0.0;
    assert_eq!(unsafe { readmit_average_precision(s.as_ptr(), y.as_ptr(), s.len(), &mut ap) }, ReadmitStatus::Ok);
    assert_eq!(ap, metrics::average_precision(&s, &bools(&y)).unwrap());

    let mut j = ReadmitCutPoint::default();
    assert_eq!(unsafe { readmit_youden(s.as_ptr(), y.as_ptr(), s.len(), &mut j) }, ReadmitStatus::Ok);
    let want = metrics::youden(&s, &bools(&y)).unwrap();
    assert_eq!((j.threshold, j.sensitivity, j.specificity), (want.threshold, want.sensitivity, want.specificity));

    let mut op = ReadmitCutPoint::default();
    assert_eq!(unsafe { readmit_operating_point(s.as_ptr(), y.as_ptr(), s.len(), 0.75, &mut op) }, ReadmitStatus::Ok);
    assert!(op.sensitivity >= 0.75);

    let b: Vec<f64> = s.iter().map(|v| 1.0 - v * v).collect();
    let mut d = ReadmitDelong::default();
    assert_eq!(unsafe { readmit_delong(s.as_ptr(), b.as_ptr(), y.as_ptr(), s.len(), &mut d) }, ReadmitStatus::Ok);
    let want = metrics::delong(&s, &b, &bools(&y)).unwrap();
    assert_eq!(d.p_value, want.p_value);
    assert_eq!(d.cov, want.cov);
}

#[test]
fn errors_map_to_status_and_message() {
    let (s, y) = toy();
    let mut auc = 0.0;
    assert_eq!(unsafe { readmit_auroc(ptr::null(), y.as_ptr(), 3, &mut auc) }, ReadmitStatus::NullPointer);
    assert!(last_error().contains("scores"));
    assert_eq!(unsafe { readmit_auroc(s.as_ptr(), y.as_ptr(), s.len(), ptr::null_mut()) }, ReadmitStatus::NullPointer);

    let ones = vec![1u8; s.len()];
    assert_eq!(unsafe { readmit_auroc(s.as_ptr(), ones.as_ptr(), s.len(), &mut auc) }, ReadmitStatus::InvalidData);
    assert!(last_error().contains("both classes"));

    let mut d = ReadmitDelong::default();
    assert_eq!(unsafe { readmit_delong(s.as_ptr(), s.as_ptr(), y.as_ptr(), s.len(), &mut d) }, ReadmitStatus::Degenerate);

    let mut op = ReadmitCutPoint::default();
    let st = unsafe { readmit_operating_point(s.as_ptr(), y.as_ptr(), s.len(), 1.5, &mut op) };
    assert_eq!(st, ReadmitStatus::InvalidConfig);

    // A success clears the previous message.
    assert_eq!(unsafe { readmit_auroc(s.as_ptr(), y.as_ptr(), s.len(), &mut auc) }, ReadmitStatus::Ok);
    assert_eq!(unsafe { readmit_last_error(ptr::null_mut(), 0) }, 0);
}

#[test]
fn long_messages_are_truncated() {
    let mut auc = 0.0;
    let st = unsafe { readmit_auroc(ptr::null(), ptr::null(), 2, &mut auc) };
    assert_eq!(st, ReadmitStatus::NullPointer);
    let full = unsafe { readmit_last_error(ptr::null_mut(), 0) };
    let mut buf = [1 as std::ffi::c_char; 4];
    assert_eq!(unsafe { readmit_last_error(buf.as_mut_ptr(), 4) }, full);
    assert_eq!(buf[3], 0);
}

#[test]
fn graph_handle_exposes_sorted_edges() {
    let rows = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0, 5.1, 5.0];
    let mut g = ptr::null_mut();
    let st = unsafe { readmit_graph_from_vectors(rows.as_ptr(), 5, 2, 30.0, &mut g) };
    assert_eq!(st, ReadmitStatus::Ok);
    assert!(!g.is_null());
    let m = unsafe { readmit_graph_edge_count(g) };
    assert_eq!(m, 3);
    assert!(unsafe { readmit_graph_sigma(g) } > 0.0);
    let (mut src, mut dst, mut w) = (vec![0usize; m], vec![0usize; m], vec![0.0; m]);
    let mut copied = 0;
    let st = unsafe { readmit_graph_edges(g, src.as_mut_ptr(), dst.as_mut_ptr(), w.as_mut_ptr(), m, &mut copied) };
    assert_eq!(st, ReadmitStatus::Ok);
    assert_eq!(copied, m);
    let edges: Vec<(usize, usize)> = src.iter().copied().zip(dst.iter().copied()).collect();
    assert!(edges.contains(&(3, 4)));
    assert!(edges.windows(2).all(|p| p[0] < p[1]));
    assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    unsafe { readmit_graph_free(g) };
    unsafe { readmit_graph_free(ptr::null_mut()) };
}

#[test]
fn graph_rejects_degenerate_vectors() {
    let rows = [1.0; 6];
    let mut g = ptr::null_mut();
    let st = unsafe { readmit_graph_from_vectors(rows.as_ptr(), 3, 2, 50.0, &mut g) };
    assert_eq!(st, ReadmitStatus::InvalidData);
    assert!(g.is_null());
    assert!(last_error().contains("sigma"));
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn predictor_scores_every_admission() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = RunConfig::default();
    cfg.synth.n_patients = 80;
    cfg.train.max_epochs = 3;
    cfg.train.t_ehr = 3;
    cfg.train.t_cxr = 3;
    cfg.train.kappa = 5.0;
    cmd_synth(&root.join("synth"), &cfg).unwrap();
    cmd_prepare(&root.join("synth/cohort.jsonl"), &root.join("prep"), &cfg).unwrap();
    cmd_graph(&root.join("prep"), &root.join("graph"), &cfg).unwrap();
    cmd_train(&root.join("prep"), Some(&root.join("graph")), &root.join("run"), &cfg).unwrap();

    let mut p = ptr::null_mut();
    let st = unsafe {
        readmit_predictor_open(c(&root.join("run")).as_ptr(), c(&root.join("prep")).as_ptr(), c(&root.join("graph")).as_ptr(), &mut p)
    };
    assert_eq!(st, ReadmitStatus::Ok, "{}", last_error());
    let n = unsafe { readmit_predictor_len(p) };
    let rows = readmit::model::read_predictions(&root.join("run/predictions.csv")).unwrap();
    assert_eq!(n, rows.len());
    let mut probs = vec![0.0; n];
    let mut copied = 0;
    assert_eq!(unsafe { readmit_predictor_probabilities(p, probs.as_mut_ptr(), n, &mut copied) }, ReadmitStatus::Ok);
    assert_eq!(copied, n);
    for (k, row) in rows.iter().enumerate() {
        let id = unsafe { CStr::from_ptr(readmit_predictor_node_id(p, k)) };
        assert_eq!(id.to_str().unwrap(), row.admission_id);
        assert!((probs[k] - row.probability).abs() < 1e-12);
    }
    assert!(unsafe { readmit_predictor_node_id(p, n) }.is_null());
    unsafe { readmit_predictor_free(p) };

    let mut q = ptr::null_mut();
    let st = unsafe {
        readmit_predictor_open(c(&root.join("missing")).as_ptr(), c(&root.join("prep")).as_ptr(), c(&root.join("graph")).as_ptr(), &mut q)
    };
    assert_eq!(st, ReadmitStatus::Io);
    assert!(q.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/readmit.h")).unwrap();
    for name in [
        "readmit_last_error",
        "readmit_auroc",
        "readmit_average_precision",
        "readmit_delong",
        "readmit_youden",
        "readmit_operating_point",
        "readmit_graph_from_vectors",
        "readmit_graph_edge_count",
        "readmit_graph_sigma",
        "readmit_graph_edges",
        "readmit_graph_free",
        "readmit_predictor_open",
        "readmit_predictor_len",
        "readmit_predictor_probabilities",
        "readmit_predictor_node_id",
        "readmit_predictor_free",
        "typedef struct ReadmitGraph ReadmitGraph",
        "READMIT_STATUS_DEGENERATE = 5",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"readmit.h\"\n\
         int main(void) {\n\
           double s[2] = {0.1, 0.9}; uint8_t y[2] = {0, 1}; double auc = 0;\n\
           ReadmitStatus st = readmit_auroc(s, y, 2, &auc);\n\
           ReadmitGraph *g = NULL; readmit_graph_free(g);\n\
           return st == READMIT_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
