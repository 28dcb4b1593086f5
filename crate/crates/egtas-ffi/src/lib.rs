//! C ABI over the egtas library: opaque handles, integer error codes,
//! and a thread-local last-error message. The matching declarations
//! live in include/egtas.h, which is maintained by hand.

use egtas::evo_search::{run_search, SearchConfig, SurrogateScorer};
use egtas::search_space::{decode, ArchitectureEncoding, OperationTable, ENCODING_DIM};
use egtas::surrogate::{
    load_surrogate, save_surrogate, select_best, SavedSurrogate, SURROGATE_FILE_VERSION,
    TrainingArchive,
};
use egtas::trainer::FitnessRecord;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

pub const EGTAS_OK: i32 = 0;
pub const EGTAS_ERR_NULL_ARGUMENT: i32 = 1;
pub const EGTAS_ERR_INVALID: i32 = 2;
pub const EGTAS_ERR_IO: i32 = 3;
pub const EGTAS_ERR_UTF8: i32 = 4;
pub const EGTAS_ERR_SEARCH: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let safe = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(safe).unwrap());
}

/// Message for the most recent error on this thread. Borrowed; valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn egtas_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

pub struct EgtasTable(OperationTable);
pub struct EgtasSurrogate(SavedSurrogate);

/// The default six-gene operation table. Free with egtas_table_free.
#[no_mangle]
pub extern "C" fn egtas_table_new_default() -> *mut EgtasTable {
    Box::into_raw(Box::new(EgtasTable(OperationTable::default())))
}

/// # Safety
/// `table` must come from egtas_table_new_default and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn egtas_table_free(table: *mut EgtasTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// # Safety
/// `table` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn egtas_table_cardinality(
    table: *const EgtasTable,
    out: *mut u64,
) -> i32 {
    if table.is_null() || out.is_null() {
        set_error("null argument");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    *out = (*table).0.cardinality();
    EGTAS_OK
}

unsafe fn read_genes(genes: *const usize) -> Option<ArchitectureEncoding> {
    if genes.is_null() {
        return None;
    }
    let mut g = [0usize; ENCODING_DIM];
    for (i, slot) in g.iter_mut().enumerate() {
        *slot = *genes.add(i);
    }
    Some(ArchitectureEncoding::new(g))
}

/// Checks a six-gene encoding against the table bounds.
///
/// # Safety
/// `table` must be a live handle; `genes` must point at 6 size_t values.
#[no_mangle]
pub unsafe extern "C" fn egtas_encoding_validate(
    table: *const EgtasTable,
    genes: *const usize,
) -> i32 {
    if table.is_null() {
        set_error("null table");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    let Some(enc) = read_genes(genes) else {
        set_error("null genes");
        return EGTAS_ERR_NULL_ARGUMENT;
    };
    match enc.validate(&(*table).0) {
        Ok(()) => EGTAS_OK,
        Err(e) => {
            set_error(&e.to_string());
            EGTAS_ERR_INVALID
        }
    }
}

/// Decodes an encoding to a JSON architecture description. The result
/// must be released with egtas_string_free.
///
/// # Safety
/// `table` must be a live handle; `genes` must point at 6 size_t values;
/// `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn egtas_decode_json(
    table: *const EgtasTable,
    genes: *const usize,
    out_json: *mut *mut c_char,
) -> i32 {
    if table.is_null() || out_json.is_null() {
        set_error("null argument");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    let Some(enc) = read_genes(genes) else {
        set_error("null genes");
        return EGTAS_ERR_NULL_ARGUMENT;
    };
    match decode(&enc, &(*table).0) {
        Ok(spec) => {
            let json = serde_json::to_string(&spec).unwrap();
            *out_json = CString::new(json).unwrap().into_raw();
            EGTAS_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            EGTAS_ERR_INVALID
        }
    }
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn egtas_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn path_from_c(path: *const c_char) -> Result<String, i32> {
    if path.is_null() {
        set_error("null path");
        return Err(EGTAS_ERR_NULL_ARGUMENT);
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_string)
        .map_err(|_| {
            set_error("path is not valid UTF-8");
            EGTAS_ERR_UTF8
        })
}

/// Loads a saved surrogate model file. Free with egtas_surrogate_free.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egtas_surrogate_load(
    path: *const c_char,
    out: *mut *mut EgtasSurrogate,
) -> i32 {
    if out.is_null() {
        set_error("null out pointer");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    let path = match path_from_c(path) {
        Ok(p) => p,
        Err(code) => return code,
    };
    match load_surrogate(Path::new(&path)) {
        Ok(saved) => {
            *out = Box::into_raw(Box::new(EgtasSurrogate(saved)));
            EGTAS_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            EGTAS_ERR_IO
        }
    }
}

/// Fits the best surrogate by cross validation on an NDJSON archive and
/// returns a handle; optionally writes the model file when out_path is
/// non-NULL.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egtas_surrogate_fit(
    archive_path: *const c_char,
    folds: usize,
    seed: u64,
    out_path: *const c_char,
    out: *mut *mut EgtasSurrogate,
) -> i32 {
    if out.is_null() {
        set_error("null out pointer");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    let archive_path = match path_from_c(archive_path) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let text = match std::fs::read_to_string(&archive_path) {
        Ok(t) => t,
        Err(e) => {
            set_error(&format!("reading {archive_path}: {e}"));
            return EGTAS_ERR_IO;
        }
    };
    let mut records: Vec<FitnessRecord> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                set_error(&format!("bad archive line: {e}"));
                return EGTAS_ERR_INVALID;
            }
        }
    }
    let archive = TrainingArchive::from_records(&records);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, report) = match select_best(&archive, folds, &mut rng) {
        Ok(v) => v,
        Err(e) => {
            set_error(&e.to_string());
            return EGTAS_ERR_INVALID;
        }
    };
    let saved = SavedSurrogate {
        version: SURROGATE_FILE_VERSION,
        metric_name: archive.metric_name.clone(),
        minimize: archive.minimize,
        model,
        report: Some(report),
    };
    if !out_path.is_null() {
        let out_path = match path_from_c(out_path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        if let Err(e) = save_surrogate(&saved, Path::new(&out_path)) {
            set_error(&e.to_string());
            return EGTAS_ERR_IO;
        }
    }
    *out = Box::into_raw(Box::new(EgtasSurrogate(saved)));
    EGTAS_OK
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn egtas_surrogate_free(s: *mut EgtasSurrogate) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Predicted metric value for one encoding.
///
/// # Safety
/// `surrogate` must be a live handle; `genes` must point at 6 size_t
/// values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egtas_surrogate_predict(
    surrogate: *const EgtasSurrogate,
    genes: *const usize,
    out: *mut f64,
) -> i32 {
    if surrogate.is_null() || out.is_null() {
        set_error("null argument");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    let Some(enc) = read_genes(genes) else {
        set_error("null genes");
        return EGTAS_ERR_NULL_ARGUMENT;
    };
    *out = (*surrogate).0.model.predict(&enc);
    EGTAS_OK
}

/// Runs the genetic search scored by a loaded surrogate and writes the
/// winning genes and predicted value.
///
/// # Safety
/// Handles must be live; `out_genes` must point at 6 writable size_t
/// values; `out_predicted` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egtas_search(
    surrogate: *const EgtasSurrogate,
    table: *const EgtasTable,
    population: usize,
    generations: usize,
    seed: u64,
    out_genes: *mut usize,
    out_predicted: *mut f64,
) -> i32 {
    if surrogate.is_null() || table.is_null() || out_genes.is_null() || out_predicted.is_null() {
        set_error("null argument");
        return EGTAS_ERR_NULL_ARGUMENT;
    }
    let saved = &(*surrogate).0;
    let scorer = SurrogateScorer { model: &saved.model, minimize: saved.minimize };
    let cfg = SearchConfig {
        population_size: population,
        generations,
        seed,
        ..Default::default()
    };
    match run_search(&cfg, &(*table).0, &scorer) {
        Ok((best, state, _)) => {
            for (i, &g) in best.genes.iter().enumerate() {
                *out_genes.add(i) = g;
            }
            *out_predicted = state.best_of_population().predicted;
            EGTAS_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            EGTAS_ERR_SEARCH
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use egtas::search_space::sample_uniform;
    use std::ffi::CString;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("egtas-ffi-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn write_archive(path: &Path, n: usize) {
        let table = OperationTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = String::new();
        for i in 0..n {
            let enc = sample_uniform(&table, &mut rng);
            let rec = FitnessRecord {
                encoding: enc,
                metric_name: "acc".into(),
                value: enc.genes.iter().sum::<usize>() as f64 / 30.0,
                minimize: false,
                wall_time: 0.0,
                seed: i as u64,
                diverged: false,
            };
            out.push_str(&serde_json::to_string(&rec).unwrap());
            out.push('\n');
        }
        std::fs::write(path, out).unwrap();
    }

    #[test]
    fn table_handle_reports_cardinality() {
        unsafe {
            let table = egtas_table_new_default();
            let mut card = 0u64;
            assert_eq!(egtas_table_cardinality(table, &mut card), EGTAS_OK);
            assert_eq!(card, 18_432);
            egtas_table_free(table);
        }
    }

    #[test]
    fn validate_and_decode_round_trip() {
        unsafe {
            let table = egtas_table_new_default();
            let good = [1usize, 2, 3, 4, 5, 1];
            assert_eq!(egtas_encoding_validate(table, good.as_ptr()), EGTAS_OK);
            let bad = [9usize, 0, 0, 0, 0, 0];
            assert_eq!(egtas_encoding_validate(table, bad.as_ptr()), EGTAS_ERR_INVALID);
            let msg = CStr::from_ptr(egtas_last_error_message());
            assert!(!msg.to_str().unwrap().is_empty());

            let mut json: *mut c_char = std::ptr::null_mut();
            assert_eq!(egtas_decode_json(table, good.as_ptr(), &mut json), EGTAS_OK);
            let text = CStr::from_ptr(json).to_str().unwrap().to_string();
            assert!(text.contains("\"topology\":\"JK\""), "{text}");
            egtas_string_free(json);
            egtas_table_free(table);
        }
    }

    #[test]
    fn null_arguments_are_rejected_not_crashed() {
        unsafe {
            assert_eq!(
                egtas_table_cardinality(std::ptr::null(), std::ptr::null_mut()),
                EGTAS_ERR_NULL_ARGUMENT
            );
            let table = egtas_table_new_default();
            assert_eq!(
                egtas_encoding_validate(table, std::ptr::null()),
                EGTAS_ERR_NULL_ARGUMENT
            );
            egtas_table_free(table);
            egtas_table_free(std::ptr::null_mut());
            egtas_string_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn fit_predict_search_through_the_c_surface() {
        unsafe {
            let archive_path = tmp("archive.ndjson");
            write_archive(&archive_path, 120);
            let model_path = tmp("model.json");

            let archive_c = CString::new(archive_path.to_str().unwrap()).unwrap();
            let model_c = CString::new(model_path.to_str().unwrap()).unwrap();
            let mut surrogate: *mut EgtasSurrogate = std::ptr::null_mut();
            assert_eq!(
                egtas_surrogate_fit(archive_c.as_ptr(), 5, 0, model_c.as_ptr(), &mut surrogate),
                EGTAS_OK
            );

            // the analytic landscape peaks at the per-gene maxima
            let table = egtas_table_new_default();
            let mut genes = [0usize; 6];
            let mut predicted = 0.0;
            assert_eq!(
                egtas_search(surrogate, table, 20, 30, 7, genes.as_mut_ptr(), &mut predicted),
                EGTAS_OK
            );
            assert_eq!(egtas_encoding_validate(table, genes.as_ptr()), EGTAS_OK);
            let mut at_found = 0.0;
            assert_eq!(
                egtas_surrogate_predict(surrogate, genes.as_ptr(), &mut at_found),
                EGTAS_OK
            );
            assert_eq!(at_found, predicted);
            assert!(predicted > 0.6, "search should find a high-sum encoding: {predicted}");
            egtas_surrogate_free(surrogate);

            // the file written during fit loads back into a working handle
            let mut reloaded: *mut EgtasSurrogate = std::ptr::null_mut();
            assert_eq!(egtas_surrogate_load(model_c.as_ptr(), &mut reloaded), EGTAS_OK);
            let mut again = 0.0;
            assert_eq!(
                egtas_surrogate_predict(reloaded, genes.as_ptr(), &mut again),
                EGTAS_OK
            );
            assert_eq!(again, at_found);
            egtas_surrogate_free(reloaded);
            egtas_table_free(table);
        }
    }

    #[test]
    fn missing_file_reports_io_error() {
        unsafe {
            let path = CString::new("/nonexistent/egtas-model.json").unwrap();
            let mut s: *mut EgtasSurrogate = std::ptr::null_mut();
            assert_eq!(egtas_surrogate_load(path.as_ptr(), &mut s), EGTAS_ERR_IO);
        }
    }
}
