use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pgce::experiments::{train_pipeline, TrainConfig};
use pgce::genetic::CounterfactualSet;
use pgce::ingest::{generate_synthetic, SyntheticConfig};
use pgce_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    model: PathBuf,
    spec: PathBuf,
    sep: Vec<f64>,
    non_sep: Vec<f64>,
}

fn fixture() -> Fixture {
    let cfg = SyntheticConfig {
        n_sep: 15,
        n_non_sep: 15,
        ..SyntheticConfig::default()
    };
    let (series, catalog) = generate_synthetic(&cfg).unwrap();
    let outcome = train_pipeline(&series, &catalog, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let spec = dir.path().join("spec.toml");
    outcome.model.save(&model).unwrap();
    outcome.spec.save(&spec).unwrap();
    let pick = |class: u8| {
        outcome
            .dataset
            .instances
            .iter()
            .find(|x| outcome.model.predict(&x.values).unwrap() == class)
            .unwrap()
            .values
            .clone()
    };
    Fixture {
        model,
        spec,
        sep: pick(1),
        non_sep: pick(0),
        _dir: dir,
    }
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pgce_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn load(f: &Fixture) -> (*mut PgceModel, *mut PgceSpec) {
    let mut model = ptr::null_mut();
    let mut spec = ptr::null_mut();
    assert_eq!(pgce_model_load(c_path(&f.model).as_ptr(), &mut model), PgceStatus::Ok);
    assert_eq!(pgce_spec_load(c_path(&f.spec).as_ptr(), &mut spec), PgceStatus::Ok);
    (model, spec)
}

#[test]
fn predict_and_violations() {
    let f = fixture();
    unsafe {
        let (model, spec) = load(&f);
        assert_eq!(pgce_model_n_features(model), f.sep.len());
        let (mut label, mut p) = (9u8, -1.0);
        assert_eq!(
            pgce_model_predict(model, f.sep.as_ptr(), f.sep.len(), &mut label, &mut p),
            PgceStatus::Ok
        );
        assert_eq!(label, 1);
        assert!(p > 0.5);
        let (mut o, mut r) = (9usize, 9usize);
        assert_eq!(
            pgce_spec_violations(spec, f.non_sep.as_ptr(), f.non_sep.len(), &mut o, &mut r),
            PgceStatus::Ok
        );
        assert_eq!(o, 0);
        let mut d = -1.0;
        assert_eq!(
            pgce_dtw(spec, f.sep.as_ptr(), f.sep.as_ptr(), f.sep.len(), &mut d),
            PgceStatus::Ok
        );
        assert_eq!(d, 0.0);
        pgce_spec_free(spec);
        pgce_model_free(model);
    }
}

#[test]
fn explain_returns_feasible_set_json() {
    let f = fixture();
    unsafe {
        let (model, spec) = load(&f);
        let cfg = CString::new("[ga]\ngenerations = 40\nseed = 3\n").unwrap();
        let mut json = ptr::null_mut();
        let status = pgce_explain(model, spec, f.sep.as_ptr(), f.sep.len(), cfg.as_ptr(), false, &mut json);
        assert_eq!(status, PgceStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        pgce_string_free(json);
        let set = CounterfactualSet::from_json(&text).unwrap();
        assert_eq!(set.provenance.config.generations, 40);
        assert_eq!(set.target_class, 0);
        for c in set.candidates.iter().filter(|c| c.valid) {
            let (mut o, mut r) = (9usize, 9usize);
            assert_eq!(
                pgce_spec_violations(spec, c.values.as_ptr(), c.values.len(), &mut o, &mut r),
                PgceStatus::Ok
            );
            assert_eq!((o, r), (0, 0));
        }
        pgce_spec_free(spec);
        pgce_model_free(model);
    }
}

#[test]
fn error_codes_and_messages() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(pgce_model_load(missing.as_ptr(), &mut model), PgceStatus::Usage);
        assert!(model.is_null());
        assert!(last_error().contains("nonexistent"));

        assert_eq!(pgce_model_load(ptr::null(), &mut model), PgceStatus::NullPointer);
        assert!(last_error().contains("path"));

        let (model, spec) = load(&f);
        assert!(pgce_last_error().is_null());
        let short = [1.0, 2.0];
        let mut label = 0u8;
        assert_eq!(
            pgce_model_predict(model, short.as_ptr(), short.len(), &mut label, ptr::null_mut()),
            PgceStatus::DimensionMismatch
        );
        let bad = CString::new("[ga]\npopulation_size = \"many\"\n").unwrap();
        let mut json = ptr::null_mut();
        assert_eq!(
            pgce_explain(model, spec, f.sep.as_ptr(), f.sep.len(), bad.as_ptr(), false, &mut json),
            PgceStatus::Usage
        );
        assert!(json.is_null());
        pgce_spec_free(spec);
        pgce_model_free(model);
        pgce_model_free(ptr::null_mut());
        pgce_string_free(ptr::null_mut());
    }
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(pgce_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("pgce.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "pgce_model_load",
        "pgce_explain",
        "pgce_last_error",
        "PGCE_STATUS_NO_VALID_CANDIDATE",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"pgce.h\"\nint main(void) { return pgce_version() == 0; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found, skipping syntax check");
        return;
    };
    assert!(status.success());
}
