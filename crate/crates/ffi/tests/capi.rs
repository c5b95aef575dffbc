//! Exercises the C ABI exactly as a foreign binding would: through the
//! exported extern functions and raw pointers.

use std::ffi::{CStr, CString};
use std::ptr;

use orthrus_ffi::{
    orthrus_last_error, orthrus_run_all_confirmed, orthrus_run_confirmed, orthrus_run_free,
    orthrus_run_mean_latency_ms, orthrus_run_passed, orthrus_run_scenario,
    orthrus_run_scenario_str, orthrus_run_submitted, orthrus_run_verdicts,
    orthrus_run_write_outputs, orthrus_string_free, orthrus_version, OrthrusRun, OrthrusStatus,
    OrthrusTxFilter,
};

const CONFIG: &str = r#"
[scenario]
replicas = 4
faults_tolerated = 1
epoch_length = 8
batch_timeout_ms = 25

[workload]
total_txs = 120
accounts = 60
"#;

#[test]
fn run_from_toml_text_and_query() {
    let toml = CString::new(CONFIG).unwrap();
    let mut run: *mut OrthrusRun = ptr::null_mut();
    let status = unsafe { orthrus_run_scenario_str(toml.as_ptr(), 5, &mut run) };
    assert_eq!(status, OrthrusStatus::Ok);
    assert!(!run.is_null());
    unsafe {
        assert!(orthrus_run_passed(run));
        assert!(orthrus_run_all_confirmed(run));
        assert_eq!(orthrus_run_confirmed(run), 120);
        assert_eq!(orthrus_run_submitted(run), 120);
        let all = orthrus_run_mean_latency_ms(run, OrthrusTxFilter::All);
        assert!(all > 0.0);
        let verdicts = orthrus_run_verdicts(run);
        assert!(!verdicts.is_null());
        let text = CStr::from_ptr(verdicts).to_str().unwrap().to_string();
        assert!(text.contains("status=pass"));
        orthrus_string_free(verdicts);
        orthrus_run_free(run);
    }
}

#[test]
fn run_from_file_with_mode_override_and_outputs() {
    let dir = std::env::temp_dir().join(format!("orthrus-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config_path = dir.join("scenario.toml");
    std::fs::write(&config_path, CONFIG).unwrap();
    let c_path = CString::new(config_path.to_str().unwrap()).unwrap();
    let mode = CString::new("global_all").unwrap();
    let mut run: *mut OrthrusRun = ptr::null_mut();
    let status =
        unsafe { orthrus_run_scenario(c_path.as_ptr(), 9, mode.as_ptr(), &mut run) };
    assert_eq!(status, OrthrusStatus::Ok);
    let out_dir = CString::new(dir.join("out").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(orthrus_run_write_outputs(run, out_dir.as_ptr()), OrthrusStatus::Ok);
        orthrus_run_free(run);
    }
    let summary = std::fs::read_to_string(dir.join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("key,value"));
    let config = std::fs::read_to_string(dir.join("out/config.toml")).unwrap();
    assert!(config.contains("global_all"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn errors_set_status_and_message() {
    let missing = CString::new("/definitely/not/here.toml").unwrap();
    let mut run: *mut OrthrusRun = ptr::null_mut();
    let status =
        unsafe { orthrus_run_scenario(missing.as_ptr(), 0, ptr::null(), &mut run) };
    assert_eq!(status, OrthrusStatus::ConfigError);
    assert!(run.is_null());
    let err = orthrus_last_error();
    assert!(!err.is_null());
    unsafe {
        let text = CStr::from_ptr(err).to_str().unwrap();
        assert!(!text.is_empty());
        orthrus_string_free(err);
    }
    // Invalid config text (n < 3f+1).
    let bad = CString::new("[scenario]\nreplicas = 3\nfaults_tolerated = 1\n").unwrap();
    let status = unsafe { orthrus_run_scenario_str(bad.as_ptr(), 0, &mut run) };
    assert_eq!(status, OrthrusStatus::ConfigError);
    // Null arguments are rejected, not dereferenced.
    let status = unsafe { orthrus_run_scenario(ptr::null(), 0, ptr::null(), &mut run) };
    assert_eq!(status, OrthrusStatus::NullArgument);
}

#[test]
fn version_is_exposed() {
    let version = orthrus_version();
    let text = unsafe { CStr::from_ptr(version) }.to_str().unwrap();
    assert_eq!(text, env!("CARGO_PKG_VERSION"));
}
