use std::process::Command;

fn sheath() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sheath"))
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = sheath().args(["run", "--scenario", "detect"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let out = sheath().args(["run", "--scenario", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = sheath()
        .args(["train", "--arch", "lenet5", "--dataset", "mnist", "--data-dir"])
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.toml");
    std::fs::write(&path, "id = \"x\"\nunknown = 1\n").unwrap();
    let out = sheath().arg("--config").arg(&path).arg("fit-sheath").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_threads_is_rejected() {
    let out = sheath().env("SHEATH_THREADS", "0").args(["run", "--scenario", "detect"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
