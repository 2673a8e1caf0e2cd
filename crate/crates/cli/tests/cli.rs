use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn vl3d(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vl3d"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VL3D_CONFIG")
        .env_remove("VL3D_OUT")
        .env_remove("VL3D_DATA")
        .env_remove("VL3D_CKPT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shapes_reports_both_presets() {
    let tmp = TempDir::new().unwrap();
    let toy = vl3d(&["shapes"], tmp.path());
    assert_eq!(code(&toy), 0, "{}", stderr(&toy));
    assert!(stdout(&toy).contains("512 -> 64"));
    let paper = vl3d(&["shapes", "--preset", "paper-scale", "--json"], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&stdout(&paper)).unwrap();
    assert_eq!(v["input_tokens"], 2744);
    assert_eq!(v["output_tokens"], 343);
}

#[test]
fn config_round_trips_through_toml() {
    let tmp = TempDir::new().unwrap();
    let printed = stdout(&vl3d(&["config"], tmp.path()));
    std::fs::write(tmp.path().join("c.toml"), &printed).unwrap();
    let again = vl3d(&["config", "--config", "c.toml"], tmp.path());
    assert_eq!(code(&again), 0);
    assert_eq!(stdout(&again), printed);
}

#[test]
fn indivisible_perceiver_kernel_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let text = stdout(&vl3d(&["config"], tmp.path())).replace("\nk = 2\n", "\nk = 3\n");
    std::fs::write(tmp.path().join("k3.toml"), text).unwrap();
    let o = vl3d(&["shapes", "--config", "k3.toml"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not divide"));
}

#[test]
fn unknown_preset_and_zero_threads_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&vl3d(&["shapes", "--preset", "huge"], tmp.path())), 2);
    assert_eq!(code(&vl3d(&["--threads", "0", "shapes"], tmp.path())), 2);
}

#[test]
fn gen_data_validates_count_and_refuses_overwrite() {
    let tmp = TempDir::new().unwrap();
    let small = ["gen-data", "--n", "0", "--out", "d"];
    assert_eq!(code(&vl3d(&small, tmp.path())), 2);

    let args = ["gen-data", "--n", "4", "--seed", "5", "--dims", "16,16,8", "--out", "d"];
    let first = vl3d(&args, tmp.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let manifest = std::fs::read(tmp.path().join("d/manifest.json")).unwrap();

    let refused = vl3d(&args, tmp.path());
    assert_eq!(code(&refused), 2);
    assert!(stderr(&refused).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&vl3d(&forced, tmp.path())), 0);
    assert_eq!(std::fs::read(tmp.path().join("d/manifest.json")).unwrap(), manifest);
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = TempDir::new().unwrap();
    let o = vl3d(&["pretrain-mae", "--data", "nowhere", "--out", "o"], tmp.path());
    assert_eq!(code(&o), 3);
    let first = stderr(&o).lines().next().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["code"], 3);
}

#[test]
fn bad_checkpoints_exit_4() {
    let tmp = TempDir::new().unwrap();
    let gen = vl3d(&["gen-data", "--n", "4", "--dims", "16,16,8", "--out", "d"], tmp.path());
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));

    let missing = vl3d(&["eval", "--data", "d", "--ckpt", "none.vckp", "--task", "diagnosis", "--out", "e"], tmp.path());
    assert_eq!(code(&missing), 4);

    std::fs::write(tmp.path().join("junk.vckp"), b"not a checkpoint at all").unwrap();
    let junk = vl3d(&["eval", "--data", "d", "--ckpt", "junk.vckp", "--task", "diagnosis", "--out", "e"], tmp.path());
    assert_eq!(code(&junk), 4, "{}", stderr(&junk));
}
