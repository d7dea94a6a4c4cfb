use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[generator]
categories = 3
objects_per_category = 5
samples_per_object = 6

[tokenizer]
cloud_size = 128
num_groups = 8
group_size = 8
hidden = 8

[encoder]
depth = 1
embed_dim = 8
heads = 2
pos_freqs = 2
predictor_depth = 1

[pretrain]
steps = 3
batch_size = 2
probe_objects = 4
mask = { num_targets = 2, target_scale = [0.15, 0.25], context_scale = [0.85, 1.0], max_retries = 100 }

[finetune]
steps = 3
objects_per_batch = 2
grasps_per_object = 2
head = { k = 2, hidden = 8, alpha = 0.1 }
"#;

fn jepagrasp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jepagrasp"))
        .current_dir(dir)
        .env_remove("JEPAGRASP_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = jepagrasp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

const BASE: [&str; 4] = ["--config", "tiny.toml", "--data-root", "data"];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    BASE.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    ok(d, &with(&["gen-data"]));
    assert!(d.join("data/manifest.json").is_file());
    ok(d, &with(&["make-splits", "--pack", "A"]));
    assert!(d.join("data/splits/pack_A.json").is_file());
    ok(d, &with(&["pretrain", "--seed", "1"]));
    let enc = d.join("runs/pretrain/A_s1/encoder.ckpt");
    assert!(enc.is_file());
    assert!(d.join("runs/pretrain/A_s1/metrics.csv").is_file());
    let init = format!("pretrained:{}", enc.display());
    let stdout = ok(d, &with(&["finetune", "--budget", "100", "--init", &init, "--k", "2"]));
    assert!(stdout.contains("top-logit RMSE"), "{stdout}");
    ok(d, &with(&["finetune", "--budget", "100", "--init", "scratch", "--k", "2"]));
    let run = d.join("runs/finetune/A_b100_pretrained_s0");
    assert!(run.join("model.ckpt").is_file() && run.join("summary.json").is_file());

    let eval = ok(d, &["eval", "--run", run.to_str().unwrap(), "--split", "test"]);
    assert!(eval.contains("split,rmse_top_logit"), "{eval}");
    assert!(run.join("eval_test.csv").is_file());

    ok(d, &with(&["export-curves"]));
    let curves = std::fs::read_to_string(d.join("runs/curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some("budget,init,seed,rmse_top_logit,coverage,selection_gap"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("100,pretrained,0,") && rows[1].starts_with("100,scratch,0,"));
}

#[test]
fn make_splits_is_byte_identical_per_seed() {
    let dir = setup();
    let d = dir.path();
    ok(d, &with(&["gen-data"]));
    ok(d, &with(&["make-splits", "--seed", "7"]));
    let first = std::fs::read(d.join("data/splits/pack_A.json")).unwrap();
    let again = jepagrasp(d, &with(&["make-splits", "--seed", "7"]));
    assert_eq!(code(&again), 2, "existing pack needs --overwrite");
    ok(d, &with(&["make-splits", "--seed", "7", "--overwrite"]));
    assert_eq!(std::fs::read(d.join("data/splits/pack_A.json")).unwrap(), first);
    ok(d, &with(&["make-splits", "--seed", "8", "--overwrite"]));
    assert_ne!(std::fs::read(d.join("data/splits/pack_A.json")).unwrap(), first);
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_jepagrasp"))
        .current_dir(d)
        .env("JEPAGRASP_DATA_ROOT", d.join("envdata"))
        .args(["--config", "tiny.toml", "gen-data"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("envdata/manifest.json").is_file());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = setup();
    let d = dir.path();

    let out = jepagrasp(d, &["--config", "tiny.toml", "gen-data"]);
    assert_eq!(code(&out), 2, "no data root is a configuration error");
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(
        err.lines().last().unwrap().split_whitespace().take(3).collect::<Vec<_>>(),
        ["error", "category=config", "code=2"]
    );

    std::fs::write(d.join("bad.toml"), "budgett = 3\n").unwrap();
    assert_eq!(code(&jepagrasp(d, &["--config", "bad.toml", "--data-root", "data", "gen-data"])), 2);
    assert_eq!(code(&jepagrasp(d, &with(&["finetune", "--budget", "5"]))), 2);
    assert_eq!(code(&jepagrasp(d, &with(&["make-splits"]))), 3, "missing dataset");
    assert_eq!(code(&jepagrasp(d, &["eval", "--run", "nowhere"])), 3);

    ok(d, &with(&["gen-data"]));
    assert_eq!(code(&jepagrasp(d, &with(&["gen-data"]))), 2, "refuses to overwrite");
    assert_eq!(code(&jepagrasp(d, &with(&["pretrain"]))), 3, "no pack yet");
    ok(d, &with(&["make-splits"]));

    std::fs::write(
        d.join("diverge.toml"),
        TINY.replace("steps = 3\nobjects_per_batch", "steps = 3\nlr_head = 1e38\nobjects_per_batch"),
    )
    .unwrap();
    let out = jepagrasp(d, &["--config", "diverge.toml", "--data-root", "data", "finetune", "--budget", "100"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = d.join("data/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
    assert_eq!(code(&jepagrasp(d, &with(&["make-splits", "--overwrite"]))), 3, "unsupported format version");
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let stdout = ok(dir.path(), &["gradcheck"]);
    assert!(stdout.contains("matmul") && stdout.contains("model"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}
