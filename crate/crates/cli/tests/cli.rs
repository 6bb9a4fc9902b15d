//! End-to-end command tests: exit codes, config handling, stage-order
//! enforcement, and prompt-file robustness.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamforge"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
seed = 7
frames = 4
height = 16
width = 16
chunk = 2
patch = 4
embed_dim = 16
heads = 2
layers = 1
dataset_clips = 4
teacher_steps = 3
teacher_batch = 2
distill_gen_steps = 2
distill_batch = 1
harvest_count = 2
ode_epochs = 1
ode_batch = 2
reward_steps = 2
eval_clips = 2
bench_prompts = 1
"#,
    )
    .unwrap();
    path
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "not_a_real_knob = 1\n").unwrap();
    let out = bin()
        .args(["train-teacher", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{:?}", out);
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["distill", "--teacher"])
        .arg(dir.path().join("nope.sfck"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn stage_pipeline_and_role_enforcement() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    // Teacher trains and is bit-identical across reruns.
    let teacher_out = dir.path().join("teacher");
    for _ in 0..2 {
        let run = bin()
            .args(["train-teacher", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&teacher_out)
            .output()
            .unwrap();
        assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let teacher_ckpt = teacher_out.join("teacher.sfck");
    let first = std::fs::read(&teacher_ckpt).unwrap();
    let rerun_out = dir.path().join("teacher2");
    let run = bin()
        .args(["train-teacher", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&rerun_out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0));
    let second = std::fs::read(rerun_out.join("teacher.sfck")).unwrap();
    assert_eq!(first, second, "teacher rerun not bit-identical");

    // Feeding the teacher checkpoint to reward-finetune violates the
    // stage-order contract and exits 3 naming both roles.
    let bad = bin()
        .args(["reward-finetune", "--config"])
        .arg(&cfg)
        .arg("--student")
        .arg(&teacher_ckpt)
        .arg("--out")
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("teacher") && msg.contains("student"), "{msg}");

    // Distill and ode-init complete; the trajectory cache is hit on replay.
    let distill_out = dir.path().join("distill");
    let run = bin()
        .args(["distill", "--config"])
        .arg(&cfg)
        .arg("--teacher")
        .arg(&teacher_ckpt)
        .arg("--out")
        .arg(&distill_out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let generator_ckpt = distill_out.join("generator.sfck");

    let ode_out = dir.path().join("ode");
    for pass in 0..2 {
        let run = bin()
            .args(["ode-init", "--config"])
            .arg(&cfg)
            .arg("--teacher")
            .arg(&teacher_ckpt)
            .arg("--generator")
            .arg(&generator_ckpt)
            .arg("--out")
            .arg(&ode_out)
            .output()
            .unwrap();
        assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(ode_out.join("ode_summary.json")).unwrap())
                .unwrap();
        assert_eq!(
            summary["harvest_cache_hit"].as_bool().unwrap(),
            pass == 1,
            "cache hit flag wrong on pass {pass}"
        );
    }
    let student_ckpt = ode_out.join("student.sfck");

    // Reward stage accepts the student checkpoint.
    let reward_out = dir.path().join("reward");
    let run = bin()
        .args(["reward-finetune", "--config"])
        .arg(&cfg)
        .arg("--student")
        .arg(&student_ckpt)
        .arg("--out")
        .arg(&reward_out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let final_ckpt = reward_out.join("final.sfck");

    // Generate: malformed prompt lines are skipped, run continues.
    let prompts = dir.path().join("prompts.jsonl");
    std::fs::write(
        &prompts,
        concat!(
            r#"{"shape":"circle","color":"red","motion":"static","speed":0.0,"direction":0.0,"seed":1}"#,
            "\n",
            "this is not json\n",
            r#"{"shape":"square","color":"blue","motion":"linear","speed":0.03,"direction":0.5}"#,
            "\n",
        ),
    )
    .unwrap();
    let gen_out = dir.path().join("frames");
    let run = bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--ckpt")
        .arg(&final_ckpt)
        .arg("--prompts")
        .arg(&prompts)
        .arg("--out")
        .arg(&gen_out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains("skipped prompt"));
    assert!(gen_out.join("clip_0000/frame_0000.ppm").exists());
    assert!(gen_out.join("clip_0001/clip.json").exists());
    assert!(!gen_out.join("clip_0002").exists());

    // Evaluate the exported frames.
    let eval_out = dir.path().join("eval");
    let run = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--frames")
        .arg(&gen_out)
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(eval_out.join("report.json").exists());
    assert!(eval_out.join("report.csv").exists());
}

#[test]
fn gradcheck_command_passes() {
    let out = bin().arg("grad-check").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all gradient checks passed"), "{text}");
}
