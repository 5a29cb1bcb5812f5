use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn e2etts(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e2etts"))
        .args(args)
        .arg("--run-dir")
        .arg(run_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
# tiny model and schedule for plumbing tests
am_d_model = 16
am_heads = 2
am_mlp = 32
am_layers = 1
fm_d_model = 16
fm_heads = 2
fm_mlp = 32
fm_layers = 1
fm_time_dim = 8
batch_size = 2
stage1_steps = 6
stage2_steps = 4
warmup_steps = 2
eval_prompts = 2
eval_speakers = 2
eval_turns = 2
euler_steps = 2
apo_prompts = 3
apo_n = 4
dpo_batch = 2
";

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2etts(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["am", "fm", "joint", "tokenizer"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("true")), "{out}");
    }
    assert!(dir.path().join("reports/gradcheck.tsv").exists());
    assert!(dir.path().join("config.echo").exists());
}

#[test]
fn gradcheck_exits_nonzero_when_tolerance_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2etts(dir.path(), &["gradcheck", "--set", "gradcheck_tolerance=1e-14"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("false"));
}

#[test]
fn unknown_config_key_fails_fast_and_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let o = e2etts(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("peak_lr") && err.contains("stage1_steps"), "{err}");
    assert!(!dir.path().join("metrics.tsv").exists());
}

#[test]
fn unknown_subcommand_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2etts(dir.path(), &["finetune"]);
    assert!(!o.status.success());
}

#[test]
fn gen_data_stage_one_is_single_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2etts(dir.path(), &["gen-data", "--stage", "1", "--n", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1\t200"), "{out}");
    assert!(dir.path().join("reports/data_stage1.txt").exists());
}

#[test]
fn eval_scores_transcript_files() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.tsv");
    let h = dir.path().join("hyp.tsv");
    fs::write(&r, "0\tA\tthe cat sat\n1\tB\ton the mat\n").unwrap();
    fs::write(&h, "0\tx\ton the mat\n1\ty\tthe cat sat\n").unwrap();
    let o = e2etts(
        dir.path(),
        &["eval", "--metric", "cpwer", "--ref", r.to_str().unwrap(), "--hyp", h.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("rate\t0\n"), "{}", stdout(&o));
}

#[test]
fn train_eval_sample_apo_dpo_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let o = e2etts(&run, &["train", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 10);
    for ck in ["stage1", "stage2", "final"] {
        assert!(run.join("checkpoints").join(format!("{ck}.manifest")).exists(), "{ck}");
    }
    let echo = fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("stage1_steps = 6"), "{echo}");

    let o = e2etts(&run, &["eval", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cpcer"));
    assert!(run.join("reports/eval_final.tsv").exists());

    let o = e2etts(&run, &["sample", "--config", cfg, "--speakers", "3", "--turns", "6", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for section in ["# script", "# tokens", "# frames", "# transcript", "# scores"] {
        assert!(out.contains(section), "{section}");
    }

    let o = e2etts(&run, &["apo-pairs", "--config", cfg, "--n", "4", "--temperature", "1.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("reports/pairs.tsv").exists());
    assert!(run.join("reports/apo_stats.tsv").exists());

    // An untrained model may harvest no pairs; DPO then refuses to run.
    let harvested = fs::read_to_string(run.join("reports/pairs.tsv")).unwrap();
    if harvested.trim().is_empty() {
        let o = e2etts(&run, &["dpo-train", "--config", cfg]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("empty preference pair set"), "{}", stderr(&o));
    }
    fs::write(run.join("reports/pairs.tsv"), "0\t3 5 125\t3 6 125\n1\t7 125\t7 7 7 125\n").unwrap();
    let o = e2etts(&run, &["dpo-train", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("batches\t1"), "{}", stdout(&o));
    assert!(run.join("reports/dpo_metrics.tsv").exists());
    assert!(run.join("checkpoints/dpo.manifest").exists());
}

#[test]
fn training_is_reproducible_from_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(e2etts(&a, &["train", "--config", cfg.to_str().unwrap()]).status.success());
    let echoed = a.join("config.echo");
    assert!(e2etts(&b, &["train", "--config", echoed.to_str().unwrap()]).status.success());
    assert_eq!(
        fs::read(a.join("metrics.tsv")).unwrap(),
        fs::read(b.join("metrics.tsv")).unwrap()
    );
}
