use std::path::Path;
use std::process::Command;

use ditar_cli::config::Arm;
use ditar_cli::output::read_table;
use ditar_cli::{cmd_ablate, cmd_flops, cmd_gen_data, cmd_sample, cmd_train, cmd_verify, CliError, Layout, RunConfig};
use ditar_core::model::checkpoint;

/// A configuration small enough to train in well under a second.
fn small() -> RunConfig {
    RunConfig::from_toml(
        r#"
[data]
count = 24
token_dim = 3
patch_size = 2
frequencies = [0.083333, 0.166667]
rms = [0.5, 1.0]
lengths = [3, 4]
prompt_patches = 1

[heldout]
count = 6

[model]
token_dim = 3
patch_size = 2
text_vocab = 6
time_features = 4
encoder = { layers = 1, width = 8, ffn = 12, heads = 2 }
lm = { layers = 1, width = 8, ffn = 12, heads = 2 }
locdit = { layers = 1, width = 8, ffn = 12, heads = 2 }

[train]
steps = 12
batch_size = 4
checkpoint_every = 4
optimizer = { learning_rate = 0.01 }

[eval]
examples = 4
prompt_patches = 1

[sample]
prompts = 2
repeats = 5
"#,
        &[],
    )
    .unwrap()
}

fn prepared(cfg: &RunConfig) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(cfg, dir.path()).unwrap();
    dir
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_byte_deterministic_and_verifiable() {
    let cfg = small();
    let (a, b) = (prepared(&cfg), prepared(&cfg));
    let (la, lb) = (Layout::new(a.path()), Layout::new(b.path()));
    assert_eq!(bytes(&la.train_data()), bytes(&lb.train_data()));
    assert_eq!(bytes(&la.heldout_data()), bytes(&lb.heldout_data()));
    assert_ne!(bytes(&la.train_data()), bytes(&la.heldout_data()));
    let v = cmd_verify(&[la.train_data()], Some(&cfg)).unwrap();
    assert_eq!(v[0].config_hash, cfg.hash());

    let mut zero = cfg.clone();
    zero.data.count = 0;
    assert!(matches!(cmd_gen_data(&zero, a.path()), Err(CliError::Config(_))));
}

#[test]
fn train_needs_data() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_train(&small(), dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn zero_steps_writes_initial_weights() {
    let mut cfg = small();
    cfg.train.steps = 0;
    let dir = prepared(&cfg);
    let rec = cmd_train(&cfg, dir.path()).unwrap();
    assert!(rec.loss_curve.is_empty());
    let ck = checkpoint::load(&Layout::new(dir.path()).checkpoint()).unwrap();
    let fresh = ditar_core::model::Ditar::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    assert_eq!(ck.model.params(), fresh.params());
    assert_eq!(ck.optimizer.unwrap().step_count(), 0);
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let cfg = small();
    let full_dir = prepared(&cfg);
    let full = cmd_train(&cfg, full_dir.path()).unwrap();

    let dir = prepared(&cfg);
    let mut first = cfg.clone();
    first.train.steps = 5;
    cmd_train(&first, dir.path()).unwrap();
    let mut rest = cfg.clone();
    rest.train.resume = true;
    let resumed = cmd_train(&rest, dir.path()).unwrap();

    assert_eq!(resumed.loss_curve, full.loss_curve);
    assert_eq!(resumed.final_metrics, full.final_metrics);
    let (a, b) = (Layout::new(full_dir.path()), Layout::new(dir.path()));
    let (ca, cb) = (checkpoint::load(&a.checkpoint()).unwrap(), checkpoint::load(&b.checkpoint()).unwrap());
    assert_eq!(ca.model.params(), cb.model.params());
}

#[test]
fn training_outputs_carry_the_config_hash() {
    let cfg = small();
    let dir = prepared(&cfg);
    let rec = cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(rec.loss_curve.len(), 12);
    assert_eq!(rec.checkpoint.as_ref().unwrap().step, 12);
    let l = Layout::new(dir.path());
    let files = [l.checkpoint(), l.train_dir().join("record.json"), l.train_dir().join("loss.tsv")];
    for v in cmd_verify(&files, Some(&cfg)).unwrap() {
        assert_eq!(v.config_hash, cfg.hash());
    }
    let (_, cols, rows) = read_table(&l.train_dir().join("loss.tsv")).unwrap();
    assert_eq!(cols, vec!["step", "l_diff", "l_stop", "total"]);
    assert_eq!(rows.len(), 12);

    let mut other = cfg.clone();
    other.train.steps = 13;
    assert!(matches!(cmd_verify(&files[..1], Some(&other)), Err(CliError::Data(_))));
}

#[test]
fn sample_sweep_table_and_zero_temperature() {
    let mut cfg = small();
    cfg.sample.sampler.nfe = 2;
    let dir = prepared(&cfg);
    assert!(matches!(cmd_sample(&cfg, dir.path(), None), Err(CliError::Data(_))));
    cmd_train(&cfg, dir.path()).unwrap();
    let s = cmd_sample(&cfg, dir.path(), None).unwrap();
    assert_eq!(s.rows.len(), 3);
    assert_eq!(s.rows[0].dispersion, 0.0);
    for per_prompt in &s.generations[0] {
        assert!(per_prompt.iter().all(|g| g == &per_prompt[0]));
    }
    assert!(s.rows.iter().all(|r| r.finite && r.max_abs.is_finite()));
    let table = Layout::new(dir.path()).sample_dir().join("dispersion.tsv");
    let (hash, _, rows) = read_table(&table).unwrap();
    assert_eq!((hash, rows.len()), (cfg.hash(), 3));
    cmd_verify(&[table], Some(&cfg)).unwrap();

    // Text only: nothing to continue, so draws start at the first patch.
    cfg.sample.prompt_patches = Some(0);
    let t = cmd_sample(&cfg, dir.path(), None).unwrap();
    assert_eq!(t.rows[0].dispersion, 0.0);
    assert!(t.rows.iter().all(|r| r.finite));
    assert_ne!(t.generations[0][0][0], s.generations[0][0][0]);
}

#[test]
fn single_arm_sweep_equals_train() {
    let cfg = small();
    let dir = prepared(&cfg);
    let plain = cmd_train(&cfg, dir.path()).unwrap();
    let mut sweep = cfg.clone();
    sweep.ablate.arms = vec![Arm {
        name: "only".into(),
        ..Arm::default()
    }];
    let out = cmd_ablate(&sweep, dir.path(), None).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].record, plain);
    let arm = Layout::new(&out[0].root);
    assert_eq!(bytes(&arm.checkpoint()), bytes(&Layout::new(dir.path()).checkpoint()));
}

#[test]
fn sweep_arms_share_seeds_and_reuse_weights() {
    let mut cfg = small();
    cfg.ablate.arms = vec![
        Arm {
            name: "base".into(),
            ..Arm::default()
        },
        Arm {
            name: "w0".into(),
            guidance_scale: Some(0.0),
            ..Arm::default()
        },
        Arm {
            name: "h0".into(),
            history: Some(0),
            ..Arm::default()
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_ablate(&cfg, dir.path(), None).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].record.loss_curve, out[1].record.loss_curve);
    assert_ne!(out[0].record.loss_curve, out[2].record.loss_curve);
    assert_eq!(out[1].record.config.eval.sampler.guidance_scale, 0.0);
    let (_, _, rows) = read_table(&Layout::new(dir.path()).ablate_dir().join("summary.tsv")).unwrap();
    assert_eq!(rows.len(), 3);

    let only = cmd_ablate(&cfg, tempfile::tempdir().unwrap().path(), Some("h0")).unwrap();
    assert_eq!(only[0].record, out[2].record);

    cfg.ablate.arms.push(Arm {
        name: "base".into(),
        ..Arm::default()
    });
    assert!(matches!(cmd_ablate(&cfg, dir.path(), None), Err(CliError::Config(_))));
}

#[test]
fn flops_report_and_unit_spec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml("[flops]\nsource = \"model\"\nguidance = false\nnfe = 1", &[]).unwrap();
    let one = cmd_flops(&cfg, dir.path()).unwrap();
    assert_eq!((one.nfe_multiplier, one.guidance_multiplier), (1, 1));
    let cfg4 = RunConfig::from_toml("[flops]\nsource = \"model\"\nnfe = 4", &[]).unwrap();
    let four = cmd_flops(&cfg4, dir.path()).unwrap();
    assert_eq!(four.locdit, 8 * one.locdit);
    let report = Layout::new(dir.path()).flops_dir().join("report.tsv");
    cmd_verify(&[report], Some(&cfg4)).unwrap();
}

fn ditar(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ditar")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(ditar(&["--out", out, "--set", "bogus=1", "gen-data"]).status.code(), Some(2));
    assert_eq!(ditar(&["--out", out, "train"]).status.code(), Some(3));
    let garbage = dir.path().join("junk.bin");
    std::fs::write(&garbage, b"nothing here").unwrap();
    assert_eq!(ditar(&["verify", garbage.to_str().unwrap()]).status.code(), Some(3));

    let ok = ditar(&["--out", out, "--seed", "3", "flops"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("total_tflops"));
    let report = dir.path().join("flops/report.tsv");
    let v = ditar(&["--seed", "3", "--config", "/dev/null", "verify", report.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0), "{}", String::from_utf8_lossy(&v.stderr));
    let v = ditar(&["--seed", "4", "--config", "/dev/null", "verify", report.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(3));
}

#[test]
fn numeric_abort_keeps_last_good_checkpoint() {
    let mut cfg = small();
    cfg.train.optimizer.learning_rate = 1e150;
    cfg.train.steps = 50;
    let dir = prepared(&cfg);
    let err = cmd_train(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let l = Layout::new(dir.path());
    let ck = checkpoint::load(&l.last_good()).unwrap();
    assert!(ck.model.params().iter().all(|(_, _, p)| p.value.is_finite()));
}
