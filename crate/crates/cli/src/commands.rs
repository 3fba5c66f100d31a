use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use ditar_core::flops::{ditar_report, CostReport};
use ditar_core::model::{checkpoint, Ditar};
use ditar_core::sampler::{dispersion, SamplerConfig};
use ditar_core::training::{
    evaluate, load_dataset, make_dataset, save_dataset, step_rng, train, AdamW, StepRecord, ToyExample,
};
use ditar_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{Arm, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{
    create_dir, file_meta, fmt_f, sha256_file, verify_file, write_table, CheckpointRef, RunRecord, Verified,
};

/// Where each command reads and writes under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_data(&self) -> PathBuf {
        self.data_dir().join("train.ds")
    }

    pub fn heldout_data(&self) -> PathBuf {
        self.data_dir().join("heldout.ds")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.train_dir().join("checkpoint.ckpt")
    }

    pub fn last_good(&self) -> PathBuf {
        self.train_dir().join("last_good.ckpt")
    }

    pub fn sample_dir(&self) -> PathBuf {
        self.root.join("sample")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn arm_root(&self, name: &str) -> PathBuf {
        self.ablate_dir().join(name)
    }

    pub fn flops_dir(&self) -> PathBuf {
        self.root.join("flops")
    }
}

#[derive(Clone, Debug)]
pub struct GenData {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub train_examples: usize,
    pub heldout_examples: usize,
}

/// Writes the training and held-out toy datasets.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<GenData> {
    cfg.validate()?;
    let layout = Layout::new(out);
    create_dir(&layout.data_dir())?;
    let meta = file_meta(cfg, serde_json::Value::Null);
    let train_cfg = cfg.train_data();
    let heldout_cfg = cfg.heldout_data();
    let train = make_dataset(&train_cfg)?;
    let heldout = make_dataset(&heldout_cfg)?;
    save_dataset(&layout.train_data(), &train_cfg, &train, &meta)?;
    save_dataset(&layout.heldout_data(), &heldout_cfg, &heldout, &meta)?;
    Ok(GenData {
        train: layout.train_data(),
        heldout: layout.heldout_data(),
        train_examples: train.len(),
        heldout_examples: heldout.len(),
    })
}

fn load_split(path: &Path, want: &ditar_core::training::DataConfig) -> CliResult<Vec<ToyExample>> {
    if !path.exists() {
        return Err(CliError::Data(format!("{} is missing; run gen-data first", path.display())));
    }
    let ds = load_dataset(path)?;
    if &ds.config != want {
        return Err(CliError::Data(format!(
            "{} was generated from a different data config",
            path.display()
        )));
    }
    Ok(ds.examples)
}

fn load_data(cfg: &RunConfig, layout: &Layout) -> CliResult<(Vec<ToyExample>, Vec<ToyExample>)> {
    Ok((
        load_split(&layout.train_data(), &cfg.train_data())?,
        load_split(&layout.heldout_data(), &cfg.heldout_data())?,
    ))
}

fn save_checkpoint(path: &Path, cfg: &RunConfig, model: &Ditar, opt: &AdamW) -> CliResult<CheckpointRef> {
    let meta = file_meta(cfg, serde_json::json!({ "step": opt.step_count() }));
    checkpoint::save(path, model, Some(opt), &meta)?;
    Ok(CheckpointRef {
        path: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        step: opt.step_count(),
        sha256: sha256_file(path)?,
    })
}

fn write_loss_table(dir: &Path, hash: &str, curve: &[StepRecord]) -> CliResult<()> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|r| vec![r.step.to_string(), fmt_f(r.l_diff), fmt_f(r.l_stop), fmt_f(r.total)])
        .collect();
    write_table(&dir.join("loss.tsv"), hash, &["step", "l_diff", "l_stop", "total"], &rows)
}

/// Final checkpoint, held-out metrics, loss table and run record.
fn finish_training(
    cfg: &RunConfig,
    layout: &Layout,
    model: &Ditar,
    opt: &AdamW,
    curve: Vec<StepRecord>,
    heldout: &[ToyExample],
    extra: serde_json::Value,
) -> CliResult<RunRecord> {
    let dir = layout.train_dir();
    let ck = save_checkpoint(&layout.checkpoint(), cfg, model, opt)?;
    let eval = cfg.eval_config();
    let metrics = if eval.examples > 0 {
        Some(evaluate(model, heldout, &cfg.heldout_data(), &eval)?)
    } else {
        None
    };
    let mut rec = RunRecord::new("train", cfg);
    write_loss_table(&dir, &rec.config_hash, &curve)?;
    rec.loss_curve = curve;
    rec.final_metrics = metrics;
    rec.checkpoint = Some(ck);
    rec.extra = extra;
    rec.save(&dir)?;
    Ok(rec)
}

/// Trains from scratch, or from the checkpoint in the output directory when
/// `train.resume` is set, then evaluates on the held-out split.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<RunRecord> {
    cfg.validate()?;
    let layout = Layout::new(out);
    let (data, heldout) = load_data(cfg, &layout)?;
    let dir = layout.train_dir();
    create_dir(&dir)?;
    let tc = cfg.train_config();

    let (mut model, mut opt, mut curve) = if cfg.train.resume && layout.checkpoint().exists() {
        let ck = checkpoint::load(&layout.checkpoint())?;
        if ck.model.config() != &cfg.model {
            return Err(CliError::Config("checkpoint model config differs from [model]".into()));
        }
        let opt = ck
            .optimizer
            .ok_or_else(|| CliError::Data("checkpoint holds no optimizer state".into()))?;
        let step = opt.step_count() as usize;
        let mut curve = RunRecord::load(&dir).map(|r| r.loss_curve).unwrap_or_default();
        if curve.len() < step {
            return Err(CliError::Data("record is shorter than the checkpoint; cannot resume".into()));
        }
        curve.truncate(step);
        (ck.model, opt, curve)
    } else {
        let model = Ditar::new(cfg.model.clone(), cfg.init_seed())?;
        let opt = AdamW::new(tc.optimizer.clone(), model.params());
        (model, opt, Vec::new())
    };

    let every = cfg.train.checkpoint_every;
    let result = train(&mut model, &mut opt, &data, &tc, |rec, m, o| {
        curve.push(*rec);
        let done = o.step_count() as usize;
        if every > 0 && done % every == 0 && done < tc.steps {
            let ck = save_checkpoint(&layout.checkpoint(), cfg, m, o).map_err(|e| CoreError::Format(e.to_string()))?;
            let mut partial = RunRecord::new("train", cfg);
            partial.loss_curve = curve.clone();
            partial.checkpoint = Some(ck);
            partial.save(&dir).map_err(|e| CoreError::Format(e.to_string()))?;
        }
        Ok(())
    });
    match result {
        Ok(_) => finish_training(cfg, &layout, &model, &opt, curve, &heldout, serde_json::Value::Null),
        Err(CoreError::NonFinite { op }) => {
            // The failed step left the parameters untouched.
            let ck = save_checkpoint(&layout.last_good(), cfg, &model, &opt)?;
            let mut partial = RunRecord::new("train", cfg);
            partial.loss_curve = curve;
            partial.checkpoint = Some(ck);
            partial.extra = serde_json::json!({ "aborted": op });
            partial.save(&dir)?;
            Err(CliError::Numeric(format!(
                "non-finite {op} at step {}; last good checkpoint at {}",
                opt.step_count(),
                layout.last_good().display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// One row of the per-temperature plot table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub temperature: f64,
    /// Spread of the first generated patch across repeats, averaged over
    /// prompts.
    pub dispersion: f64,
    pub max_abs: f64,
    pub finite: bool,
    pub mean_patches: f64,
    pub runaway_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub rows: Vec<TemperatureRow>,
    pub record: RunRecord,
    /// Generated token values, indexed `[temperature][prompt][repeat]`.
    pub generations: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Continues held-out prompts from a checkpoint across the temperature
/// sweep and writes the sequences and a dispersion table.
pub fn cmd_sample(cfg: &RunConfig, out: &Path, checkpoint_path: Option<&Path>) -> CliResult<SampleOutcome> {
    cfg.validate()?;
    let layout = Layout::new(out);
    let ck_path = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| layout.checkpoint());
    if !ck_path.exists() {
        return Err(CliError::Data(format!("missing checkpoint {}", ck_path.display())));
    }
    let ck = checkpoint::load(&ck_path)?;
    let ck_step = ck.optimizer.as_ref().map_or(0, AdamW::step_count);
    let model = ck.model;
    let mc = model.config();
    if mc.patch_size != cfg.data.patch_size || mc.token_dim != cfg.data.token_dim {
        return Err(CliError::Config("checkpoint patch size or token dim differs from [data]".into()));
    }
    let heldout = load_split(&layout.heldout_data(), &cfg.heldout_data())?;
    let sc = &cfg.sample;
    let n_prompts = sc.prompts.min(heldout.len());
    if n_prompts == 0 || sc.repeats == 0 || sc.temperatures.is_empty() {
        return Err(CliError::Config("sample needs prompts, repeats and temperatures".into()));
    }
    let longest = cfg.data.lengths.iter().copied().max().unwrap_or(0);
    let prompt_patches = sc.prompt_patches.unwrap_or(cfg.data.prompt_patches);
    let budget = longest.saturating_sub(prompt_patches) + sc.extra_patches;
    let (p, d) = (mc.patch_size, mc.token_dim);

    let mut rows = Vec::new();
    let mut table = Vec::new();
    let mut generations = Vec::new();
    for &tau in &sc.temperatures {
        let scfg = SamplerConfig {
            temperature: tau,
            ..sc.sampler.clone()
        };
        let (mut disp, mut max_abs, mut finite, mut patches, mut runaway) = (0.0, 0.0f64, true, 0usize, 0usize);
        let mut per_prompt = Vec::new();
        for (i, e) in heldout[..n_prompts].iter().enumerate() {
            let prompt = (prompt_patches > 0).then(|| e.prompt(prompt_patches, p)).transpose()?;
            let mut firsts = Vec::new();
            let mut per_repeat = Vec::new();
            for r in 0..sc.repeats {
                // Repeat r uses the same stream at every temperature.
                let mut rng = step_rng(cfg.sample_seed(), (i * sc.repeats + r) as u64);
                let g = model.generate(&e.text_ids, prompt.as_ref(), &scfg, budget, &mut rng)?;
                finite &= g.tokens.is_finite();
                max_abs = g.tokens.data().iter().fold(max_abs, |m, x| m.max(x.abs()));
                patches += g.patches.len();
                runaway += g.is_runaway() as usize;
                if let Some(first) = g.patches.first() {
                    firsts.push(first.tokens().clone());
                }
                for (k, tok) in g.tokens.data().chunks(d).enumerate() {
                    let mut row = vec![fmt_f(tau), i.to_string(), r.to_string(), k.to_string()];
                    row.extend(tok.iter().map(|&x| fmt_f(x)));
                    table.push(row);
                }
                per_repeat.push(g.tokens.into_data());
            }
            disp += dispersion(&firsts);
            per_prompt.push(per_repeat);
        }
        generations.push(per_prompt);
        let draws = (n_prompts * sc.repeats) as f64;
        rows.push(TemperatureRow {
            temperature: tau,
            dispersion: disp / n_prompts as f64,
            max_abs,
            finite,
            mean_patches: patches as f64 / draws,
            runaway_rate: runaway as f64 / draws,
        });
    }

    let dir = layout.sample_dir();
    create_dir(&dir)?;
    let mut rec = RunRecord::new("sample", cfg);
    let mut cols: Vec<String> = ["temperature", "prompt", "repeat", "token"].map(String::from).to_vec();
    cols.extend((0..d).map(|j| format!("x{j}")));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    write_table(&dir.join("samples.tsv"), &rec.config_hash, &cols, &table)?;
    let disp_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f(r.temperature),
                fmt_f(r.dispersion),
                fmt_f(r.max_abs),
                (r.finite as u8).to_string(),
                fmt_f(r.mean_patches),
                fmt_f(r.runaway_rate),
            ]
        })
        .collect();
    write_table(
        &dir.join("dispersion.tsv"),
        &rec.config_hash,
        &["temperature", "dispersion", "max_abs", "finite", "mean_patches", "runaway_rate"],
        &disp_rows,
    )?;
    rec.checkpoint = Some(CheckpointRef {
        path: ck_path.display().to_string(),
        step: ck_step,
        sha256: sha256_file(&ck_path)?,
    });
    rec.extra = serde_json::json!({ "temperatures": rows });
    rec.save(&dir)?;
    Ok(SampleOutcome {
        rows,
        record: rec,
        generations,
    })
}

#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub root: PathBuf,
    pub record: RunRecord,
}

fn check_arm_names(arms: &[Arm]) -> CliResult<()> {
    let mut seen = BTreeSet::new();
    for a in arms {
        let ok = !a.name.is_empty()
            && a.name != "."
            && a.name != ".."
            && a.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !ok {
            return Err(CliError::Config(format!("arm name `{}` is not a plain directory name", a.name)));
        }
        if !seen.insert(a.name.to_ascii_lowercase()) {
            return Err(CliError::Config(format!("arms overlap: output path `{}` is used twice", a.name)));
        }
    }
    Ok(())
}

/// Runs every sweep arm (or only `only`) in its own directory. Arms whose
/// training settings coincide with an earlier arm reuse its weights and
/// only re-evaluate.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, only: Option<&str>) -> CliResult<Vec<ArmOutcome>> {
    cfg.validate()?;
    let arms = &cfg.ablate.arms;
    if arms.is_empty() {
        return Err(CliError::Config("ablate needs at least one [[ablate.arms]] entry".into()));
    }
    check_arm_names(arms)?;
    if let Some(name) = only {
        if !arms.iter().any(|a| a.name == name) {
            return Err(CliError::Config(format!("no arm named `{name}`")));
        }
    }
    let layout = Layout::new(out);
    let mut trained: HashMap<String, PathBuf> = HashMap::new();
    let mut outcomes = Vec::new();
    for arm in arms.iter().filter(|a| only.is_none_or(|n| n == a.name)) {
        let acfg = cfg.with_arm(arm)?;
        let root = layout.arm_root(&arm.name);
        cmd_gen_data(&acfg, &root)?;
        let key = acfg.training_hash();
        let record = match trained.get(&key) {
            Some(src) => reuse_weights(&acfg, &root, src)?,
            None => cmd_train(&acfg, &root)?,
        };
        trained.insert(key, root.clone());
        outcomes.push(ArmOutcome {
            arm: arm.clone(),
            root,
            record,
        });
    }
    write_ablation_summary(cfg, &layout, &outcomes)?;
    Ok(outcomes)
}

fn reuse_weights(cfg: &RunConfig, root: &Path, src: &Path) -> CliResult<RunRecord> {
    let layout = Layout::new(root);
    let src_layout = Layout::new(src);
    let ck = checkpoint::load(&src_layout.checkpoint())?;
    let opt = ck
        .optimizer
        .ok_or_else(|| CliError::Data("source checkpoint holds no optimizer state".into()))?;
    let curve = RunRecord::load(&src_layout.train_dir())?.loss_curve;
    let (_, heldout) = load_data(cfg, &layout)?;
    create_dir(&layout.train_dir())?;
    let extra = serde_json::json!({ "weights_from": src.display().to_string() });
    finish_training(cfg, &layout, &ck.model, &opt, curve, &heldout, extra)
}

fn write_ablation_summary(cfg: &RunConfig, layout: &Layout, outcomes: &[ArmOutcome]) -> CliResult<()> {
    let dir = layout.ablate_dir();
    create_dir(&dir)?;
    let mut rec = RunRecord::new("ablate", cfg);
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            let c = &o.record.config;
            let m = o.record.final_metrics.clone().unwrap_or_default();
            vec![
                o.arm.name.clone(),
                c.model.history.to_string(),
                c.model.patch_size.to_string(),
                fmt_f(c.eval.sampler.guidance_scale),
                fmt_f(c.eval.sampler.temperature),
                c.eval.sampler.nfe.to_string(),
                opt(o.record.loss_curve.last().map(|r| fmt_f(r.total))),
                fmt_f(m.frequency_accuracy),
                fmt_f(m.continuation_rmse),
                fmt_f(m.boundary_discontinuity),
                fmt_f(m.stop_accuracy),
                fmt_f(m.runaway_rate),
            ]
        })
        .collect();
    write_table(
        &dir.join("summary.tsv"),
        &rec.config_hash,
        &[
            "arm",
            "history",
            "patch_size",
            "guidance_scale",
            "temperature",
            "nfe",
            "final_loss",
            "frequency_accuracy",
            "continuation_rmse",
            "boundary_discontinuity",
            "stop_accuracy",
            "runaway_rate",
        ],
        &rows,
    )?;
    rec.extra = serde_json::json!({
        "arms": outcomes.iter().map(|o| serde_json::json!({
            "name": o.arm.name,
            "config_hash": o.record.config_hash,
            "final_metrics": o.record.final_metrics,
        })).collect::<Vec<_>>(),
    });
    rec.save(&dir)?;
    Ok(())
}

/// Inference cost report for the configured architecture.
pub fn cmd_flops(cfg: &RunConfig, out: &Path) -> CliResult<CostReport> {
    cfg.validate()?;
    let report = ditar_report(&cfg.report_config())?;
    let dir = Layout::new(out).flops_dir();
    create_dir(&dir)?;
    let mut rec = RunRecord::new("flops", cfg);
    let rows: Vec<Vec<String>> = report
        .to_table()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    write_table(&dir.join("report.tsv"), &rec.config_hash, &["component", "value"], &rows)?;
    rec.extra = serde_json::to_value(&report).map_err(|e| CliError::Data(e.to_string()))?;
    rec.save(&dir)?;
    Ok(report)
}

/// Checks every file's embedded config hash.
pub fn cmd_verify(paths: &[PathBuf], expected: Option<&RunConfig>) -> CliResult<Vec<Verified>> {
    if paths.is_empty() {
        return Err(CliError::Config("verify needs at least one file".into()));
    }
    paths.iter().map(|p| verify_file(p, expected)).collect()
}
