use std::io::Write as _;
use std::path::Path;

use rematch::backbone::BackboneConfig;
use rematch::checkpoint;
use rematch::dataset::{DataConfig, Dataset};
use rematch::evalkit::{self, fingerprint, gradcheck_suite};
use rematch::matcher::{assemble_with_slot, build_unified_mask, validate_mask, MatchingMode, Slot};
use rematch::model::ModelConfig;
use rematch::synth::{TaskConfig, World};
use rematch::trainer::{self, check_compatible, check_model_task, TrainConfig, TrainState, METRICS_HEADER};
use rematch::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::files::{io_err, load_json, sibling, write, RunManifest};

pub enum Outcome {
    Done,
    /// Completed, but the result is a failure with this exit code.
    Failed(u8),
}

pub fn gen_data(config: &Path, out: &Path) -> Result<Outcome> {
    let cfg: DataConfig = load_json(config)?;
    cfg.validate("data")?;
    RunManifest::new("gen-data", cfg.task.seed, &cfg)
        .input("config", config)
        .artifact("dataset", out)
        .save(&sibling(out, "manifest.json"))?;
    let data = Dataset::generate(&cfg)?;
    data.save(out)?;
    eprintln!(
        "wrote {} training instances, {} eval queries, {} corpus documents to {}",
        data.train.len(),
        data.eval.queries.len(),
        data.eval.corpus.len(),
        out.display()
    );
    Ok(Outcome::Done)
}

/// Metrics rows already on disk for steps up to `step`, header first.
fn resumed_metrics(path: &Path, step: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Contract(format!("malformed metrics row in {}: {line}", path.display())))?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn train(config: &Path, data_path: &Path, out: &Path, resume: Option<&Path>) -> Result<Outcome> {
    let cfg: TrainConfig = load_json(config)?;
    cfg.validate("train")?;
    let data = Dataset::load(data_path)?;
    check_compatible(&cfg, &data.config.task)?;
    let task_fp = fingerprint(&data.config.task);
    let mut state = match resume {
        Some(ckpt) => {
            let s = checkpoint::load(ckpt)?;
            if s.config != cfg {
                return Err(Error::Compatibility(format!(
                    "checkpoint {} was written with a different training config",
                    ckpt.display()
                )));
            }
            if s.task_fingerprint.as_ref().is_some_and(|f| *f != task_fp) {
                return Err(Error::Compatibility(format!(
                    "checkpoint {} was trained on a different task",
                    ckpt.display()
                )));
            }
            s
        }
        None => TrainState::new(cfg.clone())?,
    };
    state.task_fingerprint = Some(task_fp);

    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let metrics_path = out.join("metrics.csv");
    let final_path = out.join("final.ckpt");
    let mut manifest = RunManifest::new("train", cfg.seed, &cfg)
        .input("config", config)
        .input("data", data_path)
        .artifact("metrics", &metrics_path)
        .artifact("final_checkpoint", &final_path);
    if let Some(r) = resume {
        manifest = manifest.input("resume", r);
    }
    manifest.save(&out.join("manifest.json"))?;

    let prefix = resumed_metrics(&metrics_path, state.step)?;
    write(&metrics_path, prefix.as_bytes())?;
    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);

    let report_every = (cfg.steps / 20).max(1);
    let result = trainer::run(&mut state, &data.train, cfg.steps, |s, m| {
        writeln!(metrics, "{}", m.csv_line()).map_err(|e| io_err(&metrics_path, e))?;
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
            checkpoint::save(s, &out.join(format!("step-{:06}.ckpt", m.step)))?;
        }
        if m.step % report_every == 0 {
            eprintln!("step {}/{} loss {:.4} lr {:.3e}", m.step, cfg.steps, m.loss_total, m.lr);
        }
        Ok(())
    });
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
    result?;
    checkpoint::save(&state, &final_path)?;
    eprintln!("wrote {}", final_path.display());
    Ok(Outcome::Done)
}

pub fn eval(ckpt: &Path, data_path: &Path, out: &Path, embeddings: Option<&Path>) -> Result<Outcome> {
    let state = checkpoint::load(ckpt)?;
    let data = Dataset::load(data_path)?;
    check_model_task(&state.model.config, &data.config.task)?;
    if let Some(fp) = &state.task_fingerprint {
        let found = fingerprint(&data.config.task);
        if *fp != found {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained on task {fp}, dataset holds task {found}"
            )));
        }
    }
    let mut manifest = RunManifest::new("eval", state.config.seed, &state.config)
        .input("checkpoint", ckpt)
        .input("data", data_path)
        .artifact("report", out);
    if let Some(e) = embeddings {
        manifest = manifest.artifact("embeddings", e);
    }
    manifest.save(&sibling(out, "manifest.json"))?;
    let mut report = evalkit::evaluate(&state.model, &data.eval)?;
    // tie the report to the producing run rather than the architecture alone
    report.config_fingerprint = fingerprint(&state.config);
    write(out, report.to_json().as_bytes())?;
    if let Some(e) = embeddings {
        evalkit::export_embeddings(&state.model, &data.eval, e)?;
    }
    eprintln!("hit@1 {:.4} over {} queries", report.hit_at_1, report.n_queries);
    Ok(Outcome::Done)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckConfig {
    #[serde(default = "tiny_model")]
    model: ModelConfig,
    #[serde(default)]
    seed: u64,
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::tiny(),
        k: 2,
        chat_wrap: false,
    }
}

pub fn gradcheck(config: &Path) -> Result<Outcome> {
    let cfg: GradcheckConfig = load_json(config)?;
    cfg.model.validate("gradcheck.model")?;
    let report = gradcheck_suite(&cfg.model, cfg.seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    for c in &report.components {
        eprintln!(
            "{:<11} {} checked {:>3} failures {} max rel {:.2e}",
            c.component,
            if c.passed { "PASS" } else { "FAIL" },
            c.checked,
            c.failures,
            c.max_rel_error
        );
    }
    Ok(if report.passed { Outcome::Done } else { Outcome::Failed(3) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskDumpConfig {
    #[serde(default)]
    model: ModelConfig,
    task: TaskConfig,
    #[serde(default)]
    matching_mode: MatchingMode,
    /// Training instance rendered into the layout.
    #[serde(default)]
    instance: u64,
}

pub fn mask_dump(config: &Path, out: &Path) -> Result<Outcome> {
    let cfg: MaskDumpConfig = load_json(config)?;
    cfg.model.validate("mask_dump.model")?;
    cfg.task.validate("mask_dump.task")?;
    if cfg.matching_mode == MatchingMode::Off {
        return Err(Error::Config {
            path: "matching_mode".into(),
            message: "mask dump needs matching enabled".into(),
        });
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = RunManifest::new("mask-dump", cfg.task.seed, &cfg).input("config", config);
    let stems = [(Slot::One, out.join("mask-slot1")), (Slot::Two, out.join("mask-slot2"))];
    let names = [["slot1_pgm", "slot1_json"], ["slot2_pgm", "slot2_json"]];
    for ((_, stem), [pgm, json]) in stems.iter().zip(names) {
        manifest = manifest
            .artifact(pgm, &stem.with_extension("pgm"))
            .artifact(json, &stem.with_extension("json"));
    }
    manifest.save(&out.join("manifest.json"))?;

    let inst = World::new(&cfg.task)?.instance(cfg.instance);
    for (slot, stem) in &stems {
        let layout = assemble_with_slot(
            &inst.query,
            &inst.positive,
            &inst.hard_negative,
            cfg.matching_mode,
            cfg.model.backbone.max_seq_len,
            *slot,
        )?;
        let mask = build_unified_mask(&layout)?;
        validate_mask(&layout, &mask)?;
        evalkit::dump_mask(&layout, &mask, stem)?;
        // what landed on disk must still satisfy the visibility rules
        let pgm = stem.with_extension("pgm");
        let bytes = std::fs::read(&pgm).map_err(|e| io_err(&pgm, e))?;
        validate_mask(&layout, &evalkit::read_pgm(&pgm, &bytes)?)?;
        eprintln!("wrote {} ({}x{})", pgm.display(), layout.len(), layout.len());
    }
    Ok(Outcome::Done)
}
