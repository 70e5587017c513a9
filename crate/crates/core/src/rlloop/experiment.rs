use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::tinylm::{ModelState, Sampler};

use super::config::RlConfig;
use super::grpo::sample_response;
use super::task::{gen_task_batch, TaskSpec};
use super::{rl_step, RlError, TrainMetrics};

/// Problem seed for the held-out evaluation batch, disjoint from step seeds.
const EVAL_SEED: u64 = 1 << 63;

/// Where an experiment writes, and the id stamped into every file.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub run_id: String,
    /// Manifest file name, recorded in the metrics header.
    pub manifest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub metrics: Vec<TrainMetrics>,
    pub final_accuracy: f64,
    #[serde(skip)]
    pub model: ModelState,
}

/// Greedy accuracy on `n` problems drawn with `seed`.
pub fn evaluate_greedy(m: &ModelState, task: &TaskSpec, n: usize, seed: u64, max_response: usize) -> Result<f64, RlError> {
    let problems = gen_task_batch(task, n, seed);
    let greedy = Sampler::greedy();
    let rewards = problems
        .par_iter()
        .map(|p| Ok(p.verify(&sample_response(m, &p.prompt, &greedy, 0, max_response, task.eos())?.response)))
        .collect::<Result<Vec<f64>, RlError>>()?;
    Ok(rewards.iter().sum::<f64>() / n.max(1) as f64)
}

fn write_checkpoint(m: &ModelState, path: &Path) -> Result<(), RlError> {
    let mut w = BufWriter::new(File::create(path)?);
    m.write_checkpoint(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs the configured number of steps from a fresh model, then a greedy
/// evaluation on a held-out batch.
///
/// With an output directory: `metrics.jsonl` (a header record, one record
/// per step, a final record), `summary.csv`, `final.ckpt`, and
/// `ckpt/step_NNNNNN.ckpt` every `checkpoint_every` steps. Nothing written
/// depends on wall-clock time or thread count.
pub fn run_experiment(
    cfg: &RlConfig,
    out: Option<&RunOutput>,
    mut progress: impl FnMut(&TrainMetrics),
) -> Result<ExperimentResult, RlError> {
    cfg.validate()?;
    let mut m = ModelState::init(&cfg.model())?;
    let reference = m.clone();
    let task = cfg.task();

    let mut jsonl = None;
    if let Some(o) = out {
        fs::create_dir_all(&o.dir)?;
        if cfg.checkpoint_every > 0 {
            fs::create_dir_all(o.dir.join("ckpt"))?;
        }
        let mut w = BufWriter::new(File::create(o.dir.join("metrics.jsonl"))?);
        let header = json!({
            "kind": "header",
            "run_id": o.run_id,
            "manifest": o.manifest,
            "mode": cfg.mode.short_name(),
            "seed": cfg.seed,
            "clip_eps": cfg.clip_eps,
            "kl_estimator": "k1",
            "kl_coef": cfg.kl_coef,
            "assumed_defaults": ["clip_eps", "kl_estimator"],
            "config": cfg,
        });
        writeln!(w, "{header}")?;
        jsonl = Some(w);
    }

    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = rl_step(&mut m, &reference, cfg, step)?;
        if let Some(w) = jsonl.as_mut() {
            let mut rec = serde_json::to_value(&s).map_err(|e| RlError::Config(e.to_string()))?;
            rec.as_object_mut().expect("metrics serialize to an object").insert("kind".into(), "step".into());
            writeln!(w, "{rec}")?;
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                write_checkpoint(&m, &o.dir.join("ckpt").join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
        progress(&s);
        metrics.push(s);
    }

    let final_accuracy = evaluate_greedy(&m, &task, cfg.eval_prompts, EVAL_SEED, cfg.max_response)?;
    if let (Some(o), Some(mut w)) = (out, jsonl) {
        writeln!(w, "{}", json!({ "kind": "final", "run_id": o.run_id, "greedy_accuracy": final_accuracy }))?;
        w.flush()?;
        write_checkpoint(&m, &o.dir.join("final.ckpt"))?;
        let mut csv = BufWriter::new(File::create(o.dir.join("summary.csv"))?);
        writeln!(csv, "# run_id={}", o.run_id)?;
        writeln!(csv, "step,mean_reward,mean_kl_to_ref,max_logprob_gap,clip_fraction,loss")?;
        for s in &metrics {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                s.step, s.mean_reward, s.mean_kl_to_ref, s.max_logprob_gap, s.clip_fraction, s.loss
            )?;
        }
        writeln!(csv, "final_greedy_accuracy,{final_accuracy}")?;
        csv.flush()?;
    }
    Ok(ExperimentResult { metrics, final_accuracy, model: m })
}

/// Held-out greedy accuracy of a saved model under `cfg`'s task.
pub fn evaluate_checkpoint(path: &Path, cfg: &RlConfig) -> Result<f64, RlError> {
    let m = ModelState::read_checkpoint(&mut std::io::BufReader::new(File::open(path)?))?;
    evaluate_greedy(&m, &cfg.task(), cfg.eval_prompts, EVAL_SEED, cfg.max_response)
}
