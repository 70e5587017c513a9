//! Critic-free GRPO over a verifiable modular-arithmetic task: rollout on the
//! inference path, verification, group-relative advantages, re-scoring on
//! the training path, and one clipped policy-gradient update per batch.

mod config;
mod experiment;
mod grpo;
mod task;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::blocktensor::Matrix;
use crate::tinylm::{log_softmax, ModelError, ModelState, Sampler};

pub use config::RlConfig;
pub use experiment::{evaluate_checkpoint, evaluate_greedy, run_experiment, ExperimentResult, RunOutput};
pub use grpo::{generate_group, grpo_advantage, ppo_loss, sample_response, PpoOutput, PpoParams, Trajectory};
pub use task::{gen_task_batch, make_problem, Problem, TaskSpec};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Exact per-token KL(policy ‖ reference), averaged over response tokens.
    pub mean_kl_to_ref: f64,
    /// Largest |train_lp - rollout_lp| over all sampled tokens.
    pub max_logprob_gap: f64,
    pub clip_fraction: f64,
    pub loss: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub dropped: usize,
    pub mean_response_len: f64,
}

/// Sampler seed for rollouts; problem draws use the step index directly.
fn rollout_seed(cfg: &RlConfig) -> u64 {
    cfg.seed ^ 0x9e37_79b9_7f4a_7c15
}

fn effective_temperature(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        1.0
    }
}

/// Per-row log-probabilities of `tokens`, with the full distributions.
fn token_logprobs(logits: &Matrix, rows: &[usize], tokens: &[u32], t: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let full: Vec<Vec<f64>> = rows.iter().map(|&r| log_softmax(logits.row(r), t)).collect();
    let lp = full.iter().zip(tokens).map(|(l, &tok)| l[tok as usize]).collect();
    (lp, full)
}

/// One synchronous step: sample, verify, advantages, re-score, loss,
/// backward, update (which requantizes every layer's FP8 copies).
pub fn rl_step(m: &mut ModelState, reference: &ModelState, cfg: &RlConfig, step: usize) -> Result<TrainMetrics, RlError> {
    let task = cfg.task();
    let problems = gen_task_batch(&task, cfg.batch_prompts, step as u64);
    let sampler = Sampler::new(rollout_seed(cfg), cfg.temperature);
    let g = cfg.group_size;
    let policy: &ModelState = m;
    let groups = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let traj0 = ((step * cfg.batch_prompts + i) * g) as u64;
            let mut group = generate_group(policy, &p.prompt, g, &sampler, traj0, cfg.max_response, task.eos())?;
            for t in &mut group {
                t.verify(p);
            }
            let rewards: Vec<f64> = group.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
            for (t, a) in group.iter_mut().zip(grpo_advantage(&rewards)) {
                t.advantage = a;
            }
            Ok(group)
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    let trajs: Vec<Trajectory> = groups.into_iter().flatten().collect();

    let inputs: Vec<Vec<u32>> = trajs.iter().map(Trajectory::scoring_input).collect();
    let (logits, mut tape) = m.train_forward(&inputs)?;
    let ref_logits = reference.score(&inputs)?;
    let t = effective_temperature(cfg.temperature);

    let mut row0 = 0;
    let mut train_lp = Vec::with_capacity(trajs.len());
    let mut ref_lp = Vec::with_capacity(trajs.len());
    let mut rows_of = Vec::with_capacity(trajs.len());
    let mut train_dists = Vec::with_capacity(trajs.len());
    let mut kl_sum = 0.0f64;
    let mut gap = 0.0f64;
    let (mut min_ratio, mut max_ratio) = (f64::INFINITY, f64::NEG_INFINITY);
    for (tr, inp) in trajs.iter().zip(&inputs) {
        let rows: Vec<usize> = (0..tr.response.len()).map(|j| row0 + tr.prompt.len() - 1 + j).collect();
        let (lp, dist) = token_logprobs(&logits, &rows, &tr.response, t);
        let (rlp, rdist) = token_logprobs(&ref_logits, &rows, &tr.response, t);
        for (p, q) in dist.iter().zip(&rdist) {
            kl_sum += p.iter().zip(q).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        }
        for (a, b) in lp.iter().zip(&tr.rollout_lp) {
            gap = gap.max((a - b).abs());
            let r = (a - b).exp();
            min_ratio = min_ratio.min(r);
            max_ratio = max_ratio.max(r);
        }
        train_lp.push(lp);
        ref_lp.push(rlp);
        rows_of.push(rows);
        train_dists.push(dist);
        row0 += inp.len();
    }
    let rollout_lp: Vec<Vec<f64>> = trajs.iter().map(|t| t.rollout_lp.clone()).collect();
    let adv: Vec<f64> = trajs.iter().map(|t| t.advantage).collect();
    let out = ppo_loss(&train_lp, &rollout_lp, &adv, &ref_lp, &cfg.ppo())?;

    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for (k, tr) in trajs.iter().enumerate() {
        for (j, &tok) in tr.response.iter().enumerate() {
            let Some(&d) = out.dlp[k].get(j) else { continue };
            let row = dlogits.row_mut(rows_of[k][j]);
            for (c, v) in row.iter_mut().enumerate() {
                let onehot = if c == tok as usize { 1.0 } else { 0.0 };
                *v = (d * (onehot - train_dists[k][j][c].exp()) / t) as f32;
            }
        }
    }
    let grads = m.train_backward(&mut tape, &dlogits)?;
    m.apply_gradients_with(&grads, cfg.lr as f32, cfg.beta1 as f32, cfg.beta2 as f32, cfg.adam_eps as f32)?;

    let n_tok: usize = trajs.iter().map(|t| t.response.len()).sum();
    Ok(TrainMetrics {
        step,
        mean_reward: trajs.iter().map(|t| t.reward.unwrap_or(0.0)).sum::<f64>() / trajs.len() as f64,
        mean_kl_to_ref: kl_sum / n_tok.max(1) as f64,
        max_logprob_gap: gap,
        clip_fraction: out.clip_fraction,
        loss: out.loss,
        min_ratio,
        max_ratio,
        dropped: out.dropped,
        mean_response_len: n_tok as f64 / trajs.len() as f64,
    })
}
