use rayon::prelude::*;
use serde::Serialize;

use crate::tinylm::{KvCache, ModelError, ModelState, Sampler};

use super::task::Problem;
use super::RlError;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// Log-probabilities of the sampled tokens under the rollout path.
    pub rollout_lp: Vec<f64>,
    /// `None` until verified.
    pub reward: Option<f64>,
    pub advantage: f64,
}

impl Trajectory {
    /// Prompt followed by all but the last response token: the teacher-forced
    /// input whose rows `prompt.len()-1 ..` predict the response.
    pub fn scoring_input(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.response[..self.response.len().saturating_sub(1)]);
        s
    }

    pub fn verify(&mut self, problem: &Problem) {
        self.reward = Some(problem.verify(&self.response));
    }
}

/// `g` samples for one prompt. Trajectory `i` draws its tokens from sampler
/// stream `traj0 + i`; the prompt is prefilled once and the cache cloned.
pub fn generate_group(
    m: &ModelState,
    prompt: &[u32],
    g: usize,
    sampler: &Sampler,
    traj0: u64,
    max_response: usize,
    eos: u32,
) -> Result<Vec<Trajectory>, RlError> {
    if g < 2 {
        return Err(RlError::Config(format!("group size {g} < 2")));
    }
    let room = m.config().max_seq.saturating_sub(prompt.len());
    let cap = max_response.min(room + 1);
    if cap == 0 {
        return Err(RlError::Config("response length cap is zero".into()));
    }
    let (logits0, cache0) = m.prefill(prompt)?;
    (0..g)
        .into_par_iter()
        .map(|i| continue_rollout(m, prompt, logits0.clone(), cache0.clone(), sampler, traj0 + i as u64, cap, eos))
        .collect::<Result<Vec<_>, _>>()
        .map_err(RlError::from)
}

/// One response sampled on the inference path from a prefilled prompt.
pub fn sample_response(
    m: &ModelState,
    prompt: &[u32],
    sampler: &Sampler,
    traj: u64,
    max_response: usize,
    eos: u32,
) -> Result<Trajectory, RlError> {
    let cap = max_response.min(m.config().max_seq.saturating_sub(prompt.len()) + 1);
    if cap == 0 {
        return Err(RlError::Config("response length cap is zero".into()));
    }
    let (logits, cache) = m.prefill(prompt)?;
    Ok(continue_rollout(m, prompt, logits, cache, sampler, traj, cap, eos)?)
}

#[allow(clippy::too_many_arguments)]
fn continue_rollout(
    m: &ModelState,
    prompt: &[u32],
    mut logits: Vec<f32>,
    mut cache: KvCache,
    sampler: &Sampler,
    traj: u64,
    cap: usize,
    eos: u32,
) -> Result<Trajectory, ModelError> {
    let mut response = Vec::with_capacity(cap);
    let mut lps = Vec::with_capacity(cap);
    for pos in 0..cap {
        let (tok, lp) = sampler.sample(&logits, traj, pos as u64);
        response.push(tok);
        lps.push(lp);
        if tok == eos || pos + 1 == cap {
            break;
        }
        logits = m.decode_step(&mut cache, tok)?;
    }
    Ok(Trajectory { prompt: prompt.to_vec(), response, rollout_lp: lps, reward: None, advantage: 0.0 })
}

/// Group-relative advantages `(r - mean) / (std + 1e-6)` with the population
/// standard deviation.
pub fn grpo_advantage(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-6)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PpoParams {
    pub clip_eps: f64,
    pub kl_coef: f64,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self { clip_eps: 0.2, kl_coef: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutput {
    /// Token-mean of the clipped surrogate plus the KL penalty.
    pub loss: f64,
    pub surrogate: f64,
    pub kl_penalty: f64,
    /// d loss / d train_lp per trajectory and token; empty for dropped ones.
    pub dlp: Vec<Vec<f64>>,
    pub clip_fraction: f64,
    pub dropped: usize,
    pub tokens: usize,
}

/// Clipped PPO surrogate with a k1 KL penalty `train_lp - ref_lp` against
/// the reference policy, averaged over all kept tokens. Trajectories with a
/// non-finite ratio are dropped.
pub fn ppo_loss(
    train_lp: &[Vec<f64>],
    rollout_lp: &[Vec<f64>],
    adv: &[f64],
    ref_lp: &[Vec<f64>],
    params: &PpoParams,
) -> Result<PpoOutput, RlError> {
    let n = train_lp.len();
    if rollout_lp.len() != n || adv.len() != n || ref_lp.len() != n {
        return Err(RlError::Shape(format!(
            "{} train, {} rollout, {} advantage, {} reference entries",
            n,
            rollout_lp.len(),
            adv.len(),
            ref_lp.len()
        )));
    }
    let mut keep = vec![true; n];
    let mut dropped = 0;
    let mut tokens = 0usize;
    for i in 0..n {
        let (t, r, q) = (&train_lp[i], &rollout_lp[i], &ref_lp[i]);
        if r.len() != t.len() || q.len() != t.len() {
            return Err(RlError::Shape(format!("trajectory {i} has mismatched logprob lengths")));
        }
        let finite = t.iter().zip(r).all(|(a, b)| (a - b).exp().is_finite()) && adv[i].is_finite();
        if finite {
            tokens += t.len();
        } else {
            keep[i] = false;
            dropped += 1;
        }
    }
    let denom = tokens.max(1) as f64;
    let (lo, hi) = (1.0 - params.clip_eps, 1.0 + params.clip_eps);
    let mut surrogate = 0.0f64;
    let mut kl = 0.0f64;
    let mut clipped = 0usize;
    let mut dlp = Vec::with_capacity(n);
    for i in 0..n {
        if !keep[i] {
            dlp.push(Vec::new());
            continue;
        }
        let a = adv[i];
        let mut d = Vec::with_capacity(train_lp[i].len());
        for j in 0..train_lp[i].len() {
            let ratio = (train_lp[i][j] - rollout_lp[i][j]).exp();
            let unclipped = ratio * a;
            let clip_term = ratio.clamp(lo, hi) * a;
            let grad = if clip_term < unclipped {
                clipped += 1;
                surrogate -= clip_term;
                0.0
            } else {
                surrogate -= unclipped;
                -unclipped
            };
            kl += train_lp[i][j] - ref_lp[i][j];
            d.push((grad + params.kl_coef) / denom);
        }
        dlp.push(d);
    }
    surrogate /= denom;
    let kl_penalty = params.kl_coef * kl / denom;
    Ok(PpoOutput {
        loss: surrogate + kl_penalty,
        surrogate,
        kl_penalty,
        dlp,
        clip_fraction: clipped as f64 / denom,
        dropped,
        tokens,
    })
}
