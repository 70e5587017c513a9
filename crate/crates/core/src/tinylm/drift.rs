use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::ModelState;
use super::ModelError;

/// Log-probabilities of `logits / temperature` in f64; a temperature of zero
/// scores at temperature one.
pub fn log_softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let z: Vec<f64> = logits.iter().map(|&l| l as f64 / t).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for &v in &z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    z.into_iter().map(|v| v - lse).collect()
}

/// Counter-based token sampler: the draw for `(trajectory, position)` is a
/// pure function of the seed, so rollouts replay exactly regardless of the
/// order in which trajectories are generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampler {
    pub seed: u64,
    pub temperature: f64,
}

impl Sampler {
    pub fn new(seed: u64, temperature: f64) -> Self {
        Self { seed, temperature }
    }

    pub fn greedy() -> Self {
        Self { seed: 0, temperature: 0.0 }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0
    }

    fn uniform(&self, traj: u64, pos: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(traj);
        rng.set_word_pos(pos as u128 * 16);
        rng.gen::<f64>()
    }

    /// Draws a token and returns it with its log-probability under the
    /// sampled distribution.
    pub fn sample(&self, logits: &[f32], traj: u64, pos: u64) -> (u32, f64) {
        let lp = log_softmax(logits, self.temperature);
        let tok = if self.is_greedy() {
            argmax(logits)
        } else {
            let u = self.uniform(traj, pos);
            let mut acc = 0.0f64;
            let mut pick = lp.len() - 1;
            for (i, &l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        (tok as u32, lp[tok])
    }
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftRecord {
    /// 1-based index of the generated token.
    pub position: usize,
    pub max_abs_logit_diff: f64,
    pub kl_train_vs_rollout: f64,
}

/// KL(p‖q) from log-probabilities.
pub(crate) fn kl_from_logprobs(lp: &[f64], lq: &[f64]) -> f64 {
    let mut s = 0.0f64;
    for (&a, &b) in lp.iter().zip(lq) {
        s += a.exp() * (a - b);
    }
    s
}

/// Generates `steps` tokens on the inference path, re-scores the whole
/// trajectory on the training path and compares the two per position.
pub fn measure_drift(
    m: &ModelState,
    prompt: &[u32],
    steps: usize,
    sampler: &Sampler,
    traj: u64,
) -> Result<Vec<DriftRecord>, ModelError> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    if prompt.len() + steps > m.config().max_seq {
        return Err(ModelError::TooLong { len: prompt.len() + steps, max: m.config().max_seq });
    }
    let (mut logits, mut cache) = m.prefill(prompt)?;
    let mut seq = prompt.to_vec();
    let mut rollout = Vec::with_capacity(steps);
    for i in 0..steps {
        let (tok, _) = sampler.sample(&logits, traj, i as u64);
        rollout.push(logits);
        seq.push(tok);
        if i + 1 < steps {
            logits = m.decode_step(&mut cache, tok)?;
        } else {
            logits = Vec::new();
        }
    }
    seq.pop();
    let train = m.score(&[seq])?;
    let p0 = prompt.len() - 1;
    let mut out = Vec::with_capacity(steps);
    for (i, r) in rollout.iter().enumerate() {
        let t = train.row(p0 + i);
        let mut diff = 0.0f64;
        for (&a, &b) in r.iter().zip(t) {
            diff = diff.max((a as f64 - b as f64).abs());
        }
        let kl = kl_from_logprobs(&log_softmax(r, 1.0), &log_softmax(t, 1.0));
        out.push(DriftRecord { position: i + 1, max_abs_logit_diff: diff, kl_train_vs_rollout: kl });
    }
    Ok(out)
}
