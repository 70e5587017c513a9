//! Non-linear operators, FP32 inside. Every reduction runs sequentially in
//! ascending index order so that a row's result never depends on how many
//! other rows are processed with it.

pub const RMS_EPS: f32 = 1e-6;
pub const ROPE_BASE: f64 = 10000.0;

/// Row-wise RMS normalization without a gain.
pub fn rmsnorm(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let r = inv_rms(row);
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi * r;
        }
    }
    out
}

fn inv_rms(row: &[f32]) -> f32 {
    let mut ss = 0.0f32;
    for &v in row {
        ss += v * v;
    }
    1.0 / (ss / row.len() as f32 + RMS_EPS).sqrt()
}

pub fn rmsnorm_backward(x: &[f32], dy: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; x.len()];
    for ((row, g), o) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let r = inv_rms(row);
        let mut dot = 0.0f32;
        for (&xi, &gi) in row.iter().zip(g) {
            dot += xi * gi;
        }
        let c = dot * r * r * r / d as f32;
        for ((oi, &xi), &gi) in o.iter_mut().zip(row).zip(g) {
            *oi = r * gi - c * xi;
        }
    }
    dx
}

/// Cosine and sine tables, `max_seq × head_dim/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(max_seq: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for pos in 0..max_seq {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates each head of row `row` (a `d`-vector) for position `pos`;
    /// `sign = -1` applies the inverse rotation.
    pub fn rotate(&self, row: &mut [f32], pos: usize, sign: f32) {
        let hd = 2 * self.half;
        let (c, s) = (&self.cos[pos * self.half..], &self.sin[pos * self.half..]);
        for head in row.chunks_exact_mut(hd) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let (ci, si) = (c[i], sign * s[i]);
                head[2 * i] = a * ci - b * si;
                head[2 * i + 1] = a * si + b * ci;
            }
        }
    }
}

/// Causal multi-head attention over a prefix of cached keys.
///
/// `q` holds `n` query rows at positions `pos0..pos0+n`; `keys` and `vals`
/// hold at least `pos0 + n` rows. Query `i` sees keys `0..=pos0+i`.
pub fn attention(q: &[f32], keys: &[f32], vals: &[f32], pos0: usize, d: usize, n_heads: usize) -> Vec<f32> {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let n = q.len() / d;
    let mut out = vec![0.0f32; n * d];
    let mut p = Vec::with_capacity(pos0 + n);
    for i in 0..n {
        let t = pos0 + i + 1;
        for h in 0..n_heads {
            let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
            softmax_scores(qh, keys, t, d, h * hd, scale, &mut p);
            let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &vals[j * d + h * hd..j * d + (h + 1) * hd];
                for (oi, &vi) in o.iter_mut().zip(vj) {
                    *oi += pj * vi;
                }
            }
        }
    }
    out
}

fn softmax_scores(qh: &[f32], keys: &[f32], t: usize, d: usize, off: usize, scale: f32, p: &mut Vec<f32>) {
    p.clear();
    let mut max = f32::NEG_INFINITY;
    for j in 0..t {
        let kj = &keys[j * d + off..j * d + off + qh.len()];
        let mut s = 0.0f32;
        for (&a, &b) in qh.iter().zip(kj) {
            s += a * b;
        }
        let s = s * scale;
        max = max.max(s);
        p.push(s);
    }
    let mut sum = 0.0f32;
    for v in p.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in p.iter_mut() {
        *v /= sum;
    }
}

/// Gradients of [`attention`] for one sequence starting at position 0.
pub fn attention_backward(
    q: &[f32],
    keys: &[f32],
    vals: &[f32],
    dout: &[f32],
    d: usize,
    n_heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let n = q.len() / d;
    let (mut dq, mut dk, mut dv) = (vec![0.0f32; q.len()], vec![0.0f32; keys.len()], vec![0.0f32; vals.len()]);
    let mut p = Vec::with_capacity(n);
    let mut dp = Vec::with_capacity(n);
    for i in 0..n {
        for h in 0..n_heads {
            let lo = h * hd;
            let qh = &q[i * d + lo..i * d + lo + hd];
            let go = &dout[i * d + lo..i * d + lo + hd];
            softmax_scores(qh, keys, i + 1, d, lo, scale, &mut p);
            dp.clear();
            let mut inner = 0.0f32;
            for (j, &pj) in p.iter().enumerate() {
                let vj = &vals[j * d + lo..j * d + lo + hd];
                let mut s = 0.0f32;
                for (&a, &b) in go.iter().zip(vj) {
                    s += a * b;
                }
                dp.push(s);
                inner += pj * s;
                for (dvi, &gi) in dv[j * d + lo..j * d + lo + hd].iter_mut().zip(go) {
                    *dvi += pj * gi;
                }
            }
            for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                let ds = pj * (dpj - inner) * scale;
                let kj = &keys[j * d + lo..j * d + lo + hd];
                for (dqi, &ki) in dq[i * d + lo..i * d + lo + hd].iter_mut().zip(kj) {
                    *dqi += ds * ki;
                }
                for (dki, &qi) in dk[j * d + lo..j * d + lo + hd].iter_mut().zip(qh) {
                    *dki += ds * qi;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// `silu(gate) * up` where each input row is `[gate | up]`, `2·d_ff` wide.
pub fn swiglu(x: &[f32], d_ff: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len() / 2);
    for row in x.chunks_exact(2 * d_ff) {
        let (gate, up) = row.split_at(d_ff);
        for (&g, &u) in gate.iter().zip(up) {
            out.push(g * sigmoid(g) * u);
        }
    }
    out
}

pub fn swiglu_backward(x: &[f32], dy: &[f32], d_ff: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; x.len()];
    for ((row, g), o) in x.chunks_exact(2 * d_ff).zip(dy.chunks_exact(d_ff)).zip(dx.chunks_exact_mut(2 * d_ff)) {
        let (gate, up) = row.split_at(d_ff);
        let (dgate, dup) = o.split_at_mut(d_ff);
        for i in 0..d_ff {
            let s = sigmoid(gate[i]);
            let silu = gate[i] * s;
            dup[i] = g[i] * silu;
            dgate[i] = g[i] * up[i] * (s * (1.0 + gate[i] * (1.0 - s)));
        }
    }
    dx
}
