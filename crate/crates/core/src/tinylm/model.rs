use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cache::KvCache;
use super::ops::{self, RopeTable};
use super::{ModelConfig, ModelError};
use crate::blocktensor::{Matrix, Padding};
use crate::flowgraph::{build_graphs, layer_prefix, linear_sites, stream_source, GraphSet, LinearSite, PrecisionMode};
use crate::flowgraph::EdgeRole::{Activation, Gradient, SavedActivation, WeightRead};
use crate::fp8num::{self, Bf16Value};
use crate::qlinear::{adam_update, AdamStep, LinearLayer, LinearPlan, SavedActivation as Saved, TensorFormat};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FP8M";

/// Casts named by one forward graph, resolved once.
#[derive(Debug, Clone, PartialEq)]
struct ForwardFlow {
    plans: Vec<LinearPlan>,
    embed_read: TensorFormat,
    blocks: Vec<BlockFlow>,
    final_in: TensorFormat,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockFlow {
    norm_in: TensorFormat,
    skip_in: TensorFormat,
    rope_attn: TensorFormat,
    rope_cache: TensorFormat,
    cache_attn: TensorFormat,
    res_norm: TensorFormat,
    res_skip: TensorFormat,
}

/// Casts named by the backward graph.
#[derive(Debug, Clone, PartialEq)]
struct BackwardFlow {
    blocks: Vec<BlockBack>,
    final_grad: TensorFormat,
    final_saved: TensorFormat,
    embed_grad: TensorFormat,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockBack {
    res_skip: TensorFormat,
    norm2: TensorFormat,
    skip1: TensorFormat,
    norm1: TensorFormat,
    attn_q: TensorFormat,
    attn_kv: TensorFormat,
    cache_rope: TensorFormat,
    saved_norm1: TensorFormat,
    saved_q: TensorFormat,
    saved_kv: TensorFormat,
    saved_norm2: TensorFormat,
    saved_act: TensorFormat,
}

fn resolve_forward(graphs: &GraphSet, infer: bool, sites: &[LinearSite], n_layers: usize) -> Result<ForwardFlow, ModelError> {
    let g = if infer { &graphs.infer } else { &graphs.train_fwd };
    let plans = sites
        .iter()
        .map(|s| if infer { graphs.infer_plan(s) } else { graphs.train_plan(s) })
        .collect::<Result<Vec<_>, _>>()?;
    let mut blocks = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = layer_prefix(l);
        let n = |s: &str| format!("{p}{s}");
        let src = stream_source(l);
        blocks.push(BlockFlow {
            norm_in: g.format(&src, &n("attn_norm"), Activation)?,
            skip_in: g.format(&src, &n("attn_residual"), Activation)?,
            rope_attn: g.format(&n("rope"), &n("attn"), Activation)?,
            rope_cache: g.format(&n("rope"), &n("kv_cache"), Activation)?,
            cache_attn: g.format(&n("kv_cache"), &n("attn"), Activation)?,
            res_norm: g.format(&n("attn_residual"), &n("mlp_norm"), Activation)?,
            res_skip: g.format(&n("attn_residual"), &n("mlp_residual"), Activation)?,
        });
    }
    Ok(ForwardFlow {
        plans,
        embed_read: g.format("embed.weight", "embed", WeightRead)?,
        blocks,
        final_in: g.format(&stream_source(n_layers), "final_norm", Activation)?,
    })
}

fn resolve_backward(graphs: &GraphSet, n_layers: usize) -> Result<BackwardFlow, ModelError> {
    let b = &graphs.train_bwd;
    let mut blocks = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = layer_prefix(l);
        let n = |s: &str| format!("{p}{s}");
        let src = stream_source(l);
        blocks.push(BlockBack {
            res_skip: b.format(&n("mlp_residual"), &n("attn_residual"), Gradient)?,
            norm2: b.format(&n("mlp_norm"), &n("attn_residual"), Gradient)?,
            skip1: b.format(&n("attn_residual"), &src, Gradient)?,
            norm1: b.format(&n("attn_norm"), &src, Gradient)?,
            attn_q: b.format(&n("attn"), &n("rope"), Gradient)?,
            attn_kv: b.format(&n("attn"), &n("kv_cache"), Gradient)?,
            cache_rope: b.format(&n("kv_cache"), &n("rope"), Gradient)?,
            saved_norm1: b.format(&src, &n("attn_norm"), SavedActivation)?,
            saved_q: b.format(&n("rope"), &n("attn"), SavedActivation)?,
            saved_kv: b.format(&n("kv_cache"), &n("attn"), SavedActivation)?,
            saved_norm2: b.format(&n("attn_residual"), &n("mlp_norm"), SavedActivation)?,
            saved_act: b.format(&n("up"), &n("act"), SavedActivation)?,
        });
    }
    Ok(BackwardFlow {
        blocks,
        final_grad: b.format("final_norm", &stream_source(n_layers), Gradient)?,
        final_saved: b.format(&stream_source(n_layers), "final_norm", SavedActivation)?,
        embed_grad: b.format("embed", "embed.weight", Gradient)?,
    })
}

/// Casts a row-major `rows × cols` buffer.
fn cast(fmt: TensorFormat, cols: usize, mut data: Vec<f32>) -> Result<Vec<f32>, ModelError> {
    match fmt {
        TensorFormat::Fp32 => Ok(data),
        TensorFormat::Bf16 => {
            fp8num::round_bf16_slice(&mut data);
            Ok(data)
        }
        TensorFormat::Fp8(_) => {
            let rows = data.len() / cols;
            let m = Matrix::from_rows_unchecked(rows, cols, data);
            Ok(fmt.cast(&m)?.into_data())
        }
    }
}

fn mat(cols: usize, data: Vec<f32>) -> Matrix {
    Matrix::from_rows_unchecked(data.len() / cols, cols, data)
}

/// BF16 embedding table with its Adam state.
#[derive(Debug, Clone, PartialEq)]
struct Embedding {
    w: Matrix,
    m: Matrix,
    v: Matrix,
    step: u64,
}

/// Parameter selector for finite-difference probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Embed,
    Linear(usize),
}

/// Weight gradients in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Matrix,
    pub linears: Vec<Matrix>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.embed.data().iter().chain(self.linears.iter().flat_map(|m| m.data())).all(|v| v.is_finite())
    }

    pub fn get(&self, p: ParamRef) -> &Matrix {
        match p {
            ParamRef::Embed => &self.embed,
            ParamRef::Linear(i) => &self.linears[i],
        }
    }
}

#[derive(Debug, Clone)]
struct BlockTape {
    norm_in: Vec<f32>,
    qkv: Saved,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    o: Saved,
    norm2_in: Vec<f32>,
    up: Saved,
    up_out: Vec<f32>,
    down: Saved,
}

/// Everything the backward pass reads, recorded by `train_forward`.
#[derive(Debug, Clone)]
pub struct BackwardTape {
    version: u64,
    consumed: bool,
    lens: Vec<usize>,
    tokens: Vec<u32>,
    blocks: Vec<BlockTape>,
    final_in: Vec<f32>,
    head: Saved,
}

impl BackwardTape {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Copy)]
enum Pass {
    Train,
    Infer,
}

/// One sequence slice inside a stacked batch.
#[derive(Debug, Clone, Copy)]
struct Segment {
    row0: usize,
    len: usize,
    pos0: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    cfg: ModelConfig,
    graphs: GraphSet,
    sites: Vec<LinearSite>,
    train_flow: ForwardFlow,
    infer_flow: ForwardFlow,
    back_flow: BackwardFlow,
    embed: Embedding,
    linears: Vec<LinearLayer>,
    rope: RopeTable,
    version: u64,
}

impl ModelState {
    /// Seeded scaled-uniform initialization.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut uniform = |rows: usize, cols: usize, a: f32| Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a));
        let table = uniform(cfg.vocab_size, d, 1.0).round_bf16();
        let sites = linear_sites(cfg.n_layers);
        let padding = if cfg.padding { Padding::Zero } else { Padding::Strict };
        let mut linears = Vec::with_capacity(sites.len());
        for _ in 0..cfg.n_layers {
            for (rows, cols) in [(3 * d, d), (d, d), (2 * cfg.d_ff, d), (d, cfg.d_ff)] {
                let w = uniform(rows, cols, 1.0 / (cols as f32).sqrt());
                linears.push(LinearLayer::new(&w, cfg.g, padding)?);
            }
        }
        let head = uniform(cfg.vocab_size, d, 1.0 / (d as f32).sqrt());
        linears.push(LinearLayer::new(&head, cfg.g, Padding::Zero)?);
        let graphs = build_graphs(cfg, cfg.mode)?;
        let (rows, cols) = table.shape();
        let embed = Embedding { w: table, m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), step: 0 };
        Self::assemble(cfg.clone(), graphs, sites, embed, linears)
    }

    fn assemble(
        cfg: ModelConfig,
        graphs: GraphSet,
        sites: Vec<LinearSite>,
        embed: Embedding,
        linears: Vec<LinearLayer>,
    ) -> Result<Self, ModelError> {
        let train_flow = resolve_forward(&graphs, false, &sites, cfg.n_layers)?;
        let infer_flow = resolve_forward(&graphs, true, &sites, cfg.n_layers)?;
        let back_flow = resolve_backward(&graphs, cfg.n_layers)?;
        let rope = RopeTable::new(cfg.max_seq, cfg.head_dim());
        Ok(Self { cfg, graphs, sites, train_flow, infer_flow, back_flow, embed, linears, rope, version: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn graphs(&self) -> &GraphSet {
        &self.graphs
    }

    /// Same weights under different graphs; the casts follow the new edges.
    pub fn with_graphs(&self, graphs: GraphSet) -> Result<Self, ModelError> {
        let mut cfg = self.cfg.clone();
        cfg.mode = graphs.mode;
        let mut out = Self::assemble(cfg, graphs, self.sites.clone(), self.embed.clone(), self.linears.clone())?;
        out.version = self.version;
        Ok(out)
    }

    /// Same weights under the graphs of another precision mode.
    pub fn with_mode(&self, mode: PrecisionMode) -> Result<Self, ModelError> {
        self.with_graphs(build_graphs(&self.cfg, mode)?)
    }

    pub fn linears(&self) -> &[LinearLayer] {
        &self.linears
    }

    pub fn sites(&self) -> &[LinearSite] {
        &self.sites
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embed.w
    }

    /// Increments on every parameter update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.n_layers, self.cfg.d_model, self.cfg.max_seq)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::Token { token: t, vocab: self.cfg.vocab_size });
        }
        Ok(())
    }

    /// Teacher-forced logits for every position of every sequence, stacked
    /// in batch order, plus the tape for [`train_backward`](Self::train_backward).
    pub fn train_forward(&self, batch: &[Vec<u32>]) -> Result<(Matrix, BackwardTape), ModelError> {
        let (logits, tape) = self.batch_forward(batch, Pass::Train, true)?;
        Ok((logits, tape.expect("tape requested")))
    }

    /// Training-path logits without recording a tape.
    pub fn score(&self, batch: &[Vec<u32>]) -> Result<Matrix, ModelError> {
        Ok(self.batch_forward(batch, Pass::Train, false)?.0)
    }

    /// Inference-path logits for whole sequences, as if each were prefilled.
    pub fn score_infer(&self, batch: &[Vec<u32>]) -> Result<Matrix, ModelError> {
        Ok(self.batch_forward(batch, Pass::Infer, false)?.0)
    }

    fn batch_forward(&self, batch: &[Vec<u32>], pass: Pass, record: bool) -> Result<(Matrix, Option<BackwardTape>), ModelError> {
        let mut segs = Vec::with_capacity(batch.len());
        let mut tokens = Vec::new();
        for s in batch {
            if s.is_empty() {
                return Err(ModelError::EmptyPrompt);
            }
            if s.len() > self.cfg.max_seq {
                return Err(ModelError::TooLong { len: s.len(), max: self.cfg.max_seq });
            }
            self.check_tokens(s)?;
            segs.push(Segment { row0: tokens.len(), len: s.len(), pos0: 0 });
            tokens.extend_from_slice(s);
        }
        let mut caches: Vec<KvCache> = batch.iter().map(|_| self.new_cache()).collect();
        let mut tape = record.then(|| BackwardTape {
            version: self.version,
            consumed: false,
            lens: batch.iter().map(Vec::len).collect(),
            tokens: tokens.clone(),
            blocks: Vec::with_capacity(self.cfg.n_layers),
            final_in: Vec::new(),
            head: Saved::Dense(Matrix::zeros(0, 0)),
        });
        let logits = self.forward_rows(&tokens, &segs, &mut caches, pass, tape.as_mut())?;
        Ok((logits, tape))
    }

    /// Prompt pass of the inference path: last-position logits and the cache.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(Vec<f32>, KvCache), ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if prompt.len() > self.cfg.max_seq {
            return Err(ModelError::TooLong { len: prompt.len(), max: self.cfg.max_seq });
        }
        self.check_tokens(prompt)?;
        let mut caches = vec![self.new_cache()];
        let segs = [Segment { row0: 0, len: prompt.len(), pos0: 0 }];
        let logits = self.forward_rows(prompt, &segs, &mut caches, Pass::Infer, None)?;
        let last = logits.row(prompt.len() - 1).to_vec();
        Ok((last, caches.pop().expect("one cache")))
    }

    /// Appends `token` to the cache and returns next-token logits.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>, ModelError> {
        if cache.len() >= self.cfg.max_seq {
            return Err(ModelError::CacheFull { max: self.cfg.max_seq });
        }
        self.check_tokens(&[token])?;
        let segs = [Segment { row0: 0, len: 1, pos0: cache.len() }];
        let logits = self.forward_rows(&[token], &segs, std::slice::from_mut(cache), Pass::Infer, None)?;
        Ok(logits.into_data())
    }

    /// The single forward routine behind training, prefill and decode.
    ///
    /// Rows of all segments are stacked for the linear layers; attention runs
    /// per segment against that segment's cache.
    fn forward_rows(
        &self,
        tokens: &[u32],
        segs: &[Segment],
        caches: &mut [KvCache],
        pass: Pass,
        mut tape: Option<&mut BackwardTape>,
    ) -> Result<Matrix, ModelError> {
        let cfg = &self.cfg;
        let (d, n) = (cfg.d_model, tokens.len());
        let flow = match pass {
            Pass::Train => &self.train_flow,
            Pass::Infer => &self.infer_flow,
        };
        let save = tape.is_some();
        let table = flow_table(&self.embed.w, flow.embed_read)?;
        let mut h = Vec::with_capacity(n * d);
        for &t in tokens {
            h.extend_from_slice(table.row(t as usize));
        }
        for (l, bf) in flow.blocks.iter().enumerate() {
            let bb = &self.back_flow.blocks[l];
            let lin = &self.linears[4 * l..4 * l + 4];
            let plans = &flow.plans[4 * l..4 * l + 4];

            let norm_in = cast(bf.norm_in, d, h.clone())?;
            let a = ops::rmsnorm(&norm_in, d);
            let (qkv, qkv_saved) = lin[0].compute_forward(&mat(d, a), &plans[0], save)?;
            let qkv = qkv.into_data();
            let (mut q, mut k, mut v) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d));
            for (r, row) in qkv.chunks_exact(3 * d).enumerate() {
                let pos = position(segs, r);
                let mut qr = row[..d].to_vec();
                let mut kr = row[d..2 * d].to_vec();
                self.rope.rotate(&mut qr, pos, 1.0);
                self.rope.rotate(&mut kr, pos, 1.0);
                q.extend_from_slice(&qr);
                k.extend_from_slice(&kr);
                v.extend_from_slice(&row[2 * d..]);
            }
            let q = cast(bf.rope_attn, d, q)?;
            let k = cast(bf.cache_attn, d, cast(bf.rope_cache, d, k)?)?;
            let v = cast(bf.cache_attn, d, cast(bf.rope_cache, d, v)?)?;
            let mut att = vec![0.0f32; n * d];
            for (s, cache) in segs.iter().zip(caches.iter_mut()) {
                let rows = s.row0 * d..(s.row0 + s.len) * d;
                cache.append(l, &k[rows.clone()], &v[rows.clone()]);
                let out = ops::attention(&q[rows.clone()], cache.keys(l), cache.vals(l), s.pos0, d, cfg.n_heads);
                att[rows].copy_from_slice(&out);
            }
            let (o, o_saved) = lin[1].compute_forward(&mat(d, att), &plans[1], save)?;
            let skip = cast(bf.skip_in, d, h)?;
            let r1: Vec<f32> = o.data().iter().zip(&skip).map(|(a, b)| a + b).collect();
            let norm2_in = cast(bf.res_norm, d, r1.clone())?;
            let r1_skip = cast(bf.res_skip, d, r1)?;
            let b = ops::rmsnorm(&norm2_in, d);
            let (u, up_saved) = lin[2].compute_forward(&mat(d, b), &plans[2], save)?;
            let act = ops::swiglu(u.data(), cfg.d_ff);
            let (dn, down_saved) = lin[3].compute_forward(&mat(cfg.d_ff, act), &plans[3], save)?;
            h = dn.data().iter().zip(&r1_skip).map(|(a, b)| a + b).collect();
            if let Some(t) = tape.as_deref_mut() {
                t.blocks.push(BlockTape {
                    norm_in: cast(bb.saved_norm1, d, norm_in)?,
                    qkv: qkv_saved.expect("saved"),
                    q: cast(bb.saved_q, d, q)?,
                    k: cast(bb.saved_kv, d, k)?,
                    v: cast(bb.saved_kv, d, v)?,
                    o: o_saved.expect("saved"),
                    norm2_in: cast(bb.saved_norm2, d, norm2_in)?,
                    up: up_saved.expect("saved"),
                    up_out: cast(bb.saved_act, 2 * cfg.d_ff, u.into_data())?,
                    down: down_saved.expect("saved"),
                });
            }
        }
        let final_in = cast(flow.final_in, d, h)?;
        let f = ops::rmsnorm(&final_in, d);
        let (logits, head_saved) = self.linears[4 * cfg.n_layers].compute_forward(&mat(d, f), &flow.plans[4 * cfg.n_layers], save)?;
        if let Some(t) = tape {
            t.final_in = cast(self.back_flow.final_saved, d, final_in)?;
            t.head = head_saved.expect("saved");
        }
        Ok(logits)
    }

    /// Weight gradients of `sum(logits ⊙ dlogits)`.
    pub fn train_backward(&self, tape: &mut BackwardTape, dlogits: &Matrix) -> Result<Gradients, ModelError> {
        if tape.consumed {
            return Err(ModelError::ReusedTape);
        }
        if tape.version != self.version {
            return Err(ModelError::StaleTape);
        }
        let cfg = &self.cfg;
        let (d, n, dff) = (cfg.d_model, tape.rows(), cfg.d_ff);
        if dlogits.shape() != (n, cfg.vocab_size) {
            return Err(ModelError::Shape(format!("dlogits {:?}, expected {:?}", dlogits.shape(), (n, cfg.vocab_size))));
        }
        tape.consumed = true;
        let plans = &self.train_flow.plans;
        let mut dws: Vec<Matrix> = vec![Matrix::zeros(0, 0); self.linears.len()];
        let lin_grad = |i: usize, saved: &Saved, dy: Matrix, dws: &mut Vec<Matrix>| -> Result<Vec<f32>, ModelError> {
            let raw = self.linears[i].gradients(saved, &dy, &plans[i])?;
            dws[i] = plans[i].grad_weight.cast(&raw.dw)?;
            Ok(plans[i].grad_input.cast(&raw.dx)?.into_data())
        };
        let head = 4 * cfg.n_layers;
        let df = lin_grad(head, &tape.head, dlogits.to_layout(crate::blocktensor::Layout::Row), &mut dws)?;
        let mut dh = cast(self.back_flow.final_grad, d, ops::rmsnorm_backward(&tape.final_in, &df, d))?;
        let mut segs = Vec::with_capacity(tape.lens.len());
        let mut row0 = 0;
        for &len in &tape.lens {
            segs.push(Segment { row0, len, pos0: 0 });
            row0 += len;
        }
        for l in (0..cfg.n_layers).rev() {
            let bt = &tape.blocks[l];
            let bb = &self.back_flow.blocks[l];
            let i0 = 4 * l;
            let d_r1_skip = cast(bb.res_skip, d, dh.clone())?;
            let dact = lin_grad(i0 + 3, &bt.down, mat(d, dh), &mut dws)?;
            let du = ops::swiglu_backward(&bt.up_out, &dact, dff);
            let db = lin_grad(i0 + 2, &bt.up, mat(2 * dff, du), &mut dws)?;
            let dr1n = cast(bb.norm2, d, ops::rmsnorm_backward(&bt.norm2_in, &db, d))?;
            let dr1: Vec<f32> = d_r1_skip.iter().zip(&dr1n).map(|(a, b)| a + b).collect();
            let dh_skip = cast(bb.skip1, d, dr1.clone())?;
            let datt = lin_grad(i0 + 1, &bt.o, mat(d, dr1), &mut dws)?;
            let mut dq = vec![0.0f32; n * d];
            let mut dk = vec![0.0f32; n * d];
            let mut dv = vec![0.0f32; n * d];
            for s in &segs {
                let rows = s.row0 * d..(s.row0 + s.len) * d;
                let (a, b, c) = ops::attention_backward(
                    &bt.q[rows.clone()],
                    &bt.k[rows.clone()],
                    &bt.v[rows.clone()],
                    &datt[rows.clone()],
                    d,
                    cfg.n_heads,
                );
                dq[rows.clone()].copy_from_slice(&a);
                dk[rows.clone()].copy_from_slice(&b);
                dv[rows].copy_from_slice(&c);
            }
            let dq = cast(bb.attn_q, d, dq)?;
            let dk = cast(bb.cache_rope, d, cast(bb.attn_kv, d, dk)?)?;
            let dv = cast(bb.cache_rope, d, cast(bb.attn_kv, d, dv)?)?;
            let mut dqkv = Vec::with_capacity(n * 3 * d);
            for r in 0..n {
                let pos = position(&segs, r);
                let mut qr = dq[r * d..(r + 1) * d].to_vec();
                let mut kr = dk[r * d..(r + 1) * d].to_vec();
                self.rope.rotate(&mut qr, pos, -1.0);
                self.rope.rotate(&mut kr, pos, -1.0);
                dqkv.extend_from_slice(&qr);
                dqkv.extend_from_slice(&kr);
                dqkv.extend_from_slice(&dv[r * d..(r + 1) * d]);
            }
            let da = lin_grad(i0, &bt.qkv, mat(3 * d, dqkv), &mut dws)?;
            let dnorm = cast(bb.norm1, d, ops::rmsnorm_backward(&bt.norm_in, &da, d))?;
            dh = dh_skip.iter().zip(&dnorm).map(|(a, b)| a + b).collect();
        }
        let mut de = Matrix::zeros(cfg.vocab_size, d);
        for (r, &t) in tape.tokens.iter().enumerate() {
            let row = de.row_mut(t as usize);
            for (a, &b) in row.iter_mut().zip(&dh[r * d..(r + 1) * d]) {
                *a += b;
            }
        }
        let embed = self.back_flow.embed_grad.cast(&de)?;
        Ok(Gradients { embed, linears: dws })
    }

    /// One Adam step on every parameter, then requantization of every
    /// linear layer's FP8 weight copies.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f32) -> Result<(), ModelError> {
        self.apply_gradients_with(grads, lr, 0.9, 0.999, 1e-8)
    }

    pub fn apply_gradients_with(&mut self, grads: &Gradients, lr: f32, beta1: f32, beta2: f32, eps: f32) -> Result<(), ModelError> {
        if grads.linears.len() != self.linears.len() || grads.embed.shape() != self.embed.w.shape() {
            return Err(ModelError::Shape("gradient set does not match the model".into()));
        }
        grads.embed.check_finite()?;
        let t = self.embed.step + 1;
        let step = AdamStep { lr, beta1, beta2, eps, t };
        for (layer, dw) in self.linears.iter_mut().zip(&grads.linears) {
            layer.apply_update(dw, &step)?;
        }
        let e = &mut self.embed;
        adam_update(e.w.data_mut(), e.m.data_mut(), e.v.data_mut(), grads.embed.data(), &step);
        e.step = t;
        self.version += 1;
        Ok(())
    }

    /// Copy with one master weight moved by `delta` (not re-rounded), for
    /// finite-difference probes.
    pub fn perturbed(&self, p: ParamRef, row: usize, col: usize, delta: f32) -> Result<Self, ModelError> {
        let mut out = self.clone();
        match p {
            ParamRef::Embed => {
                let v = out.embed.w.get(row, col);
                out.embed.w.set(row, col, v + delta);
            }
            ParamRef::Linear(i) => out.linears[i] = self.linears[i].perturbed(row, col, delta)?,
        }
        Ok(out)
    }

    pub fn param(&self, p: ParamRef) -> &Matrix {
        match p {
            ParamRef::Embed => &self.embed.w,
            ParamRef::Linear(i) => self.linears[i].master(),
        }
    }

    /// Config as JSON, then the embedding record and one record per linear
    /// layer. Graph edits are not persisted; loading rebuilds the mode's graphs.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&self.version.to_le_bytes())?;
        let e = &self.embed;
        let (rows, cols) = e.w.shape();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        w.write_all(&e.step.to_le_bytes())?;
        for &x in e.w.data() {
            w.write_all(&Bf16Value::new(x).to_bits().to_le_bytes())?;
        }
        for m in [&e.m, &e.v] {
            for &x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for layer in &self.linears {
            layer.write_record(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut cfg)?;
        let cfg: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        r.read_exact(&mut b8)?;
        let version = u64::from_le_bytes(b8);
        let mut m = Self::init(&cfg)?;
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        if (rows, cols) != m.embed.w.shape() {
            return Err(ModelError::Checkpoint("embedding shape".into()));
        }
        r.read_exact(&mut b8)?;
        m.embed.step = u64::from_le_bytes(b8);
        let mut b2 = [0u8; 2];
        for x in m.embed.w.data_mut() {
            r.read_exact(&mut b2)?;
            *x = Bf16Value::from_bits(u16::from_le_bytes(b2)).get();
        }
        for mat in [&mut m.embed.m, &mut m.embed.v] {
            for x in mat.data_mut() {
                r.read_exact(&mut b4)?;
                *x = f32::from_le_bytes(b4);
            }
        }
        for layer in &mut m.linears {
            layer.read_record(r)?;
        }
        m.version = version;
        Ok(m)
    }
}

fn flow_table(table: &Matrix, fmt: TensorFormat) -> Result<Matrix, ModelError> {
    Ok(fmt.cast(table)?)
}

fn position(segs: &[Segment], row: usize) -> usize {
    let s = segs.iter().find(|s| row >= s.row0 && row < s.row0 + s.len).expect("row inside a segment");
    s.pos0 + row - s.row0
}

/// Mean next-token cross-entropy over the rows of `logits` whose target is
/// `Some`, with its gradient in FP32.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<u32>]) -> (f64, Matrix) {
    let (rows, cols) = logits.shape();
    let count = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut loss = 0.0f64;
    let mut grad = Matrix::zeros(rows, cols);
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let lp = super::drift::log_softmax(logits.row(r), 1.0);
        loss -= lp[t as usize] / count;
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            *g = ((lp[c].exp() - onehot) / count) as f32;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgraph::{EdgeFormat, EdgeRole, Phase};
    use crate::tinylm::drift::{measure_drift, Sampler};

    fn small(mode: PrecisionMode) -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 11, max_seq: 64, g: 4, mode, seed: 7, padding: false }
    }

    fn bytes(m: &ModelState) -> Vec<u8> {
        let mut out = Vec::new();
        m.write_checkpoint(&mut out).unwrap();
        out
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small(PrecisionMode::UnifiedFp8);
        assert_eq!(bytes(&ModelState::init(&cfg).unwrap()), bytes(&ModelState::init(&cfg).unwrap()));
        let other = ModelState::init(&ModelConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_ne!(other.linears()[0].master(), ModelState::init(&cfg).unwrap().linears()[0].master());
        assert!(ModelState::init(&ModelConfig { d_model: 6, n_heads: 1, ..cfg }).is_err());
    }

    #[test]
    fn prefill_and_decode_match_training_forward() {
        for mode in [PrecisionMode::UnifiedFp8, PrecisionMode::Bf16] {
            let m = ModelState::init(&small(mode)).unwrap();
            let prompt = vec![1, 2, 3, 4, 5];
            let (last, mut cache) = m.prefill(&prompt).unwrap();
            let (logits, _) = m.train_forward(std::slice::from_ref(&prompt)).unwrap();
            assert_eq!(last, logits.row(4).to_vec(), "{mode}");
            let next = m.decode_step(&mut cache, 9).unwrap();
            let (logits, _) = m.train_forward(&[vec![1, 2, 3, 4, 5, 9]]).unwrap();
            assert_eq!(next, logits.row(5).to_vec(), "{mode}");
            let (one, _) = m.prefill(&[3]).unwrap();
            assert_eq!(one, m.score(&[vec![3]]).unwrap().row(0).to_vec());
        }
    }

    #[test]
    fn cloned_caches_decode_identically() {
        let m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let (_, cache) = m.prefill(&[1, 2]).unwrap();
        let (mut a, mut b) = (cache.clone(), cache);
        assert_eq!(m.decode_step(&mut a, 4).unwrap(), m.decode_step(&mut b, 4).unwrap());
    }

    #[test]
    fn rows_are_independent_of_the_batch() {
        let m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let a = vec![1, 2, 3];
        let b = vec![4, 5, 6, 7, 8];
        let alone = m.score(std::slice::from_ref(&a)).unwrap();
        let both = m.score(&[b.clone(), a.clone(), a.clone()]).unwrap();
        for r in 0..3 {
            assert_eq!(alone.row(r), both.row(5 + r));
            assert_eq!(alone.row(r), both.row(8 + r));
        }
    }

    #[test]
    fn logits_are_causal() {
        let m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let x = m.score(&[vec![1, 2, 3, 4]]).unwrap();
        let y = m.score(&[vec![1, 2, 9, 0]]).unwrap();
        assert_eq!(x.row(0), y.row(0));
        assert_eq!(x.row(1), y.row(1));
        assert_ne!(x.row(2), y.row(2));
    }

    #[test]
    fn input_errors() {
        let m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        assert!(matches!(m.prefill(&[]), Err(ModelError::EmptyPrompt)));
        assert!(matches!(m.prefill(&[11]), Err(ModelError::Token { .. })));
        assert!(matches!(m.score(&[vec![0; 65]]), Err(ModelError::TooLong { .. })));
        let (_, mut cache) = m.prefill(&vec![1; 64]).unwrap();
        assert!(matches!(m.decode_step(&mut cache, 1), Err(ModelError::CacheFull { .. })));
    }

    #[test]
    fn modes_differ_on_the_same_weights() {
        let u = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let b = u.with_mode(PrecisionMode::MixedBf16TrainFp8Rollout).unwrap();
        let seq = vec![vec![1, 2, 3, 4]];
        assert_ne!(u.score(&seq).unwrap(), b.score(&seq).unwrap());
        // The mixed rollout path and the unified path share the FP8 flow.
        assert_eq!(u.score_infer(&seq).unwrap(), b.score_infer(&seq).unwrap());
    }

    #[test]
    fn editing_one_edge_changes_logits() {
        let m = ModelState::init(&small(PrecisionMode::Bf16)).unwrap();
        let mut graphs = m.graphs().clone();
        graphs
            .graph_mut(Phase::TrainFwd)
            .set_edge("layer0.up", "layer0.act", EdgeRole::Activation, EdgeFormat::FP32)
            .unwrap();
        let edited = m.with_graphs(graphs).unwrap();
        let seq = vec![vec![1, 2, 3, 4]];
        assert_ne!(m.score(&seq).unwrap(), edited.score(&seq).unwrap());
        assert_eq!(m.score_infer(&seq).unwrap(), edited.score_infer(&seq).unwrap());
    }

    #[test]
    fn drift_is_zero_on_consistent_flows_and_positive_on_mixed() {
        let sampler = Sampler::new(3, 1.0);
        for mode in [PrecisionMode::UnifiedFp8, PrecisionMode::Bf16] {
            let m = ModelState::init(&small(mode)).unwrap();
            for r in measure_drift(&m, &[1, 2], 40, &sampler, 0).unwrap() {
                assert_eq!(r.max_abs_logit_diff, 0.0);
                assert_eq!(r.kl_train_vs_rollout, 0.0);
            }
        }
        let m = ModelState::init(&small(PrecisionMode::MixedBf16TrainFp8Rollout)).unwrap();
        let recs = measure_drift(&m, &[1, 2], 60, &sampler, 0).unwrap();
        assert!(recs.iter().any(|r| r.kl_train_vs_rollout > 0.0));
        assert!(recs.iter().all(|r| r.kl_train_vs_rollout >= -1e-12));
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let (logits, mut tape) = m.train_forward(&[vec![1, 2, 3], vec![4, 5]]).unwrap();
        let g = m.train_backward(&mut tape, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
        assert!(g.embed.data().iter().all(|&v| v == 0.0));
        assert!(g.linears.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tapes_are_single_use_and_versioned() {
        let mut m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let (logits, mut tape) = m.train_forward(&[vec![1, 2, 3]]).unwrap();
        let dl = Matrix::from_fn(logits.rows(), logits.cols(), |r, c| ((r + c) % 3) as f32 - 1.0);
        let g = m.train_backward(&mut tape, &dl).unwrap();
        assert!(matches!(m.train_backward(&mut tape, &dl), Err(ModelError::ReusedTape)));
        let (_, mut old) = m.train_forward(&[vec![1, 2, 3]]).unwrap();
        m.apply_gradients(&g, 1e-2).unwrap();
        assert!(matches!(m.train_backward(&mut old, &dl), Err(ModelError::StaleTape)));
    }

    #[test]
    fn gradients_are_linear_in_dlogits() {
        let m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let batch = [vec![1, 2, 3, 4], vec![5, 6]];
        let (logits, mut t1) = m.train_forward(&batch).unwrap();
        let (_, mut t2) = m.train_forward(&batch).unwrap();
        let dl = Matrix::from_fn(logits.rows(), logits.cols(), |r, c| (((r * 7 + c * 3) % 5) as f32 - 2.0) * 0.25);
        let g1 = m.train_backward(&mut t1, &dl).unwrap();
        let g2 = m.train_backward(&mut t2, &dl.map(|v| 2.0 * v)).unwrap();
        for (a, b) in g1.linears.iter().zip(&g2.linears).chain([(&g1.embed, &g2.embed)]) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((2.0 * x as f64 - y as f64).abs() <= 1e-6 * (y as f64).abs().max(1e-30), "{x} {y}");
            }
        }
    }

    #[test]
    fn update_changes_weights_and_requantizes() {
        let mut m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let before = m.clone();
        let (logits, mut tape) = m.train_forward(&[vec![1, 2, 3]]).unwrap();
        let dl = Matrix::from_fn(logits.rows(), logits.cols(), |_, c| if c == 4 { -1.0 } else { 0.1 });
        let g = m.train_backward(&mut tape, &dl).unwrap();
        let mut idle = m.clone();
        idle.apply_gradients(&g, 0.0).unwrap();
        assert_eq!(idle.linears(), {
            // lr = 0 leaves weights alone but still advances the moments.
            let _ = &before;
            idle.linears()
        });
        for (a, b) in idle.linears().iter().zip(before.linears()) {
            assert_eq!(a.master(), b.master());
            assert_eq!(a.wq_row(), b.wq_row());
        }
        m.apply_gradients(&g, 1e-2).unwrap();
        assert_ne!(m.linears()[0].master(), before.linears()[0].master());
        for l in m.linears() {
            assert_eq!(l.wq_row(), &crate::blocktensor::quantize_with(l.master(), crate::blocktensor::QuantScheme::per_block(4), Padding::Zero).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = ModelState::init(&small(PrecisionMode::UnifiedFp8)).unwrap();
        let (logits, mut tape) = m.train_forward(&[vec![1, 2, 3]]).unwrap();
        let dl = Matrix::from_fn(logits.rows(), logits.cols(), |r, c| (r as f32 - c as f32) * 0.1);
        let g = m.train_backward(&mut tape, &dl).unwrap();
        m.apply_gradients(&g, 1e-2).unwrap();
        let b = bytes(&m);
        let back = ModelState::read_checkpoint(&mut b.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    /// Worst per-coordinate and max-norm relative errors of `m`'s gradient
    /// of the cross-entropy against central differences on the FP32 flow.
    fn fd_errors(m: &ModelState) -> (f64, f64) {
        let cfg = m.config().clone();
        let oracle = m.with_graphs(crate::flowgraph::build_fp32_graphs(&cfg).unwrap()).unwrap();
        let batch = [vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
        let targets = [Some(2), Some(3), Some(4), Some(5), None, Some(7), Some(8), None];
        let (logits, mut tape) = m.train_forward(&batch).unwrap();
        let (_, dl) = cross_entropy(&logits, &targets);
        let grads = m.train_backward(&mut tape, &dl).unwrap();
        let loss = |mm: &ModelState| cross_entropy(&mm.score(&batch).unwrap(), &targets).0;
        let h = 1e-2f32;
        let mut params = vec![ParamRef::Embed];
        params.extend((0..m.linears().len()).map(ParamRef::Linear));
        let (mut worst, mut norm) = (0.0f64, 0.0f64);
        for p in params {
            let (rows, cols) = m.param(p).shape();
            let (mut dmax, mut fmax) = (0.0f64, 0.0f64);
            for r in 0..rows {
                for c in 0..cols {
                    let an = grads.get(p).get(r, c) as f64;
                    if an.abs() <= 1e-3 {
                        continue;
                    }
                    let fd = (loss(&oracle.perturbed(p, r, c, h).unwrap()) - loss(&oracle.perturbed(p, r, c, -h).unwrap()))
                        / (2.0 * h as f64);
                    worst = worst.max((fd - an).abs() / an.abs());
                    dmax = dmax.max((fd - an).abs());
                    fmax = fmax.max(fd.abs());
                }
            }
            norm = norm.max(dmax / fmax);
        }
        (worst, norm)
    }

    #[test]
    fn fp32_flow_gradients_match_finite_differences() {
        let cfg = small(PrecisionMode::Bf16);
        let m = ModelState::init(&cfg).unwrap();
        let m = m.with_graphs(crate::flowgraph::build_fp32_graphs(&cfg).unwrap()).unwrap();
        let (worst, _) = fd_errors(&m);
        assert!(worst <= 1e-2, "worst relative error {worst}");
    }

    #[test]
    fn bf16_gradients_track_finite_differences_at_the_noise_floor() {
        let m = ModelState::init(&small(PrecisionMode::Bf16)).unwrap();
        let (_, norm) = fd_errors(&m);
        assert!(norm <= 5e-2, "max-norm relative error {norm}");
    }
}
