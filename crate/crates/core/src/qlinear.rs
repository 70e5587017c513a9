//! Bias-free linear layer with a BF16 master weight, per-block FP8 copies of
//! that weight, and FP8 (or dense) activation caching for the backward pass.
//!
//! Which arithmetic runs is decided by a [`LinearPlan`], one tensor format per
//! edge of the precision-flow graph that touches the layer. The plan used by
//! the training forward pass and by rollout is the only thing that can make
//! them differ; the layer state they read is the same.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::blocktensor::{
    dequantize, quantize_dual, quantize_with, requantize_transpose, transpose_weight, Layout,
    Matrix, Padding, QuantScheme, QuantizedMatrix, SchemeKind, TensorError,
};
use crate::fp8num::{self, Bf16Value};
use crate::qgemm::{self, GemmError};

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("input has {got} columns, layer expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("gradient is {got:?}, expected {expected:?}")]
    GradShape { expected: (usize, usize), got: (usize, usize) },
    #[error("backward called without a cached training-mode forward")]
    NoCachedActivation,
    #[error("non-finite weight gradient at ({row}, {col})")]
    NonFiniteGradient { row: usize, col: usize },
    #[error("unsupported plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gemm(#[from] GemmError),
}

/// Precision of one tensor crossing a flow-graph edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorFormat {
    Fp32,
    Bf16,
    Fp8(QuantScheme),
}

impl TensorFormat {
    /// Value-level cast. FP8 formats round-trip through the quantizer.
    pub fn cast(&self, m: &Matrix) -> Result<Matrix, TensorError> {
        match self {
            TensorFormat::Fp32 => Ok(m.clone()),
            TensorFormat::Bf16 => Ok(m.round_bf16()),
            TensorFormat::Fp8(scheme) => {
                let layout = m.layout();
                let q = quantize_with(&m.to_layout(storage_for(scheme.kind)), *scheme, Padding::Zero)?;
                Ok(dequantize(&q).to_layout(layout))
            }
        }
    }

    pub fn is_fp8(&self) -> bool {
        matches!(self, TensorFormat::Fp8(_))
    }
}

fn storage_for(kind: SchemeKind) -> Layout {
    match kind {
        SchemeKind::PerGroupCol => Layout::Col,
        _ => Layout::Row,
    }
}

/// Formats of every edge touching one linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearPlan {
    /// Activation entering the layer in the forward pass.
    pub input: TensorFormat,
    /// Weight as read by the forward GEMM.
    pub weight: TensorFormat,
    /// Activation leaving the layer.
    pub output: TensorFormat,
    /// Activation stashed for the backward pass.
    pub saved_input: TensorFormat,
    /// Weight as read by the input-gradient GEMM.
    pub saved_weight: TensorFormat,
    /// Gradient arriving from the consumer.
    pub grad_output: TensorFormat,
    /// Gradient handed back to the producer.
    pub grad_input: TensorFormat,
    /// Weight gradient handed to the optimizer.
    pub grad_weight: TensorFormat,
}

impl LinearPlan {
    /// FP8 GEMMs everywhere, BF16 between operators, FP32 weight gradients.
    pub fn unified_fp8(g: usize) -> Self {
        Self {
            input: TensorFormat::Fp8(QuantScheme::per_group_row(g)),
            weight: TensorFormat::Fp8(QuantScheme::per_block(g)),
            output: TensorFormat::Bf16,
            saved_input: TensorFormat::Fp8(QuantScheme::per_group_row(g)),
            saved_weight: TensorFormat::Fp8(QuantScheme::per_block(g)),
            grad_output: TensorFormat::Bf16,
            grad_input: TensorFormat::Bf16,
            grad_weight: TensorFormat::Fp32,
        }
    }

    /// Dense FP32 arithmetic with no rounding on any edge.
    pub fn fp32() -> Self {
        Self {
            input: TensorFormat::Fp32,
            weight: TensorFormat::Fp32,
            output: TensorFormat::Fp32,
            saved_input: TensorFormat::Fp32,
            saved_weight: TensorFormat::Fp32,
            grad_output: TensorFormat::Fp32,
            grad_input: TensorFormat::Fp32,
            grad_weight: TensorFormat::Fp32,
        }
    }

    /// Dense BF16 arithmetic, FP32 weight gradients.
    pub fn bf16() -> Self {
        Self {
            input: TensorFormat::Bf16,
            weight: TensorFormat::Bf16,
            output: TensorFormat::Bf16,
            saved_input: TensorFormat::Bf16,
            saved_weight: TensorFormat::Bf16,
            grad_output: TensorFormat::Bf16,
            grad_input: TensorFormat::Bf16,
            grad_weight: TensorFormat::Fp32,
        }
    }
}

/// Adam hyperparameters for one update; `t` is the 1-based step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamStep {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
}

impl AdamStep {
    pub fn new(lr: f32, t: u64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t }
    }
}

/// Elementwise Adam on one parameter; `master` is rounded to BF16 after the
/// step. Moments stay in f32.
pub(crate) fn adam_update(
    master: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    grad: &[f32],
    step: &AdamStep,
) {
    let bc1 = 1.0 - step.beta1.powi(step.t as i32);
    let bc2 = 1.0 - step.beta2.powi(step.t as i32);
    for i in 0..master.len() {
        let g = grad[i];
        m[i] = step.beta1 * m[i] + (1.0 - step.beta1) * g;
        v[i] = step.beta2 * v[i] + (1.0 - step.beta2) * g * g;
        let mhat = if bc1 > 0.0 { m[i] / bc1 } else { m[i] };
        let vhat = if bc2 > 0.0 { v[i] / bc2 } else { v[i] };
        master[i] = fp8num::round_bf16(master[i] - step.lr * mhat / (vhat.sqrt() + step.eps));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedActivation {
    Fp8(QuantizedMatrix),
    Dense(Matrix),
}

/// Unrounded backward results.
#[derive(Debug, Clone)]
pub struct RawGrads {
    /// Input gradient before the outgoing edge cast.
    pub dx: Matrix,
    /// Weight gradient before the optimizer edge cast.
    pub dw: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    master_w: Matrix,
    wq_row: QuantizedMatrix,
    wq_col: QuantizedMatrix,
    g: usize,
    padding: Padding,
    cached: Option<SavedActivation>,
    opt_m: Matrix,
    opt_v: Matrix,
    step: u64,
}

impl LinearLayer {
    /// `weight` is `D × C`; it is rounded to BF16 to form the master copy.
    pub fn new(weight: &Matrix, g: usize, padding: Padding) -> Result<Self, LinearError> {
        QuantScheme::new(SchemeKind::PerBlock, g)?;
        let master_w = weight.to_layout(Layout::Row).round_bf16();
        let (rows, cols) = master_w.shape();
        let wq_row = quantize_with(&master_w, QuantScheme::per_block(g), padding)?;
        let wq_col = transpose_weight(&wq_row)?;
        Ok(Self {
            master_w,
            wq_row,
            wq_col,
            g,
            padding,
            cached: None,
            opt_m: Matrix::zeros(rows, cols),
            opt_v: Matrix::zeros(rows, cols),
            step: 0,
        })
    }

    pub fn out_features(&self) -> usize {
        self.master_w.rows()
    }

    pub fn in_features(&self) -> usize {
        self.master_w.cols()
    }

    pub fn group(&self) -> usize {
        self.g
    }

    pub fn master(&self) -> &Matrix {
        &self.master_w
    }

    pub fn wq_row(&self) -> &QuantizedMatrix {
        &self.wq_row
    }

    pub fn wq_col(&self) -> &QuantizedMatrix {
        &self.wq_col
    }

    pub fn cached(&self) -> Option<&SavedActivation> {
        self.cached.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cached = None;
    }

    pub fn moments(&self) -> (&Matrix, &Matrix) {
        (&self.opt_m, &self.opt_v)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn weight_row_for(&self, scheme: QuantScheme) -> Result<QuantizedMatrix, LinearError> {
        if scheme.kind != SchemeKind::PerBlock {
            return Err(LinearError::Plan(format!("FP8 weights must be per-block, got {}", scheme.kind.name())));
        }
        if scheme.g == self.g {
            Ok(self.wq_row.clone())
        } else {
            Ok(quantize_with(&self.master_w, scheme, Padding::Zero)?)
        }
    }

    fn weight_dense(&self, fmt: TensorFormat) -> Result<Matrix, LinearError> {
        match fmt {
            TensorFormat::Fp8(s) => Ok(dequantize(&self.weight_row_for(s)?)),
            other => Ok(other.cast(&self.master_w)?),
        }
    }

    /// Unified FP8 forward: `round_bf16(FProp(quantize(x), wq_row))`.
    pub fn forward(&mut self, x: &Matrix, training: bool) -> Result<Matrix, LinearError> {
        self.forward_with(x, &LinearPlan::unified_fp8(self.g), training)
    }

    /// Forward under `plan`. In training mode the input is cached in the
    /// plan's saved format; the returned values never depend on `training`.
    pub fn forward_with(
        &mut self,
        x: &Matrix,
        plan: &LinearPlan,
        training: bool,
    ) -> Result<Matrix, LinearError> {
        let (y, saved) = self.compute_forward(x, plan, training)?;
        self.cached = saved;
        Ok(y)
    }

    /// Forward without touching the cache.
    pub fn infer(&self, x: &Matrix, plan: &LinearPlan) -> Result<Matrix, LinearError> {
        Ok(self.compute_forward(x, plan, false)?.0)
    }

    /// Forward that hands the saved activation to the caller instead of the
    /// layer; `save = false` gives `None`.
    pub fn compute_forward(
        &self,
        x: &Matrix,
        plan: &LinearPlan,
        training: bool,
    ) -> Result<(Matrix, Option<SavedActivation>), LinearError> {
        if x.cols() != self.in_features() {
            return Err(LinearError::Shape { expected: self.in_features(), got: x.cols() });
        }
        let x = x.to_layout(Layout::Row);
        let mut fwd_xq = None;
        let y_raw = match (plan.input, plan.weight) {
            (TensorFormat::Fp8(xs), TensorFormat::Fp8(ws)) if xs.kind == SchemeKind::PerGroupRow => {
                if xs.g != ws.g {
                    return Err(LinearError::Plan(format!("input group {} vs weight group {}", xs.g, ws.g)));
                }
                let xq = quantize_with(&x, xs, Padding::Zero)?;
                let y = qgemm::gemm_fprop(&xq, &self.weight_row_for(ws)?)?;
                fwd_xq = Some(xq);
                y
            }
            (xf, wf) => {
                let xin = xf.cast(&x)?;
                qgemm::dense_nt(&xin, &self.weight_dense(wf)?)
            }
        };
        let y = plan.output.cast(&y_raw)?;
        let saved = if training {
            Some(match plan.saved_input {
                TensorFormat::Fp8(s) if s.kind == SchemeKind::PerGroupRow => match fwd_xq {
                    Some(xq) if xq.scheme() == s => SavedActivation::Fp8(xq),
                    _ => SavedActivation::Fp8(quantize_with(&plan.input.cast(&x)?, s, Padding::Zero)?),
                },
                other => SavedActivation::Dense(other.cast(&plan.input.cast(&x)?)?),
            })
        } else {
            None
        };
        Ok((y, saved))
    }

    /// Unified FP8 backward; consumes the cached activation.
    ///
    /// Returns the BF16 input gradient and the f32 weight gradient.
    pub fn backward(&mut self, dy: &Matrix) -> Result<(Matrix, Matrix), LinearError> {
        self.backward_with(dy, &LinearPlan::unified_fp8(self.g))
    }

    pub fn backward_with(&mut self, dy: &Matrix, plan: &LinearPlan) -> Result<(Matrix, Matrix), LinearError> {
        let raw = self.backward_raw(dy, plan)?;
        Ok((plan.grad_input.cast(&raw.dx)?, plan.grad_weight.cast(&raw.dw)?))
    }

    /// Backward GEMMs without the outgoing casts.
    pub fn backward_raw(&mut self, dy: &Matrix, plan: &LinearPlan) -> Result<RawGrads, LinearError> {
        let saved = self.cached.take().ok_or(LinearError::NoCachedActivation)?;
        let out = self.gradients(&saved, dy, plan);
        if matches!(out, Err(LinearError::GradShape { .. })) {
            self.cached = Some(saved);
        }
        out
    }

    /// Backward GEMMs against an explicitly supplied saved activation.
    pub fn gradients(&self, saved: &SavedActivation, dy: &Matrix, plan: &LinearPlan) -> Result<RawGrads, LinearError> {
        let expected = (rows_of(saved), self.out_features());
        if dy.shape() != expected {
            return Err(LinearError::GradShape { expected, got: dy.shape() });
        }
        let dy = plan.grad_output.cast(&dy.to_layout(Layout::Row))?;
        match (saved, plan.saved_weight) {
            (SavedActivation::Fp8(xq), TensorFormat::Fp8(ws)) if ws.kind == SchemeKind::PerBlock => {
                let g = xq.scheme().g;
                if ws.g != g {
                    return Err(LinearError::Plan(format!("saved group {g} vs weight group {}", ws.g)));
                }
                // One pass over dy yields the 1×g copy for DGrad and the g×1
                // copy for WGrad.
                let (dyq_row, dyq_col) = quantize_dual(&dy, g, Padding::Zero)?;
                let wq_col = if ws.g == self.g {
                    self.wq_col.clone()
                } else {
                    transpose_weight(&self.weight_row_for(ws)?)?
                };
                let dx = qgemm::gemm_dgrad(&dyq_row, &wq_col)?;
                let xq_col = requantize_transpose(xq)?;
                let dw = qgemm::gemm_wgrad(&dyq_col, &xq_col)?;
                Ok(RawGrads { dx, dw })
            }
            (saved, wf) => {
                let x = match saved {
                    SavedActivation::Fp8(xq) => dequantize(xq).to_layout(Layout::Row),
                    SavedActivation::Dense(m) => m.clone(),
                };
                let w = self.weight_dense(wf)?;
                let dx = qgemm::dense_nt(&dy, &w.transpose());
                let dw = qgemm::dense_nt(&dy.transpose(), &x.transpose());
                Ok(RawGrads { dx, dw })
            }
        }
    }

    /// Adam step on the master weight, then re-derives both FP8 copies. The
    /// rollout path reads the same `wq_row` bytes afterwards.
    pub fn apply_update(&mut self, dw: &Matrix, step: &AdamStep) -> Result<(), LinearError> {
        if dw.shape() != self.master_w.shape() {
            return Err(LinearError::GradShape { expected: self.master_w.shape(), got: dw.shape() });
        }
        let dw = dw.to_layout(Layout::Row);
        if let Some(i) = dw.data().iter().position(|v| !v.is_finite()) {
            let cols = dw.cols();
            return Err(LinearError::NonFiniteGradient { row: i / cols, col: i % cols });
        }
        adam_update(
            self.master_w.data_mut(),
            self.opt_m.data_mut(),
            self.opt_v.data_mut(),
            dw.data(),
            step,
        );
        self.step = step.t;
        self.requantize()
    }

    /// Copy with one master element moved by `delta` without BF16 rounding,
    /// for finite-difference probes. Quantized copies are recomputed.
    pub fn perturbed(&self, row: usize, col: usize, delta: f32) -> Result<Self, LinearError> {
        let mut out = self.clone();
        out.master_w.set(row, col, self.master_w.get(row, col) + delta);
        out.cached = None;
        out.requantize()?;
        Ok(out)
    }

    fn requantize(&mut self) -> Result<(), LinearError> {
        self.wq_row = quantize_with(&self.master_w, QuantScheme::per_block(self.g), self.padding)?;
        self.wq_col = transpose_weight(&self.wq_row)?;
        Ok(())
    }

    /// Checkpoint record: shape, step, master as raw BF16, then both moments.
    pub fn write_record(&self, w: &mut impl Write) -> io::Result<()> {
        let (rows, cols) = self.master_w.shape();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        for &x in self.master_w.data() {
            w.write_all(&Bf16Value::new(x).to_bits().to_le_bytes())?;
        }
        for m in [&self.opt_m, &self.opt_v] {
            for &x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores a record written by [`write_record`](Self::write_record);
    /// quantized copies are recomputed.
    pub fn read_record(&mut self, r: &mut impl Read) -> Result<(), LinearError> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(TensorError::from)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(TensorError::from)?;
        let cols = u32::from_le_bytes(b4) as usize;
        if (rows, cols) != self.master_w.shape() {
            return Err(LinearError::GradShape { expected: self.master_w.shape(), got: (rows, cols) });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(TensorError::from)?;
        self.step = u64::from_le_bytes(b8);
        let mut b2 = [0u8; 2];
        for x in self.master_w.data_mut() {
            r.read_exact(&mut b2).map_err(TensorError::from)?;
            *x = Bf16Value::from_bits(u16::from_le_bytes(b2)).get();
        }
        for m in [&mut self.opt_m, &mut self.opt_v] {
            for x in m.data_mut() {
                r.read_exact(&mut b4).map_err(TensorError::from)?;
                *x = f32::from_le_bytes(b4);
            }
        }
        self.cached = None;
        self.requantize()
    }
}

fn rows_of(s: &SavedActivation) -> usize {
    match s {
        SavedActivation::Fp8(q) => q.rows(),
        SavedActivation::Dense(m) => m.rows(),
    }
}
