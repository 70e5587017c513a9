//! The three block-scaled FP8 GEMMs of a linear layer and a float64 oracle.
//!
//! | GEMM  | X   | W   | ∇Y  | expression |
//! |-------|-----|-----|-----|------------|
//! | FProp | Row | Row | –   | X × Wᵀ     |
//! | WGrad | Col | –   | Col | ∇Yᵀ × X    |
//! | DGrad | –   | Col | Row | ∇Y × W     |
//!
//! Operands are passed in their canonical orientation (`X: N×C`, `W: D×C`,
//! `∇Y: N×D`); the layout column is the storage order of that tensor. Every
//! kernel walks the reduction axis in `g`-wide chunks: the chunk dot product
//! accumulates in f32 in ascending index order, is multiplied by the product
//! of the two block scales, and chunk partials accumulate in f32 in ascending
//! chunk order. Output elements are independent, so the result is bitwise
//! identical for any thread count.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::blocktensor::{dequantize, Layout, Matrix, QuantScheme, QuantizedMatrix, SchemeKind};
use crate::fp8num::DECODE_LUT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum GemmKind {
    FProp,
    DGrad,
    WGrad,
}

impl fmt::Display for GemmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GemmKind::FProp => "FProp",
            GemmKind::DGrad => "DGrad",
            GemmKind::WGrad => "WGrad",
        })
    }
}

impl GemmKind {
    /// Row of the layout table as text.
    pub fn table_row(self) -> &'static str {
        match self {
            GemmKind::FProp => "FProp: X Row (1xg), W Row (gxg); Y = X × Wᵀ",
            GemmKind::DGrad => "DGrad: ∇Y Row (1xg), W Col (gxg); ∇X = ∇Y × W",
            GemmKind::WGrad => "WGrad: ∇Y Col (gx1), X Col (gx1); ∇W = ∇Yᵀ × X",
        }
    }

    /// Expected (scheme, layout) for (first, second) operand.
    pub fn contract(self) -> [(SchemeKind, Layout); 2] {
        match self {
            GemmKind::FProp => [(SchemeKind::PerGroupRow, Layout::Row), (SchemeKind::PerBlock, Layout::Row)],
            GemmKind::DGrad => [(SchemeKind::PerGroupRow, Layout::Row), (SchemeKind::PerBlock, Layout::Col)],
            GemmKind::WGrad => [(SchemeKind::PerGroupCol, Layout::Col), (SchemeKind::PerGroupCol, Layout::Col)],
        }
    }

    fn operand_names(self) -> [&'static str; 2] {
        match self {
            GemmKind::FProp => ["X", "W"],
            GemmKind::DGrad => ["∇Y", "W"],
            GemmKind::WGrad => ["∇Y", "X"],
        }
    }
}

/// Logical GEMM problem: output `m × n`, reduction length `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmSpec {
    pub which: GemmKind,
    pub g: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum GemmError {
    #[error(
        "{kind} operand {operand} must be {expected_scheme}/{expected_layout:?}, got {actual_scheme}/{actual_layout:?} (table row {row})"
    )]
    Layout {
        kind: GemmKind,
        operand: &'static str,
        expected_scheme: &'static str,
        expected_layout: Layout,
        actual_scheme: &'static str,
        actual_layout: Layout,
        row: &'static str,
    },
    #[error("{kind} shape mismatch: {detail}")]
    Shape { kind: GemmKind, detail: String },
    #[error("{kind} group sizes differ: {a} vs {b}")]
    Group { kind: GemmKind, a: usize, b: usize },
}

fn check_operand(kind: GemmKind, idx: usize, q: &QuantizedMatrix) -> Result<(), GemmError> {
    let (scheme, layout) = kind.contract()[idx];
    if q.scheme().kind != scheme || q.layout() != layout {
        return Err(GemmError::Layout {
            kind,
            operand: kind.operand_names()[idx],
            expected_scheme: scheme.name(),
            expected_layout: layout,
            actual_scheme: q.scheme().kind.name(),
            actual_layout: q.layout(),
            row: kind.table_row(),
        });
    }
    Ok(())
}

fn check_pair(kind: GemmKind, a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<GemmSpec, GemmError> {
    check_operand(kind, 0, a)?;
    check_operand(kind, 1, b)?;
    let (ga, gb) = (a.scheme().g, b.scheme().g);
    if ga != gb {
        return Err(GemmError::Group { kind, a: ga, b: gb });
    }
    let (m, n, k, ok) = match kind {
        GemmKind::FProp => (a.rows(), b.rows(), a.cols(), a.cols() == b.cols()),
        GemmKind::DGrad => (a.rows(), b.cols(), a.cols(), a.cols() == b.rows()),
        GemmKind::WGrad => (a.cols(), b.cols(), a.rows(), a.rows() == b.rows()),
    };
    if !ok {
        return Err(GemmError::Shape {
            kind,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(GemmSpec { which: kind, g: ga, m, n, k })
}

fn decode_all(q: &QuantizedMatrix) -> Vec<f32> {
    q.codes().iter().map(|c| DECODE_LUT[c.0 as usize]).collect()
}

/// Core blocked kernel over two K-contiguous operands.
///
/// `a` holds `m` runs of length `k`, `b` holds `n` runs of length `k`.
/// `sa(i, chunk)` and `sb(j, chunk)` give the block scales.
fn blocked_kernel<SA, SB>(
    spec: GemmSpec,
    a: &[f32],
    b: &[f32],
    sa: SA,
    sb: SB,
) -> Matrix
where
    SA: Fn(usize, usize) -> f32 + Sync,
    SB: Fn(usize, usize) -> f32 + Sync,
{
    let GemmSpec { m, n, k, g, .. } = spec;
    let chunks = k.div_ceil(g);
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for ch in 0..chunks {
                let lo = ch * g;
                let hi = (lo + g).min(k);
                let mut dot = 0.0f32;
                for t in lo..hi {
                    dot += arow[t] * brow[t];
                }
                acc += dot * (sa(i, ch) * sb(j, ch));
            }
            *slot = acc;
        }
    });
    Matrix::from_rows_unchecked(m, n, out)
}

/// `Y = X × Wᵀ` with `X: N×C` (1×g, Row) and `W: D×C` (g×g, Row).
pub fn gemm_fprop(xq: &QuantizedMatrix, wq: &QuantizedMatrix) -> Result<Matrix, GemmError> {
    let spec = check_pair(GemmKind::FProp, xq, wq)?;
    let (xa, wa) = (decode_all(xq), decode_all(wq));
    let g = spec.g;
    Ok(blocked_kernel(
        spec,
        &xa,
        &wa,
        |n, ch| xq.grid_scale(n, ch),
        |d, ch| wq.grid_scale(d / g, ch),
    ))
}

/// `∇X = ∇Y × W` with `∇Y: N×D` (1×g, Row) and `W: D×C` (g×g, Col).
pub fn gemm_dgrad(dyq: &QuantizedMatrix, wq_col: &QuantizedMatrix) -> Result<Matrix, GemmError> {
    let spec = check_pair(GemmKind::DGrad, dyq, wq_col)?;
    let (da, wa) = (decode_all(dyq), decode_all(wq_col));
    let g = spec.g;
    Ok(blocked_kernel(
        spec,
        &da,
        &wa,
        |n, ch| dyq.grid_scale(n, ch),
        |c, ch| wq_col.grid_scale(ch, c / g),
    ))
}

/// `∇W = ∇Yᵀ × X` with `∇Y: N×D` (g×1, Col) and `X: N×C` (g×1, Col).
pub fn gemm_wgrad(dyq_col: &QuantizedMatrix, xq_col: &QuantizedMatrix) -> Result<Matrix, GemmError> {
    let spec = check_pair(GemmKind::WGrad, dyq_col, xq_col)?;
    let (da, xa) = (decode_all(dyq_col), decode_all(xq_col));
    Ok(blocked_kernel(
        spec,
        &da,
        &xa,
        |d, ch| dyq_col.grid_scale(ch, d),
        |c, ch| xq_col.grid_scale(ch, c),
    ))
}

/// Dispatches on `which`.
pub fn gemm(which: GemmKind, a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<Matrix, GemmError> {
    match which {
        GemmKind::FProp => gemm_fprop(a, b),
        GemmKind::DGrad => gemm_dgrad(a, b),
        GemmKind::WGrad => gemm_wgrad(a, b),
    }
}

/// Dequantize-then-dense reference in f64. Checks shapes only, so it also
/// serves operands the blocked kernels would reject.
pub fn gemm_oracle(a: &QuantizedMatrix, b: &QuantizedMatrix, which: GemmKind) -> Result<Matrix, GemmError> {
    let da = dequantize(a);
    let db = dequantize(b);
    let (m, n, k, ok) = match which {
        GemmKind::FProp => (a.rows(), b.rows(), a.cols(), a.cols() == b.cols()),
        GemmKind::DGrad => (a.rows(), b.cols(), a.cols(), a.cols() == b.rows()),
        GemmKind::WGrad => (a.cols(), b.cols(), a.rows(), a.rows() == b.rows()),
    };
    if !ok {
        return Err(GemmError::Shape { kind: which, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    let av = |i: usize, t: usize| -> f64 {
        match which {
            GemmKind::WGrad => da.get(t, i) as f64,
            _ => da.get(i, t) as f64,
        }
    };
    let bv = |j: usize, t: usize| -> f64 {
        match which {
            GemmKind::FProp => db.get(j, t) as f64,
            _ => db.get(t, j) as f64,
        }
    };
    Ok(Matrix::from_fn(m, n, |i, j| (0..k).map(|t| av(i, t) * bv(j, t)).sum::<f64>() as f32))
}

/// Max-norm relative error `max|a-b| / max|b|` (0 when both are zero).
pub fn max_norm_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            diff = diff.max((a.get(r, c) as f64 - b.get(r, c) as f64).abs());
            scale = scale.max((b.get(r, c) as f64).abs());
        }
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Dense f32 GEMM over two K-contiguous row-major operands, `a: m×k`,
/// `b: n×k`, plain ascending-k accumulation. Used by the unquantized paths.
pub fn dense_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let a = a.to_layout(Layout::Row);
    let b = b.to_layout(Layout::Row);
    assert_eq!(a.cols(), b.cols(), "reduction extents differ");
    let (m, n, k) = (a.rows(), b.rows(), a.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            *slot = acc;
        }
    });
    Matrix::from_rows_unchecked(m, n, out)
}

/// Builds the three operand schemes a test or the CLI needs for `which`.
pub fn operand_schemes(which: GemmKind, g: usize) -> [QuantScheme; 2] {
    let c = which.contract();
    [
        QuantScheme::new(c[0].0, g).expect("power-of-two group"),
        QuantScheme::new(c[1].0, g).expect("power-of-two group"),
    ]
}
