//! Dense matrices and block-scaled E4M3 matrices.
//!
//! Shapes are always logical (`rows × cols` of the canonical tensor, e.g. a
//! weight is `D × C`). [`Layout`] only says how the buffer is ordered: `Row`
//! is row-major, `Col` is column-major. Storage transposes flip the layout and
//! physically transpose the buffer while leaving every logical element alone.
//!
//! Scale grids follow the same convention: the grid has a logical shape set by
//! the [`QuantScheme`] and is stored in the matrix layout.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::fp8num::{self, Fp8Code, DECODE_LUT, E4M3_MAX};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("matrices must have at least one row and one column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("group size {0} must be a power of two >= 1")]
    BadGroup(usize),
    #[error("{axis} extent {extent} is not a multiple of group size {g} and padding is disabled")]
    NotMultiple { axis: &'static str, extent: usize, g: usize },
    #[error("non-finite element {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f32 },
    #[error("expected scheme {expected}, got {actual}")]
    WrongScheme { expected: &'static str, actual: String },
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Layout {
    Row,
    Col,
}

impl Layout {
    pub fn flipped(self) -> Self {
        match self {
            Layout::Row => Layout::Col,
            Layout::Col => Layout::Row,
        }
    }

    #[inline]
    fn index(self, rows: usize, cols: usize, r: usize, c: usize) -> usize {
        match self {
            Layout::Row => r * cols + c,
            Layout::Col => c * rows + r,
        }
    }
}

/// Dense single-precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    layout: Layout,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::with_layout(rows, cols, Layout::Row, data)
    }

    pub fn with_layout(
        rows: usize,
        cols: usize,
        layout: Layout,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, layout, data })
    }

    /// Row-major matrix; shapes are trusted.
    pub(crate) fn from_rows_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, layout: Layout::Row, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, layout: Layout::Row, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, layout: Layout::Row, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Buffer in storage order.
    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[self.layout.index(self.rows, self.cols, r, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        let i = self.layout.index(self.rows, self.cols, r, c);
        self.data[i] = v;
    }

    /// Row slice; only valid for row-major storage.
    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        assert_eq!(self.layout, Layout::Row, "row() on column-major matrix");
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        assert_eq!(self.layout, Layout::Row, "row_mut() on column-major matrix");
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Same logical matrix in the requested storage order.
    pub fn to_layout(&self, layout: Layout) -> Matrix {
        if layout == self.layout {
            return self.clone();
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            layout,
            data: transpose_buffer(&self.data, self.rows, self.cols, self.layout),
        }
    }

    /// Logical transpose, row-major result.
    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            layout: self.layout,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise BF16 rounding.
    pub fn round_bf16(&self) -> Matrix {
        self.map(fp8num::round_bf16)
    }

    pub fn is_bf16(&self) -> bool {
        self.data.iter().all(|&x| fp8num::is_bf16(x))
    }

    /// Bitwise equality of the logical contents.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        let a = self.to_layout(Layout::Row);
        let b = other.to_layout(Layout::Row);
        a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    /// Stacks row-major matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts[0].cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols);
            let p = p.to_layout(Layout::Row);
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Matrix::from_rows_unchecked(rows, cols, data)
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.get(r, c);
                if !v.is_finite() {
                    return Err(TensorError::NonFinite { row: r, col: c, value: v });
                }
            }
        }
        Ok(())
    }
}

fn transpose_buffer<T: Copy>(data: &[T], rows: usize, cols: usize, from: Layout) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    match from {
        // row-major -> column-major
        Layout::Row => {
            for c in 0..cols {
                for r in 0..rows {
                    out.push(data[r * cols + c]);
                }
            }
        }
        Layout::Col => {
            for r in 0..rows {
                for c in 0..cols {
                    out.push(data[c * rows + r]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SchemeKind {
    /// `1 × g` groups along each row.
    PerGroupRow,
    /// `g × g` blocks.
    PerBlock,
    /// `g × 1` groups down each column.
    PerGroupCol,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::PerGroupRow => "PerGroupRow",
            SchemeKind::PerBlock => "PerBlock",
            SchemeKind::PerGroupCol => "PerGroupCol",
        }
    }

    /// (row extent, col extent) of one scaling block.
    fn block(self, g: usize) -> (usize, usize) {
        match self {
            SchemeKind::PerGroupRow => (1, g),
            SchemeKind::PerBlock => (g, g),
            SchemeKind::PerGroupCol => (g, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct QuantScheme {
    pub kind: SchemeKind,
    pub g: usize,
}

impl QuantScheme {
    pub const DEFAULT_GROUP: usize = 128;

    pub fn new(kind: SchemeKind, g: usize) -> Result<Self, TensorError> {
        if g == 0 || !g.is_power_of_two() {
            return Err(TensorError::BadGroup(g));
        }
        Ok(Self { kind, g })
    }

    pub fn per_group_row(g: usize) -> Self {
        Self::new(SchemeKind::PerGroupRow, g).expect("valid group size")
    }

    pub fn per_block(g: usize) -> Self {
        Self::new(SchemeKind::PerBlock, g).expect("valid group size")
    }

    pub fn per_group_col(g: usize) -> Self {
        Self::new(SchemeKind::PerGroupCol, g).expect("valid group size")
    }

    /// Logical scale-grid shape for a `rows × cols` matrix.
    pub fn grid(&self, rows: usize, cols: usize) -> (usize, usize) {
        let (br, bc) = self.kind.block(self.g);
        (rows.div_ceil(br), cols.div_ceil(bc))
    }

    pub fn label(&self) -> String {
        let (br, bc) = self.kind.block(self.g);
        format!("{br}x{bc}")
    }
}

/// Whether non-multiple extents are accepted (as if zero padded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Strict,
    Zero,
}

/// E4M3 codes plus one positive scale per block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    scheme: QuantScheme,
    layout: Layout,
    codes: Vec<Fp8Code>,
    scales: Vec<f32>,
}

impl QuantizedMatrix {
    /// Assembles a matrix from raw parts, validating the invariants.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        scheme: QuantScheme,
        layout: Layout,
        codes: Vec<Fp8Code>,
        scales: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if codes.len() != rows * cols {
            return Err(TensorError::DataLength { rows, cols, len: codes.len() });
        }
        let (gr, gc) = scheme.grid(rows, cols);
        if scales.len() != gr * gc {
            return Err(TensorError::Format(format!(
                "scale grid has {} entries, scheme needs {gr}x{gc}",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(TensorError::Format(format!("scale {s} is not finite and positive")));
        }
        if codes.iter().any(|c| c.is_nan()) {
            return Err(TensorError::Format("NaN code in quantized matrix".into()));
        }
        Ok(Self { rows, cols, scheme, layout, codes, scales })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Codes in storage order.
    #[inline]
    pub fn codes(&self) -> &[Fp8Code] {
        &self.codes
    }

    /// Scales in storage order of the grid.
    #[inline]
    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn grid(&self) -> (usize, usize) {
        self.scheme.grid(self.rows, self.cols)
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> Fp8Code {
        self.codes[self.layout.index(self.rows, self.cols, r, c)]
    }

    /// Scale at logical grid position.
    #[inline]
    pub fn grid_scale(&self, gr: usize, gc: usize) -> f32 {
        let (nr, nc) = self.grid();
        self.scales[self.layout.index(nr, nc, gr, gc)]
    }

    /// Scale governing logical element `(r, c)`.
    #[inline]
    pub fn scale_of(&self, r: usize, c: usize) -> f32 {
        let (br, bc) = self.scheme.kind.block(self.scheme.g);
        self.grid_scale(r / br, c / bc)
    }

    /// Multiplies every scale by `factor`.
    pub fn scaled_scales(&self, factor: f32) -> QuantizedMatrix {
        let mut q = self.clone();
        for s in &mut q.scales {
            *s *= factor;
        }
        q
    }

    /// Same logical codes and scales, other storage order.
    pub fn to_layout(&self, layout: Layout) -> QuantizedMatrix {
        if layout == self.layout {
            return self.clone();
        }
        let (gr, gc) = self.grid();
        QuantizedMatrix {
            rows: self.rows,
            cols: self.cols,
            scheme: self.scheme,
            layout,
            codes: transpose_buffer(&self.codes, self.rows, self.cols, self.layout),
            scales: transpose_buffer(&self.scales, gr, gc, self.layout),
        }
    }

    /// Bitwise equality of logical codes and scales (storage order ignored).
    pub fn logically_eq(&self, other: &QuantizedMatrix) -> bool {
        if self.shape() != other.shape() || self.scheme != other.scheme {
            return false;
        }
        let a = self.to_layout(Layout::Row);
        let b = other.to_layout(Layout::Row);
        a.codes == b.codes
            && a.scales.iter().zip(&b.scales).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Block-scaled quantization; every extent along a blocked axis must be a
/// multiple of `g`.
pub fn quantize(m: &Matrix, scheme: QuantScheme) -> Result<QuantizedMatrix, TensorError> {
    quantize_with(m, scheme, Padding::Strict)
}

/// Block-scaled quantization with an explicit padding policy.
///
/// Per block: `S = max|x| / 448` in single precision (`S = 1` for an all-zero
/// block) and `code = encode(x / S)`. Partial edge blocks under
/// [`Padding::Zero`] behave exactly like zero-padded full blocks.
pub fn quantize_with(
    m: &Matrix,
    scheme: QuantScheme,
    padding: Padding,
) -> Result<QuantizedMatrix, TensorError> {
    let (rows, cols) = m.shape();
    let (br, bc) = scheme.kind.block(scheme.g);
    if padding == Padding::Strict {
        if br > 1 && rows % br != 0 {
            return Err(TensorError::NotMultiple { axis: "row", extent: rows, g: scheme.g });
        }
        if bc > 1 && cols % bc != 0 {
            return Err(TensorError::NotMultiple { axis: "column", extent: cols, g: scheme.g });
        }
    }
    m.check_finite()?;
    let layout = m.layout();
    let (gr, gc) = scheme.grid(rows, cols);
    let mut codes = vec![Fp8Code::ZERO; rows * cols];
    let mut scales = vec![1.0f32; gr * gc];
    for bi in 0..gr {
        let r0 = bi * br;
        let r1 = (r0 + br).min(rows);
        for bj in 0..gc {
            let c0 = bj * bc;
            let c1 = (c0 + bc).min(cols);
            let mut amax = 0.0f32;
            for r in r0..r1 {
                for c in c0..c1 {
                    amax = amax.max(m.get(r, c).abs());
                }
            }
            let scale = if amax == 0.0 { 1.0 } else { amax / E4M3_MAX };
            scales[layout.index(gr, gc, bi, bj)] = scale;
            for r in r0..r1 {
                for c in c0..c1 {
                    codes[layout.index(rows, cols, r, c)] = fp8num::encode_finite(m.get(r, c) / scale);
                }
            }
        }
    }
    Ok(QuantizedMatrix { rows, cols, scheme, layout, codes, scales })
}

/// Quantizes one gradient twice in a single pass over its elements: `1×g`
/// groups along rows (row-major) and `g×1` groups along columns
/// (column-major). Both consumers of a layer's output gradient need one.
pub fn quantize_dual(
    m: &Matrix,
    g: usize,
    padding: Padding,
) -> Result<(QuantizedMatrix, QuantizedMatrix), TensorError> {
    let row_scheme = QuantScheme::new(SchemeKind::PerGroupRow, g)?;
    let col_scheme = QuantScheme::new(SchemeKind::PerGroupCol, g)?;
    let (rows, cols) = m.shape();
    if padding == Padding::Strict {
        if cols % g != 0 {
            return Err(TensorError::NotMultiple { axis: "column", extent: cols, g });
        }
        if rows % g != 0 {
            return Err(TensorError::NotMultiple { axis: "row", extent: rows, g });
        }
    }
    m.check_finite()?;
    let m = m.to_layout(Layout::Row);
    let (rgr, rgc) = row_scheme.grid(rows, cols);
    let (cgr, cgc) = col_scheme.grid(rows, cols);
    // One sweep collects both sets of block maxima.
    let mut row_max = vec![0.0f32; rgr * rgc];
    let mut col_max = vec![0.0f32; cgr * cgc];
    for r in 0..rows {
        let row = m.row(r);
        for (c, &x) in row.iter().enumerate() {
            let a = x.abs();
            let ri = r * rgc + c / g;
            row_max[ri] = row_max[ri].max(a);
            let ci = (r / g) * cgc + c;
            col_max[ci] = col_max[ci].max(a);
        }
    }
    let to_scale = |amax: f32| if amax == 0.0 { 1.0 } else { amax / E4M3_MAX };
    let row_scales: Vec<f32> = row_max.iter().map(|&a| to_scale(a)).collect();
    let col_scales_rm: Vec<f32> = col_max.iter().map(|&a| to_scale(a)).collect();
    let mut row_codes = Vec::with_capacity(rows * cols);
    let mut col_codes = vec![Fp8Code::ZERO; rows * cols];
    for r in 0..rows {
        let row = m.row(r);
        for (c, &x) in row.iter().enumerate() {
            row_codes.push(fp8num::encode_finite(x / row_scales[r * rgc + c / g]));
            col_codes[c * rows + r] = fp8num::encode_finite(x / col_scales_rm[(r / g) * cgc + c]);
        }
    }
    let rowq = QuantizedMatrix {
        rows,
        cols,
        scheme: row_scheme,
        layout: Layout::Row,
        codes: row_codes,
        scales: row_scales,
    };
    let colq = QuantizedMatrix {
        rows,
        cols,
        scheme: col_scheme,
        layout: Layout::Col,
        codes: col_codes,
        scales: transpose_buffer(&col_scales_rm, cgr, cgc, Layout::Row),
    };
    Ok((rowq, colq))
}

/// `S_block · decode(code)` per element, in the matrix's storage order.
pub fn dequantize(q: &QuantizedMatrix) -> Matrix {
    let mut data = vec![0.0f32; q.rows * q.cols];
    for r in 0..q.rows {
        for c in 0..q.cols {
            let i = q.layout.index(q.rows, q.cols, r, c);
            data[i] = q.scale_of(r, c) * DECODE_LUT[q.codes[i].0 as usize];
        }
    }
    Matrix { rows: q.rows, cols: q.cols, layout: q.layout, data }
}

/// Re-quantizes a row-grouped matrix with `g×1` column groups, stored
/// column-major. Only the decoded FP8 values are read.
pub fn requantize_transpose(q: &QuantizedMatrix) -> Result<QuantizedMatrix, TensorError> {
    if q.scheme.kind != SchemeKind::PerGroupRow {
        return Err(TensorError::WrongScheme {
            expected: "PerGroupRow",
            actual: q.scheme.kind.name().to_string(),
        });
    }
    let decoded = dequantize(q).to_layout(Layout::Col);
    quantize_with(&decoded, QuantScheme::per_group_col(q.scheme.g), Padding::Zero)
}

/// Storage transpose of a per-block weight: codes and scales move, nothing
/// is re-quantized.
pub fn transpose_weight(q: &QuantizedMatrix) -> Result<QuantizedMatrix, TensorError> {
    if q.scheme.kind != SchemeKind::PerBlock {
        return Err(TensorError::WrongScheme {
            expected: "PerBlock",
            actual: q.scheme.kind.name().to_string(),
        });
    }
    Ok(q.to_layout(q.layout.flipped()))
}

// ---------------------------------------------------------------------------
// Binary dump format
//
//   magic   b"FP8Q"
//   kind    u8   0 = dense f32, 1 = PerGroupRow, 2 = PerBlock, 3 = PerGroupCol
//   g       u32  (0 for dense)
//   rows    u32
//   cols    u32
//   layout  u8   0 = Row, 1 = Col
//   dense:      rows*cols f32, logical row-major
//   quantized:  rows*cols code bytes, logical row-major,
//               then grid f32 scales, logical row-major
//
// All integers and reals little-endian.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"FP8Q";

fn layout_byte(l: Layout) -> u8 {
    match l {
        Layout::Row => 0,
        Layout::Col => 1,
    }
}

fn write_header(
    w: &mut impl Write,
    kind: u8,
    g: usize,
    rows: usize,
    cols: usize,
    layout: Layout,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[kind])?;
    for v in [g, rows, cols] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[layout_byte(layout)])
}

pub fn write_quantized(w: &mut impl Write, q: &QuantizedMatrix) -> io::Result<()> {
    let kind = match q.scheme.kind {
        SchemeKind::PerGroupRow => 1,
        SchemeKind::PerBlock => 2,
        SchemeKind::PerGroupCol => 3,
    };
    write_header(w, kind, q.scheme.g, q.rows, q.cols, q.layout)?;
    let rm = q.to_layout(Layout::Row);
    let bytes: Vec<u8> = rm.codes.iter().map(|c| c.0).collect();
    w.write_all(&bytes)?;
    for s in &rm.scales {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dense(w: &mut impl Write, m: &Matrix) -> io::Result<()> {
    write_header(w, 0, 0, m.rows, m.cols, m.layout)?;
    let rm = m.to_layout(Layout::Row);
    for v in &rm.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Either payload of the dump format.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    Dense(Matrix),
    Quantized(QuantizedMatrix),
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn read_tensor(r: &mut impl Read) -> Result<TensorFile, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let g = read_u32(r)? as usize;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut lb = [0u8; 1];
    r.read_exact(&mut lb)?;
    let layout = match lb[0] {
        0 => Layout::Row,
        1 => Layout::Col,
        other => return Err(TensorError::Format(format!("bad layout byte {other}"))),
    };
    let scheme_kind = match kind[0] {
        0 => {
            let data = read_f32s(r, rows * cols)?;
            let m = Matrix::with_layout(rows, cols, Layout::Row, data)?;
            return Ok(TensorFile::Dense(m.to_layout(layout)));
        }
        1 => SchemeKind::PerGroupRow,
        2 => SchemeKind::PerBlock,
        3 => SchemeKind::PerGroupCol,
        other => return Err(TensorError::Format(format!("bad scheme byte {other}"))),
    };
    let scheme = QuantScheme::new(scheme_kind, g)?;
    let mut code_bytes = vec![0u8; rows * cols];
    r.read_exact(&mut code_bytes)?;
    let (gr, gc) = scheme.grid(rows, cols);
    let scales = read_f32s(r, gr * gc)?;
    let codes = code_bytes.into_iter().map(Fp8Code).collect();
    let q = QuantizedMatrix::from_parts(rows, cols, scheme, Layout::Row, codes, scales)?;
    Ok(TensorFile::Quantized(q.to_layout(layout)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp8num::{decode_e4m3, encode_e4m3, E4M3_MIN_NORMAL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-3.0f32..3.0))
    }

    #[test]
    fn exact_block_keeps_values() {
        let m = Matrix::new(1, 2, vec![448.0, -224.0]).unwrap();
        let q = quantize(&m, QuantScheme::per_group_row(2)).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(dequantize(&q).data(), &[448.0, -224.0]);
    }

    #[test]
    fn zero_block_has_unit_scale() {
        let m = Matrix::zeros(4, 4);
        for scheme in [
            QuantScheme::per_group_row(4),
            QuantScheme::per_block(4),
            QuantScheme::per_group_col(4),
        ] {
            let q = quantize(&m, scheme).unwrap();
            assert!(q.scales().iter().all(|&s| s == 1.0));
            assert!(q.codes().iter().all(|c| c.is_zero()));
            assert_eq!(dequantize(&q), m);
        }
    }

    #[test]
    fn grid_shapes_follow_scheme() {
        let m = random_matrix(8, 16, 1);
        assert_eq!(quantize(&m, QuantScheme::per_group_row(4)).unwrap().grid(), (8, 4));
        assert_eq!(quantize(&m, QuantScheme::per_block(4)).unwrap().grid(), (2, 4));
        assert_eq!(quantize(&m, QuantScheme::per_group_col(4)).unwrap().grid(), (2, 16));
    }

    #[test]
    fn strict_rejects_non_multiple_and_padding_accepts() {
        let m = random_matrix(5, 6, 2);
        assert!(matches!(
            quantize(&m, QuantScheme::per_group_row(4)),
            Err(TensorError::NotMultiple { .. })
        ));
        assert!(quantize(&m, QuantScheme::per_block(4)).is_err());
        // Row groups do not block the row axis.
        let m8 = random_matrix(5, 8, 2);
        assert!(quantize(&m8, QuantScheme::per_group_row(4)).is_ok());

        let q = quantize_with(&m, QuantScheme::per_block(4), Padding::Zero).unwrap();
        assert_eq!(q.grid(), (2, 2));
        // Same result as quantizing an explicitly zero-padded copy.
        let padded = Matrix::from_fn(8, 8, |r, c| if r < 5 && c < 6 { m.get(r, c) } else { 0.0 });
        let qp = quantize(&padded, QuantScheme::per_block(4)).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                assert_eq!(q.code(r, c), qp.code(r, c));
                assert_eq!(q.scale_of(r, c), qp.scale_of(r, c));
            }
        }
    }

    #[test]
    fn bad_group_sizes() {
        assert!(QuantScheme::new(SchemeKind::PerBlock, 0).is_err());
        assert!(QuantScheme::new(SchemeKind::PerBlock, 12).is_err());
        assert!(QuantScheme::new(SchemeKind::PerBlock, 1).is_ok());
    }

    #[test]
    fn random_block_error_within_half_ulp_of_scaled_grid() {
        let m = random_matrix(4, 4, 7);
        let q = quantize(&m, QuantScheme::per_block(4)).unwrap();
        let d = dequantize(&q);
        // Independent route: per-element nearest-grid rounding of x/S through
        // the scalar codec.
        for r in 0..4 {
            for c in 0..4 {
                let s = q.scale_of(r, c);
                let x = m.get(r, c);
                let oracle = s * decode_e4m3(encode_e4m3(x / s).unwrap());
                assert_eq!(d.get(r, c), oracle);
                assert!((d.get(r, c) - x).abs() <= 448.0 * s / 16.0);
            }
        }
    }

    #[test]
    fn requantize_transpose_of_exact_values_is_lossless() {
        // Diagonal 448 puts the maximum in every row group and column group.
        let vals = [1.0f32, -2.0, 0.5, 3.0, -0.75, 6.0, 10.0, -64.0];
        let m = Matrix::from_fn(4, 4, |r, c| if r == c { 448.0 } else { vals[(r * 4 + c) % 8] });
        let q = quantize(&m, QuantScheme::per_group_row(4)).unwrap();
        let t = requantize_transpose(&q).unwrap();
        assert_eq!(t.layout(), Layout::Col);
        assert_eq!(t.scheme().kind, SchemeKind::PerGroupCol);
        assert!(dequantize(&t).bitwise_eq(&dequantize(&q)));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(t.code(r, c), q.code(r, c));
            }
        }
    }

    #[test]
    fn requantize_transpose_identity_pattern() {
        let q = quantize(&Matrix::identity(8), QuantScheme::per_group_row(4)).unwrap();
        let t = requantize_transpose(&q).unwrap();
        // Column-major buffer of the identity is the identity pattern again.
        let d = dequantize(&t);
        assert!(d.bitwise_eq(&Matrix::identity(8)));
        assert_eq!(d.data(), Matrix::identity(8).data());
    }

    #[test]
    fn requantize_transpose_needs_row_groups() {
        let q = quantize(&Matrix::identity(4), QuantScheme::per_block(4)).unwrap();
        assert!(requantize_transpose(&q).is_err());
    }

    #[test]
    fn transpose_weight_single_block() {
        let m = random_matrix(128, 128, 3);
        let q = quantize(&m, QuantScheme::per_block(128)).unwrap();
        let t = transpose_weight(&q).unwrap();
        assert_eq!(t.grid(), (1, 1));
        assert_eq!(t.scales(), q.scales());
        assert_eq!(t.codes()[1], q.codes()[128]);
        assert!(transpose_weight(&t).unwrap() == q);
    }

    #[test]
    fn dual_quantization_matches_separate_passes() {
        let m = random_matrix(8, 12, 11);
        let (rq, cq) = quantize_dual(&m, 4, Padding::Strict).unwrap();
        assert_eq!(rq, quantize(&m, QuantScheme::per_group_row(4)).unwrap());
        let sep = quantize(&m.to_layout(Layout::Col), QuantScheme::per_group_col(4)).unwrap();
        assert_eq!(cq, sep);
        let (rq, cq) = quantize_dual(&random_matrix(5, 6, 4), 4, Padding::Zero).unwrap();
        assert_eq!(rq.grid(), (5, 2));
        assert_eq!(cq.grid(), (2, 6));
    }

    #[test]
    fn dump_round_trip_preserves_layout() {
        let q = transpose_weight(&quantize(&random_matrix(8, 8, 5), QuantScheme::per_block(4)).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_quantized(&mut buf, &q).unwrap();
        assert_eq!(&buf[..4], b"FP8Q");
        assert_eq!(buf.len(), 4 + 1 + 12 + 1 + 64 + 4 * 4);
        match read_tensor(&mut buf.as_slice()).unwrap() {
            TensorFile::Quantized(back) => assert_eq!(back, q),
            other => panic!("unexpected {other:?}"),
        }
        let m = random_matrix(3, 5, 6);
        let mut buf = Vec::new();
        write_dense(&mut buf, &m).unwrap();
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), TensorFile::Dense(m));
        assert!(read_tensor(&mut &b"NOPE"[..]).is_err());
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-100.0f32..100.0, rows * cols)
            .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn scale_formula(m in matrix_strategy(8, 8), kind in 0usize..3) {
            let scheme = [QuantScheme::per_group_row(4), QuantScheme::per_block(4), QuantScheme::per_group_col(4)][kind];
            let q = quantize(&m, scheme).unwrap();
            let d = dequantize(&q);
            let (br, bc) = scheme.kind.block(4);
            let (gr, gc) = q.grid();
            for bi in 0..gr {
                for bj in 0..gc {
                    let mut orig_max = 0.0f32;
                    let mut deq_max = 0.0f32;
                    for r in bi * br..(bi + 1) * br {
                        for c in bj * bc..(bj + 1) * bc {
                            orig_max = orig_max.max(m.get(r, c).abs());
                            deq_max = deq_max.max(d.get(r, c).abs());
                        }
                    }
                    let s = q.grid_scale(bi, bj);
                    prop_assert!(s * 448.0 >= deq_max);
                    if orig_max > 0.0 {
                        prop_assert_eq!(s, orig_max / 448.0);
                    }
                }
            }
        }

        #[test]
        fn relative_error_bound(m in matrix_strategy(8, 8)) {
            let q = quantize(&m, QuantScheme::per_group_row(4)).unwrap();
            let d = dequantize(&q);
            for r in 0..8 {
                for c in 0..8 {
                    let x = m.get(r, c);
                    if (x / q.scale_of(r, c)).abs() >= E4M3_MIN_NORMAL {
                        prop_assert!((d.get(r, c) - x).abs() <= x.abs() / 16.0);
                    }
                }
            }
        }

        #[test]
        fn requantize_transpose_error_bound(m in matrix_strategy(8, 8)) {
            let q = quantize(&m, QuantScheme::per_group_row(4)).unwrap();
            let base = dequantize(&q);
            let t = requantize_transpose(&q).unwrap();
            let d = dequantize(&t);
            for r in 0..8 {
                for c in 0..8 {
                    let x = base.get(r, c);
                    if (x / t.scale_of(r, c)).abs() >= E4M3_MIN_NORMAL {
                        prop_assert!((d.get(r, c) - x).abs() <= x.abs() / 16.0);
                    }
                }
            }
        }

        #[test]
        fn transpose_weight_is_lossless_involution(m in matrix_strategy(8, 8)) {
            let q = quantize(&m, QuantScheme::per_block(4)).unwrap();
            let t = transpose_weight(&q).unwrap();
            let dt = dequantize(&t);
            let dq = dequantize(&q);
            // Storage buffer of the transposed copy is the transposed buffer.
            let dqt = dq.transpose();
            prop_assert_eq!(dt.data(), dqt.data());
            prop_assert!(dt.bitwise_eq(&dq));
            prop_assert_eq!(transpose_weight(&t).unwrap(), q);
        }

        #[test]
        fn scale_covariance(m in matrix_strategy(8, 8), p in 0i32..=6) {
            let c = 2f32.powi(p);
            let q = quantize(&m, QuantScheme::per_block(4)).unwrap();
            let qc = quantize(&m.map(|x| x * c), QuantScheme::per_block(4)).unwrap();
            prop_assert_eq!(q.codes(), qc.codes());
            for (a, b) in q.scales().iter().zip(qc.scales()) {
                prop_assert_eq!(a * c, *b);
            }
        }
    }
}
