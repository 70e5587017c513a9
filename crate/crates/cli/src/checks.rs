use std::fmt::Write as _;

use fp8flow::blocktensor::{quantize_with, Layout, Matrix, Padding, QuantScheme, QuantizedMatrix, SchemeKind};
use fp8flow::flowgraph::{build_graphs, ConsistencyReport, GraphSet, PrecisionMode};
use fp8flow::fp8num::{decode_e4m3, Fp8Code};
use fp8flow::qgemm::{gemm, gemm_oracle, max_norm_rel_err, GemmError, GemmKind};
use fp8flow::tinylm::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// All 256 E4M3 codes with their fields and decoded values.
pub fn codec_table() -> String {
    let mut out = String::from("code,hex,sign,exponent,mantissa,value,class\n");
    for b in 0..=255u8 {
        let v = decode_e4m3(Fp8Code(b));
        let (e, m) = ((b >> 3) & 0xF, b & 0x7);
        let class = if Fp8Code(b).is_nan() {
            "nan"
        } else if e == 0 && m == 0 {
            "zero"
        } else if e == 0 {
            "subnormal"
        } else {
            "normal"
        };
        let value = if v.is_nan() { "NaN".to_string() } else { format!("{v:?}") };
        let _ = writeln!(out, "{b},0x{b:02X},{},{e},{m},{value},{class}", b >> 7);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GemmKindReport {
    pub kind: GemmKind,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayoutReport {
    pub kind: GemmKind,
    pub operand: usize,
    pub wrong_combinations: usize,
    pub rejected: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GemmCheck {
    pub oracle: Vec<GemmKindReport>,
    pub layout: Vec<LayoutReport>,
}

impl GemmCheck {
    pub fn pass(&self) -> bool {
        self.oracle.iter().all(|r| r.pass) && self.layout.iter().all(|r| r.pass)
    }
}

const GEMM_TOL: f64 = 1e-5;
const GROUPS: [usize; 3] = [4, 8, 16];
const SCHEMES: [SchemeKind; 3] = [SchemeKind::PerGroupRow, SchemeKind::PerBlock, SchemeKind::PerGroupCol];
const LAYOUTS: [Layout; 2] = [Layout::Row, Layout::Col];

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mag = 2f32.powi(rng.gen_range(-6..6));
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0) * mag)
}

fn quant(m: &Matrix, kind: SchemeKind, layout: Layout, g: usize) -> QuantizedMatrix {
    quantize_with(&m.to_layout(layout), QuantScheme::new(kind, g).expect("power-of-two group"), Padding::Zero)
        .expect("finite input")
}

/// Logical operand shapes `(a, b)` for output `m×n` and reduction `k`.
fn operand_shapes(kind: GemmKind, m: usize, n: usize, k: usize) -> [(usize, usize); 2] {
    match kind {
        GemmKind::FProp => [(m, k), (n, k)],
        GemmKind::DGrad => [(m, k), (k, n)],
        GemmKind::WGrad => [(k, m), (k, n)],
    }
}

fn operands(
    kind: GemmKind,
    shapes: [(usize, usize); 2],
    g: usize,
    override_: Option<(usize, SchemeKind, Layout)>,
    rng: &mut ChaCha8Rng,
) -> [QuantizedMatrix; 2] {
    let contract = kind.contract();
    let make = |i: usize, rng: &mut ChaCha8Rng| {
        let (s, l) = match override_ {
            Some((j, s, l)) if j == i => (s, l),
            _ => contract[i],
        };
        quant(&random_matrix(shapes[i].0, shapes[i].1, rng), s, l, g)
    };
    let a = make(0, rng);
    let b = make(1, rng);
    [a, b]
}

/// Blocked kernels against the float64 oracle on `instances` random
/// problems per kind, then the layout contract on every wrong
/// (scheme, layout) combination of each operand.
pub fn gemm_check(seed: u64, instances: usize) -> GemmCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut oracle = Vec::new();
    for kind in [GemmKind::FProp, GemmKind::DGrad, GemmKind::WGrad] {
        let mut worst = 0.0f64;
        let mut ok = true;
        for _ in 0..instances {
            let (m, n, k) = (rng.gen_range(1..=64), rng.gen_range(1..=64), rng.gen_range(1..=64));
            let g = GROUPS[rng.gen_range(0..GROUPS.len())];
            let [a, b] = operands(kind, operand_shapes(kind, m, n, k), g, None, &mut rng);
            match (gemm(kind, &a, &b), gemm_oracle(&a, &b, kind)) {
                (Ok(y), Ok(r)) => {
                    let e = max_norm_rel_err(&y, &r);
                    worst = worst.max(e);
                    ok &= e <= GEMM_TOL;
                }
                _ => ok = false,
            }
        }
        oracle.push(GemmKindReport { kind, instances, max_rel_err: worst, pass: ok });
    }
    let mut layout = Vec::new();
    for kind in [GemmKind::FProp, GemmKind::DGrad, GemmKind::WGrad] {
        let shapes = operand_shapes(kind, 16, 16, 16);
        for operand in 0..2 {
            let mut total = 0;
            let mut rejected = 0;
            for &s in &SCHEMES {
                for &l in &LAYOUTS {
                    if (s, l) == kind.contract()[operand] {
                        continue;
                    }
                    total += 1;
                    let [a, b] = operands(kind, shapes, 4, Some((operand, s, l)), &mut rng);
                    if let Err(e @ GemmError::Layout { .. }) = gemm(kind, &a, &b) {
                        if e.to_string().contains(kind.table_row()) {
                            rejected += 1;
                        }
                    }
                }
            }
            layout.push(LayoutReport { kind, operand, wrong_combinations: total, rejected, pass: rejected == total });
        }
    }
    GemmCheck { oracle, layout }
}

impl GemmCheck {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.oracle {
            let _ = writeln!(
                out,
                "oracle {:<5} instances={} max_rel_err={:.3e} tol={GEMM_TOL:e} {}",
                r.kind.to_string(),
                r.instances,
                r.max_rel_err,
                verdict(r.pass)
            );
        }
        for r in &self.layout {
            let _ = writeln!(
                out,
                "layout {:<5} operand={} rejected={}/{} {}",
                r.kind.to_string(),
                r.operand,
                r.rejected,
                r.wrong_combinations,
                verdict(r.pass)
            );
        }
        out
    }
}

pub fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

pub struct FlowCheck {
    pub graphs: GraphSet,
    pub report: ConsistencyReport,
    pub linear_count: usize,
}

pub fn flow_check(cfg: &ModelConfig) -> Result<FlowCheck, fp8flow::flowgraph::FlowError> {
    let graphs = build_graphs(cfg, cfg.mode)?;
    let report = graphs.check()?;
    Ok(FlowCheck { graphs, report, linear_count: cfg.linear_count() })
}

impl FlowCheck {
    pub fn render(&self, mode: PrecisionMode) -> String {
        let mut out = String::new();
        if self.report.consistent {
            let _ = writeln!(out, "consistent");
            let _ = writeln!(out, "mode={} linear_layers={} mismatched_edges=0", mode.short_name(), self.linear_count);
            return out;
        }
        let _ = writeln!(out, "inconsistent");
        let _ = writeln!(
            out,
            "mode={} linear_layers={} mismatched_edges={} missing_in_train={}",
            mode.short_name(),
            self.linear_count,
            self.report.mismatched_edges().len(),
            self.report.missing_in_train.len()
        );
        for m in &self.report.mismatches {
            let _ = writeln!(out, "mismatch {} {}: train={} infer={}", m.edge, m.attribute, m.expected, m.actual);
        }
        for e in &self.report.missing_in_train {
            let _ = writeln!(out, "missing {e}");
        }
        out
    }
}
