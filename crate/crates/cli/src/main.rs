//! `fp8flow`: codec, GEMM and flow-graph checks, drift probes, and GRPO
//! training runs.
//!
//! Exit status: 0 on success, 1 when a check fails, 2 on usage or config
//! errors. `FP8FLOW_THREADS` sets the worker thread count.

mod checks;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fp8flow::flowgraph::{export_dot, Phase, PrecisionMode};
use fp8flow::rlloop::{evaluate_checkpoint, run_experiment, RlConfig, RunOutput};
use fp8flow::tinylm::{measure_drift, ModelConfig, ModelState, Sampler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use checks::verdict;
use manifest::{file_name, manifest_for_file, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "fp8flow", version, about = "FP8 unified precision flow: checks, drift probes and GRPO runs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Precision mode: bf16, unified or mixed.
    #[arg(long, global = true)]
    mode: Option<PrecisionMode>,
    /// Output path: a file for codec-table and drift, a directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Quantization group size.
    #[arg(long, global = true)]
    g: Option<usize>,
    /// Leave timestamps out of the manifest.
    #[arg(long, global = true)]
    no_timestamps: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print all 256 E4M3 codes as CSV.
    CodecTable,
    /// Blocked GEMMs against the float64 oracle, plus the layout contract.
    GemmCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// Check that the inference graph is an attribute-matching subgraph of
    /// the training forward graph.
    FlowCheck {
        #[arg(long, default_value_t = 2)]
        layers: usize,
    },
    /// Generate on the inference path, re-score on the training path, and
    /// write per-position drift as CSV.
    Drift {
        /// Tokens to generate.
        #[arg(long, default_value_t = 256)]
        len: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        /// Sampling temperature; 0 decodes greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        /// Seed of the model weights, kept apart from `--seed` so several
        /// prompts can probe one model.
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
    },
    /// Run a GRPO experiment.
    Train {
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Print a progress line every N steps (0 disables).
        #[arg(long, default_value_t = 0)]
        log_every: usize,
    },
    /// Greedy accuracy of a saved checkpoint on the held-out batch.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Check,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(v) = std::env::var("FP8FLOW_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: FP8FLOW_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let result = match &cli.cmd {
        Cmd::CodecTable => codec_table(&cli.common),
        Cmd::GemmCheck { instances } => gemm_check(&cli.common, *instances),
        Cmd::FlowCheck { layers } => flow_check(&cli.common, *layers),
        Cmd::Drift { len, prompt_len, temperature, layers, d_model, model_seed } => {
            drift(&cli.common, *len, *prompt_len, *temperature, *layers, *d_model, *model_seed)
        }
        Cmd::Train { steps, log_every } => train(&cli.common, *steps, *log_every),
        Cmd::Eval { checkpoint } => eval(&cli.common, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn finish(mut m: RunManifest, path: Option<&Path>) -> Outcome {
    if let Some(p) = path {
        m.finish(p)?;
    }
    if m.all_pass() {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn write_file_output(common: &Common, m: &mut RunManifest, body: &str) -> Result<Option<PathBuf>, Failure> {
    match &common.out {
        None => {
            print!("{body}");
            Ok(None)
        }
        Some(p) => {
            fs::write(p, body)?;
            m.outputs.push(file_name(p));
            Ok(Some(manifest_for_file(p)))
        }
    }
}

fn codec_table(common: &Common) -> Outcome {
    let mut m = RunManifest::begin("codec-table", json!({}), common.seed.unwrap_or(0), None, !common.no_timestamps);
    let table = checks::codec_table();
    let path = write_file_output(common, &mut m, &table)?;
    finish(m, path.as_deref())
}

fn gemm_check(common: &Common, instances: usize) -> Outcome {
    let seed = common.seed.unwrap_or(0);
    let cfg = json!({ "instances": instances, "groups": [4, 8, 16], "max_dim": 64 });
    let mut m = RunManifest::begin("gemm-check", cfg, seed, None, !common.no_timestamps);
    let report = checks::gemm_check(seed, instances);
    print!("{}", report.render());
    for r in &report.oracle {
        m.check(&format!("oracle_{}", r.kind), r.pass, format!("max_rel_err={:e}", r.max_rel_err));
    }
    for r in &report.layout {
        m.check(
            &format!("layout_{}_operand{}", r.kind, r.operand),
            r.pass,
            format!("{}/{} rejected", r.rejected, r.wrong_combinations),
        );
    }
    println!("{}", verdict(report.pass()));
    let path = match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("gemm_check.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            m.outputs.push("gemm_check.json".into());
            Some(dir.join("manifest.json"))
        }
        None => None,
    };
    finish(m, path.as_deref())
}

fn base_model(common: &Common, layers: usize) -> ModelConfig {
    let mut cfg = ModelConfig { n_layers: layers, ..ModelConfig::default() };
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    if let Some(g) = common.g {
        cfg.g = g;
    }
    cfg
}

fn flow_check(common: &Common, layers: usize) -> Outcome {
    let cfg = base_model(common, layers);
    cfg.validate()?;
    let mut m = RunManifest::begin(
        "flow-check",
        serde_json::to_value(&cfg)?,
        common.seed.unwrap_or(0),
        Some(cfg.mode.short_name()),
        !common.no_timestamps,
    );
    let fc = checks::flow_check(&cfg)?;
    print!("{}", fc.render(cfg.mode));
    m.check(
        "subgraph_consistent",
        fc.report.consistent,
        format!("{} mismatched edges", fc.report.mismatched_edges().len()),
    );
    let path = match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let header = format!("// run_id={} manifest=manifest.json\n", m.run_id);
            for phase in [Phase::TrainFwd, Phase::TrainBwd, Phase::Infer] {
                let name = format!("{}.dot", phase.name());
                fs::write(dir.join(&name), header.clone() + &export_dot(fc.graphs.graph(phase)))?;
                m.outputs.push(name);
            }
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&fc.report)? + "\n")?;
            m.outputs.push("report.json".into());
            Some(dir.join("manifest.json"))
        }
        None => None,
    };
    finish(m, path.as_deref())
}

fn drift(
    common: &Common,
    len: usize,
    prompt_len: usize,
    temperature: f64,
    layers: usize,
    d_model: usize,
    model_seed: u64,
) -> Outcome {
    let seed = common.seed.unwrap_or(0);
    let mut cfg = base_model(common, layers);
    cfg.d_model = d_model;
    cfg.d_ff = 2 * d_model;
    cfg.seed = model_seed;
    cfg.max_seq = cfg.max_seq.max(prompt_len + len);
    if prompt_len == 0 {
        return Err(Failure::Usage("--prompt-len must be at least 1".into()));
    }
    let model = ModelState::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let sampler = if temperature > 0.0 { Sampler::new(seed, temperature) } else { Sampler::greedy() };
    let records = measure_drift(&model, &prompt, len, &sampler, 0)?;

    let conf = json!({ "model": cfg, "len": len, "prompt_len": prompt_len, "temperature": temperature });
    let mut m = RunManifest::begin("drift", conf, seed, Some(cfg.mode.short_name()), !common.no_timestamps);
    let mut csv = format!("# run_id={}\nposition,max_abs_logit_diff,kl\n", m.run_id);
    for r in &records {
        csv.push_str(&format!("{},{:e},{:e}\n", r.position, r.max_abs_logit_diff, r.kl_train_vs_rollout));
    }
    let max_diff = records.iter().map(|r| r.max_abs_logit_diff).fold(0.0, f64::max);
    let max_kl = records.iter().map(|r| r.kl_train_vs_rollout).fold(0.0, f64::max);
    let positive = records.iter().filter(|r| r.kl_train_vs_rollout > 0.0).count();
    let half = records.len() / 2;
    let mean = |rs: &[fp8flow::tinylm::DriftRecord]| {
        rs.iter().map(|r| r.kl_train_vs_rollout).sum::<f64>() / rs.len().max(1) as f64
    };
    let (early, late) = (mean(&records[..half]), mean(&records[half..]));
    eprintln!(
        "drift mode={} positions={} max_abs_logit_diff={max_diff:e} max_kl={max_kl:e} positive_kl={positive} \
         mean_kl_first_half={early:e} mean_kl_second_half={late:e}",
        cfg.mode.short_name(),
        records.len()
    );
    if cfg.mode != PrecisionMode::MixedBf16TrainFp8Rollout {
        m.check("bit_exact", max_diff == 0.0 && max_kl == 0.0, format!("max_abs_logit_diff={max_diff:e}"));
    }
    let path = write_file_output(common, &mut m, &csv)?;
    finish(m, path.as_deref())
}

fn load_config(common: &Common) -> Result<RlConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RlConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => RlConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    if let Some(g) = common.g {
        cfg.g = g;
    }
    Ok(cfg)
}

fn train(common: &Common, steps: Option<usize>, log_every: usize) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let mut m = RunManifest::begin(
        "train",
        json!({ "text": cfg.to_text(), "resolved": cfg }),
        cfg.seed,
        Some(cfg.mode.short_name()),
        !common.no_timestamps,
    );
    let out = common.out.as_ref().map(|dir| RunOutput {
        dir: dir.clone(),
        run_id: m.run_id.clone(),
        manifest: "manifest.json".into(),
    });
    let mut stderr = std::io::stderr();
    let result = run_experiment(&cfg, out.as_ref(), |s| {
        if log_every > 0 && (s.step + 1) % log_every == 0 {
            let _ = writeln!(
                stderr,
                "step {} reward={:.4} kl_ref={:.3e} gap={:.3e} clip={:.3} loss={:.4e}",
                s.step + 1,
                s.mean_reward,
                s.mean_kl_to_ref,
                s.max_logprob_gap,
                s.clip_fraction,
                s.loss
            );
        }
    })?;
    let gap = result.metrics.iter().map(|s| s.max_logprob_gap).fold(0.0, f64::max);
    println!("final_greedy_accuracy={}", result.final_accuracy);
    println!("max_logprob_gap={gap:e}");
    if cfg.mode != PrecisionMode::MixedBf16TrainFp8Rollout {
        m.check("on_policy", gap == 0.0, format!("max_logprob_gap={gap:e}"));
    }
    m.check("finished", true, format!("final_greedy_accuracy={}", result.final_accuracy));
    let path = common.out.as_ref().map(|dir| {
        m.outputs.extend(["metrics.jsonl", "summary.csv", "final.ckpt"].map(String::from));
        dir.join("manifest.json")
    });
    finish(m, path.as_deref())
}

fn eval(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let acc = evaluate_checkpoint(checkpoint, &cfg)?;
    println!("greedy_accuracy={acc}");
    Ok(())
}
