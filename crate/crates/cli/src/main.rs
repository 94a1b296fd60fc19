//! Command-line driver: run prefill experiments over context lengths,
//! reproduce the cache and matrix-unit ablations, replay block traces
//! through the cache simulator, and run the self-verification suites.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fastprefill_core::config::{import_weights, RunConfig};
use fastprefill_core::kv_cache::replay_liveness;
use fastprefill_core::perf::{reports_to_csv, PerfReport};
use fastprefill_core::pipeline::{
    synth_embeddings, synth_model, AttentionMode, ModelWeights, Simulator,
};
use fastprefill_core::trace::{read_block_trace, write_jsonl, IndexSetRecord};
use fastprefill_core::verify::run_all;

#[derive(Parser)]
#[command(name = "fastprefill", about = "Block-sparse W8A8 prefill simulator and performance model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output path for the report.
    #[arg(long)]
    out: PathBuf,
    /// Report format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Override the model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured context lengths (comma separated).
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate prefill over the configured context lengths and report TTFT.
    Run(CommonArgs),
    /// Same workload with the cache enabled and disabled, side by side.
    AblateCache(CommonArgs),
    /// Same workload with the full hybrid unit and with DSP arrays only.
    AblateMpu(CommonArgs),
    /// Replay a JSON-lines block trace through the liveness cache.
    TraceCache {
        /// Trace file (one {kv_head, block, consumers} object per line).
        #[arg(long)]
        trace: PathBuf,
        /// Run configuration supplying the cache geometry.
        #[arg(long)]
        config: PathBuf,
        /// Output path for the cache statistics (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle-equivalence and exhaustive arithmetic suites.
    Verify,
}

fn main() {
    if let Ok(threads) = std::env::var("FASTPREFILL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::AblateCache(args) => cmd_ablate(args, Ablation::Cache),
        Command::AblateMpu(args) => cmd_ablate(args, Ablation::Mpu),
        Command::TraceCache { trace, config, out } => cmd_trace_cache(&trace, &config, &out),
        Command::Verify => cmd_verify(),
    }
}

fn load(args: &CommonArgs) -> Result<(RunConfig, ModelWeights)> {
    let mut cfg = RunConfig::from_path(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    if let Some(lengths) = &args.lengths {
        cfg.run.lengths = lengths.clone();
        cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    let weights = match &cfg.run.weights_manifest {
        Some(rel) => {
            let base = args.config.parent().unwrap_or(Path::new("."));
            import_weights(&base.join(rel), &cfg.model)?
        }
        None => synth_model(&cfg.model, cfg.model.seed),
    };
    Ok((cfg, weights))
}

fn simulate_lengths(cfg: &RunConfig, weights: &ModelWeights) -> Result<(Vec<PerfReport>, Vec<IndexSetRecord>)> {
    let platform = cfg.platform();
    let sim = Simulator {
        model: &cfg.model,
        sparsity: &cfg.sparsity,
        platform: &platform,
        weights,
        t_hot_override: cfg.cache.t_hot,
    };
    let mut reports = Vec::new();
    let mut index_records = Vec::new();
    for &len in &cfg.run.lengths {
        let emb = synth_embeddings(&cfg.model, len, cfg.model.seed);
        let out = sim
            .run_prefill(&emb, AttentionMode::Sparse)
            .with_context(|| format!("prefill at length {len}"))?;
        reports.push(out.report);
        index_records.extend(out.index_records);
    }
    Ok((reports, index_records))
}

fn write_reports(out: &Path, format: Format, reports: &[PerfReport]) -> Result<()> {
    let text = match format {
        Format::Json => serde_json::to_string_pretty(reports)?,
        Format::Csv => reports_to_csv(reports),
    };
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_run(args: CommonArgs) -> Result<()> {
    let (cfg, weights) = load(&args)?;
    let (reports, index_records) = simulate_lengths(&cfg, &weights)?;
    write_reports(&args.out, args.format, &reports)?;
    // index sets ride along for debugging and cache experiments
    let trace_path = args.out.with_extension("indices.jsonl");
    write_jsonl(&trace_path, &index_records)?;
    for r in &reports {
        println!(
            "seq_len {:>8}  ttft {:>12.6}s  hit_rate {:.3}  first_token {}",
            r.seq_len, r.ttft_seconds, r.cache.hit_rate, r.first_token
        );
    }
    Ok(())
}

enum Ablation {
    Cache,
    Mpu,
}

fn cmd_ablate(args: CommonArgs, what: Ablation) -> Result<()> {
    let (cfg, weights) = load(&args)?;
    let mut variant = cfg.clone();
    let (base_name, variant_name) = match what {
        Ablation::Cache => {
            variant.cache.enabled = false;
            ("cache_on", "cache_off")
        }
        Ablation::Mpu => {
            variant.platform.mpu.lut_arrays = 0;
            ("hybrid_mpu", "dsp_only")
        }
    };
    let (base_reports, _) = simulate_lengths(&cfg, &weights)?;
    let (variant_reports, _) = simulate_lengths(&variant, &weights)?;

    let mut pairs = Vec::new();
    for (b, v) in base_reports.iter().zip(&variant_reports) {
        if b.output_digest != v.output_digest {
            bail!(
                "functional outputs diverged between {base_name} and {variant_name} at length {}",
                b.seq_len
            );
        }
        let ratio = v.ttft_seconds / b.ttft_seconds;
        println!(
            "seq_len {:>8}  {base_name} {:>12.6}s  {variant_name} {:>12.6}s  ratio {:.3}",
            b.seq_len, b.ttft_seconds, v.ttft_seconds, ratio
        );
        pairs.push(serde_json::json!({
            "seq_len": b.seq_len,
            base_name: b,
            variant_name: v,
            "ttft_ratio": ratio,
        }));
    }
    match args.format {
        Format::Json => fs::write(&args.out, serde_json::to_string_pretty(&pairs)?)?,
        Format::Csv => {
            let mut all = base_reports.clone();
            all.extend(variant_reports.iter().cloned());
            fs::write(&args.out, reports_to_csv(&all))?;
        }
    }
    Ok(())
}

fn cmd_trace_cache(trace: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let records = read_block_trace(trace)?;
    let mut cache_cfg = cfg.platform().cache;
    if let Some(t_hot) = cfg.cache.t_hot {
        cache_cfg.t_hot = t_hot;
    }
    let stats = replay_liveness(cache_cfg, &records);
    fs::write(out, serde_json::to_string_pretty(&stats)?)?;
    println!(
        "{} records: hit_rate {:.4}, bytes_fetched {}, evictions {}",
        records.len(),
        stats.hit_rate,
        stats.bytes_fetched,
        stats.evictions
    );
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let results = run_all();
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<32} {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} verification suite(s) failed");
    }
    Ok(())
}
