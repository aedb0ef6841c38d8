use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tfllm_core::geometry::{element_moves, fuse_regions, region_for_concat, region_for_slice, region_for_transpose, RegionChain};
use tfllm_core::kernels::{count_accesses, solve_tile_sizes, KvLayout, TileConfig};
use tfllm_core::quantize::{quantize_matrix, QuantBits};
use tfllm_core::runtime::weights::tensor_shapes;
use tfllm_core::runtime::{detokenize, gen_model, load_model, read_model_dir, tokenize, EngineOptions, ModelConfig};
use tfllm_core::Error;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "tfllm", version, about = "Quantized decoder inference on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a model directory with deterministic random weights
    GenModel {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize every linear weight and write the QTensor records
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4, value_parser = parse_bits)]
        bits: u32,
        #[arg(long, default_value_t = 32)]
        block: usize,
        /// defaults to <model>/weights_q<bits>.bin
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate text from a prompt
    Run {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        max_new: u64,
    },
    /// Prefill/decode throughput, access counts and the timing ledger
    Bench {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 256, 1024], value_parser = parse_prompt_len)]
        prompt_len: Vec<usize>,
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
        decode_len: u64,
        /// include the simulated latency curve
        #[arg(long)]
        timing: bool,
    },
    /// Pick tile sizes for a register budget, or print a preset
    SolveTiles {
        #[arg(long = "R", requires = "iw", conflicts_with = "arch")]
        registers: Option<usize>,
        #[arg(long)]
        iw: Option<usize>,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Print parameter counts, Region plans or the KV layout
    Inspect {
        #[arg(long, conflicts_with_all = ["preset", "config"])]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        params: bool,
        #[arg(long)]
        regions: bool,
        #[arg(long)]
        kv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, env = "TF_THREADS", default_value_t = 1)]
    threads: usize,
    /// preset name or solve:R,iw
    #[arg(long, default_value = "arm-i8sdot")]
    tiles: String,
    /// comma-separated relative worker speeds (one per thread)
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    /// KV tokens per layer kept in DRAM: a number or "inf"
    #[arg(long, default_value = "inf", value_parser = parse_limit)]
    kv_dram_limit: Limit,
    #[arg(long, value_enum, default_value = "on")]
    embed_flash: OnOff,
    #[arg(long, value_enum, default_value = "on")]
    prefetch: OnOff,
    #[arg(long, default_value_t = 4, value_parser = parse_bits)]
    bits: u32,
    #[arg(long)]
    lora: Vec<PathBuf>,
    /// where flash-resident data goes; a temporary directory by default
    #[arg(long)]
    flash_dir: Option<PathBuf>,
}

#[derive(Clone, Copy)]
struct Limit(Option<usize>);

fn parse_limit(s: &str) -> Result<Limit, String> {
    if s == "inf" {
        return Ok(Limit(None));
    }
    s.parse().map(|n| Limit(Some(n))).map_err(|_| format!("expected a token count or 'inf', got '{s}'"))
}

fn parse_bits(s: &str) -> Result<u32, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        _ => Err(format!("bits must be 4 or 8, got '{s}'")),
    }
}

fn parse_prompt_len(s: &str) -> Result<usize, String> {
    match s.parse() {
        Ok(n @ (64 | 256 | 1024)) => Ok(n),
        _ => Err(format!("prompt length must be one of 64, 256, 1024, got '{s}'")),
    }
}

enum Failure {
    Usage(String),
    Model(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.code() {
            "bad-model" | "bad-shape" | "bad-lora" | "bad-block" => Failure::Model(e),
            "bad-arg" | "bad-prompt" | "infeasible" => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

type CliResult<T> = Result<T, Failure>;

fn engine_options(a: &EngineArgs, flash: &Path) -> CliResult<EngineOptions> {
    let mut opts = EngineOptions::new(flash);
    opts.tiles = TileConfig::parse(&a.tiles)?;
    opts.threads = a.threads;
    opts.rates = a.rates.clone();
    opts.storage.kv_dram_limit_tokens = a.kv_dram_limit.0;
    opts.storage.prefetch = matches!(a.prefetch, OnOff::On);
    opts.embed_flash = matches!(a.embed_flash, OnOff::On);
    opts.layer_bits = QuantBits::from_bits(a.bits)?;
    opts.lora_paths = a.lora.clone();
    Ok(opts)
}

/// Flash directory from the flags, or a temporary one kept alive by the guard.
fn flash_dir(a: &EngineArgs) -> CliResult<(PathBuf, Option<tempfile::TempDir>)> {
    match &a.flash_dir {
        Some(p) => Ok((p.clone(), None)),
        None => {
            let t = tempfile::tempdir()?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

fn load_config(config: &Option<PathBuf>, preset: &Option<String>) -> CliResult<ModelConfig> {
    match (config, preset) {
        (Some(p), _) => ModelConfig::load(p).map_err(|e| Failure::Usage(e.to_string())),
        (None, Some(name)) => ModelConfig::preset(name).map_err(|e| Failure::Usage(e.to_string())),
        (None, None) => Err(Failure::Usage("give --config or --preset".into())),
    }
}

fn billions(n: u64) -> String {
    format!("{:.2}B", n as f64 / 1e9)
}

fn cmd_gen_model(config: &Option<PathBuf>, preset: &Option<String>, seed: u64, out: &Path) -> CliResult<()> {
    let cfg = load_config(config, preset)?;
    gen_model(&cfg, seed, out)?;
    println!("wrote {} (seed {seed}, {} parameters)", out.display(), cfg.param_counts().total);
    Ok(())
}

fn cmd_quantize(model: &Path, bits: u32, block: usize, out: &Option<PathBuf>) -> CliResult<()> {
    let (cfg, w) = read_model_dir(model)?;
    let qbits = QuantBits::from_bits(bits)?;
    let path = out.clone().unwrap_or_else(|| model.join(format!("weights_q{bits}.bin")));
    let mut f = BufWriter::new(File::create(&path)?);
    let (mut dense, mut packed) = (0usize, 0usize);
    for layer in &w.layers {
        for (values, &(o, i)) in layer.proj.iter().zip(&cfg.layer_linear_shapes()) {
            let q = quantize_matrix(values, o, i, qbits, block)?;
            q.write_to(&mut f)?;
            dense += 4 * values.len();
            packed += q.storage_bytes();
        }
    }
    let head = quantize_matrix(&w.lm_head, cfg.vocab_size, cfg.hidden_size, QuantBits::Int8, block)?;
    head.write_to(&mut f)?;
    dense += 4 * w.lm_head.len();
    packed += head.storage_bytes();
    f.flush()?;
    println!("wrote {}", path.display());
    println!("linear weights: {dense} bytes f32 -> {packed} bytes (int{bits} layers, int8 lm head, block {block})");
    Ok(())
}

fn cmd_run(a: &EngineArgs, prompt: &str, max_new: u64) -> CliResult<()> {
    let (flash, _guard) = flash_dir(a)?;
    let mut engine = load_model(&a.model, engine_options(a, &flash)?)?;
    let tokens = engine.generate(&tokenize(prompt.as_bytes()), max_new as usize)?;
    let text = detokenize(&tokens)?;
    let ids: Vec<String> = tokens.iter().map(u32::to_string).collect();
    println!("tokens: {}", ids.join(" "));
    println!("text: {}", String::from_utf8_lossy(&text).escape_debug());
    let s = engine.stats();
    let l = engine.store().ledger();
    println!("prefill: {} tokens", s.prefill_tokens);
    println!("decode: {} tokens", s.decode_tokens);
    println!(
        "ledger: compute={:.6e}s dram={:.6e}s flash={:.6e}s hidden={:.6e}s exposed={:.6e}s",
        l.compute,
        l.dram_traffic,
        l.flash_traffic,
        l.hidden_by_prefetch,
        l.exposed_flash()
    );
    println!("dram_resident_bytes: {}", engine.store().dram_resident_bytes());
    // wall-clock figures go to stderr so stdout stays reproducible
    let rate = |n: u64, t: f64| if t > 0.0 { n as f64 / t } else { 0.0 };
    eprintln!(
        "prefill {:.1} tok/s, decode {:.1} tok/s",
        rate(s.prefill_tokens, s.prefill_seconds),
        rate(s.decode_tokens, s.decode_seconds)
    );
    Ok(())
}

fn cmd_bench(a: &EngineArgs, prompt_lens: &[usize], decode_len: u64, timing: bool) -> CliResult<()> {
    let (flash, _guard) = flash_dir(a)?;
    let opts = engine_options(a, &flash)?;
    let mut engine = load_model(&a.model, opts.clone())?;
    engine.set_access_counting(true);
    let cfg = engine.config().clone();
    let mut runs = Vec::new();
    for &n in prompt_lens {
        if n + decode_len as usize > cfg.max_context {
            return Err(Failure::Usage(format!("prompt {n} + decode {decode_len} exceeds context {}", cfg.max_context)));
        }
        let prompt: Vec<u32> = (0..n).map(|i| ((i * 31 + 7) % 256) as u32).collect();
        let before = engine.stats();
        let ledger_before = engine.store().ledger();
        let mut logits = engine.prefill(&prompt)?;
        for _ in 0..decode_len {
            let next = tfllm_core::runtime::engine::argmax(&logits);
            logits = engine.decode_step(next.min(cfg.vocab_size as u32 - 1))?;
        }
        let s = engine.stats();
        let l = engine.store().ledger();
        let (pt, ps) = (s.prefill_tokens - before.prefill_tokens, s.prefill_seconds - before.prefill_seconds);
        let (dt, ds) = (s.decode_tokens - before.decode_tokens, s.decode_seconds - before.decode_seconds);
        let h = cfg.hidden_size;
        let predicted: u64 = cfg
            .layer_linear_shapes()
            .iter()
            .map(|&(o, i)| count_accesses(n, o, i, &opts.tiles).tiled)
            .sum::<u64>()
            * cfg.n_layers as u64;
        runs.push(json!({
            "prompt_len": n,
            "decode_len": decode_len,
            "prefill_tok_per_s": if ps > 0.0 { pt as f64 / ps } else { 0.0 },
            "decode_tok_per_s": if ds > 0.0 { dt as f64 / ds } else { 0.0 },
            "gemm_accesses": s.gemm_accesses - before.gemm_accesses,
            "prefill_layer_gemm_accesses_model": predicted,
            "naive_prefill_layer_gemm_accesses": cfg.layer_linear_shapes().iter()
                .map(|&(o, i)| count_accesses(n, o, i, &opts.tiles).naive).sum::<u64>() * cfg.n_layers as u64,
            "hidden_size": h,
            "ledger": {
                "compute": l.compute - ledger_before.compute,
                "dram_traffic": l.dram_traffic - ledger_before.dram_traffic,
                "flash_traffic": l.flash_traffic - ledger_before.flash_traffic,
                "hidden_by_prefetch": l.hidden_by_prefetch - ledger_before.hidden_by_prefetch,
            },
        }));
    }
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "model": cfg,
        "tiles": opts.tiles.to_string(),
        "threads": opts.threads,
        "kv_dram_limit": opts.storage.kv_dram_limit_tokens,
        "embed_flash": opts.embed_flash,
        "prefetch": opts.storage.prefetch,
        "runs": runs,
    });
    if timing {
        report["timing"] = serde_json::to_value(engine.timing_report()).expect("report serializes");
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_solve_tiles(r: Option<usize>, iw: Option<usize>, arch: &Option<String>) -> CliResult<()> {
    let t = match (r, iw, arch) {
        (_, _, Some(name)) => TileConfig::preset(name)?,
        (Some(r), Some(iw), None) => solve_tile_sizes(r, iw)?,
        _ => return Err(Failure::Usage("give --R and --iw, or --arch".into())),
    };
    println!("{t}");
    Ok(())
}

fn print_params(cfg: &ModelConfig) {
    let p = cfg.param_counts();
    println!("embedding: {} ({})", p.embedding, billions(p.embedding));
    println!("layers: {} ({}; {} per layer)", p.layers, billions(p.layers), p.per_layer);
    println!("lm_head: {} ({})", p.lm_head, billions(p.lm_head));
    println!("total: {} ({})", p.total, billions(p.total));
    println!("embedding_share: {:.2}%", 100.0 * p.embedding_share());
    println!("embedding_row_bytes_bf16: {}", 2 * cfg.hidden_size);
}

fn print_regions(cfg: &ModelConfig) -> CliResult<()> {
    let (h, d, s) = (cfg.n_heads, cfg.head_dim, 8usize);
    let split = region_for_transpose(&[s, h, d], &[1, 0, 2])?;
    let merge = region_for_transpose(&[h, s, d], &[1, 0, 2])?;
    let halves = region_for_concat(&[vec![s / 2, h * d], vec![s / 2, h * d]], 0)?;
    let tail = region_for_slice(&[s, h * d], &[s / 2, 0], &[s / 2, h * d])?;
    let chains = [
        ("head split then merge", RegionChain { producer: split.clone(), consumer: merge, intermediate_len: s * h * d }),
        ("slice of concat", RegionChain { producer: halves, consumer: tail, intermediate_len: s * h * d }),
    ];
    println!("attention head split [{s}, {h}, {d}] -> [{h}, {s}, {d}]: {} region(s)", split.len());
    for r in &split {
        println!("  {r:?}");
    }
    for (name, chain) in chains {
        let fused = fuse_regions(&chain);
        println!(
            "{name}: unfused {} regions / {} moves, fused {} regions / {} moves",
            chain.producer.len() + chain.consumer.len(),
            element_moves(&chain.producer) + element_moves(&chain.consumer),
            fused.region_count(),
            fused.element_moves()
        );
    }
    Ok(())
}

fn print_kv(cfg: &ModelConfig) {
    for bits in [QuantBits::Int8, QuantBits::Int4] {
        let l = KvLayout { kv_heads: cfg.n_kv_heads, head_dim: cfg.head_dim, key_bits: bits };
        println!(
            "keys int{}: per token per layer key {} bytes (codes {}), value {} bytes, record {} bytes, all layers {} bytes",
            bits.bits(),
            l.key_bytes(),
            l.kv_heads * l.key_code_bytes(),
            l.value_bytes(),
            l.record_bytes(),
            l.record_bytes() * cfg.n_layers
        );
    }
}

fn cmd_inspect(
    model: &Option<PathBuf>,
    preset: &Option<String>,
    config: &Option<PathBuf>,
    params: bool,
    regions: bool,
    kv: bool,
) -> CliResult<()> {
    let cfg = match model {
        Some(dir) => ModelConfig::load(&dir.join("config.json"))?,
        None => load_config(config, preset)?,
    };
    if !(params || regions || kv) {
        return Err(Failure::Usage("choose at least one of --params, --regions, --kv".into()));
    }
    if params {
        print_params(&cfg);
        if model.is_some() {
            println!("tensors in weights.bin: {}", tensor_shapes(&cfg).len());
        }
    }
    if regions {
        print_regions(&cfg)?;
    }
    if kv {
        print_kv(&cfg);
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenModel { config, preset, seed, out } => cmd_gen_model(config, preset, *seed, out),
        Command::Quantize { model, bits, block, out } => cmd_quantize(model, *bits, *block, out),
        Command::Run { engine, prompt, max_new } => cmd_run(engine, prompt, *max_new),
        Command::Bench { engine, prompt_len, decode_len, timing } => cmd_bench(engine, prompt_len, *decode_len, *timing),
        Command::SolveTiles { registers, iw, arch } => cmd_solve_tiles(*registers, *iw, arch),
        Command::Inspect { model, preset, config, params, regions, kv } => {
            cmd_inspect(model, preset, config, *params, *regions, *kv)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Model(e)) => {
            eprintln!("model error: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(4)
        }
    }
}
