//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_qlip, save_qlip};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalOptions};
use crate::imageio::{read_image, write_image};
use crate::objectives::{probe_gradients, Batch};
use crate::plot::line_chart;
use crate::syndata::{gen_pair_corpus_split, gen_text_corpus, load_text_stream, save_text_stream, sentences, Corpus, Split};
use crate::tokcodec::{decode_tokens_to_image, encode_image_to_tokens, load_qltk, save_qltk, TokenGrid};
use crate::trainer::{run_stage1, run_stage2, MetricsLog, Stage, TrainConfig};
use crate::um3::{
    extend_vocab, generate, pretrain_lm, t2i_prompt, train_um3, visual_spans, EvalSets, GenConfig, Lm, LmConfig,
    Specials, Um3Config, Um3Sources, VocabLayout,
};

/// Environment variable that relocates relative `--out` paths.
pub const OUT_DIR_ENV: &str = "QLIP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "qlip", version, about = "Text-aligned binary-spherical visual tokenizer and multimodal toy model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image-caption corpus (and optionally a text corpus).
    GenData(GenDataArgs),
    /// Stage one: joint alignment and reconstruction training.
    TrainQlip(TrainArgs),
    /// Stage two: frozen encoder, fine-tune bottleneck and decoder.
    FinetuneStage2(Stage2Args),
    /// Pretrain a text model, extend its vocabulary and train on mixed sequences.
    TrainUm3(Um3Args),
    /// Image file to a `.qltk` token grid.
    Tokenize(CodecArgs),
    /// `.qltk` token grid to an image file.
    Detokenize(CodecArgs),
    /// Zero-shot, linear-probe and reconstruction metrics.
    Eval(EvalArgs),
    /// Sample an image (or text) from a trained multimodal model.
    Generate(GenerateArgs),
    /// Per-loss gradient norms at the encoder probe layer.
    ProbeGrads(ProbeArgs),
    /// Render a metrics log to SVG charts.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, value_parser = ["train", "val"], default_value = "train")]
    pub split: String,
    /// Also write `text.u32` with at least this many tokens.
    #[arg(long, default_value_t = 0)]
    pub text_tokens: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults the config file builds on.
    #[arg(long, value_parser = ["toy", "paper"], default_value = "toy")]
    pub preset: String,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct Um3Args {
    /// Tokenizer checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image-caption corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Text token stream (`text.u32`).
    #[arg(long)]
    pub text: PathBuf,
    /// Skip pretraining and start from this text model.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus the linear probes are fit on.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub heldout: PathBuf,
    /// Results table to append a row to.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub run: String,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Multimodal model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Tokenizer checkpoint used to decode visual tokens.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    /// Image output (`.ppm` or raw `.bin`); the token grid is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub step: usize,
    /// Metrics log to append the norms to.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated metric names; default is every name in the log.
    #[arg(long)]
    pub names: Option<String>,
    #[arg(long)]
    pub log_y: bool,
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub output: String,
    pub started: String,
    pub finished: String,
}

pub fn version_string() -> String {
    let base = format!("v{}", env!("CARGO_PKG_VERSION"));
    let out = std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty"])
        .output();
    match out {
        Ok(o) if o.status.success() => format!("{base}-g{}", String::from_utf8_lossy(&o.stdout).trim()),
        _ => base,
    }
}

/// Apply the output-directory override to relative paths.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// `path` if unused, else the first free `stem.N.ext` (files) or `name.N` (directories).
pub fn fresh_path(path: &Path) -> PathBuf {
    let taken = |p: &Path| match std::fs::read_dir(p) {
        Ok(mut it) => it.next().is_some(),
        Err(_) => p.exists(),
    };
    if !taken(path) {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string();
    let ext = path.extension().and_then(|s| s.to_str()).map(str::to_string);
    for i in 1.. {
        let name = match &ext {
            Some(e) if !path.is_dir() => format!("{stem}.{i}.{e}"),
            _ => format!("{}.{i}", path.file_name().and_then(|s| s.to_str()).unwrap_or("out")),
        };
        let cand = path.with_file_name(name);
        if !taken(&cand) {
            return cand;
        }
    }
    unreachable!()
}

static STARTED: std::sync::OnceLock<String> = std::sync::OnceLock::new();

struct Run {
    manifest: RunManifest,
    manifest_path: PathBuf,
}

impl Run {
    fn start(command: &str, argv: &[String], out: &Path, dir_output: bool, config: Option<&Path>, seed: Option<u64>) -> Result<(Self, PathBuf)> {
        let out = fresh_path(&resolve_out(out));
        let manifest_path = if dir_output {
            std::fs::create_dir_all(&out)?;
            out.join("manifest.json")
        } else {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            fresh_path(&PathBuf::from(format!("{}.manifest.json", out.display())))
        };
        let manifest = RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config_path: config.map(|p| p.display().to_string()),
            seed,
            version: version_string(),
            output: out.display().to_string(),
            started: STARTED.get().cloned().unwrap_or_else(|| Utc::now().to_rfc3339()),
            finished: String::new(),
        };
        Ok((Run { manifest, manifest_path }, out))
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.finished = Utc::now().to_rfc3339();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        crate::tokcodec::write_file_atomic(&self.manifest_path, text.as_bytes())
    }
}

fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn layered_kv(file: Option<&Path>, overrides: &[String]) -> Result<KvConfig> {
    let mut kv = match file {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for (k, v) in parse_overrides(overrides)? {
        kv.set(&k, v);
    }
    Ok(kv)
}

fn train_config(args: &ConfigArgs, stage: Stage) -> Result<TrainConfig> {
    let mut kv = layered_kv(args.config.as_deref(), &args.overrides)?;
    if kv.get("preset").is_none() {
        kv.set("preset", &args.preset);
    }
    let stage_num = if stage == Stage::One { "1" } else { "2" };
    match kv.get("stage") {
        None => kv.set("stage", stage_num),
        Some(s) if s == stage_num => {}
        Some(s) => return Err(Error::Config(format!("config is for stage {s}, command runs stage {stage_num}"))),
    }
    let mut cfg = TrainConfig::from_kv(kv)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::tokcodec::write_file_atomic(path, text.as_bytes())
}

fn gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let (run, out) = Run::start("gen-data", argv, &a.out, true, None, Some(a.seed))?;
    let split = if a.split == "val" { Split::Val } else { Split::Train };
    let corpus = gen_pair_corpus_split(a.n, a.image_size, a.seed, split)?;
    corpus.save(&out)?;
    if a.text_tokens > 0 {
        save_text_stream(&out.join("text.u32"), &gen_text_corpus(a.text_tokens, a.seed)?)?;
    }
    println!("wrote {} pairs to {}", corpus.len(), out.display());
    run.finish()
}

fn train_qlip(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let cfg = train_config(&a.cfg, Stage::One)?;
    let corpus = Corpus::load(&a.data)?;
    let (run, out) = Run::start("train-qlip", argv, &a.out, true, a.cfg.config.as_deref(), Some(cfg.seed))?;
    write_text(&out.join("config.txt"), &cfg.to_kv().render())?;
    let (model, log) = run_stage1(&cfg, &corpus)?;
    save_qlip(&out.join("model.ckpt"), &model)?;
    log.append_to(&out.join("metrics.tsv"))?;
    println!("stage one done: mse {:.5} align {:.4}", log.last("mse").unwrap_or(f64::NAN), log.last("align").unwrap_or(f64::NAN));
    println!("checkpoint {}", out.join("model.ckpt").display());
    run.finish()
}

fn finetune_stage2(a: &Stage2Args, argv: &[String]) -> Result<()> {
    let stage1 = load_qlip(&a.ckpt)?;
    let mut cfg = train_config(&a.cfg, Stage::Two)?;
    cfg.model = stage1.cfg.clone();
    let corpus = Corpus::load(&a.data)?;
    let (run, out) = Run::start("finetune-stage2", argv, &a.out, true, a.cfg.config.as_deref(), Some(cfg.seed))?;
    write_text(&out.join("config.txt"), &cfg.to_kv().render())?;
    let (model, log) = run_stage2(&cfg, &stage1, &corpus, &[])?;
    save_qlip(&out.join("model.ckpt"), &model)?;
    log.append_to(&out.join("metrics.tsv"))?;
    println!("stage two done: mse {:.5}", log.last("mse").unwrap_or(f64::NAN));
    run.finish()
}

/// `lm.*` architecture, `pretrain.*` base-model training, everything else mixed training.
fn um3_configs(kv: KvConfig, vocab: usize) -> Result<(LmConfig, Um3Config, Um3Config)> {
    let mut kv = kv;
    let mut lm = LmConfig::small(vocab);
    let mut lk = kv.take_prefixed("lm");
    for (key, slot) in [("dim", &mut lm.dim), ("layers", &mut lm.layers), ("heads", &mut lm.heads), ("max_len", &mut lm.max_len)] {
        if let Some(v) = lk.take(key) {
            *slot = crate::config::parse_num(&format!("lm.{key}"), &v)?;
        }
    }
    lk.finish()?;
    lm.validate()?;
    let mut pre = Um3Config::toy_pretrain();
    for (k, v) in kv.take_prefixed("pretrain").iter() {
        pre.apply_kv(k, v)?;
    }
    let mut mixed = Um3Config::toy();
    for (k, v) in kv.iter() {
        mixed.apply_kv(k, v)?;
    }
    pre.validate()?;
    mixed.validate()?;
    Ok((lm, pre, mixed))
}

fn train_um3_cmd(a: &Um3Args, argv: &[String]) -> Result<()> {
    let tokenizer = load_qlip(&a.ckpt)?;
    let corpus = Corpus::load(&a.data)?;
    let stream = load_text_stream(&a.text)?;
    let kv = layered_kv(a.config.as_deref(), &a.overrides)?;
    let (lm_cfg, mut pre_cfg, mut cfg) = um3_configs(kv, corpus.vocab.len())?;
    if let Some(s) = a.seed {
        pre_cfg.seed = s;
        cfg.seed = s;
    }
    let (run, out) = Run::start("train-um3", argv, &a.out, true, a.config.as_deref(), Some(cfg.seed))?;
    let mut all = sentences(&corpus.vocab, &stream);
    let heldout = all.split_off(all.len() - (all.len() / 20).max(1));
    let sp = Specials::from_vocab(&corpus.vocab);
    let base = match &a.base {
        Some(p) => Lm::load(p)?.0,
        None => {
            let (base, log) = pretrain_lm(lm_cfg, &pre_cfg, &all, &sp, &heldout)?;
            log.append_to(&out.join("pretrain_metrics.tsv"))?;
            base.save(&out.join("base.ckpt"), None)?;
            base
        }
    };
    let sources = Um3Sources::build(&tokenizer, &corpus, &stream)?;
    let sources = Um3Sources { text: all, ..sources };
    let eval = EvalSets::build(&sources, &heldout, 64, cfg.seed)?;
    let model = extend_vocab(&base, &sources.layout)?;
    let (model, log) = train_um3(&cfg, model, &sources, &eval)?;
    model.save(&out.join("um3.ckpt"), Some(&sources.layout))?;
    log.append_to(&out.join("metrics.tsv"))?;
    println!(
        "text nll {:.4} -> {:.4}, t2i nll {:.4} -> {:.4}",
        log.series("eval_text_nll").first().map_or(f64::NAN, |x| x.1),
        log.last("eval_text_nll").unwrap_or(f64::NAN),
        log.series("eval_t2i_nll").first().map_or(f64::NAN, |x| x.1),
        log.last("eval_t2i_nll").unwrap_or(f64::NAN),
    );
    run.finish()
}

fn tokenize_cmd(a: &CodecArgs, argv: &[String]) -> Result<()> {
    let model = load_qlip(&a.ckpt)?;
    let img = read_image(&a.input)?;
    let grid = encode_image_to_tokens(&model, &img)?;
    let (run, out) = Run::start("tokenize", argv, &a.out, false, None, None)?;
    save_qltk(&out, &grid)?;
    println!("{}x{} tokens, {} bits -> {}", grid.height, grid.width, grid.total_bits(), out.display());
    run.finish()
}

fn detokenize_cmd(a: &CodecArgs, argv: &[String]) -> Result<()> {
    let model = load_qlip(&a.ckpt)?;
    let grid = load_qltk(&a.input)?;
    let img = decode_tokens_to_image(&model, &grid)?;
    let (run, out) = Run::start("detokenize", argv, &a.out, false, None, None)?;
    write_image(&out, &img)?;
    println!("{}x{} image -> {}", img.height, img.width, out.display());
    run.finish()
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = load_qlip(&a.ckpt)?;
    let train = Corpus::load(&a.train)?;
    let heldout = Corpus::load(&a.heldout)?;
    let report = evaluate(&model, &train, &heldout, &EvalOptions::default())?;
    print!("{}", report.to_record());
    if let Some(p) = &a.results {
        report.append_row(&resolve_out(p), &a.run)?;
    }
    Ok(())
}

fn generate_cmd(a: &GenerateArgs, argv: &[String]) -> Result<()> {
    let (lm, layout) = Lm::load(&a.model)?;
    let layout = layout.ok_or_else(|| Error::Config("model has no visual vocabulary".into()))?;
    let tokenizer = load_qlip(&a.ckpt)?;
    let vocab = crate::syndata::Vocab::standard();
    if layout != VocabLayout::for_codes(vocab.len(), tokenizer.cfg.code_bits)? {
        return Err(Error::Config("tokenizer and multimodal model disagree on the vocabulary".into()));
    }
    let sp = Specials::from_vocab(&vocab);
    let n = tokenizer.cfg.tokens_per_image();
    let cfg = GenConfig { temperature: a.temperature, top_p: a.top_p, seed: a.seed, stop_after_image: true, max_tokens: lm.cfg.max_len };
    let seq = generate(&lm, &layout, &sp, n, &t2i_prompt(&sp, &vocab.encode(&a.prompt)?), &cfg)?;
    let spans = visual_spans(&seq, &layout, &sp, n)?;
    let codes = spans.first().ok_or_else(|| Error::invalid("generation produced no image span"))?;
    let side = tokenizer.cfg.grid_side();
    let grid = TokenGrid::new(side, side, tokenizer.cfg.code_bits as u8, codes.iter().map(|&c| c as u32).collect())?;
    let img = decode_tokens_to_image(&tokenizer, &grid)?;
    let (run, out) = Run::start("generate", argv, &a.out, false, None, Some(a.seed))?;
    write_image(&out, &img)?;
    save_qltk(&fresh_path(&out.with_extension("qltk")), &grid)?;
    println!("{} -> {}", vocab.decode(&seq[..seq.len() - n - 1]), out.display());
    run.finish()
}

fn probe_cmd(a: &ProbeArgs) -> Result<()> {
    let model = load_qlip(&a.ckpt)?;
    let mut cfg = train_config(&a.cfg, Stage::One)?;
    cfg.model = model.cfg.clone();
    let corpus = Corpus::load(&a.data)?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::invalid(format!("corpus has {} pairs, batch needs {}", corpus.len(), cfg.batch_size)));
    }
    let pairs: Vec<_> = corpus.pairs.iter().take(cfg.batch_size).collect();
    let batch = Batch::from_pairs(&model, &pairs)?;
    let w = cfg.weights.stage1;
    let losses = [("mse", w.recon), ("bsq", w.quant), ("align", w.align), ("commit", w.commit)];
    let report = probe_gradients(&model, &batch, &cfg.quant, &losses, a.step)?;
    println!("probe\t{}", report.param);
    println!("loss\tweight\tgrad_norm");
    let mut log = MetricsLog::default();
    for ((name, norm), (_, weight)) in report.norms.iter().zip(losses) {
        println!("{name}\t{weight}\t{norm:.6e}");
        log.push(a.step, &format!("probe_{name}"), *norm);
    }
    if let Some(p) = &a.log {
        log.append_to(&resolve_out(p))?;
    }
    Ok(())
}

fn plot_cmd(a: &PlotArgs, argv: &[String]) -> Result<()> {
    let log = MetricsLog::load(&a.metrics)?;
    let names: Vec<String> = match &a.names {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        None => log.names(),
    };
    if let Some(missing) = names.iter().find(|n| log.series(n).is_empty()) {
        return Err(Error::invalid(format!("metric `{missing}` not in {}", a.metrics.display())));
    }
    let (run, out) = Run::start("plot", argv, &a.out, true, None, None)?;
    for n in &names {
        let svg = line_chart(n, &[(n.clone(), log.series(n))], a.log_y);
        write_text(&out.join(format!("{}.svg", n.replace(['/', ' '], "_"))), &svg)?;
    }
    println!("{} charts -> {}", names.len(), out.display());
    run.finish()
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, argv),
        Command::TrainQlip(a) => train_qlip(a, argv),
        Command::FinetuneStage2(a) => finetune_stage2(a, argv),
        Command::TrainUm3(a) => train_um3_cmd(a, argv),
        Command::Tokenize(a) => tokenize_cmd(a, argv),
        Command::Detokenize(a) => detokenize_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a),
        Command::Generate(a) => generate_cmd(a, argv),
        Command::ProbeGrads(a) => probe_cmd(a),
        Command::Plot(a) => plot_cmd(a, argv),
    }
}

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let _ = STARTED.set(Utc::now().to_rfc3339());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli, argv) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
