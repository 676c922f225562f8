use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cachestream::context::{feasible_regular_latencies, regular_lookahead_for};
use cachestream::features::{log_mel, read_wav};
use cachestream::metrics::wer;
use cachestream::streaming::{
    run_buffered, run_offline, run_streaming, BufferedConfig, DecoderChoice, RunOutput,
    StreamingOptions, Transcript,
};
use cachestream::{
    AttentionContext, EncoderConfig, Error, LatencyModel, Model, ModelConfig, Result, Vocab,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cache-aware streaming speech recognition with a limited-context encoder.
#[derive(Parser)]
#[command(name = "cachestream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a model with deterministic random weights.
    InitModel(InitArgs),
    /// Transcribe a 16-bit mono WAV file and print the transcript JSON.
    Transcribe(TranscribeArgs),
    /// Run one file under several regimes and print a TSV report.
    Compare(CompareArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Model config JSON, either a full model config or just the encoder section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Manifest path; the weights blob is written next to it with a `.bin` extension.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary file, one token per line, first line `<blank>`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Number of encoder layers (N).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Downsampling rate (D_r).
    #[arg(long)]
    downsampling: Option<usize>,
    /// Depthwise convolution kernel (K).
    #[arg(long)]
    conv_kernel: Option<usize>,
    /// CTC weight in the hybrid loss.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    fastemit_lambda: Option<f64>,
    #[command(flatten)]
    context: ContextArgs,
}

#[derive(Args)]
struct TranscribeArgs {
    wav: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Streaming)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Decoder::Ctc)]
    decoder: Decoder,
    #[command(flatten)]
    context: ContextArgs,
    #[command(flatten)]
    buffered: BufferedArgs,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    wav: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Regimes to run: `offline`, `buffered[:CHUNK_S:BUFFER_S]`, `zero[:L]`,
    /// `regular:M[:L]` or `chunk:C[:LEFT_CHUNKS]`. Defaults to the model's
    /// regime, offline and buffered.
    #[arg(long, value_delimiter = ',')]
    regimes: Vec<String>,
    #[arg(long, value_enum, default_value_t = Decoder::Ctc)]
    decoder: Decoder,
    /// Reference transcript used for the WER column.
    #[arg(long)]
    reference: Option<String>,
    /// Write the TSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ContextArgs {
    #[arg(long, value_enum)]
    regime: Option<Regime>,
    /// Chunk size in tokens (C).
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Previous chunks visible to a chunk, or `inf`.
    #[arg(long, value_parser = parse_limit)]
    left_chunks: Option<Limit>,
    /// Per-layer look-ahead in tokens for the regular regime (M).
    #[arg(long)]
    lookahead: Option<usize>,
    /// Left context in tokens (L_c), or `inf`.
    #[arg(long, value_parser = parse_limit)]
    left_context: Option<Limit>,
    /// Chunk duration for the chunk regime, target look-ahead latency for the regular regime.
    #[arg(long)]
    chunk_ms: Option<u64>,
}

#[derive(Args)]
struct BufferedArgs {
    /// Buffered mode chunk length; 1 s for CTC and 2 s for RNNT by default.
    #[arg(long)]
    buffer_chunk_s: Option<f64>,
    /// Buffered mode window length including context; 4 s by default.
    #[arg(long)]
    buffer_s: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    Full,
    Zero,
    Regular,
    Chunk,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Offline,
    Streaming,
    Buffered,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoder {
    Ctc,
    Rnnt,
    Both,
}

impl From<Decoder> for DecoderChoice {
    fn from(d: Decoder) -> Self {
        match d {
            Decoder::Ctc => DecoderChoice::Ctc,
            Decoder::Rnnt => DecoderChoice::Rnnt,
            Decoder::Both => DecoderChoice::Both,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Limit(Option<usize>);

fn parse_limit(s: &str) -> std::result::Result<Limit, String> {
    if s == "inf" {
        return Ok(Limit(None));
    }
    s.parse()
        .map(|n| Limit(Some(n)))
        .map_err(|_| format!("`{s}` is neither a count nor `inf`"))
}

fn latency_model(cfg: &ModelConfig) -> Result<LatencyModel> {
    LatencyModel::new(
        cfg.features.frame_shift_ms,
        cfg.encoder.downsampling,
        cfg.encoder.n_layers,
    )
}

impl ContextArgs {
    fn is_empty(&self) -> bool {
        self.regime.is_none()
            && self.chunk_size.is_none()
            && self.left_chunks.is_none()
            && self.lookahead.is_none()
            && self.left_context.is_none()
            && self.chunk_ms.is_none()
    }

    /// Applies the flags on top of `base`; values not given keep the base regime's settings.
    ///
    /// `max_lookahead` bounds the regular look-ahead values cited when a latency is infeasible.
    fn resolve(
        &self,
        base: &AttentionContext,
        lm: &LatencyModel,
        max_lookahead: usize,
    ) -> Result<AttentionContext> {
        let regime = self.regime.unwrap_or(match base {
            AttentionContext::Full => Regime::Full,
            AttentionContext::Zero { .. } => Regime::Zero,
            AttentionContext::Regular { .. } => Regime::Regular,
            AttentionContext::Chunk { .. } => Regime::Chunk,
        });
        let base_left = match *base {
            AttentionContext::Zero { left } | AttentionContext::Regular { left, .. } => left,
            _ => None,
        };
        let left = self.left_context.map_or(base_left, |l| l.0);
        let ctx = match regime {
            Regime::Full => AttentionContext::Full,
            Regime::Zero => AttentionContext::Zero { left },
            Regime::Regular => {
                let lookahead = match (self.lookahead, self.chunk_ms) {
                    (Some(m), _) => m,
                    (None, Some(ms)) => regular_lookahead_for(lm, ms).ok_or_else(|| {
                        let options: Vec<String> =
                            feasible_regular_latencies(lm, max_lookahead).iter().map(u64::to_string).collect();
                        Error::Feasibility(format!(
                            "{ms} ms is not reachable with regular look-ahead; feasible values are {} ms",
                            options.join(", ")
                        ))
                    })?,
                    (None, None) => match *base {
                        AttentionContext::Regular { lookahead, .. } => lookahead,
                        _ => return Err(Error::Argument("the regular regime needs --lookahead or --chunk-ms".into())),
                    },
                };
                AttentionContext::Regular { lookahead, left }
            }
            Regime::Chunk => {
                let (base_size, base_left_chunks) = match *base {
                    AttentionContext::Chunk { size, left_chunks } => (Some(size), left_chunks),
                    _ => (None, None),
                };
                let size = match (self.chunk_size, self.chunk_ms) {
                    (Some(c), _) => c,
                    (None, Some(ms)) => {
                        let tok = lm.token_ms();
                        if ms == 0 || ms % tok != 0 {
                            return Err(Error::Feasibility(format!(
                                "a {ms} ms chunk is not a whole number of {tok} ms tokens"
                            )));
                        }
                        (ms / tok) as usize
                    }
                    (None, None) => base_size.ok_or_else(|| {
                        Error::Argument("the chunk regime needs --chunk-size or --chunk-ms".into())
                    })?,
                };
                let left_chunks = match (self.left_chunks, self.left_context) {
                    (Some(l), _) => l.0,
                    (None, Some(Limit(Some(lc)))) => {
                        if size == 0 || lc % size != 0 {
                            return Err(Error::config(
                                "left_context",
                                format!("{lc} tokens is not a whole number of {size}-token chunks"),
                            ));
                        }
                        Some(lc / size)
                    }
                    (None, Some(Limit(None))) => None,
                    (None, None) => base_left_chunks,
                };
                AttentionContext::Chunk { size, left_chunks }
            }
        };
        ctx.validate()?;
        Ok(ctx)
    }
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        ffn_expansion: 4,
        conv_kernel: 5,
        downsampling: 4,
        n_mels: 80,
        attention: AttentionContext::Chunk {
            size: 4,
            left_chunks: Some(4),
        },
        pos_bias_past: None,
        pos_bias_future: None,
    }
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    match serde_json::from_str::<ModelConfig>(&text) {
        Ok(cfg) => Ok(cfg),
        Err(full) => serde_json::from_str::<EncoderConfig>(&text)
            .map(ModelConfig::tiny)
            .map_err(|_| Error::Malformed(format!("{}: {full}", path.display()))),
    }
}

fn init_model(args: InitArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::tiny(default_encoder()),
    };
    let enc = &mut cfg.encoder;
    enc.n_layers = args.layers.unwrap_or(enc.n_layers);
    enc.d_model = args.d_model.unwrap_or(enc.d_model);
    enc.n_heads = args.heads.unwrap_or(enc.n_heads);
    enc.downsampling = args.downsampling.unwrap_or(enc.downsampling);
    enc.conv_kernel = args.conv_kernel.unwrap_or(enc.conv_kernel);
    cfg.loss.alpha = args.alpha.unwrap_or(cfg.loss.alpha);
    cfg.loss.fastemit_lambda = args.fastemit_lambda.unwrap_or(cfg.loss.fastemit_lambda);
    if let Some(p) = &args.vocab {
        cfg.vocab = Vocab::load(p)?;
        cfg.decoder.vocab_size = cfg.vocab.len();
    }
    cfg.encoder.validate()?;
    if !args.context.is_empty() {
        let lm = latency_model(&cfg)?;
        cfg.encoder.attention = args.context.resolve(&cfg.encoder.attention, &lm, 8)?;
    }
    Model::init(cfg, args.seed)?.save(&args.out)
}

fn buffered_config(args: &BufferedArgs, decoder: DecoderChoice) -> BufferedConfig {
    let base = match decoder {
        DecoderChoice::Ctc => BufferedConfig::ctc_default(),
        _ => BufferedConfig::rnnt_default(),
    };
    BufferedConfig {
        chunk_seconds: args.buffer_chunk_s.unwrap_or(base.chunk_seconds),
        buffer_seconds: args.buffer_s.unwrap_or(base.buffer_seconds),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::file(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn transcribe(args: TranscribeArgs) -> Result<()> {
    let audio = read_wav(&args.wav)?;
    let model = Model::load(&args.model)?;
    let cfg = model.config();
    let reach = cfg.encoder.bias_span().1;
    let ctx = args
        .context
        .resolve(&cfg.encoder.attention, &latency_model(cfg)?, reach)?;
    let choice = DecoderChoice::from(args.decoder);
    let transcripts: Vec<Transcript> = match args.mode {
        Mode::Offline => {
            run_offline(&log_mel(&audio, &cfg.features)?, &model, &ctx, choice)?.transcripts
        }
        Mode::Streaming => {
            run_streaming(&audio, &model, StreamingOptions::new(ctx, choice))?.transcripts
        }
        Mode::Buffered => {
            // each head gets its own default buffer geometry
            let mel = log_mel(&audio, &cfg.features)?;
            let heads: &[DecoderChoice] = match choice {
                DecoderChoice::Both => &[DecoderChoice::Ctc, DecoderChoice::Rnnt],
                _ => std::slice::from_ref(&choice),
            };
            let mut all = Vec::new();
            for &d in heads {
                all.extend(
                    run_buffered(&mel, &model, buffered_config(&args.buffered, d), d)?.transcripts,
                );
            }
            all
        }
    };
    let json = match transcripts.as_slice() {
        [one] => serde_json::to_string_pretty(one),
        many => serde_json::to_string_pretty(many),
    }
    .map_err(|e| Error::Malformed(e.to_string()))?;
    emit(args.out.as_deref(), &format!("{json}\n"))
}

enum Plan {
    Offline,
    Streaming(AttentionContext),
    Buffered(BufferedConfig),
}

fn parse_regime(text: &str, decoder: DecoderChoice) -> Result<Plan> {
    let mut parts = text.split(':');
    let name = parts.next().unwrap_or_default();
    let nums: Vec<&str> = parts.collect();
    let bad = || Error::Argument(format!("cannot parse regime `{text}`"));
    let count = |i: usize| -> Result<Option<Option<usize>>> {
        nums.get(i)
            .map(|s| parse_limit(s).map(|l| l.0).map_err(|_| bad()))
            .transpose()
    };
    let secs = |i: usize| -> Result<Option<f64>> {
        nums.get(i)
            .map(|s| s.parse().map_err(|_| bad()))
            .transpose()
    };
    let arity = |n: usize| if nums.len() > n { Err(bad()) } else { Ok(()) };
    match name {
        "offline" => arity(0).map(|_| Plan::Offline),
        "buffered" => {
            arity(2)?;
            let base = match decoder {
                DecoderChoice::Ctc => BufferedConfig::ctc_default(),
                _ => BufferedConfig::rnnt_default(),
            };
            Ok(Plan::Buffered(BufferedConfig {
                chunk_seconds: secs(0)?.unwrap_or(base.chunk_seconds),
                buffer_seconds: secs(1)?.unwrap_or(base.buffer_seconds),
            }))
        }
        "zero" => {
            arity(1)?;
            let left = count(0)?.flatten();
            Ok(Plan::Streaming(AttentionContext::Zero { left }))
        }
        "regular" => {
            arity(2)?;
            let lookahead = count(0)?.flatten().ok_or_else(bad)?;
            let left = count(1)?.flatten();
            Ok(Plan::Streaming(AttentionContext::Regular {
                lookahead,
                left,
            }))
        }
        "chunk" => {
            arity(2)?;
            let size = count(0)?.flatten().ok_or_else(bad)?;
            let left_chunks = count(1)?.flatten();
            let ctx = AttentionContext::Chunk { size, left_chunks };
            ctx.validate()?;
            Ok(Plan::Streaming(ctx))
        }
        _ => Err(bad()),
    }
}

fn compare(args: CompareArgs) -> Result<()> {
    let audio = read_wav(&args.wav)?;
    let model = Model::load(&args.model)?;
    let cfg = model.config();
    let choice = DecoderChoice::from(args.decoder);
    let regimes = if args.regimes.is_empty() {
        let defaults = BufferedArgs {
            buffer_chunk_s: None,
            buffer_s: None,
        };
        vec![
            Plan::Streaming(cfg.encoder.attention),
            Plan::Offline,
            Plan::Buffered(buffered_config(&defaults, choice)),
        ]
    } else {
        args.regimes
            .iter()
            .map(|s| parse_regime(s, choice))
            .collect::<Result<_>>()?
    };
    let mel = log_mel(&audio, &cfg.features)?;
    let mut report = String::from(
        "regime\tmode\tdecoder\twer_percent\teil_ms\tmacs_total\tmacs_duplicate\ttext\n",
    );
    for plan in regimes {
        let run: RunOutput = match plan {
            Plan::Offline => run_offline(&mel, &model, &cfg.encoder.attention, choice)?,
            Plan::Streaming(ctx) => {
                run_streaming(&audio, &model, StreamingOptions::new(ctx, choice))?
            }
            Plan::Buffered(b) => run_buffered(&mel, &model, b, choice)?,
        };
        for t in &run.transcripts {
            let wer_col = match &args.reference {
                Some(r) => format!("{:.2}", wer(r, &t.text)?.wer),
                None => "-".to_string(),
            };
            let mode = serde_json::to_value(t.mode).map_err(|e| Error::Malformed(e.to_string()))?;
            let decoder =
                serde_json::to_value(t.decoder).map_err(|e| Error::Malformed(e.to_string()))?;
            writeln!(
                report,
                "{}\t{}\t{}\t{}\t{:.1}\t{}\t{}\t{}",
                t.regime,
                mode.as_str().unwrap_or_default(),
                decoder.as_str().unwrap_or_default(),
                wer_col,
                t.avg_latency_ms,
                t.macs.total,
                t.macs.duplicate,
                t.text.replace('\t', " ")
            )
            .expect("writing to a String");
        }
    }
    emit(args.out.as_deref(), &report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::InitModel(a) => init_model(a),
        Command::Transcribe(a) => transcribe(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
