use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use awi_core::checkpoint::{load_checkpoint, save_checkpoint};
use awi_core::corpus::{build_vocab, load_dialogues, save_dialogues, synthetic};
use awi_core::trainer::evaluate_perplexity;
use awi_core::{AwiParams, DecodeConfig, DecodeMode, Session, StateCarry, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};

use crate::api::{self, AppState, Model};

pub type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Debug, Parser)]
#[command(
    name = "awi",
    version,
    about = "Train, evaluate and chat with AWI conversation models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a per-epoch metrics log.
    Train(TrainArgs),
    /// Print the perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Interactive chat on the terminal.
    Chat(ChatArgs),
    /// Serve the HTTP chat API.
    Serve(ServeArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus, one JSON dialogue per line.
    #[arg(long)]
    pub train: PathBuf,
    /// Development corpus driving the learning-rate schedule.
    #[arg(long)]
    pub dev: PathBuf,
    /// Checkpoint to write.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Metrics log, one `epoch, lr, train_ppl, dev_ppl` line per epoch.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub hidden: usize,
    #[arg(long, default_value_t = 25)]
    pub align: usize,
    #[arg(long, default_value_t = 50)]
    pub embed: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr0: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    pub grad_clip: f64,
    /// Plain stacked LSTMs without depth gates.
    #[arg(long)]
    pub plain_lstm: bool,
    /// Half-width of the uniform parameter initialisation.
    #[arg(long, default_value_t = awi_core::cells::INIT_SCALE)]
    pub init_scale: f64,
    /// Start from all-zero parameters.
    #[arg(long)]
    pub zero_init: bool,
    /// Ablation: reset the cross-turn state before every turn.
    #[arg(long)]
    pub no_intention: bool,
    /// Minimum token count for the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeArgs {
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_norm: f64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: if self.greedy {
                DecodeMode::Greedy
            } else {
                DecodeMode::Beam
            },
            beam_width: self.beam_width,
            max_len: self.max_len,
            length_norm: self.length_norm,
        }
    }
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn train(a: TrainArgs) -> CliResult {
    let train_raw = load_dialogues(&a.train)?;
    let dev_raw = load_dialogues(&a.dev)?;
    let vocab = build_vocab(&train_raw, a.min_count);
    let encode = |ds: &[awi_core::Dialogue]| {
        ds.iter()
            .map(|d| vocab.encode_dialogue(d))
            .collect::<Vec<_>>()
    };
    let (train_set, dev_set) = (encode(&train_raw), encode(&dev_raw));
    let config = TrainConfig {
        hidden: a.hidden,
        align: a.align,
        embed: a.embed,
        layers: a.layers,
        lr0: a.lr0,
        max_epochs: a.epochs,
        seed: a.seed,
        grad_clip: a.grad_clip,
        plain_lstm: a.plain_lstm,
        init_scale: a.init_scale,
        carry: if a.no_intention {
            StateCarry::Reset
        } else {
            StateCarry::Full
        },
    };
    let mut trainer = if a.zero_init {
        let params = AwiParams::zeros(config.dims(vocab.len()))?;
        Trainer::with_params(config.clone(), params)?
    } else {
        Trainer::new(config.clone(), vocab.len())?
    };
    eprintln!(
        "vocabulary {} tokens, {} train / {} dev dialogues",
        vocab.len(),
        train_set.len(),
        dev_set.len()
    );
    let mut metrics = match &a.metrics {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut write_err = None;
    trainer.fit(&train_set, &dev_set, |r| {
        let line = r.metrics_line();
        println!("{line}");
        if let Some(m) = metrics.as_mut() {
            if let Err(e) = writeln!(m, "{line}").and_then(|_| m.flush()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    save_checkpoint(&trainer.params, &config, &vocab, &a.out)?;
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let (params, config, vocab) = load_checkpoint(&a.checkpoint)?;
    let data: Vec<_> = load_dialogues(&a.data)?
        .iter()
        .map(|d| vocab.encode_dialogue(d))
        .collect();
    let ppl = evaluate_perplexity(&params, &data, config.carry)?;
    println!("{ppl:.4}");
    Ok(())
}

fn load_model(path: &PathBuf, decode: &DecodeArgs) -> CliResult<Model> {
    let (params, config, vocab) = load_checkpoint(path)?;
    let decode = decode.config();
    decode.validate()?;
    Ok(Model {
        params,
        vocab,
        decode,
        carry: config.carry,
    })
}

fn chat(a: ChatArgs) -> CliResult {
    let model = load_model(&a.checkpoint, &a.decode)?;
    let mut session = Session::new(&model.params, model.decode).with_carry(model.carry);
    let stdin = io::stdin();
    let mut out = io::stdout();
    write!(out, "user: ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let reply = session.respond(&model.params, &model.vocab, &line)?;
            writeln!(out, "agent: {}", reply.text)?;
        }
        write!(out, "user: ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let model = load_model(&a.checkpoint, &a.decode)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let state = AppState::new(Some(model));
        api::spawn_evictor(state.clone(), Duration::from_secs(60));
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn synth(a: SynthArgs) -> CliResult {
    save_dialogues(&a.out, &synthetic::generate(a.seed, a.n))?;
    Ok(())
}
