use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use blockqat::block_ap::{run_block_ap, BlockApPlan, InputSource};
use blockqat::config::KeyValues;
use blockqat::data::{perplexity, sample_calibration, TokenStream};
use blockqat::desk;
use blockqat::e2e_qp::{run_e2e_qp, trainable_param_census, E2eQpPlan};
use blockqat::kernels;
use blockqat::model::Checkpoint;
use blockqat::pack;
use blockqat::params::ParamSet;
use blockqat::pretrain::pretrain;
use blockqat::quant::{round2, QuantSpec};
use blockqat::{Error, Result};

#[derive(Parser)]
#[command(name = "blockqat", version, about = "Block-wise then end-to-end quantization-aware training for tiny language models")]
struct Cli {
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Random seed; falls back to BLOCKQAT_SEED, then 0.
    #[arg(long, global = true, env = "BLOCKQAT_SEED", default_value_t = 0)]
    seed: u64,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert UTF-8 text to a byte-level token stream.
    Tokenize {
        text: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a full-precision model from scratch.
    Pretrain {
        /// key = value file with model and training settings.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        ctx: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Block-wise reconstruction training; writes a frozen quantized model.
    Quantize(QuantizeArgs),
    /// End-to-end training of step sizes on a frozen quantized model.
    Finetune(FinetuneArgs),
    /// Perplexity over non-overlapping windows.
    Eval {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(long, default_value_t = desk::EVAL_CTX)]
        ctx: usize,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Header, per-tensor bits/param and size table of a container.
    Inspect { model: PathBuf },
    /// Packed kernel benchmark as CSV.
    Bench {
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
        #[arg(long, value_delimiter = ',', default_values_t = vec![16u8, 2, 3, 4])]
        bits: Vec<u8>,
        #[arg(long, default_value_t = 64)]
        group: i32,
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Projection shapes of 7B, 13B and 70B class decoders.
    Paper,
    /// Reference model shapes plus 1024x1024.
    Toy,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct SplitArgs {
    /// Which part of the stream to use; the last `val-fraction` is validation.
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long, default_value_t = desk::VAL_FRACTION)]
    val_fraction: f64,
}

impl SplitArgs {
    fn apply(&self, s: TokenStream, default: Split) -> TokenStream {
        match self.split.unwrap_or(default) {
            Split::All => s,
            Split::Train => s.split_tail(self.val_fraction).0,
            Split::Val => s.split_tail(self.val_fraction).1,
        }
    }
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    data: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    bits: u8,
    /// Group size along the input axis; -1 for one group per row.
    #[arg(long, allow_hyphen_values = true)]
    group: i32,
    #[arg(long, default_value = "s,z,W")]
    trainable: ParamSet,
    #[arg(long, default_value_t = desk::CALIB_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = desk::CALIB_CTX)]
    ctx: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Multiplier on the base rates (1e-4 for s and z; 2e-5 for W at 2 bits, else 1e-5).
    #[arg(long, default_value_t = desk::BLOCK_AP_LR_SCALE)]
    lr_scale: f32,
    #[arg(long, default_value = "quantized-prefix")]
    input_source: InputSource,
    /// Held-out sequences for the train/validation reconstruction gap.
    #[arg(long, default_value_t = desk::GAP_SAMPLES)]
    holdout: usize,
    /// JSON-lines log of per-block, per-epoch losses.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    data: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value = "s")]
    trainable: ParamSet,
    #[arg(long, default_value_t = desk::E2E_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = desk::E2E_CTX)]
    ctx: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    micro_batch: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Explicit learning rate; overrides the scaled base rate (2e-5 at 2 bits, else 1e-5).
    #[arg(long)]
    lr: Option<f32>,
    /// Multiplier on the base rate [default: 60 at 2 bits, scaled by 3 / (2^N - 1)]
    #[arg(long)]
    lr_scale: Option<f32>,
    /// JSON-lines log, one record per optimizer step.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: &Cli) -> Result<(Value, String)> {
    let seed = cli.seed;
    match &cli.cmd {
        Cmd::Tokenize { text, output } => {
            let t = std::fs::read_to_string(text).map_err(|e| Error::Io { path: text.clone(), source: e })?;
            let s = TokenStream::from_text(&t);
            s.save(output)?;
            Ok((json!({"tokens": s.len(), "vocab_size": s.vocab_size(), "output": output}), format!("{} tokens -> {}", s.len(), output.display())))
        }
        Cmd::Pretrain { config, data, output, steps, batch, ctx, lr } => {
            let mut kv = match config {
                Some(p) => KeyValues::load(p)?,
                None => KeyValues::default(),
            };
            kv.set("seed", seed);
            let cfg = kv.model_config()?;
            let mut plan = kv.train_plan()?;
            kv.finish()?;
            if let Some(v) = steps {
                plan.steps = *v;
            }
            if let Some(v) = batch {
                plan.batch = *v;
            }
            if let Some(v) = ctx {
                plan.ctx_len = *v;
            }
            if let Some(v) = lr {
                plan.lr = *v;
            }
            let stream = TokenStream::load(data)?;
            let ck = pretrain(cfg, &stream, &plan)?;
            let bytes = pack::save(&ck, output)?;
            let text = format!(
                "trained {} steps; train loss {}, validation ppl {} -> {} ({bytes} bytes)",
                plan.steps,
                ck.meta.get("train_loss").map_or("-".into(), |v| v.to_string()),
                ck.meta.get("val_ppl").map_or("-".into(), |v| v.to_string()),
                output.display()
            );
            Ok((json!({"output": output, "bytes": bytes, "meta": ck.meta}), text))
        }
        Cmd::Quantize(a) => {
            let fp = pack::load(&a.model)?;
            let stream = a.split.apply(TokenStream::load(&a.data)?, Split::Train);
            let spec = QuantSpec::new(a.bits, a.group)?;
            let calib = sample_calibration(&stream, a.samples, a.ctx, seed)?;
            let holdout = if a.holdout > 0 {
                let val = a.split.apply(TokenStream::load(&a.data)?, Split::Val);
                Some(sample_calibration(&val, a.holdout, a.ctx, seed ^ 0x4f1d)?)
            } else {
                None
            };
            let plan = BlockApPlan {
                trainable: a.trainable,
                epochs: a.epochs,
                batch: a.batch,
                input_source: a.input_source,
                seed,
                ..BlockApPlan::new(spec).scale_lr(a.lr_scale)
            };
            let out = run_block_ap(&fp.model, &calib, &plan, holdout.as_ref())?;
            if let Some(p) = &a.log {
                write_file(p, &out.log_jsonl())?;
            }
            let gap = out.gap();
            let mut ck = Checkpoint { model: out.model, meta: fp.meta.clone() };
            ck.meta.insert("block_ap".into(), json!({"plan": plan, "blocks": out.blocks, "gap": gap}));
            let bytes = pack::save(&ck, &a.output)?;
            let avg = blockqat::e2e_qp::model_avg_bits(&ck.model, blockqat::quant::ZeroFormat::Packed);
            let text = format!(
                "quantized to N={} g={}: avg bits {:.2}{} -> {} ({bytes} bytes)",
                a.bits,
                a.group,
                round2(avg.unwrap_or(16.0)),
                gap.map_or(String::new(), |g| format!(", reconstruction gap {}", g.to_json())),
                a.output.display()
            );
            Ok((json!({"output": a.output, "bytes": bytes, "avg_bits": avg.map(round2), "blocks": out.blocks, "gap": gap}), text))
        }
        Cmd::Finetune(a) => {
            let q = pack::load(&a.model)?;
            let stream = a.split.apply(TokenStream::load(&a.data)?, Split::Train);
            let bits = q.model.quant_layers().next().map_or(16, |l| l.spec().bits());
            let mut plan = E2eQpPlan {
                batch: a.batch,
                micro_batch: a.micro_batch,
                epochs: a.epochs,
                trainable: a.trainable,
                seed,
                ..E2eQpPlan::new(bits, a.ctx, a.samples)
            };
            plan.lr = a.lr.unwrap_or(plan.lr * a.lr_scale.unwrap_or_else(|| desk::e2e_lr_scale(bits)));
            let census = trainable_param_census(&q.model, plan.trainable);
            let out = run_e2e_qp(&q.model, &stream, &plan)?;
            if let Some(p) = &a.log {
                write_file(p, &out.log_jsonl())?;
            }
            let mut ck = Checkpoint { model: out.model, meta: q.meta.clone() };
            let final_loss = out.log.last().map(|r| r.loss);
            ck.meta.insert("e2e_qp".into(), json!({"plan": plan, "final_loss": final_loss, "weights_sha256": out.weights_sha256}));
            let bytes = pack::save(&ck, &a.output)?;
            let text = format!(
                "{} steps, final loss {:.4}; avg bits {:.2}; {} trainable parameters; weights sha256 {} -> {}",
                out.log.len(),
                final_loss.unwrap_or(f64::NAN),
                round2(out.avg_bits),
                census.trainable(),
                out.weights_sha256,
                a.output.display()
            );
            Ok((
                json!({"output": a.output, "bytes": bytes, "steps": out.log.len(), "final_loss": final_loss,
                       "avg_bits": round2(out.avg_bits), "census": census, "weights_sha256": out.weights_sha256}),
                text,
            ))
        }
        Cmd::Eval { model, data, ctx, split } => {
            let ck = pack::load(model)?;
            let stream = split.apply(TokenStream::load(data)?, Split::Val);
            let r = perplexity(&ck.model, &stream, *ctx)?;
            Ok((json!({"ppl": r.ppl, "mean_nll": r.mean_nll, "windows": r.windows, "predicted": r.predicted, "ctx": ctx}), format!("ppl {:.4}\n{}", r.ppl, serde_json::to_string(&r).expect("report serializes"))))
        }
        Cmd::Inspect { model } => {
            let bytes = std::fs::read(model).map_err(|e| Error::Io { path: model.clone(), source: e })?;
            let (header, _) = pack::read_header(&bytes)?;
            let rep = pack::report_size(&bytes)?;
            let text = pack::inspect(&bytes)?;
            Ok((json!({"header": header, "size": rep, "avg_bits": rep.avg_bits.map(round2)}), text))
        }
        Cmd::Bench { preset, bits, group, reps } => {
            let dims = kernels::preset(match preset {
                Preset::Paper => "paper",
                Preset::Toy => "toy",
            })?;
            let rows = kernels::bench(&dims, bits, *group, *reps, seed)?;
            let mut text = String::from(kernels::CSV_HEADER);
            for r in &rows {
                text.push('\n');
                text.push_str(&r.csv());
            }
            Ok((json!({"rows": rows}), text))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("BLOCKQAT_LOG").target(env_logger::Target::Stderr).init();
    match run(&cli) {
        Ok((doc, text)) => {
            if cli.json {
                println!("{doc}");
            } else {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({"error": e.to_string()}));
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
