//! `vlamd`: dataset generation, training, evaluation, decoding and the
//! numerical self-check.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlamd_core::checkpoint;
use vlamd_core::decode::recognize_with_report;
use vlamd_core::eval::{evaluate, worker_count};
use vlamd_core::selfcheck::run_all;
use vlamd_core::synth::{emit_dataset, load_png, load_train_set, LoadedManifest, EVAL_MANIFEST, TRAIN_MANIFEST};
use vlamd_core::trainer::Trainer;
use vlamd_core::{Config, Error, Vlamd};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Log a loss line to stdout every this many steps (every step goes to the log file).
const PRINT_EVERY: usize = 50;

#[derive(Parser)]
#[command(name = "vlamd", version, about = "Scene-text word recognition with mutual bidirectional decoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the IV/OOV dataset described by a config file.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train to `train.max_steps`, checkpointing under `train.out_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint directory written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// CRW over a manifest, split into IV and OOV buckets.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest file, e.g. `data/eval.tsv`.
        #[arg(long)]
        data: PathBuf,
        /// Write per-sample records as TSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Recognize one image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Candidates kept per direction (widens the beam if needed).
        #[arg(long)]
        nbest: Option<usize>,
        /// Print every re-scored candidate after the transcript.
        #[arg(long)]
        dump_candidates: bool,
    },
    /// Finite-difference gradients, beam enumeration and invariants at tiny sizes.
    Selfcheck,
    /// Print every config key with its default and description.
    Defaults,
}

enum Failure {
    Core(Error),
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Length { .. } => EXIT_USAGE,
        Error::NonFinite(_) | Error::Tensor(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::GenData { config } => gen_data(&config),
        Cmd::Train { config, resume } => train(&config, resume.as_deref()),
        Cmd::Eval { ckpt, data, report } => eval(&ckpt, &data, report.as_deref()),
        Cmd::Decode {
            ckpt,
            image,
            nbest,
            dump_candidates,
        } => decode(&ckpt, &image, nbest, dump_candidates),
        Cmd::Selfcheck => selfcheck(),
        Cmd::Defaults => {
            print!("{}", Config::documented_defaults());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, Error> {
    r.map_err(|e| Error::io(path, e))
}

fn gen_data(config: &Path) -> CmdResult {
    let cfg = Config::load(config)?;
    let [train, eval] = emit_dataset(&cfg.data)?;
    let n_oov = eval.samples.iter().filter(|s| s.tag == vlamd_core::synth::Tag::Oov).count();
    println!(
        "wrote {} training and {} eval images ({} IV, {n_oov} OOV) to {}",
        train.samples.len(),
        eval.samples.len(),
        eval.samples.len() - n_oov,
        cfg.data.dir
    );
    Ok(())
}

/// Keys that fix parameter shapes; a resumed run must agree on all of them.
fn same_architecture(a: &Config, b: &Config) -> bool {
    a.model == b.model
        && a.vlad == b.vlad
        && a.transd == b.transd
        && (a.data.charset.as_str(), a.data.height, a.data.width) == (b.data.charset.as_str(), b.data.height, b.data.width)
}

fn train(config: &Path, resume: Option<&Path>) -> CmdResult {
    let cfg = Config::load(config)?;
    let out = PathBuf::from(&cfg.train.out_dir);
    io(&out, fs::create_dir_all(&out))?;
    let snapshot = out.join("config.txt");
    io(&snapshot, fs::write(&snapshot, cfg.to_text()))?;

    let mut trainer = match resume {
        None => Trainer::new(Vlamd::new(&cfg, cfg.train.seed)?),
        Some(dir) => {
            let ck = checkpoint::load(dir)?;
            if !same_architecture(&ck.model.config, &cfg) {
                return Err(Failure::Usage(format!(
                    "{} was trained with a different model or image configuration",
                    dir.display()
                )));
            }
            let mut t = Trainer::new(ck.model);
            t.model.config.train = cfg.train.clone();
            t.cfg = cfg.train.clone();
            if let Some(o) = ck.optim {
                t.optim = o;
            }
            t.step = ck.step;
            println!("resuming from {} at step {}", dir.display(), t.step);
            t
        }
    };

    let hw = (cfg.data.height, cfg.data.width);
    let data_dir = Path::new(&cfg.data.dir);
    let data = load_train_set(&data_dir.join(TRAIN_MANIFEST), &trainer.model.vocab, hw)?;
    println!(
        "training on {} images, {} parameters, {} steps",
        data.len(),
        trainer.model.store.num_scalars(),
        cfg.train.max_steps
    );

    let log_path = out.join("train.log");
    let mut log = io(&log_path, File::options().create(true).append(true).open(&log_path))?;
    if trainer.step == 0 {
        io(
            &log_path,
            writeln!(log, "step\tlr\tce_vlad_l2r\tce_vlad_r2l\tce_transd_l2r\tce_transd_r2l\tkl_vlad\tkl_transd\ttotal"),
        )?;
    }
    let seed = cfg.train.seed;
    let every = cfg.train.ckpt_every;
    let fitted = trainer.fit(&data, |t, report, lr| {
        let line = report.log_line(t.step, lr);
        io(&log_path, writeln!(log, "{line}"))?;
        if t.step % PRINT_EVERY == 0 || t.step == t.cfg.max_steps {
            println!("{line}");
        }
        if every > 0 && t.step % every == 0 && t.step < t.cfg.max_steps {
            checkpoint::save(&out.join(format!("step-{:06}", t.step)), &t.model, Some(&t.optim), t.step, seed)?;
        }
        Ok(())
    });
    if let Err(Error::NonFinite(what)) = fitted {
        return Err(Failure::Numeric(format!("non-finite {what} at step {}", trainer.step + 1)));
    }
    fitted?;

    let final_dir = out.join("final");
    checkpoint::save(&final_dir, &trainer.model, Some(&trainer.optim), trainer.step, seed)?;
    println!("checkpoint {} sha256 {}", final_dir.display(), checkpoint::hash(&final_dir)?);

    let eval_path = data_dir.join(EVAL_MANIFEST);
    if eval_path.exists() {
        let manifest = LoadedManifest::load(&eval_path)?;
        let report = evaluate(&trainer.model, &manifest, &cfg.decode, worker_count()?)?;
        let p = out.join("eval.tsv");
        io(&p, fs::write(&p, report.to_tsv()))?;
        println!("{}", report.summary());
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, report_path: Option<&Path>) -> CmdResult {
    let model = checkpoint::load(ckpt)?.model;
    let manifest = LoadedManifest::load(data)?;
    let report = evaluate(&model, &manifest, &model.config.decode, worker_count()?)?;
    println!("{}", report.summary());
    if let Some(p) = report_path {
        io(p, fs::write(p, report.to_tsv()))?;
    }
    Ok(())
}

fn decode(ckpt: &Path, image: &Path, nbest: Option<usize>, dump: bool) -> CmdResult {
    let model = checkpoint::load(ckpt)?.model;
    let mut cfg = model.config.decode.clone();
    if let Some(k) = nbest {
        if k == 0 {
            return Err(Failure::Usage("--nbest must be positive".into()));
        }
        cfg.n_best = k;
        cfg.beam_width = cfg.beam_width.max(k);
    }
    let img = load_png(image, (model.config.data.height, model.config.data.width))?;
    let (text, report) = recognize_with_report(&model, &img, &cfg)?;
    println!("{text}");
    if dump {
        println!("rank\tdirection\ttext\tlogp_l2r\tlogp_r2l_reversed\tcombined");
        print!("{}", report.to_text());
    }
    Ok(())
}

fn selfcheck() -> CmdResult {
    let results = run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} self-check(s) failed")));
    }
    Ok(())
}
