use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glpdepth::corrupt::{corrupt, CorruptionKind, CorruptionSpec};
use glpdepth::data::{checkpoint, load_named, load_source, pnm, DepthSample};
use glpdepth::gradcheck::{self, CHECKS};
use glpdepth::metrics::Crop;
use glpdepth::model::ParamCount;
use glpdepth::train::{evaluate, holdout, one_cycle_lr, predict_sample, train_with, Adam, Event};
use glpdepth::{Error, EvalConfig, GlpDepth, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "glpdepth",
    version,
    about = "Monocular depth network: train, evaluate, predict, stress-test"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the metrics table.
    Eval(EvalArgs),
    /// Predict depth for one PPM image; writes a 16-bit PGM in millimeters.
    Predict(PredictArgs),
    /// Write corrupted copies of every image.
    Corrupt(CorruptArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Analytic parameter counts.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Manifest path or `synth:seed,n,H,W`
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
    /// Evaluation window `l,u,w,h`
    #[arg(long)]
    crop: Option<Crop>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    data: String,
    /// Comma-separated corruption names, or `all`
    #[arg(long)]
    kinds: String,
    /// `a..b` or a comma-separated list, each in 1..=5
    #[arg(long, default_value = "1..5")]
    severities: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Op name or `all`
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    no_sff: bool,
}

fn parse_kinds(s: &str) -> Result<Vec<CorruptionKind>> {
    if s.trim() == "all" {
        return Ok(CorruptionKind::ALL.to_vec());
    }
    s.split(',').map(|k| k.trim().parse()).collect()
}

fn parse_severities(s: &str) -> Result<Vec<u8>> {
    let bad = || Error::Config(format!("bad severities '{s}'"));
    let list: Vec<u8> = match s.split_once("..") {
        Some((a, b)) => {
            let a: u8 = a.trim().parse().map_err(|_| bad())?;
            let b: u8 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            (a..=b).collect()
        }
        None => s
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?,
    };
    if list.is_empty() || list.iter().any(|v| !(1..=5).contains(v)) {
        return Err(bad());
    }
    Ok(list)
}

fn eval_config(model: &GlpDepth, crop: Option<Crop>) -> EvalConfig {
    EvalConfig {
        max_depth: model.config.max_depth,
        crop,
        ..EvalConfig::default()
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let samples = load_source(&a.data)?;
    let (train_set, val_set) = holdout(&samples, cfg.train.val_fraction);
    let mut model = GlpDepth::new(cfg.model.clone(), cfg.train.seed)?;
    let mut adam = Adam::new(model.params(), &cfg.train);
    println!(
        "training on {} samples, validating on {}, {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );
    let t = &cfg.train;
    train_with(
        &mut model,
        &mut adam,
        &train_set,
        &val_set,
        t,
        |s, n| one_cycle_lr(s, n, t),
        |e| {
            if let Event::Epoch { epoch, mean_loss, val } = e {
                match val {
                    Some(r) => println!(
                        "epoch {epoch:>3}  loss {mean_loss:.5}  d1 {:.4}  abs_rel {:.4}  rmse {:.4}",
                        r.delta1, r.abs_rel, r.rmse
                    ),
                    None => println!("epoch {epoch:>3}  loss {mean_loss:.5}"),
                }
            }
        },
    )?;
    checkpoint::save(&a.out, &model, Some(&adam))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.ckpt)?;
    let samples = load_source(&a.data)?;
    let report = evaluate(&model, &samples, &eval_config(&model, a.crop), true)?;
    let text = report.to_lines();
    print!("{text}");
    if let Some(path) = a.report {
        let body = format!("{text}{}\n", report.summary());
        std::fs::write(&path, body).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.ckpt)?;
    let (h, w, rgb) = pnm::read_ppm(&a.rgb)?;
    let sample = DepthSample::new(h, w, rgb, vec![0.0; h * w])?;
    let depth = predict_sample(&model, &sample, true)?;
    pnm::write_pgm16(&a.out, h, w, &depth)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_corrupt(a: CorruptArgs) -> Result<()> {
    let kinds = parse_kinds(&a.kinds)?;
    let severities = parse_severities(&a.severities)?;
    let named = load_named(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut written = 0;
    for (i, (stem, s)) in named.iter().enumerate() {
        for &kind in &kinds {
            for &sev in &severities {
                let spec = CorruptionSpec::new(kind, sev, a.seed.wrapping_add(i as u64))?;
                let rgb = corrupt(&s.rgb, s.height, s.width, &spec)?;
                let path = a.out.join(format!("{stem}.{kind}.{sev}.ppm"));
                pnm::write_ppm(&path, s.height, s.width, &rgb)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} images to {}", a.out.display());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let names: Vec<&str> = if a.op == "all" {
        CHECKS.to_vec()
    } else {
        vec![a.op.as_str()]
    };
    let mut ok = true;
    for name in names {
        let r = gradcheck::run_check(name, a.trials, a.seed)?;
        let elem = r.max_elem_err.map(|e| format!("  elem {e:.2e}")).unwrap_or_default();
        println!(
            "{} {:<18} trials {:>3}  rel {:.2e} < {:.0e}{elem}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.max_rel_err,
            r.tolerance
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn run_params(a: ParamsArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?.model;
    if a.no_sff {
        cfg.with_sff = false;
    }
    let c = ParamCount::for_config(&cfg);
    println!("decoder {}", c.decoder);
    println!("encoder {}", c.encoder);
    println!("total {}", c.total());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Predict(a) => run_predict(a).map(|_| true),
        Command::Corrupt(a) => run_corrupt(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Params(a) => run_params(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
