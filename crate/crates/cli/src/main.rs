use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gaussmarker::bench::{fuser_training_scores, run_benchmark, BenchmarkConfig, BenchmarkModels, Distortion, InversionNoiseModel};
use gaussmarker::format::{read_latent, write_latent};
use gaussmarker::fusion::{train_fuser, training_accuracy, FuserModel, FuserTrainConfig};
use gaussmarker::key::{WatermarkKey, DEFAULT_BITS, DEFAULT_RING_RADIUS};
use gaussmarker::pipeline::Watermarker;
use gaussmarker::restorer::{train, GnrTrainConfig, RestorerModel};
use gaussmarker::stats::{choose_threshold, Identifier, UserRegistry};
use gaussmarker::{apply_transform, sample_gaussian, Error, Shape, TransformKind, TransformSpec};

const THREADS_VAR: &str = "GAUSSMARKER_THREADS";

#[derive(Parser)]
#[command(name = "gaussmarker", version, about = "Dual-domain watermarking of Gaussian latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a watermark key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BITS)]
        bits: usize,
        #[arg(long, default_value_t = Shape::DEFAULT)]
        shape: Shape,
        #[arg(long, default_value_t = DEFAULT_RING_RADIUS)]
        ring_radius: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embed the watermark into a latent (sampled from --seed if no input).
    Embed {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Embed this user's watermark instead of the model watermark.
        #[arg(long, requires = "registry")]
        user: Option<u32>,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Score a latent against the key.
    Detect {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        fuser: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        fpr: f64,
        /// Print the result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Apply a geometric or sign-flip distortion to a latent.
    Distort {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Transform as JSON, e.g. '{"rotate":{"angle":75.0}}'.
        #[arg(long)]
        transform: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the noise restorer.
    TrainGnr {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        base: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Rotation range as lo,hi degrees, or "none".
        #[arg(long)]
        rotation: Option<String>,
        /// Crop area-ratio range as lo,hi, or "none".
        #[arg(long)]
        crop: Option<String>,
        #[arg(long)]
        max_flip: Option<f64>,
    },
    /// Train the score fuser on simulated positives and negatives.
    TrainFuser {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the latent-level benchmark.
    Simulate {
        #[arg(long)]
        key: PathBuf,
        /// Output prefix; writes <out>.csv and <out>.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a registry of random per-user keys.
    Registry {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attribute a latent to a registered user.
    Identify {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value_t = 0.01)]
        fpr: f64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Restorer model file.
    #[arg(long)]
    gnr: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self, shape: Shape) -> gaussmarker::Result<Option<RestorerModel>> {
        self.gnr.as_ref().map(|p| RestorerModel::load_for(p, shape)).transpose()
    }
}

fn parse_range(text: &str) -> anyhow::Result<Option<(f64, f64)>> {
    if text == "none" {
        return Ok(None);
    }
    let (lo, hi) = text.split_once(',').context("range must be lo,hi or none")?;
    Ok(Some((lo.trim().parse()?, hi.trim().parse()?)))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Keygen { out, bits, shape, ring_radius, seed } => {
            let key = WatermarkKey::generate(bits, shape, ring_radius, seed)?;
            key.save(&out)?;
            println!("wrote {} ({bits} bits, {shape}, ring radius {ring_radius})", out.display());
        }
        Command::Embed { key, out, input, seed, user, registry } => {
            let key = WatermarkKey::load(&key)?;
            let wm = Watermarker::new(&key)?;
            let z = match input {
                Some(p) => read_latent(p)?,
                None => sample_gaussian(key.shape, seed)?,
            };
            let marked = match (user, registry) {
                (Some(u), Some(r)) => {
                    let reg = UserRegistry::from_json(&std::fs::read_to_string(r)?, key.bits.len())?;
                    wm.embed_bits(&z, &reg.user_watermark(u, &key.bits)?)?
                }
                _ => wm.embed(&z)?,
            };
            write_latent(&marked, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Detect { key, latent, models, fuser, fpr, json } => {
            let key = WatermarkKey::load(&key)?;
            let wm = Watermarker::new(&key)?;
            let z = read_latent(latent)?;
            let gnr = models.load(key.shape)?;
            let fuser = fuser.map(FuserModel::load).transpose()?;
            let policy = choose_threshold(key.bits.len(), fpr, 1)?;
            let d = wm.detect(&z, gnr.as_ref(), fuser.as_ref(), &policy)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&d).map_err(Error::from)?);
            } else {
                println!("r_s          {:.6}", d.r_s);
                println!("r_f          {:.6}", d.r_f);
                if let Some(r) = d.fused {
                    println!("fused        {r:.6}");
                }
                println!("bits         {}", d.bits_hex);
                println!("bit_accuracy {:.6} ({} / {} matched, tau {})", d.bit_accuracy, d.matches, key.bits.len(), d.tau);
                println!("decision     {}", if d.decision { "watermarked" } else { "not watermarked" });
            }
        }
        Command::Distort { input, out, transform, seed } => {
            let kind: TransformKind = serde_json::from_str(&transform).map_err(Error::from)?;
            let z = read_latent(input)?;
            write_latent(&apply_transform(&z, &TransformSpec::seeded(kind, seed))?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::TrainGnr { key, out, config, steps, base, seed, rotation, crop, max_flip } => {
            let key = WatermarkKey::load(&key)?;
            let mut cfg: GnrTrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => GnrTrainConfig::default(),
            };
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.base_features = base.unwrap_or(cfg.base_features);
            cfg.seed = seed.unwrap_or(cfg.seed);
            if let Some(r) = rotation {
                cfg.family.rotation = parse_range(&r)?;
            }
            if let Some(c) = crop {
                cfg.family.crop = parse_range(&c)?;
            }
            cfg.family.max_flip = max_flip.unwrap_or(cfg.family.max_flip);
            let wm = Watermarker::new(&key)?;
            let started = std::time::Instant::now();
            let (model, report) = train(&cfg, &wm)?;
            model.save(&out)?;
            println!(
                "wrote {} ({} parameters) in {:.1}s; loss {:.4} -> {:.4}",
                out.display(),
                model.parameter_count(),
                started.elapsed().as_secs_f64(),
                report.decile_mean(false),
                report.decile_mean(true)
            );
        }
        Command::TrainFuser { key, out, models, samples, seed } => {
            let key = WatermarkKey::load(&key)?;
            let wm = Watermarker::new(&key)?;
            let gnr = models.load(key.shape)?;
            let noise = InversionNoiseModel::default();
            let distortions = Distortion::standard();
            let (pos, neg) = fuser_training_scores(&wm, gnr.as_ref(), &distortions, &noise, samples, seed)?;
            let fuser = train_fuser(&FuserTrainConfig { seed, ..Default::default() }, &pos, &neg)?;
            fuser.save(&out)?;
            // Held-out check on fresh seeds.
            let (hp, hn) = fuser_training_scores(&wm, gnr.as_ref(), &distortions, &noise, samples, seed ^ u64::MAX)?;
            let score = |v: &[(f64, f64)]| v.iter().map(|&(a, b)| fuser.score(a, b)).collect::<Result<Vec<_>, _>>();
            let eval = gaussmarker::stats::evaluate(&score(&hp)?, &score(&hn)?, 0.01)?;
            println!(
                "wrote {}; training accuracy {:.3}, held-out AUC {:.3}, TPR@1%FPR {:.3}",
                out.display(),
                training_accuracy(&fuser, &pos, &neg)?,
                eval.auc,
                eval.tpr_at_fpr
            );
        }
        Command::Simulate { key, out, config, models, samples, seed } => {
            let key = WatermarkKey::load(&key)?;
            let wm = Watermarker::new(&key)?;
            let mut cfg: BenchmarkConfig = match config {
                Some(p) => read_json(&p)?,
                None => BenchmarkConfig::default(),
            };
            cfg.n_samples = samples.unwrap_or(cfg.n_samples);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let gnr = models.load(key.shape)?;
            if gnr.is_none() {
                cfg.variants.retain(|v| *v != gaussmarker::bench::Variant::DualGnr);
            }
            let report = run_benchmark(&cfg, &wm, &BenchmarkModels { gnr, ..Default::default() })?;
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let summary = report.summary();
            std::fs::write(out.with_extension("csv"), report.to_csv()?)?;
            std::fs::write(out.with_extension("txt"), format!("generated at unix time {stamp}\n{summary}"))?;
            print!("{summary}");
        }
        Command::Registry { key, out, users, seed } => {
            let key = WatermarkKey::load(&key)?;
            let reg = UserRegistry::generate(users, key.bits.len(), seed)?;
            std::fs::write(&out, reg.to_json()?)?;
            println!("wrote {} ({users} users)", out.display());
        }
        Command::Identify { key, registry, latent, models, fpr } => {
            let key = WatermarkKey::load(&key)?;
            let wm = Watermarker::new(&key)?;
            let reg = UserRegistry::from_json(&std::fs::read_to_string(registry)?, key.bits.len())?;
            let policy = choose_threshold(key.bits.len(), fpr, reg.len())?;
            let gnr = models.load(key.shape)?;
            let estimate = wm.read_bits(&read_latent(latent)?, gnr.as_ref())?;
            let id = Identifier::new(&reg, &key.bits)?.identify(&estimate, &policy)?;
            for (user, matches) in &id.ranking {
                println!("user {user:>8}  matches {matches}");
            }
            match id.user {
                Some(u) => println!("identified user {u} (tau {})", policy.tau),
                None => println!("no watermark (tau {})", policy.tau),
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io(_) | Error::Format(_) | Error::Json(_) | Error::Key(_) | Error::ShapeMismatch { .. }) => 2,
        Some(Error::Diverged { .. } | Error::NonFinite | Error::DegenerateData(_)) => 3,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var(THREADS_VAR) {
        let n: usize = value.parse().with_context(|| format!("{THREADS_VAR}={value}"))?;
        if n == 0 {
            bail!("{THREADS_VAR} must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
