use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deepfidelity::fidelity::{
    assign_targets, parse_stats, stats_to_string, threshold_classify, QualityStats,
};
use deepfidelity::model::{load_model, save_model, ModelConfig};
use deepfidelity::pipeline::{
    self, dump_feature_maps, evaluate, extract_features, gen_synthetic, ingest_manifest, load_image,
    read_features, train_backbone, write_features, write_manifest_relative, SynthConfig, TrainConfig,
};
use deepfidelity::pipeline::eval::clamped_scores;
use deepfidelity::svr::{load_svr, save_svr, svr_fit, Sigma, SvrConfig};
use deepfidelity::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "deepfidelity", version, about = "Symmetry-aware forgery fidelity scoring")]
struct Cli {
    /// Seed for generation, initialization, shuffling and the SVR solver.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Tiny,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic face dataset and its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_real: usize,
        #[arg(long, default_value_t = 200)]
        n_fake: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Comma-separated Gaussian blur sigmas (pixels at 32 px).
        #[arg(long, value_delimiter = ',')]
        blur_levels: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        asymmetry: f64,
        #[arg(long, default_value_t = 0.015)]
        noise: f64,
    },
    /// Normalize quality per class and attach fidelity targets.
    MapQuality {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse statistics fitted on a training split instead of fitting new ones.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Where to save the fitted statistics.
        #[arg(long)]
        write_stats: Option<PathBuf>,
    },
    /// Train the backbone on a mapped manifest.
    TrainBackbone {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long)]
        ssaa_blocks: Option<usize>,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1.2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        /// Keep the learning rate constant instead of cosine decay.
        #[arg(long)]
        constant_lr: bool,
        /// Optional file for the per-epoch loss log.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Write backbone embeddings for every manifest row.
    ExtractFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the RBF regressor on a feature file.
    TrainSvr {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 50)]
        max_passes: usize,
        /// Kernel width, or "median" for the median-distance heuristic.
        #[arg(long, default_value = "median")]
        sigma: String,
    },
    /// Score images and write `path,score,prediction`.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        svr: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, AUC and the per-quality table on a mapped manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        svr: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// key:value report file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the tiny model.
    Gradcheck,
    /// Save per-block channel-mean feature maps as grayscale PNGs.
    DumpMaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        blocks: usize,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn model_config(preset: Preset, input_size: Option<usize>, ssaa_blocks: Option<usize>, seed: u64) -> ModelConfig {
    let mut cfg = match preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Tiny => ModelConfig::tiny(),
        Preset::Full => ModelConfig::full_scale(),
    };
    cfg.input_size = input_size.unwrap_or(cfg.input_size);
    cfg.ssaa_blocks = ssaa_blocks.unwrap_or(cfg.ssaa_blocks);
    cfg.seed = seed;
    cfg
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen { out, n_real, n_fake, image_size, blur_levels, asymmetry, noise } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                n_real,
                n_fake,
                image_size,
                blur_levels: blur_levels.unwrap_or(defaults.blur_levels),
                asymmetry_strength: asymmetry,
                noise_std: noise,
                seed,
            };
            let manifest = gen_synthetic(&cfg, &out)?;
            println!("wrote {} images and {}", n_real + n_fake, manifest.display());
        }
        Command::MapQuality { manifest, out, stats, write_stats } => {
            let mut records = ingest_manifest(&manifest)?;
            let stats = match stats {
                Some(p) => parse_stats(
                    &std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?,
                )?,
                None => QualityStats::fit(&records)?,
            };
            assign_targets(&mut records, &stats)?;
            write_manifest_relative(&out, &records, true)?;
            if let Some(p) = write_stats {
                write_text(&p, &stats_to_string(&stats))?;
            }
            println!("mapped {} records into {}", records.len(), out.display());
        }
        Command::TrainBackbone {
            manifest,
            out,
            preset,
            input_size,
            ssaa_blocks,
            epochs,
            batch_size,
            lr,
            weight_decay,
            constant_lr,
            loss_log,
        } => {
            let records = ingest_manifest(&manifest)?;
            let cfg = model_config(preset, input_size, ssaa_blocks, seed);
            let train = TrainConfig { epochs, batch_size, lr, weight_decay, cosine_schedule: !constant_lr, seed };
            let outcome = train_backbone(&records, &cfg, &train)?;
            let mut log = String::new();
            for (i, l) in outcome.loss_log.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.6}", i + 1);
                log.push_str(&format!("{}: {l}\n", i + 1));
            }
            save_model(&outcome.model, &out)?;
            if let Some(p) = loss_log {
                write_text(&p, &log)?;
            }
            println!("saved {}", out.display());
        }
        Command::ExtractFeatures { model, manifest, out } => {
            let model = load_model(&model)?;
            let records = ingest_manifest(&manifest)?;
            let set = extract_features(&model, &records)?;
            write_features(&out, &set)?;
            println!("wrote {} feature rows to {}", set.features.len(), out.display());
        }
        Command::TrainSvr { features, out, c, epsilon, tolerance, max_passes, sigma } => {
            let set = read_features(&features)?;
            let sigma = if sigma.eq_ignore_ascii_case("median") {
                Sigma::Median
            } else {
                Sigma::Fixed(sigma.parse().map_err(|_| Error::Config(format!("invalid sigma '{sigma}'")))?)
            };
            let cfg = SvrConfig { c, epsilon, tolerance, max_passes, sigma, seed };
            let model = svr_fit(&set.features, &set.targets, &cfg)?;
            save_svr(&model, &out)?;
            println!(
                "fitted {} support vectors (sigma {:.6}, bias {:.6}); saved {}",
                model.support_vectors.len(),
                model.sigma,
                model.bias,
                out.display()
            );
        }
        Command::Score { model, svr, manifest, out } => {
            let model = load_model(&model)?;
            let svr = load_svr(&svr)?;
            let records = ingest_manifest(&manifest)?;
            let set = extract_features(&model, &records)?;
            let scores = clamped_scores(&svr, &set.features)?;
            let mut text = String::from("path,score,prediction\n");
            for (r, s) in records.iter().zip(&scores) {
                text.push_str(&format!("{},{s},{}\n", r.image_path, threshold_classify(*s)?));
            }
            write_text(&out, &text)?;
            println!("scored {} images into {}", scores.len(), out.display());
        }
        Command::Eval { model, svr, manifest, report } => {
            let model = load_model(&model)?;
            let svr = load_svr(&svr)?;
            let records = ingest_manifest(&manifest)?;
            let r = evaluate(&model, &svr, &records)?;
            print!("{}", r.to_table());
            if let Some(p) = report {
                write_text(&p, &r.to_key_values())?;
            }
        }
        Command::Gradcheck => {
            let results = pipeline::diagnostics::gradient_suite(seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<20} {:>12.3e}  (< {:.0e})  {status}", r.name, r.max_rel_error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks failed")));
            }
        }
        Command::DumpMaps { model, image, out, blocks } => {
            let model = load_model(&model)?;
            let img = load_image(&image)?;
            let paths = dump_feature_maps(&model, &img, &out, blocks)?;
            println!("wrote {} maps to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
