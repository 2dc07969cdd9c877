//! `rdvq`: train, code, evaluate and analyze rate-distortion optimized
//! vector-quantized image compression models.
//!
//! Exit codes: 0 on success, 2 for usage and contract errors, 3 when a
//! bitstream does not match the bundle it is decoded with.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rdvq_core::analysis::{pca_csv, pca_over_images, usage_csv, usage_over_images, usage_summary_csv};
use rdvq_core::config::{Config, CorpusConfig};
use rdvq_core::corpus::generate_image;
use rdvq_core::error::{Error, Result};
use rdvq_core::losses::{schedule, train_csv};
use rdvq_core::pipeline::{
    baseline_zero_pad, compress, decompress, eval_csv, eval_images, train_stage, ModelBundle,
    SuffixMode,
};
use rdvq_core::tensor::Tensor;

mod ppm;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "rdvq", version, about = "Vector-quantized image codec with learned rate control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write the updated bundle.
    Train {
        /// Training stage: 1 distortion, 2 rate, 3 joint.
        #[arg(long)]
        stage: u8,
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output bundle directory (also receives the stage's CSV log).
        #[arg(long)]
        out: PathBuf,
        /// Bundle to continue from; required for stages 2 and 3.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Parameter initialization seed (stage 1 only).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compress one PPM image; prints the achieved bits per pixel.
    Encode {
        /// Input image (binary PPM, maxval 255).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Fraction of order levels to transmit, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        prefix: f64,
        /// Output bitstream path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompress a bitstream back into a PPM image.
    Decode {
        /// Input bitstream.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
        /// How untransmitted tokens are filled in.
        #[arg(long, value_enum, default_value_t = Fill::Complete)]
        mode: Fill,
    },
    /// Rate/distortion evaluation over a corpus, written as CSV.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Directory of PPM images; defaults to the bundle's synthetic corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Measure every populated prefix level instead of full streams only.
        #[arg(long)]
        sweep_prefix: bool,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export codebook-usage and principal-component CSVs.
    Analyze {
        #[arg(long)]
        bundle: PathBuf,
        /// Directory of PPM images; defaults to the bundle's synthetic corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory for usage.csv, usage_summary.csv and pca.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus to disk as PPM files.
    GenCorpus {
        /// gradients, checkerboards, blobs, textures or mixed.
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, default_value_t = 24)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Fill {
    Complete,
    Zeropad,
}

// ---------------------------------------------------------------------------
// Corpus plumbing
// ---------------------------------------------------------------------------

/// Load every `.ppm` in a directory, sorted by file name for determinism.
fn load_corpus_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::contract(format!(
            "no .ppm files in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, ppm::read(&p)?))
        })
        .collect()
}

fn synthesize_corpus(cfg: &CorpusConfig) -> Result<Vec<(String, Tensor)>> {
    (0..cfg.count)
        .map(|i| Ok((format!("{}{:04}", cfg.kind, i), generate_image(cfg, i)?)))
        .collect()
}

/// Corpus for a command: an explicit directory wins, then the config's
/// `path`, then synthetic generation.
fn resolve_corpus(dir: Option<&Path>, cfg: &CorpusConfig) -> Result<Vec<(String, Tensor)>> {
    match dir {
        Some(d) => load_corpus_dir(d),
        None => match &cfg.path {
            Some(p) => load_corpus_dir(Path::new(p)),
            None => synthesize_corpus(cfg),
        },
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(stage: u8, config: &Path, out: &Path, bundle: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let mut b = match bundle {
        Some(dir) => {
            let loaded = ModelBundle::load(dir)?;
            if loaded.config != cfg {
                return Err(Error::contract(format!(
                    "bundle {} was trained with a different configuration",
                    dir.display()
                )));
            }
            loaded
        }
        None => {
            if stage > 1 {
                return Err(Error::contract(format!(
                    "stage {stage} continues training: pass the stage {} bundle via --bundle",
                    stage - 1
                )));
            }
            ModelBundle::init(cfg.clone(), seed)?
        }
    };
    let rd = schedule(&cfg.schedule.regime, cfg.schedule.level)?;
    let images: Vec<Tensor> = resolve_corpus(None, &cfg.corpus)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let rows = train_stage(&mut b, stage, &rd, &images)?;
    b.save(out)?;
    std::fs::write(out.join(format!("train_stage{stage}.csv")), train_csv(&rows))?;
    let last = rows.last().expect("at least one step");
    eprintln!(
        "stage {stage}: {} steps on {} images, final mse {:.6}, rate {:.4} bits/token",
        rows.len(),
        images.len(),
        last.mse,
        last.rate_bits
    );
    eprintln!("bundle written to {}", out.display());
    Ok(())
}

fn cmd_encode(input: &Path, bundle: &Path, prefix: f64, out: &Path) -> Result<()> {
    let b = ModelBundle::load(bundle)?;
    let image = ppm::read(input)?;
    let (stream, stats) = compress(&b, &image, prefix)?;
    std::fs::write(out, stream.to_bytes()?)?;
    println!("bpp {:.6}", stats.bpp);
    Ok(())
}

fn cmd_decode(input: &Path, bundle: &Path, out: &Path, mode: Fill) -> Result<()> {
    let b = ModelBundle::load(bundle)?;
    let bytes = std::fs::read(input)?;
    let stream = rdvq_core::coder::Bitstream::from_bytes(&bytes)?;
    let image = match mode {
        Fill::Complete => decompress(&b, &stream, SuffixMode::Complete)?,
        Fill::Zeropad => baseline_zero_pad(&b, &stream)?,
    };
    ppm::write(out, &image)?;
    Ok(())
}

fn cmd_eval(bundle: &Path, corpus: Option<&Path>, sweep: bool, out: &Path) -> Result<()> {
    let b = ModelBundle::load(bundle)?;
    let images = resolve_corpus(corpus, &b.config.corpus)?;
    let rows = eval_images(&b, &images, sweep)?;
    std::fs::write(out, eval_csv(&rows))?;
    eprintln!("{} rows over {} images -> {}", rows.len(), images.len(), out.display());
    Ok(())
}

fn cmd_analyze(bundle: &Path, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let b = ModelBundle::load(bundle)?;
    let images: Vec<(String, Tensor)> = resolve_corpus(corpus, &b.config.corpus)?;
    std::fs::create_dir_all(out)?;

    let plain: Vec<Tensor> = images.iter().map(|(_, t)| t.clone()).collect();
    let usage = usage_over_images(&b, &plain)?;
    std::fs::write(out.join("usage.csv"), usage_csv(&usage))?;
    std::fs::write(out.join("usage_summary.csv"), usage_summary_csv(&usage))?;

    let projections = pca_over_images(&b, &images)?;
    std::fs::write(out.join("pca.csv"), pca_csv(&projections))?;
    eprintln!(
        "{} tokens, {} used codewords, entropy {:.4} -> {}",
        usage.total_tokens,
        usage.used_codewords,
        usage.normalized_entropy,
        out.display()
    );
    Ok(())
}

fn cmd_gen_corpus(kind: &str, count: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = CorpusConfig {
        kind: kind.to_string(),
        count,
        image_size: size,
        seed,
        path: None,
    };
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let img = generate_image(&cfg, i)?;
        ppm::write(&out.join(format!("{i:04}.ppm")), &img)?;
    }
    eprintln!("{count} {kind} images of {size}x{size} -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            stage,
            config,
            out,
            bundle,
            seed,
        } => cmd_train(stage, &config, &out, bundle.as_deref(), seed),
        Command::Encode {
            input,
            bundle,
            prefix,
            out,
        } => cmd_encode(&input, &bundle, prefix, &out),
        Command::Decode {
            input,
            bundle,
            out,
            mode,
        } => cmd_decode(&input, &bundle, &out, mode),
        Command::Eval {
            bundle,
            corpus,
            sweep_prefix,
            out,
        } => cmd_eval(&bundle, corpus.as_deref(), sweep_prefix, &out),
        Command::Analyze {
            bundle,
            corpus,
            out,
        } => cmd_analyze(&bundle, corpus.as_deref(), &out),
        Command::GenCorpus {
            kind,
            count,
            size,
            seed,
            out,
        } => cmd_gen_corpus(&kind, count, size, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_resolution_prefers_explicit_directory() {
        let tmp = std::env::temp_dir().join(format!("rdvq-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&tmp).unwrap();
        let cfg = CorpusConfig {
            kind: "gradients".into(),
            count: 3,
            image_size: 8,
            seed: 1,
            path: None,
        };
        let img = generate_image(&cfg, 0).unwrap();
        ppm::write(&tmp.join("b.ppm"), &img).unwrap();
        ppm::write(&tmp.join("a.ppm"), &img).unwrap();
        let loaded = resolve_corpus(Some(&tmp), &cfg).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a");
        assert_eq!(loaded[1].0, "b");
        let synth = resolve_corpus(None, &cfg).unwrap();
        assert_eq!(synth.len(), 3);
        assert_eq!(synth[0].0, "gradients0000");
        std::fs::remove_dir_all(&tmp).unwrap();
    }

    #[test]
    fn unrelated_files_are_ignored_when_loading() {
        let tmp = std::env::temp_dir().join(format!("rdvq-mixeddir-{}", std::process::id()));
        std::fs::create_dir_all(&tmp).unwrap();
        std::fs::write(tmp.join("notes.txt"), "hello").unwrap();
        let cfg = CorpusConfig {
            kind: "blobs".into(),
            count: 1,
            image_size: 8,
            seed: 2,
            path: None,
        };
        ppm::write(&tmp.join("x.ppm"), &generate_image(&cfg, 0).unwrap()).unwrap();
        let loaded = load_corpus_dir(&tmp).unwrap();
        assert_eq!(loaded.len(), 1);
        std::fs::remove_dir_all(&tmp).unwrap();
    }
}
