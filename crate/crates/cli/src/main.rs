use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use binauralize::checkpoint::Checkpoint;
use binauralize::config::RunConfig;
use binauralize::dataset::{
    assign_splits, ingest_stereo, load_corpus, oracle_bounds, oracle_check, read_manifest,
    write_manifest, write_synthetic_corpus, ClipFeatures, ManifestRecord, Split, MANIFEST_NAME,
};
use binauralize::eval::{evaluate, spatialize, Protocol};
use binauralize::features::{load_precomputed, save_precomputed, ProviderKind, SYNTHETIC_DIM};
use binauralize::model::ModelState;
use binauralize::trainer::{best_checkpoint_path, fit};
use binauralize::wav::{read_wav, resample, write_wav, WavFormat};
use binauralize::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "binauralize", version, about = "Visually guided mono-to-stereo spatialization")]
struct Cli {
    /// Default location of corpora and manifests.
    #[arg(long, env = "BINAURALIZE_DATA", default_value = "data", global = true)]
    data: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    All,
    Filtered,
    Both,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::All => Protocol::All,
            ProtocolArg::Filtered => Protocol::Filtered,
            ProtocolArg::Both => Protocol::Both,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    /// Full objective.
    Asn,
    /// lambda_cls = 0.
    NoCls,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic panned-scene corpus.
    SynthData {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SYNTHETIC_DIM)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0.9)]
        train_ratio: f64,
        /// Defaults to the data root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ingest stereo recordings with precomputed features: every `<stem>.wav`
    /// needs `<stem>.feat`, and `<stem>.flipped.feat` enables augmentation.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        train_ratio: f64,
        #[arg(long)]
        feature_dim: Option<usize>,
    },
    /// Train into `<out>/asn` and/or `<out>/asn_no_cls`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Variant::Asn)]
        variant: Variant,
        /// Epoch checkpoint to continue from (single variant only).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score MONO and trained checkpoints on the test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint trained with lambda_cls = 0.
        #[arg(long)]
        ablation_checkpoint: Option<PathBuf>,
        #[arg(long)]
        threshold_db: Option<f64>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a mono recording into stereo guided by its features.
    Spatialize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify ratio masks of a synthetic corpus against its pan oracle.
    OracleCheck {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A failed check that is not an input or runtime error.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidInput(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<CheckFailed>().is_some()
            || e.downcast_ref::<Error>().is_some_and(Error::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn manifest_path(data: &Path, manifest: Option<PathBuf>) -> PathBuf {
    manifest.unwrap_or_else(|| data.join(MANIFEST_NAME))
}

fn cmd_synth_data(
    n: usize,
    duration: f64,
    seed: u64,
    feature_dim: usize,
    train_ratio: f64,
    out: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(invalid("nothing to generate: --n is 0"));
    }
    if !(duration > 0.0) {
        return Err(invalid("--duration must be positive"));
    }
    let manifest = write_synthetic_corpus(out, n, duration, seed, feature_dim, train_ratio)?;
    println!("wrote {n} clips; manifest {}", manifest.display());
    Ok(())
}

fn cmd_prepare(input: &Path, out: &Path, seed: u64, train_ratio: f64, dim: Option<usize>) -> Result<()> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("cannot read {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    if wavs.len() < 2 {
        return Err(invalid(format!("{}: need at least 2 recordings", input.display())));
    }
    let mut clips = Vec::new();
    let mut sources = Vec::new();
    for wav in &wavs {
        let stem = wav.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?;
        let feat = input.join(format!("{stem}.feat"));
        if !feat.exists() {
            return Err(invalid(format!("missing feature file {}", feat.display())));
        }
        let flipped = input.join(format!("{stem}.flipped.feat"));
        let flipped = flipped.exists().then_some(vec![flipped]);
        let features = ClipFeatures::load(&[feat.clone()], flipped.as_deref(), ProviderKind::Precomputed, dim)?;
        clips.push(ingest_stereo(wav, stem, features)?);
        sources.push(flipped.is_some());
    }
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let splits = assign_splits(&ids, train_ratio, seed)?;
    for sub in ["audio", "features"] {
        std::fs::create_dir_all(out.join(sub)).with_context(|| format!("cannot create {}", out.display()))?;
    }
    let mut records = Vec::new();
    for ((clip, split), has_flipped) in clips.iter().zip(splits).zip(sources) {
        let audio = format!("audio/{}.wav", clip.id);
        let feat = format!("features/{}.feat", clip.id);
        write_wav(&out.join(&audio), &clip.stereo, WavFormat::Float32)?;
        save_precomputed(&out.join(&feat), &clip.features)?;
        let flipped = match (&clip.features_flipped, has_flipped) {
            (Some(track), true) => {
                let p = format!("features/{}.flipped.feat", clip.id);
                save_precomputed(&out.join(&p), track)?;
                Some(vec![p])
            }
            _ => None,
        };
        records.push(ManifestRecord {
            id: clip.id.clone(),
            audio_path: audio,
            feature_paths: vec![feat],
            flipped_feature_paths: flipped,
            provider: ProviderKind::Precomputed,
            split,
            oracle: None,
        });
    }
    let manifest = out.join(MANIFEST_NAME);
    write_manifest(&manifest, &records)?;
    println!("ingested {} recordings; manifest {}", records.len(), manifest.display());
    Ok(())
}

fn cmd_train(
    cfg: RunConfig,
    manifest: &Path,
    out: &Path,
    variant: Variant,
    resume: Option<&Path>,
) -> Result<()> {
    if resume.is_some() && variant == Variant::Both {
        return Err(invalid("--resume needs a single --variant"));
    }
    let corpus = load_corpus(manifest, Some(cfg.feature_dim))?;
    let stft = cfg.stft();
    let runs: Vec<(&str, f64)> = match variant {
        Variant::Asn => vec![("asn", cfg.lambda_cls)],
        Variant::NoCls => vec![("asn_no_cls", 0.0)],
        Variant::Both => vec![("asn", cfg.lambda_cls), ("asn_no_cls", 0.0)],
    };
    for (name, lambda) in runs {
        let mut train = cfg.train();
        train.lambda_cls = lambda;
        let init = ModelState::init(cfg.synth(), cfg.classifier(), train.seed)?;
        let dir = out.join(name);
        let report = fit(&corpus, init, &stft, &train, &dir, resume)?;
        println!(
            "{name}: {} steps, best epoch {} (validation distance {:.5}), checkpoint {}",
            report.last.step,
            report.best_epoch,
            report.best_val,
            best_checkpoint_path(&dir).display()
        );
    }
    Ok(())
}

fn check_compatible(ck: &Checkpoint, path: &Path, cfg: &RunConfig) -> Result<()> {
    if ck.stft.fft_size != cfg.fft_size {
        return Err(Error::ConfigMismatch(format!(
            "{}: checkpoint fft_size {} but config fft_size {}",
            path.display(),
            ck.stft.fft_size,
            cfg.fft_size
        ))
        .into());
    }
    if ck.model.synth_cfg.feature_dim != cfg.feature_dim {
        return Err(Error::ConfigMismatch(format!(
            "{}: checkpoint feature dim {} but config feature_dim {}",
            path.display(),
            ck.model.synth_cfg.feature_dim,
            cfg.feature_dim
        ))
        .into());
    }
    if ck.stft != cfg.stft() {
        return Err(Error::ConfigMismatch(format!(
            "{}: checkpoint STFT {:?} differs from config {:?}",
            path.display(),
            ck.stft,
            cfg.stft()
        ))
        .into());
    }
    Ok(())
}

fn cmd_eval(
    mut cfg: RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    ablation: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let asn = Checkpoint::load(checkpoint)?;
    check_compatible(&asn, checkpoint, &cfg)?;
    let no_cls = ablation
        .map(|p| -> Result<Checkpoint> {
            let ck = Checkpoint::load(p)?;
            check_compatible(&ck, p, &cfg)?;
            Ok(ck)
        })
        .transpose()?;
    let test: Vec<_> = load_corpus(manifest, Some(cfg.feature_dim))?
        .into_iter()
        .filter(|c| c.split == Split::Test)
        .collect();
    if test.is_empty() {
        return Err(invalid(format!("{}: no test clips", manifest.display())));
    }
    cfg.chunk_s = asn.train.as_ref().map_or(cfg.chunk_s, |t| t.chunk_s);
    let report = evaluate(
        &test,
        &asn.model,
        no_cls.as_ref().map(|c| &c.model),
        &cfg.stft(),
        &cfg.eval_options(),
    )?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        std::fs::write(dir.join("report.json"), report.to_json())
            .with_context(|| format!("cannot write {}", dir.join("report.json").display()))?;
        std::fs::write(dir.join("report.txt"), &table)
            .with_context(|| format!("cannot write {}", dir.join("report.txt").display()))?;
    }
    Ok(())
}

fn cmd_spatialize(checkpoint: &Path, input: &Path, features: &Path, out: &Path) -> Result<()> {
    let raw = read_wav(input)?;
    if raw.n_channels() != 1 {
        return Err(invalid(format!(
            "{}: input is already spatial ({} channels); a mono recording is required",
            input.display(),
            raw.n_channels()
        )));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let track = load_precomputed(features, Some(ck.model.synth_cfg.feature_dim))?;
    let mono = resample(&raw, binauralize::dsp::DEFAULT_SAMPLE_RATE)?;
    let chunk_s = ck.train.as_ref().map_or(1.0, |t| t.chunk_s);
    let result = spatialize(&ck.model, &mono, &track, &ck.stft, chunk_s)?;
    write_wav(out, &result.stereo, WavFormat::Float32)?;
    for (i, lat) in result.lateralization.iter().enumerate() {
        println!("chunk {i:4}  lateralization {lat:+.4}");
    }
    println!("wrote {} ({:.3} s)", out.display(), result.stereo.duration_s());
    Ok(())
}

fn cmd_oracle_check(manifest: &Path, cfg: &RunConfig) -> Result<()> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(invalid(format!("{}: manifest is empty", manifest.display())));
    }
    if let Some(r) = records.iter().find(|r| r.oracle.is_none()) {
        return Err(invalid(format!(
            "{}: clip {} lacks oracle metadata",
            manifest.display(),
            r.id
        )));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let stft = cfg.stft();
    let mut failed = Vec::new();
    for rec in &records {
        let clip = binauralize::dataset::load_clip(base, rec, None)?;
        let pan = clip.oracle_pan.as_deref().unwrap_or_default();
        let (floor_db, tol) = oracle_bounds(pan);
        let check = oracle_check(&clip, &stft, floor_db)?;
        let ok = check.max_error <= tol;
        println!(
            "{} {}  max error {:.4} (tolerance {tol}, {} bins within {floor_db} dB)",
            if ok { "PASS" } else { "FAIL" },
            rec.id,
            check.max_error,
            check.checked_bins
        );
        if !ok {
            failed.push(rec.id.clone());
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(format!(
            "oracle check failed for {} clip(s): {}",
            failed.len(),
            failed.join(", ")
        ))
        .into());
    }
    println!("all {} clips consistent", records.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let data = cli.data;
    match cli.command {
        Command::SynthData {
            n,
            duration,
            seed,
            feature_dim,
            train_ratio,
            out,
        } => cmd_synth_data(n, duration, seed, feature_dim, train_ratio, &out.unwrap_or(data)),
        Command::Prepare {
            input,
            out,
            seed,
            train_ratio,
            feature_dim,
        } => cmd_prepare(&input, &out.unwrap_or(data), seed, train_ratio, feature_dim),
        Command::Train {
            config,
            manifest,
            out,
            seed,
            variant,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_train(cfg, &manifest_path(&data, manifest), &out, variant, resume.as_deref())
        }
        Command::Eval {
            config,
            manifest,
            checkpoint,
            ablation_checkpoint,
            threshold_db,
            protocol,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(t) = threshold_db {
                cfg.threshold_db = t;
            }
            if let Some(p) = protocol {
                cfg.protocol = p.into();
            }
            cmd_eval(
                cfg,
                &manifest_path(&data, manifest),
                &checkpoint,
                ablation_checkpoint.as_deref(),
                out.as_deref(),
            )
        }
        Command::Spatialize {
            checkpoint,
            input,
            features,
            out,
        } => cmd_spatialize(&checkpoint, &input, &features, &out),
        Command::OracleCheck { manifest, config } => {
            let cfg = load_config(config.as_deref())?;
            cmd_oracle_check(&manifest_path(&data, manifest), &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&invalid("x")), 1);
        assert_eq!(exit_code(&CheckFailed("x".into()).into()), 1);
        let io: anyhow::Error = Error::Io {
            path: "a".into(),
            source: std::io::Error::other("boom"),
        }
        .into();
        assert_eq!(exit_code(&io), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
    }

    #[test]
    fn bail_is_runtime() {
        fn f() -> Result<()> {
            anyhow::bail!("runtime")
        }
        assert_eq!(exit_code(&f().unwrap_err()), 2);
    }
}
