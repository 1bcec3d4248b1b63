use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use respcl::config::{ExperimentConfig, Regime};
use respcl::dsp;
use respcl::manifest::{
    ingest_icbhi, ingest_sprsound, read_manifest, validate_manifest, write_manifest, Dataset, Manifest, Split,
};
use respcl::nn::{load_checkpoint, save_checkpoint, LoadMode, Model};
use respcl::rundir::{self, RunDir, ScoreFile};
use respcl::synthgen::{generate, SynthSpec};
use respcl::train::{self, FeatureSet};
use respcl::Error;

/// Overrides `data.cache_dir` for every subcommand.
const CACHE_ENV: &str = "RESPCL_CACHE_DIR";

#[derive(Parser)]
#[command(name = "respcl", version, about = "Contrastive respiratory sound classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Icbhi,
    Sprsound,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a manifest from a dataset directory.
    Ingest {
        #[arg(long, value_enum)]
        dataset: DatasetArg,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpus and its manifest.
    Synth {
        /// TOML file with generator settings; defaults apply otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute and cache log-mel features for a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache directory (falls back to $RESPCL_CACHE_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiment config supplying the mel parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one run into a new run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Overrides `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Initial weights; a checkpoint with different heads loads encoder-only.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Refit the linear probe of a two-stage run on its frozen encoder.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a run's best checkpoint on the manifest's test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Aggregate scores over runs into a mean ± std table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Ingest { dataset, root, out } => ingest(dataset, &root, &out),
        Cmd::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed),
        Cmd::Preprocess { manifest, out, config } => preprocess(&manifest, out, config.as_deref()),
        Cmd::Train {
            config,
            out,
            seed,
            regime,
            manifest,
            from_checkpoint,
        } => train_cmd(&config, &out, seed, regime, manifest, from_checkpoint.as_deref()),
        Cmd::Probe { run, manifest } => probe(&run, manifest),
        Cmd::Eval { run, manifest } => eval(&run, manifest),
        Cmd::Report { runs } => report(&runs),
    }
}

fn ingest(dataset: DatasetArg, root: &Path, out: &Path) -> Result<()> {
    let (dataset, records) = match dataset {
        DatasetArg::Icbhi => (Dataset::Icbhi, ingest_icbhi(root)?),
        DatasetArg::Sprsound => (Dataset::Sprsound, ingest_sprsound(root)?),
    };
    let m = Manifest { dataset, records };
    let report = validate_manifest(&m);
    for v in &report.violations {
        log::warn!("{}: {}", v.cycle_id, v.kind);
    }
    write_manifest(out, &m)?;
    print!("{report}");
    Ok(())
}

fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut s = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthSpec::from_toml_str(&text)?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let out = generate(&s, out)?;
    println!(
        "{} records in {} files; manifest {}",
        out.manifest.records.len(),
        out.audio_files.len(),
        out.manifest_path.display()
    );
    Ok(())
}

fn cache_override(cfg: &mut ExperimentConfig) {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        cfg.data.cache_dir = Some(PathBuf::from(dir));
    }
}

fn preprocess(manifest: &Path, out: Option<PathBuf>, config: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cache_override(&mut cfg);
    let dir = out
        .or(cfg.data.cache_dir.clone())
        .context("no cache directory: pass --out or set RESPCL_CACHE_DIR")?;
    let m = read_manifest(manifest)?;
    let grids = dsp::features_for_records(&m.records, &cfg.mel)?;
    let hash = cfg.mel.hash();
    for (r, g) in m.records.iter().zip(&grids) {
        dsp::write_cached(&dir, &r.cycle_id, g, &hash)?;
    }
    println!("cached {} grids in {} (params {hash})", grids.len(), dir.display());
    Ok(())
}

fn load_manifest(cfg: &mut ExperimentConfig, flag: Option<PathBuf>) -> Result<Manifest> {
    if let Some(p) = flag {
        cfg.data.manifest = Some(p);
    }
    let path = cfg
        .data
        .manifest
        .clone()
        .context("no manifest: set data.manifest or pass --manifest")?;
    let abs = std::path::absolute(&path).with_context(|| format!("resolving {}", path.display()))?;
    cfg.data.manifest = Some(abs.clone());
    Ok(read_manifest(&abs)?)
}

fn train_cmd(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    regime: Option<Regime>,
    manifest: Option<PathBuf>,
    from_checkpoint: Option<&Path>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = regime {
        cfg.regime.kind = r;
    }
    cache_override(&mut cfg);
    let m = load_manifest(&mut cfg, manifest)?;
    cfg.validate()?;
    let set = FeatureSet::from_manifest(&m, &cfg)?;
    let mut model = train::init_model(&cfg, set.n_classes)?;
    if let Some(dir) = from_checkpoint {
        let ck = load_checkpoint(dir)?;
        match ck.apply_to(&mut model, LoadMode::Full) {
            Ok(()) => log::info!("initialized all weights from {}", dir.display()),
            Err(Error::FingerprintMismatch { .. }) => {
                ck.apply_to(&mut model, LoadMode::EncoderOnly)?;
                log::info!("initialized encoder weights from {}", dir.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let dir = RunDir::create(out, &cfg)?;
    let mut logger = dir.logger(&cfg)?;
    let res = train::run(&cfg, &set, model, Some(&dir.root), &mut logger)?;
    let sf = dir.finish(&cfg, &res, m.dataset.labels())?;
    print!("{}", rundir::render_scores(&sf));
    Ok(())
}

fn open_run(run: &Path, manifest: Option<PathBuf>) -> Result<(RunDir, ExperimentConfig, Manifest, FeatureSet)> {
    let dir = RunDir::open(run)?;
    let mut cfg = dir.config()?;
    cache_override(&mut cfg);
    let m = load_manifest(&mut cfg, manifest)?;
    let set = FeatureSet::from_manifest(&m, &cfg)?;
    Ok((dir, cfg, m, set))
}

fn load_model(dir: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint(dir)?.instantiate()?)
}

fn probe(run: &Path, manifest: Option<PathBuf>) -> Result<()> {
    let (dir, cfg, m, set) = open_run(run, manifest)?;
    if !cfg.regime.kind.uses_probe() {
        bail!("regime {} trains its classifier jointly; nothing to probe", cfg.regime.kind);
    }
    let mut model = load_model(&dir.checkpoint_dir("last"))?;
    let splits = train::Splits::new(&set, &cfg)?;
    let p = train::fit_probe(&mut model, &set, &splits, &cfg)?;
    dir.write_probe_log(&p.log)?;
    let best = train::attach_probe(&cfg, &model, &p.probe, set.n_classes)?;
    save_checkpoint(&best, 0, &dir.checkpoint_dir("best"))?;
    let sf = ScoreFile::new(&cfg, p.best_epoch, p.best, p.best_confusion, m.dataset.labels());
    dir.write_scores(&sf)?;
    print!("{}", rundir::render_scores(&sf));
    Ok(())
}

fn eval(run: &Path, manifest: Option<PathBuf>) -> Result<()> {
    let (dir, cfg, m, set) = open_run(run, manifest)?;
    let mut model = load_model(&dir.checkpoint_dir("best"))?;
    let idx = set.indices(Split::Test);
    let pred = train::predict(&mut model, &set, &idx, cfg.optimizer.batch_size)?;
    let conf = train::confusion_for(&set, &idx, &pred)?;
    let score = respcl::eval::score(&conf, set.normal_class, cfg.eval.sensitivity)?;
    let labels = m.dataset.labels();
    let mut csv = String::from("cycle_id,truth,prediction\n");
    for (&i, &p) in idx.iter().zip(&pred) {
        csv.push_str(&format!("{},{},{}\n", set.cycle_ids[i], labels[set.classes[i]], labels[p]));
    }
    std::fs::write(dir.path("eval.csv"), csv)?;
    let sf = ScoreFile::new(&cfg, 0, score, conf, labels);
    print!("{}", rundir::render_scores(&sf));
    Ok(())
}

fn report(runs: &[PathBuf]) -> Result<()> {
    let scores = runs
        .iter()
        .map(|r| RunDir::open(r).and_then(|d| d.scores()).with_context(|| r.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let (_, table) = rundir::report_table(&scores);
    print!("{table}");
    Ok(())
}
