use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use consult::bank::{hex, save_overlay, score_image, MemoryBank};
use consult::extractor::initial_weights;
use consult::harness::{
    execute, few_shots, generate_surrogate, open_store, preset, sweep_ablation, DataSource, ExperimentConfig, Label,
    Manifest, SweepCell, SweepGrid,
};
use consult::nn::WeightSet;
use consult::synthlab::build_pair_dataset_with;
use consult::trainer::{train_stage1, TrainSink};
use consult::{ConsultError, GrayImage, Result};

#[derive(Parser)]
#[command(name = "consult", version, about = "Few-shot anomaly detection with a fine-tuned patch memory bank")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the few shots and write the augmented and defect training images.
    Synth,
    /// Fine-tune the backbone on the synthesised pairs.
    Train,
    /// Build the patch memory bank from the few shots.
    BuildBank {
        /// Trained weights; the untrained initialisation when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score images against a saved bank.
    Score {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Run the full protocol and report AUROC.
    Eval,
    /// Run one experiment per ablation cell.
    Sweep {
        /// `loss` or `model`.
        #[arg(long, conflicts_with = "grid")]
        preset: Option<String>,
        /// JSON file with sweep axes.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Write a surrogate phantom dataset as PNG folders.
    PhantomGen,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::BuildBank { .. } => "build-bank",
            Command::Score { .. } => "score",
            Command::Eval => "eval",
            Command::Sweep { .. } => "sweep",
            Command::PhantomGen => "phantom-gen",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn run(cli: &Cli, cfg: &ExperimentConfig, m: &mut Manifest) -> Result<()> {
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    m.seed("master", cfg.seed);
    match &cli.command {
        Command::Synth => {
            let store = open_store(cfg)?;
            let (ids, few) = few_shots(&store, cfg)?;
            let t = &cfg.train;
            let ds = build_pair_dataset_with(&few, t.n_normal_aug, t.n_anomalous, &t.defect, &t.augment, cfg.seed)?;
            ds.write_to(&out.join("dataset"))?;
            log::info!("few shots: {ids:?}");
            m.output(out.join("dataset"));
        }
        Command::Train => {
            let store = open_store(cfg)?;
            let (_, few) = few_shots(&store, cfg)?;
            let t = &cfg.train;
            let ds = build_pair_dataset_with(&few, t.n_normal_aug, t.n_anomalous, &t.defect, &t.augment, cfg.seed)?;
            let init = initial_weights(&cfg.extractor, cfg.seed, &few)?;
            let sink = TrainSink::new(out)?;
            let res = train_stage1(&ds, &cfg.extractor, t, &init, Some(&sink))?;
            let path = out.join("weights.cwt");
            res.weights.save(&path)?;
            m.fingerprint("initial_weights", hex(&init.digest()));
            m.fingerprint("weights", hex(&res.weights.digest()));
            m.output(&path).output(sink.stats_path());
        }
        Command::BuildBank { weights } => {
            let store = open_store(cfg)?;
            let (_, few) = few_shots(&store, cfg)?;
            let ws = match weights {
                Some(p) => WeightSet::load(p)?,
                None => initial_weights(&cfg.extractor, cfg.seed, &few)?,
            };
            let bank = consult::bank::build_bank(&few, &ws, &cfg.extractor, &cfg.bank, cfg.seed)?;
            let path = out.join("bank.cslt");
            bank.save(&path)?;
            m.fingerprint("weights", hex(&ws.digest()));
            m.fingerprint("bank", hex(&bank.fingerprint));
            m.output(&path);
        }
        Command::Score { bank, weights, images } => {
            let bank = MemoryBank::load(bank)?;
            let ws = WeightSet::load(weights)?;
            m.fingerprint("weights", hex(&ws.digest()));
            m.fingerprint("bank", hex(&bank.fingerprint));
            let mut rows = Vec::new();
            for p in images {
                let img = GrayImage::load_png(p)?;
                let map = score_image(&img, &bank, &ws, &cfg.extractor, &cfg.bank)?;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let overlay = out.join(format!("{stem}_overlay.png"));
                save_overlay(&img, &map, None, &overlay)?;
                m.output(&overlay);
                rows.push(serde_json::json!({
                    "image": p.display().to_string(),
                    "score": map.image_score,
                    "raw_score": map.raw_score,
                }));
                println!("{}\t{:.6}\t{:.6}", p.display(), map.image_score, map.raw_score);
            }
            let path = out.join("scores.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
            m.output(&path);
        }
        Command::Eval => {
            let r = execute(cfg, Some(out))?;
            m.fingerprint("weights", hex(&r.weights.digest()));
            m.fingerprint("bank", r.report.fingerprint.clone());
            m.output(out.join("metrics_report.json"));
            println!("auroc {:.4}  auroc_raw {:.4}", r.report.auroc, r.report.auroc_raw);
        }
        Command::Sweep { preset: name, grid } => {
            let cells: Vec<SweepCell> = match (name, grid) {
                (Some(n), _) => preset(n)?,
                (None, Some(g)) => {
                    let text = std::fs::read_to_string(g)
                        .map_err(|e| ConsultError::Config(format!("cannot read {}: {e}", g.display())))?;
                    serde_json::from_str::<SweepGrid>(&text)
                        .map_err(|e| ConsultError::Config(format!("grid: {e}")))?
                        .cells()
                }
                (None, None) => return Err(ConsultError::Config("sweep needs --preset or --grid".into())),
            };
            let results = sweep_ablation(cfg, &cells, Some(out))?;
            for r in &results {
                let row = &r.row;
                println!(
                    "{}\tssl={}\tkoleo={}\tdepth={}\tattention={}\t{}\t{}",
                    row.loss,
                    row.ssl,
                    row.koleo,
                    row.depth,
                    row.attention,
                    row.activation,
                    row.auroc.map_or(row.status.clone(), |a| format!("{a:.4}"))
                );
            }
            m.output(out.join("ablation.csv"));
        }
        Command::PhantomGen => {
            let DataSource::Phantom(p) = &cfg.data else {
                return Err(ConsultError::Config("phantom-gen needs a phantom data section".into()));
            };
            write_phantoms(out, p, cfg.seed)?;
            m.output(out.join("train_healthy"))
                .output(out.join("test_healthy"))
                .output(out.join("test_anomalous"))
                .output(out.join("test_masks"));
        }
    }
    Ok(())
}

fn write_phantoms(out: &Path, p: &consult::harness::PhantomConfig, seed: u64) -> Result<()> {
    let data = generate_surrogate(p, seed)?;
    let dirs = ["train_healthy", "test_healthy", "test_anomalous", "test_masks"].map(|d| out.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    for (i, img) in data.pool.iter().enumerate() {
        img.save_png(dirs[0].join(format!("pool_{i:04}.png")))?;
    }
    for t in &data.test {
        let name = format!("{}.png", t.id);
        match t.label {
            Label::Healthy => t.image.save_png(dirs[1].join(&name))?,
            Label::Anomalous => {
                t.image.save_png(dirs[2].join(&name))?;
                if let Some(mask) = &t.mask {
                    mask.save_png(dirs[3].join(&name))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            if let Ok(mut m) = Manifest::new(cli.command.name(), &serde_json::Value::Null) {
                m.status = format!("error: {e}");
                let _ = m.write(&cli.out_dir);
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let mut manifest = match Manifest::new(cli.command.name(), &cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = run(&cli, &cfg, &mut manifest);
    if let Err(e) = &result {
        manifest.status = format!("error: {e}");
    }
    if let Err(e) = manifest.write(&cli.out_dir) {
        eprintln!("cannot write manifest: {e}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
