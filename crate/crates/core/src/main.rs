use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use delo::detector::DetectorParams;
use delo::eval::{evaluate, reports_csv, AuxClassifier, Protocol};
use delo::generator::{synthesize, train_generator, CheckerHeads, GeneratorParams, SyntheticSet};
use delo::pipeline::{
    make_bundle, pretrain, run_pipeline, sweep, sweep_csv, train_heads, write_text, AblationTag,
    BaseRun, ExperimentConfig, SweepAxis,
};
use delo::resample::{build_resampled_set, ResampledSet};
use delo::retrain::{plug_back, retrain_confidence};
use delo::synth::DatasetBundle;
use delo::{util, Error, Result};

#[derive(Parser)]
#[command(name = "delo", version, about = "Zero-shot detection by confidence retraining on synthetic features")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every stage. Overrides are folded into the configuration
/// before its digest is taken, so pass the same ones to every stage of a chain.
#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory of the stage.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<AblationTag>,
    /// Background/foreground ratio for resampling.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Synthetic features per seen class.
    #[arg(long, global = true)]
    n_seen: Option<usize>,
    /// Synthetic features per unseen class.
    #[arg(long, global = true)]
    n_unseen: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the class catalog and scene splits.
    GenData,
    /// Train the detector on the training split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Collect the balanced foreground/background pool.
    Resample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
    },
    /// Train the checker heads and the feature generator; heads go to `<out>/heads`.
    TrainCvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        dres: PathBuf,
    },
    /// Sample synthetic features for every class.
    Synthesize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
    },
    /// Retrain the confidence head and write the updated detector.
    RetrainConf {
        #[arg(long)]
        dres: PathBuf,
        #[arg(long)]
        dsyn: PathBuf,
        #[arg(long)]
        detector: PathBuf,
    },
    /// Evaluate a detector; per-class metrics for unseen classes need `--dsyn`.
    Eval {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all", value_parser = ["ts", "tu", "tm", "all"])]
        protocol: String,
        #[arg(long)]
        dsyn: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts plus report and manifest.
    RunAll,
    /// Retrain and evaluate across synthesis counts, reusing a run-all generator.
    Sweep {
        /// A run-all output directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = ["n_seen", "n_unseen"])]
        axis: String,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<AblationTag, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown ablation `{s}` (expected full, bs1, bs2, bs3 or vanilla)"))
}

impl Global {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        if let Some(r) = self.ratio {
            cfg.resample.ratio = r;
        }
        if let Some(n) = self.n_seen {
            cfg.synthesis.n_seen = n;
        }
        if let Some(n) = self.n_unseen {
            cfg.synthesis.n_unseen = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out is required for this command".into()))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => e.in_stage(name),
    })
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = stage("config", g.config())?;
    let digest = cfg.digest();
    let d = Some(digest.as_str());
    match &cli.command {
        Command::GenData => stage("gen-data", (|| make_bundle(&cfg)?.save(g.out()?, d))()),
        Command::Pretrain { data } => stage("pretrain", (|| {
            let bundle = DatasetBundle::load(data, d)?;
            let (det, trace) = pretrain(&cfg, &bundle)?;
            det.save(g.out()?, d)?;
            util::write_json(&g.out()?.join("trace.json"), &trace)
        })()),
        Command::Resample { data, detector } => stage("resample", (|| {
            let bundle = DatasetBundle::load(data, d)?;
            let det = DetectorParams::load(detector, d)?;
            let pool = build_resampled_set(&bundle.train, &det, cfg.resample.ratio)?;
            let s = pool.stats();
            log::info!("{} foreground, {} background points", s.foreground_count, s.background_count);
            pool.save(g.out()?, d)
        })()),
        Command::TrainCvae { data, detector, dres } => stage("train-cvae", (|| {
            let ablation = cfg
                .ablation
                .generator_ablation()
                .ok_or_else(|| Error::Config("the vanilla ablation trains no generator".into()))?;
            let bundle = DatasetBundle::load(data, d)?;
            let det = DetectorParams::load(detector, d)?;
            let pool = ResampledSet::load(dres, d)?;
            let heads = train_heads(&cfg, &bundle, &det, &pool)?;
            let out = g.out()?;
            heads.save(&out.join("heads"), d)?;
            let trained =
                train_generator(&pool, &heads, &bundle.catalog, &cfg.generator, ablation, cfg.stage_seed("generator"))?;
            trained.params.save(out, d)?;
            let trace = trained.trace;
            util::write_json(&out.join("trace.json"), &trace)
        })()),
        Command::Synthesize { data, generator } => stage("synthesize", (|| {
            let bundle = DatasetBundle::load(data, d)?;
            let gen = GeneratorParams::load(generator, d)?;
            let syn = cfg.synthesis;
            synthesize(&gen, &bundle.catalog, syn.n_seen, syn.n_unseen, cfg.stage_seed("synthesis"))?.save(g.out()?, d)
        })()),
        Command::RetrainConf { dres, dsyn, detector } => stage("retrain-conf", (|| {
            let det = DetectorParams::load(detector, d)?;
            let pool = ResampledSet::load(dres, d)?;
            let syn = SyntheticSet::load(dsyn, d)?;
            let out = retrain_confidence(&det.conf_head, &pool.points, &syn.points, &cfg.retrain, cfg.stage_seed("retrain"))?;
            plug_back(&det, out.head)?.save(g.out()?, d)
        })()),
        Command::Eval { detector, data, protocol, dsyn } => stage("eval", (|| {
            let det = DetectorParams::load(detector, d)?;
            let bundle = DatasetBundle::load(data, d)?;
            let aux = match dsyn {
                Some(p) => {
                    let syn = SyntheticSet::load(p, d)?;
                    let c = &bundle.catalog;
                    Some(AuxClassifier::train(&syn.points, &c.all_ids(), c.n_feat, &cfg.aux, cfg.stage_seed("aux"))?)
                }
                None => None,
            };
            let protocols: Vec<Protocol> = match protocol.as_str() {
                "ts" => vec![Protocol::Ts],
                "tu" => vec![Protocol::Tu],
                "tm" => vec![Protocol::Tm],
                _ => Protocol::ALL.to_vec(),
            };
            let mut reports = Vec::new();
            for p in protocols {
                reports.push(evaluate(&det, bundle.split(p.split()), p, aux.as_ref(), &cfg.eval)?);
            }
            let rows: Vec<(String, _)> = reports.iter().map(|r| ("detector".to_owned(), r)).collect();
            let csv = reports_csv(&rows);
            if let Some(out) = &g.out {
                util::write_json(&out.join("report.json"), &reports)?;
                write_text(&out.join("report.csv"), &csv)?;
            }
            print!("{csv}");
            Ok(())
        })()),
        Command::RunAll => stage("run-all", (|| {
            let (report, _) = run_pipeline(&cfg, g.out()?)?;
            print!("{}", report.csv());
            Ok(())
        })()),
        Command::Sweep { run, axis } => stage("sweep", (|| {
            let axis = if axis == "n_seen" { SweepAxis::NSeen } else { SweepAxis::NUnseen };
            let base = BaseRun {
                bundle: DatasetBundle::load(&run.join("data"), d)?,
                vanilla: DetectorParams::load(&run.join("detector"), d)?,
                pretrain_trace: Vec::new(),
                dres: ResampledSet::load(&run.join("dres.json"), d)?,
                heads: CheckerHeads::load(&run.join("heads"), d)?,
            };
            let gen = GeneratorParams::load(&run.join("generator"), d)?;
            let csv = sweep_csv(axis, &sweep(&cfg, &base, &gen, axis)?);
            if let Some(out) = &g.out {
                write_text(out, &csv)?;
            }
            print!("{csv}");
            Ok(())
        })()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
