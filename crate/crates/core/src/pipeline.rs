//! Experiment configuration and the end-to-end run: data, detector
//! pretraining, resampling, generator training, synthesis, confidence
//! retraining and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{pretrain_detector, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, reports_csv, AuxClassifier, AuxConfig, EvalConfig, EvalReport, Protocol};
use crate::generator::{
    pretrain_checker_heads, synthesize, train_generator, Ablation, CheckerHeads, GeneratorConfig, GeneratorParams,
    HeadsConfig, SyntheticSet,
};
use crate::resample::{build_resampled_set, ResampledSet};
use crate::retrain::{plug_back, retrain_confidence, RetrainConfig};
use crate::rng::derive;
use crate::synth::{make_catalog, make_dataset, CatalogConfig, DatasetBundle, DatasetConfig};
use crate::util;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTag {
    #[default]
    Full,
    Bs1,
    Bs2,
    Bs3,
    /// Pretrained detector only.
    Vanilla,
}

impl AblationTag {
    pub fn generator_ablation(self) -> Option<Ablation> {
        match self {
            AblationTag::Full => Some(Ablation::Full),
            AblationTag::Bs1 => Some(Ablation::Bs1),
            AblationTag::Bs2 => Some(Ablation::Bs2),
            AblationTag::Bs3 => Some(Ablation::Bs3),
            AblationTag::Vanilla => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            n_seen: 50,
            n_unseen: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub ratio: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig { ratio: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ablation: AblationTag,
    pub catalog: CatalogConfig,
    pub data: DatasetConfig,
    pub detector: DetectorConfig,
    pub resample: ResampleConfig,
    pub heads: HeadsConfig,
    pub generator: GeneratorConfig,
    pub synthesis: SynthesisConfig,
    pub retrain: RetrainConfig,
    pub aux: AuxConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.grid == 0 {
            return Err(Error::config("grid must be positive"));
        }
        if self.catalog.n_seen == 0 {
            return Err(Error::config("at least one seen class is required"));
        }
        if !(self.resample.ratio >= 0.0 && self.resample.ratio.is_finite()) {
            return Err(Error::config("resample ratio must be finite and nonnegative"));
        }
        self.detector.anchors.validate()
    }

    /// SHA-256 of the canonical JSON form; embedded in every artifact.
    pub fn digest(&self) -> String {
        util::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive(self.seed, stage)
    }
}

/// Stage outputs shared by every arm of an experiment.
#[derive(Debug, Clone)]
pub struct BaseRun {
    pub bundle: DatasetBundle,
    pub vanilla: DetectorParams,
    pub pretrain_trace: Vec<f64>,
    pub dres: ResampledSet,
    pub heads: CheckerHeads,
}

/// One retrained detector and what produced it.
#[derive(Debug, Clone)]
pub struct Arm {
    pub generator: GeneratorParams,
    pub generator_trace: Vec<f64>,
    pub dsyn: SyntheticSet,
    pub detector: DetectorParams,
    pub aux: AuxClassifier,
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        let secs = t.elapsed().as_secs_f64();
        log::info!("{stage}: {secs:.1} s");
        self.0.insert(stage.to_owned(), secs);
        Ok(out)
    }
}

pub fn make_bundle(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let catalog = make_catalog(&cfg.catalog, cfg.stage_seed("catalog"))?;
    make_dataset(&catalog, &cfg.data, cfg.stage_seed("data"))
}

pub fn pretrain(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<(DetectorParams, Vec<f64>)> {
    let out = pretrain_detector(
        &bundle.train,
        bundle.catalog.n_feat,
        &bundle.catalog.seen_ids,
        &cfg.detector,
        cfg.stage_seed("detector"),
    )?;
    Ok((out.params, out.trace))
}

pub fn train_heads(cfg: &ExperimentConfig, bundle: &DatasetBundle, det: &DetectorParams, dres: &ResampledSet) -> Result<CheckerHeads> {
    pretrain_checker_heads(dres, &det.conf_head, &bundle.catalog, &cfg.heads, cfg.stage_seed("heads"))
}

fn base_with_timer(cfg: &ExperimentConfig, timer: &mut Timer) -> Result<BaseRun> {
    let bundle = timer.time("gen-data", || make_bundle(cfg))?;
    let (vanilla, pretrain_trace) = timer.time("pretrain", || pretrain(cfg, &bundle))?;
    let dres = timer.time("resample", || build_resampled_set(&bundle.train, &vanilla, cfg.resample.ratio))?;
    let heads = timer.time("heads", || train_heads(cfg, &bundle, &vanilla, &dres))?;
    Ok(BaseRun {
        bundle,
        vanilla,
        pretrain_trace,
        dres,
        heads,
    })
}

pub fn run_base(cfg: &ExperimentConfig) -> Result<BaseRun> {
    base_with_timer(cfg, &mut Timer(BTreeMap::new()))
}

pub fn train_arm_generator(cfg: &ExperimentConfig, base: &BaseRun, ablation: Ablation) -> Result<(GeneratorParams, Vec<f64>)> {
    let out = train_generator(
        &base.dres,
        &base.heads,
        &base.bundle.catalog,
        &cfg.generator,
        ablation,
        cfg.stage_seed("generator"),
    )?;
    Ok((out.params, out.trace))
}

/// Synthesis, retraining and the auxiliary classifier for a trained generator.
pub fn finish_arm(
    cfg: &ExperimentConfig,
    base: &BaseRun,
    generator: GeneratorParams,
    generator_trace: Vec<f64>,
    synthesis: SynthesisConfig,
) -> Result<Arm> {
    let catalog = &base.bundle.catalog;
    let dsyn = synthesize(&generator, catalog, synthesis.n_seen, synthesis.n_unseen, cfg.stage_seed("synthesis"))
        .map_err(|e| e.in_stage("synthesize"))?;
    let head = retrain_confidence(
        &base.vanilla.conf_head,
        &base.dres.points,
        &dsyn.points,
        &cfg.retrain,
        cfg.stage_seed("retrain"),
    )
    .map_err(|e| e.in_stage("retrain-conf"))?
    .head;
    let detector = plug_back(&base.vanilla, head).map_err(|e| e.in_stage("retrain-conf"))?;
    let aux = AuxClassifier::train(&dsyn.points, &catalog.all_ids(), catalog.n_feat, &cfg.aux, cfg.stage_seed("aux"))
        .map_err(|e| e.in_stage("eval"))?;
    Ok(Arm {
        generator,
        generator_trace,
        dsyn,
        detector,
        aux,
    })
}

pub fn run_arm(cfg: &ExperimentConfig, base: &BaseRun, ablation: Ablation, synthesis: SynthesisConfig) -> Result<Arm> {
    let (g, trace) = train_arm_generator(cfg, base, ablation).map_err(|e| e.in_stage("train-cvae"))?;
    finish_arm(cfg, base, g, trace, synthesis)
}

pub type ProtocolReports = BTreeMap<Protocol, EvalReport>;

pub fn evaluate_all(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    detector: &DetectorParams,
    aux: Option<&AuxClassifier>,
) -> Result<ProtocolReports> {
    Protocol::ALL
        .iter()
        .map(|&p| Ok((p, evaluate(detector, bundle.split(p.split()), p, aux, &cfg.eval)?)))
        .collect()
}

/// Evaluation results; contains no timing so identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub config_digest: String,
    pub ablation: AblationTag,
    pub vanilla: ProtocolReports,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delo: Option<ProtocolReports>,
}

impl RunReport {
    pub fn csv(&self) -> String {
        let mut rows: Vec<(String, &EvalReport)> = self.vanilla.values().map(|r| ("vanilla".to_owned(), r)).collect();
        if let Some(d) = &self.delo {
            rows.extend(d.values().map(|r| ("delo".to_owned(), r)));
        }
        reports_csv(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_digest: String,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Stage → seconds.
    pub wall_clock: BTreeMap<String, f64>,
    /// Relative file path → SHA-256 of its contents.
    pub hashes: BTreeMap<String, String>,
}

/// Runs every stage, writing artifacts, `report.json`, `report.csv` and
/// `manifest.json` under `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<(RunReport, RunManifest)> {
    cfg.validate()?;
    let digest = cfg.digest();
    let d = Some(digest.as_str());
    let mut timer = Timer(BTreeMap::new());
    let mut artifacts = BTreeMap::new();
    let bundle = timer.time("gen-data", || make_bundle(cfg))?;
    bundle.save(&out.join("data"), d).map_err(|e| e.in_stage("gen-data"))?;
    artifacts.insert("data".to_owned(), "data".to_owned());
    let (vanilla, _) = timer.time("pretrain", || pretrain(cfg, &bundle))?;
    vanilla.save(&out.join("detector"), d).map_err(|e| e.in_stage("pretrain"))?;
    artifacts.insert("detector".to_owned(), "detector".to_owned());
    let vanilla_reports = timer.time("eval-vanilla", || evaluate_all(cfg, &bundle, &vanilla, None))?;

    let delo = match cfg.ablation.generator_ablation() {
        None => None,
        Some(ablation) => {
            let dres = timer.time("resample", || build_resampled_set(&bundle.train, &vanilla, cfg.resample.ratio))?;
            dres.save(&out.join("dres.json"), d).map_err(|e| e.in_stage("resample"))?;
            let heads = timer.time("heads", || train_heads(cfg, &bundle, &vanilla, &dres))?;
            heads.save(&out.join("heads"), d).map_err(|e| e.in_stage("heads"))?;
            let base = BaseRun {
                bundle: bundle.clone(),
                vanilla: vanilla.clone(),
                pretrain_trace: Vec::new(),
                dres,
                heads,
            };
            let (g, trace) = timer.time("train-cvae", || train_arm_generator(cfg, &base, ablation))?;
            g.save(&out.join("generator"), d).map_err(|e| e.in_stage("train-cvae"))?;
            let arm = timer.time("retrain-conf", || finish_arm(cfg, &base, g, trace, cfg.synthesis))?;
            arm.dsyn.save(&out.join("dsyn.json"), d).map_err(|e| e.in_stage("synthesize"))?;
            arm.detector.save(&out.join("delo_detector"), d).map_err(|e| e.in_stage("retrain-conf"))?;
            arm.aux.save(&out.join("aux"), d).map_err(|e| e.in_stage("eval"))?;
            for (k, v) in [
                ("dres", "dres.json"),
                ("heads", "heads"),
                ("generator", "generator"),
                ("dsyn", "dsyn.json"),
                ("delo_detector", "delo_detector"),
                ("aux", "aux"),
            ] {
                artifacts.insert(k.to_owned(), v.to_owned());
            }
            Some(timer.time("eval-delo", || evaluate_all(cfg, &bundle, &arm.detector, Some(&arm.aux)))?)
        }
    };
    let report = RunReport {
        config_digest: digest.clone(),
        ablation: cfg.ablation,
        vanilla: vanilla_reports,
        delo,
    };
    util::write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report.csv"), &report.csv())?;
    artifacts.insert("report".to_owned(), "report.json".to_owned());
    let manifest = RunManifest {
        config_digest: digest,
        artifacts,
        wall_clock: timer.0,
        hashes: hash_tree(out, &["manifest.json"])?,
    };
    util::write_json(&out.join("manifest.json"), &manifest)?;
    Ok((report, manifest))
}

pub fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Content hashes of every file under `root`, keyed by relative path.
pub fn hash_tree(root: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, acc)?;
            } else {
                acc.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(root).expect("walked under root").to_string_lossy().replace('\\', "/");
        if skip.contains(&rel.as_str()) {
            continue;
        }
        out.insert(rel, util::file_digest(&f)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NSeen,
    NUnseen,
}

impl SweepAxis {
    pub fn values(self) -> &'static [usize] {
        match self {
            SweepAxis::NSeen => &[20, 50, 100, 200, 500],
            SweepAxis::NUnseen => &[0, 100, 200, 500, 1000, 2000],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NSeen => "n_seen",
            SweepAxis::NUnseen => "n_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub protocol: Protocol,
    pub overall_ap: f64,
    pub map: f64,
}

/// Retrains and evaluates at every axis value, reusing one trained generator.
pub fn sweep(cfg: &ExperimentConfig, base: &BaseRun, generator: &GeneratorParams, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &v in axis.values() {
        let mut syn = cfg.synthesis;
        match axis {
            SweepAxis::NSeen => syn.n_seen = v,
            SweepAxis::NUnseen => syn.n_unseen = v,
        }
        let arm = finish_arm(cfg, base, generator.clone(), Vec::new(), syn)?;
        let reports = evaluate_all(cfg, &base.bundle, &arm.detector, Some(&arm.aux))?;
        for (p, r) in reports {
            rows.push(SweepRow {
                value: v,
                protocol: p,
                overall_ap: r.overall_ap,
                map: r.map,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{},protocol,overall_ap,map\n", axis.as_str());
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.value, r.protocol.as_str(), r.overall_ap, r.map));
    }
    s
}
