//! Semantics-conditioned feature generator (a conditional VAE) trained with
//! consistency losses from three frozen checker heads, and synthesis of
//! labeled features for every class.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{
    cross_entropy, kl_diag_gaussian, mse, Activation, AdamConfig, AdamState, DenseNet, Gradients, LrSchedule,
};
use crate::resample::{DataPoint, ResampledSet, BACKGROUND};
use crate::rng::{self, derive, derive_indexed, Rng};
use crate::synth::ClassCatalog;
use crate::util;

/// Which consistency terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Plain conditional VAE.
    Bs1,
    /// Adds the confidence term.
    Bs2,
    /// Adds confidence and classification terms.
    Bs3,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Bs1, Ablation::Bs2, Ablation::Bs3, Ablation::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Bs1 => "bs1",
            Ablation::Bs2 => "bs2",
            Ablation::Bs3 => "bs3",
            Ablation::Full => "full",
        }
    }

    /// `(λ_conf, λ_clf, λ_attr)` with inactive terms zeroed.
    pub fn weights(self, full: LossWeights) -> LossWeights {
        let (c, k, a) = match self {
            Ablation::Bs1 => (false, false, false),
            Ablation::Bs2 => (true, false, false),
            Ablation::Bs3 => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        LossWeights {
            conf: if c { full.conf } else { 0.0 },
            clf: if k { full.clf } else { 0.0 },
            attr: if a { full.attr } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub conf: f64,
    pub clf: f64,
    pub attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            conf: 1.0,
            clf: 2.0,
            attr: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub hidden: usize,
    pub clf_epochs: usize,
    pub attr_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            hidden: 256,
            clf_epochs: 5,
            attr_epochs: 10,
            lr: 1e-3,
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent: usize,
    pub hidden: usize,
    pub weights: LossWeights,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    /// Inverse-frequency class weights on the classification and attribute terms.
    pub class_weighted: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent: 50,
            hidden: 128,
            weights: LossWeights::default(),
            epochs: 60,
            schedule: LrSchedule {
                base: 1e-3,
                factor: 0.5,
                every: 15,
            },
            batch_size: 8,
            class_weighted: false,
        }
    }
}

/// Frozen networks that judge generated features.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckerHeads {
    pub conf: DenseNet,
    pub clf: DenseNet,
    pub attr: DenseNet,
    /// Classifier output `k < seen_ids.len()` is class `seen_ids[k]`; the last output is background.
    pub seen_ids: Vec<usize>,
}

impl CheckerHeads {
    pub fn label_index(&self, class: i64) -> Result<usize> {
        if class == BACKGROUND {
            return Ok(self.seen_ids.len());
        }
        self.seen_ids
            .iter()
            .position(|&c| c as i64 == class)
            .ok_or_else(|| Error::contract(format!("class {class} is outside the classifier's label set")))
    }

    pub fn save(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        checkpoint::save(&dir.join("head_conf.json"), &self.conf, config_digest)?;
        checkpoint::save(&dir.join("head_clf.json"), &self.clf, config_digest)?;
        checkpoint::save(&dir.join("head_attr.json"), &self.attr, config_digest)?;
        util::write_json(&dir.join("heads.json"), &HeadsMeta {
            seen_ids: self.seen_ids.clone(),
            config_digest: config_digest.map(str::to_owned),
        })
    }

    pub fn load(dir: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let meta: HeadsMeta = util::read_json(&dir.join("heads.json"))?;
        util::check_digest("heads.json", expected_digest, meta.config_digest.as_deref())?;
        Ok(CheckerHeads {
            conf: checkpoint::load(&dir.join("head_conf.json"), expected_digest)?,
            clf: checkpoint::load(&dir.join("head_clf.json"), expected_digest)?,
            attr: checkpoint::load(&dir.join("head_attr.json"), expected_digest)?,
            seen_ids: meta.seen_ids,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadsMeta {
    seen_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Attribute target: the class semantics, or zeros for background.
pub fn attr_target(catalog: &ClassCatalog, class: i64) -> Result<Vec<f64>> {
    if class == BACKGROUND {
        Ok(vec![0.0; catalog.n_attr])
    } else {
        Ok(catalog.semantic(class as usize)?.to_vec())
    }
}

fn distinct_classes(points: &[DataPoint]) -> usize {
    let mut c: Vec<i64> = points.iter().map(|p| p.class).collect();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Trains the classifier and attribute heads on the resampled pool. The
/// confidence head is the detector's own and is only copied.
pub fn pretrain_checker_heads(
    dres: &ResampledSet,
    conf_head: &DenseNet,
    catalog: &ClassCatalog,
    cfg: &HeadsConfig,
    seed: u64,
) -> Result<CheckerHeads> {
    if dres.points.is_empty() || distinct_classes(&dres.points) < 2 {
        return Err(Error::data("checker heads need a resampled pool with at least two classes"));
    }
    let n_feat = catalog.n_feat;
    let seen_ids = catalog.seen_ids.clone();
    let mut r = rng::rng(derive(seed, "clf-init"));
    let mut clf = DenseNet::new(
        n_feat,
        &[(cfg.hidden, Activation::Relu), (seen_ids.len() + 1, Activation::Softmax)],
        &mut r,
    )?;
    let mut r = rng::rng(derive(seed, "attr-init"));
    let mut attr = DenseNet::new(
        n_feat,
        &[(cfg.hidden, Activation::Relu), (catalog.n_attr, Activation::Sigmoid)],
        &mut r,
    )?;
    let mut heads = CheckerHeads {
        conf: conf_head.clone(),
        clf: clf.clone(),
        attr: attr.clone(),
        seen_ids,
    };
    let labels: Vec<usize> = dres.points.iter().map(|p| heads.label_index(p.class)).collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = dres.points.iter().map(|p| attr_target(catalog, p.class)).collect::<Result<_>>()?;

    let bs = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..dres.points.len()).collect();
    let mut shuffle = rng::rng(derive(seed, "clf-shuffle"));
    let mut st = AdamState::new(&clf, AdamConfig::default());
    for epoch in 0..cfg.clf_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(bs) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (dres.points[i].f.as_slice(), labels[i])).collect();
            let (total, g) = classifier_loss(&clf, &batch)?;
            check_loss(total, "classifier head", epoch)?;
            st.step(&mut clf, &g, cfg.lr)?;
        }
    }
    let mut shuffle = rng::rng(derive(seed, "attr-shuffle"));
    let mut st = AdamState::new(&attr, AdamConfig::default());
    for epoch in 0..cfg.attr_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(bs) {
            let batch: Vec<(&[f64], &[f64])> =
                chunk.iter().map(|&i| (dres.points[i].f.as_slice(), targets[i].as_slice())).collect();
            let (total, g) = attribute_loss(&attr, &batch)?;
            check_loss(total, "attribute head", epoch)?;
            st.step(&mut attr, &g, cfg.lr)?;
        }
    }
    heads.clf = clf;
    heads.attr = attr;
    Ok(heads)
}

/// Batch-mean cross-entropy of a softmax classifier and its parameter gradients.
pub fn classifier_loss(net: &DenseNet, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients)> {
    let n = batch.len() as f64;
    let mut g = Gradients::zeros_like(net);
    let mut total = 0.0;
    for &(f, label) in batch {
        let (p, tape) = net.forward(f)?;
        let (l, dp) = cross_entropy(&p, label)?;
        total += l / n;
        let up: Vec<f64> = dp.iter().map(|d| d / n).collect();
        net.backward_accumulate(&tape, &up, Some(&mut g))?;
    }
    Ok((total, g))
}

/// Batch-mean attribute MSE and its parameter gradients.
pub fn attribute_loss(net: &DenseNet, batch: &[(&[f64], &[f64])]) -> Result<(f64, Gradients)> {
    let n = batch.len() as f64;
    let mut g = Gradients::zeros_like(net);
    let mut total = 0.0;
    for &(f, target) in batch {
        let (a, tape) = net.forward(f)?;
        let (l, da) = mse(&a, target)?;
        total += l / n;
        let up: Vec<f64> = da.iter().map(|d| d / n).collect();
        net.backward_accumulate(&tape, &up, Some(&mut g))?;
    }
    Ok((total, g))
}

fn check_loss(l: f64, what: &str, epoch: usize) -> Result<()> {
    if l.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{what} training, epoch {epoch}"),
            detail: format!("loss = {l}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `[f, S] → [μ, log σ²]`.
    pub encoder: DenseNet,
    /// `[z, S] → f̂`.
    pub decoder: DenseNet,
    pub latent: usize,
    pub weights: LossWeights,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorMeta {
    latent: usize,
    weights: LossWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

impl GeneratorParams {
    pub fn new(n_feat: usize, n_attr: usize, cfg: &GeneratorConfig, weights: LossWeights, seed: u64) -> Result<Self> {
        let mut r = rng::rng(derive(seed, "encoder"));
        let encoder = DenseNet::new(
            n_feat + n_attr,
            &[(cfg.hidden, Activation::Relu), (2 * cfg.latent, Activation::Identity)],
            &mut r,
        )?;
        let mut r = rng::rng(derive(seed, "decoder"));
        let decoder = DenseNet::new(
            cfg.latent + n_attr,
            &[(cfg.hidden, Activation::Relu), (n_feat, Activation::Identity)],
            &mut r,
        )?;
        Ok(GeneratorParams {
            encoder,
            decoder,
            latent: cfg.latent,
            weights,
        })
    }

    pub fn encode(&self, f: &[f64], s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encoder.predict(&concat(f, s))?;
        let (mu, lv) = out.split_at(self.latent);
        Ok((mu.to_vec(), lv.to_vec()))
    }

    pub fn decode(&self, z: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(&concat(z, s))
    }

    pub fn save(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        checkpoint::save(&dir.join("encoder.json"), &self.encoder, config_digest)?;
        checkpoint::save(&dir.join("decoder.json"), &self.decoder, config_digest)?;
        util::write_json(&dir.join("generator.json"), &GeneratorMeta {
            latent: self.latent,
            weights: self.weights,
            config_digest: config_digest.map(str::to_owned),
        })
    }

    pub fn load(dir: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let meta: GeneratorMeta = util::read_json(&dir.join("generator.json"))?;
        util::check_digest("generator.json", expected_digest, meta.config_digest.as_deref())?;
        Ok(GeneratorParams {
            encoder: checkpoint::load(&dir.join("encoder.json"), expected_digest)?,
            decoder: checkpoint::load(&dir.join("decoder.json"), expected_digest)?,
            latent: meta.latent,
            weights: meta.weights,
        })
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::contract("reparameterize: length mismatch"));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Negative log-likelihood of `f` under a unit-variance Gaussian decoder
/// centered at `f̂`, constants dropped: `½‖f̂ − f‖²`, and its gradient.
pub fn reconstruction(fhat: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let g: Vec<f64> = fhat.iter().zip(f).map(|(a, b)| a - b).collect();
    (0.5 * g.iter().map(|d| d * d).sum::<f64>(), g)
}

/// One training example for the generator loss.
pub struct GenExample<'a> {
    pub point: &'a DataPoint,
    pub eps: &'a [f64],
    /// Weight on the classification and attribute terms (1 unless class weighting is on).
    pub class_weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenLossTerms {
    pub kl: f64,
    pub recon: f64,
    pub conf: f64,
    pub clf: f64,
    pub attr: f64,
}

impl GenLossTerms {
    /// Weighted total; the classification and attribute terms already carry class weights.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.kl + self.recon + w.conf * self.conf + w.clf * self.clf + w.attr * self.attr
    }
}

pub struct GenGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

/// Batch-averaged loss terms and gradients with respect to the encoder and
/// decoder only; the heads are read but never differentiated into.
pub fn generator_loss(
    params: &GeneratorParams,
    heads: &CheckerHeads,
    catalog: &ClassCatalog,
    batch: &[GenExample],
) -> Result<(GenLossTerms, GenGradients)> {
    if batch.is_empty() {
        return Err(Error::contract("generator loss on an empty batch"));
    }
    let w = params.weights;
    let n = batch.len() as f64;
    let l = params.latent;
    let mut terms = GenLossTerms::default();
    let mut grads = GenGradients {
        encoder: Gradients::zeros_like(&params.encoder),
        decoder: Gradients::zeros_like(&params.decoder),
    };
    for ex in batch {
        let p = ex.point;
        let label = heads.label_index(p.class)?;
        let s = attr_target(catalog, p.class)?;
        if ex.eps.len() != l {
            return Err(Error::contract("noise sample has the wrong length"));
        }
        let (enc, tape_e) = params.encoder.forward(&concat(&p.f, &s))?;
        let (mu, lv) = enc.split_at(l);
        let z = reparameterize(mu, lv, ex.eps)?;
        let (fhat, tape_g) = params.decoder.forward(&concat(&z, &s))?;

        let (kl, dmu_kl, dlv_kl) = kl_diag_gaussian(mu, lv)?;
        let (rec, mut dfhat) = reconstruction(&fhat, &p.f);
        terms.kl += kl / n;
        terms.recon += rec / n;

        if w.conf != 0.0 {
            let (c, tape) = heads.conf.forward(&fhat)?;
            let (lc, dc) = mse(&c, &[p.conf])?;
            terms.conf += lc / n;
            let g = heads.conf.input_grad(&tape, &dc)?;
            dfhat.iter_mut().zip(&g).for_each(|(d, gi)| *d += w.conf * gi);
        }
        if w.clf != 0.0 {
            let (probs, tape) = heads.clf.forward(&fhat)?;
            let (lk, dk) = cross_entropy(&probs, label)?;
            terms.clf += ex.class_weight * lk / n;
            let g = heads.clf.input_grad(&tape, &dk)?;
            dfhat.iter_mut().zip(&g).for_each(|(d, gi)| *d += w.clf * ex.class_weight * gi);
        }
        if w.attr != 0.0 {
            let (a, tape) = heads.attr.forward(&fhat)?;
            let (la, da) = mse(&a, &s)?;
            terms.attr += ex.class_weight * la / n;
            let g = heads.attr.input_grad(&tape, &da)?;
            dfhat.iter_mut().zip(&g).for_each(|(d, gi)| *d += w.attr * ex.class_weight * gi);
        }

        dfhat.iter_mut().for_each(|d| *d /= n);
        let dzs = params.decoder.backward_accumulate(&tape_g, &dfhat, Some(&mut grads.decoder))?;
        let mut denc = vec![0.0; 2 * l];
        for k in 0..l {
            let dz = dzs[k];
            let sd = (0.5 * lv[k]).exp();
            denc[k] = dz + dmu_kl[k] / n;
            denc[l + k] = dz * ex.eps[k] * 0.5 * sd + dlv_kl[k] / n;
        }
        params.encoder.backward_accumulate(&tape_e, &denc, Some(&mut grads.encoder))?;
    }
    Ok((terms, grads))
}

/// Inverse-frequency weights normalized to mean 1 over points.
pub fn class_weights(points: &[DataPoint]) -> BTreeMap<i64, f64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for p in points {
        *counts.entry(p.class).or_insert(0) += 1;
    }
    let k = counts.len() as f64;
    let n = points.len() as f64;
    counts.into_iter().map(|(c, m)| (c, n / (k * m as f64))).collect()
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub params: GeneratorParams,
    /// Mean per-batch total loss for each epoch.
    pub trace: Vec<f64>,
    /// Mean reconstruction and KL terms for each epoch.
    pub recon_trace: Vec<f64>,
    pub kl_trace: Vec<f64>,
}

pub fn train_generator(
    dres: &ResampledSet,
    heads: &CheckerHeads,
    catalog: &ClassCatalog,
    cfg: &GeneratorConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<GeneratorOutput> {
    if dres.points.is_empty() {
        return Err(Error::data("cannot train the generator on an empty pool"));
    }
    let weights = ablation.weights(cfg.weights);
    let mut params = GeneratorParams::new(catalog.n_feat, catalog.n_attr, cfg, weights, derive(seed, "init"))?;
    let cw = class_weights(&dres.points);
    let mut st_e = AdamState::new(&params.encoder, AdamConfig::default());
    let mut st_g = AdamState::new(&params.decoder, AdamConfig::default());
    let mut order: Vec<usize> = (0..dres.points.len()).collect();
    let mut shuffle = rng::rng(derive(seed, "shuffle"));
    let mut noise = rng::rng(derive(seed, "eps"));
    let bs = cfg.batch_size.max(1);
    let mut out = GeneratorOutput {
        params: params.clone(),
        trace: Vec::new(),
        recon_trace: Vec::new(),
        kl_trace: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at_epoch(epoch);
        order.shuffle(&mut shuffle);
        let (mut total, mut recon, mut kl, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(bs) {
            let eps: Vec<Vec<f64>> = chunk.iter().map(|_| normal_vec(&mut noise, params.latent)).collect();
            let batch: Vec<GenExample> = chunk
                .iter()
                .zip(&eps)
                .map(|(&i, e)| {
                    let point = &dres.points[i];
                    GenExample {
                        point,
                        eps: e,
                        class_weight: if cfg.class_weighted { cw[&point.class] } else { 1.0 },
                    }
                })
                .collect();
            let (terms, g) = generator_loss(&params, heads, catalog, &batch)?;
            let l = terms.total(&weights);
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("generator training, epoch {epoch}"),
                    detail: format!("loss terms {terms:?}"),
                });
            }
            total += l;
            recon += terms.recon;
            kl += terms.kl;
            batches += 1;
            st_e.step(&mut params.encoder, &g.encoder, lr)?;
            st_g.step(&mut params.decoder, &g.decoder, lr)?;
        }
        let b = batches as f64;
        log::debug!("generator epoch {epoch}: loss {:.6}", total / b);
        out.trace.push(total / b);
        out.recon_trace.push(recon / b);
        out.kl_trace.push(kl / b);
    }
    out.params = params;
    Ok(out)
}

fn normal_vec(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub points: Vec<DataPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticFile {
    points: Vec<DataPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

impl SyntheticSet {
    pub fn save(&self, path: &Path, config_digest: Option<&str>) -> Result<()> {
        util::write_json(path, &SyntheticFile {
            points: self.points.clone(),
            config_digest: config_digest.map(str::to_owned),
        })
    }

    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let file: SyntheticFile = util::read_json(path)?;
        util::check_digest("dsyn.json", expected_digest, file.config_digest.as_deref())?;
        Ok(SyntheticSet { points: file.points })
    }

    pub fn count_for(&self, class: usize) -> usize {
        self.points.iter().filter(|p| p.class == class as i64).count()
    }
}

/// Decodes prior samples for every class: `n_seen` per seen class and
/// `n_unseen` per unseen class, each with confidence target 1.
pub fn synthesize(
    params: &GeneratorParams,
    catalog: &ClassCatalog,
    n_seen: usize,
    n_unseen: usize,
    seed: u64,
) -> Result<SyntheticSet> {
    let mut points = Vec::new();
    for id in catalog.all_ids() {
        let n = if catalog.is_seen(id) { n_seen } else { n_unseen };
        let s = catalog.semantic(id)?;
        let mut r = rng::rng(derive_indexed(seed, "class", id as u64));
        for _ in 0..n {
            let z = normal_vec(&mut r, params.latent);
            let f = params.decode(&z, s)?;
            if let Some(v) = f.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("synthesis for class {id}"),
                    detail: format!("feature component {v}"),
                });
            }
            points.push(DataPoint { f, conf: 1.0, class: id as i64 });
        }
    }
    Ok(SyntheticSet { points })
}
