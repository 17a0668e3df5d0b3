//! Detection metrics: greedy matching, 11-point AP, recall@k, and per-split
//! reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{detect, Detection, DetectorParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::numerics::{checkpoint, cross_entropy, Activation, AdamConfig, AdamState, DenseNet, Gradients, LrSchedule};
use crate::resample::{best_cell_match, DataPoint, BG_IOU, FG_IOU};
use crate::rng::{self, derive};
use crate::synth::{ObjectLabel, Scene, Split};
use crate::util;

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Ts,
    Tu,
    Tm,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Ts, Protocol::Tu, Protocol::Tm];

    pub fn split(self) -> Split {
        match self {
            Protocol::Ts => Split::TestSeen,
            Protocol::Tu => Split::TestUnseen,
            Protocol::Tm => Split::TestMix,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Ts => "ts",
            Protocol::Tu => "tu",
            Protocol::Tm => "tm",
        }
    }
}

/// A scored box with a class label, as consumed by the metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: usize,
}

impl From<&Detection> for Scored {
    fn from(d: &Detection) -> Self {
        Scored {
            bbox: d.bbox,
            confidence: d.confidence,
            class_id: d.class_id,
        }
    }
}

/// Greedy matching of confidence-sorted detections: each takes the unmatched
/// ground truth of highest IoU (at least `iou_thr`, same class when
/// `class_aware`), ties to the lower ground-truth index. Returns TP flags.
pub fn match_detections(dets: &[Scored], gts: &[ObjectLabel], iou_thr: f64, class_aware: bool) -> Result<Vec<bool>> {
    if dets.windows(2).any(|w| w[0].confidence < w[1].confidence) {
        return Err(Error::contract("detections must be sorted by descending confidence"));
    }
    let mut used = vec![false; gts.len()];
    Ok(dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || (class_aware && gt.class_id != d.class_id) {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect())
}

/// Interpolated 11-point average precision over TP flags in ranking order.
pub fn ap_11point(labels: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(labels.len());
    for (k, &l) in labels.iter().enumerate() {
        tp += l as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for t in 0..=10 {
        let thr = t as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(r, _)| *r >= thr - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 11.0
}

/// Per-scene detections paired with that scene's ground truth.
pub struct SceneResult<'a> {
    pub dets: Vec<Scored>,
    pub gts: &'a [ObjectLabel],
}

/// AP over a split: per-scene matching, then a global ranking by confidence.
pub fn split_ap(results: &[SceneResult], class: Option<usize>) -> Result<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (si, r) in results.iter().enumerate() {
        let (dets, gts): (Vec<Scored>, Vec<ObjectLabel>) = match class {
            None => (r.dets.clone(), r.gts.to_vec()),
            Some(c) => (
                r.dets.iter().filter(|d| d.class_id == c).copied().collect(),
                r.gts.iter().filter(|g| g.class_id == c).copied().collect(),
            ),
        };
        n_gt += gts.len();
        let tp = match_detections(&dets, &gts, MATCH_IOU, false)?;
        ranked.extend(tp.into_iter().enumerate().map(|(k, t)| (dets[k].confidence, si, k, t)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let labels: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Ok(ap_11point(&labels, n_gt))
}

/// Fraction of ground truth matched by the top `k` detections of each scene;
/// 1 when the split has no ground truth.
pub fn recall_at_k(results: &[SceneResult], k: usize, iou_thr: f64, class_aware: bool) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("recall@k needs k ≥ 1"));
    }
    let mut hit = 0;
    let mut n_gt = 0;
    for r in results {
        let top = &r.dets[..k.min(r.dets.len())];
        hit += match_detections(top, r.gts, iou_thr, class_aware)?.iter().filter(|&&t| t).count();
        n_gt += r.gts.len();
    }
    Ok(if n_gt == 0 { 1.0 } else { hit as f64 / n_gt as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub recall_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: 0.005,
            nms_iou: 0.45,
            recall_k: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCounts {
    pub scenes: usize,
    pub gt_objects: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Class-agnostic objectness AP.
    pub overall_ap: f64,
    /// Keyed by class id.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Mean of `per_class_ap` over classes with ground truth in the split.
    pub map: f64,
    pub recall_at_100: f64,
    pub recall_at_100_class_agnostic: f64,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = vec![
            ("overall_ap".to_owned(), self.overall_ap),
            ("map".to_owned(), self.map),
            ("recall_at_100".to_owned(), self.recall_at_100),
            ("recall_at_100_class_agnostic".to_owned(), self.recall_at_100_class_agnostic),
        ];
        m.extend(self.per_class_ap.iter().map(|(c, v)| (format!("ap_class_{c}"), *v)));
        m
    }
}

/// Builds a report from already-labeled detections.
pub fn report_from(protocol: Protocol, results: &[SceneResult], recall_k: usize) -> Result<EvalReport> {
    let mut classes: Vec<usize> = results.iter().flat_map(|r| r.gts.iter().map(|g| g.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class_ap = BTreeMap::new();
    for &c in &classes {
        per_class_ap.insert(c, split_ap(results, Some(c))?);
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / classes.len() as f64
    };
    Ok(EvalReport {
        protocol,
        overall_ap: split_ap(results, None)?,
        per_class_ap,
        map,
        recall_at_100: recall_at_k(results, recall_k, MATCH_IOU, true)?,
        recall_at_100_class_agnostic: recall_at_k(results, recall_k, MATCH_IOU, false)?,
        counts: EvalCounts {
            scenes: results.len(),
            gt_objects: results.iter().map(|r| r.gts.len()).sum(),
            detections: results.iter().map(|r| r.dets.len()).sum(),
        },
    })
}

/// Classifier over all classes, trained on synthetic features, used to label
/// detections when unseen classes must be named.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxClassifier {
    pub net: DenseNet,
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            hidden: 64,
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuxMeta {
    class_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

impl AuxClassifier {
    pub fn train(points: &[DataPoint], class_ids: &[usize], n_feat: usize, cfg: &AuxConfig, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::data("auxiliary classifier needs synthetic features"));
        }
        let labels: Vec<usize> = points
            .iter()
            .map(|p| {
                class_ids
                    .iter()
                    .position(|&c| c as i64 == p.class)
                    .ok_or_else(|| Error::data(format!("synthetic class {} is not in the label set", p.class)))
            })
            .collect::<Result<_>>()?;
        let mut net = DenseNet::new(
            n_feat,
            &[(cfg.hidden, Activation::Relu), (class_ids.len(), Activation::Softmax)],
            &mut rng::rng(derive(seed, "init")),
        )?;
        let mut st = AdamState::new(&net, AdamConfig::default());
        let schedule = LrSchedule { base: cfg.lr, factor: 1.0, every: 0 };
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut shuffle = rng::rng(derive(seed, "shuffle"));
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut g = Gradients::zeros_like(&net);
                for &i in chunk {
                    let (p, tape) = net.forward(&points[i].f)?;
                    let (_, d) = cross_entropy(&p, labels[i])?;
                    let up: Vec<f64> = d.iter().map(|v| v / chunk.len() as f64).collect();
                    net.backward_accumulate(&tape, &up, Some(&mut g))?;
                }
                st.step(&mut net, &g, schedule.at_epoch(epoch))?;
            }
        }
        Ok(AuxClassifier {
            net,
            class_ids: class_ids.to_vec(),
        })
    }

    pub fn classify(&self, f: &[f64]) -> Result<usize> {
        let p = self.net.predict(f)?;
        let k = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        Ok(self.class_ids[k])
    }

    pub fn save(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        checkpoint::save(&dir.join("aux_clf.json"), &self.net, config_digest)?;
        util::write_json(&dir.join("aux.json"), &AuxMeta {
            class_ids: self.class_ids.clone(),
            config_digest: config_digest.map(str::to_owned),
        })
    }

    pub fn load(dir: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let meta: AuxMeta = util::read_json(&dir.join("aux.json"))?;
        util::check_digest("aux.json", expected_digest, meta.config_digest.as_deref())?;
        Ok(AuxClassifier {
            net: checkpoint::load(&dir.join("aux_clf.json"), expected_digest)?,
            class_ids: meta.class_ids,
        })
    }
}

/// Runs the detector on every scene of the protocol's split. Detections are
/// labeled by `aux` when given, otherwise by the detector's seen-class head.
pub fn evaluate(
    detector: &DetectorParams,
    scenes: &[Scene],
    protocol: Protocol,
    aux: Option<&AuxClassifier>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::data(format!("split {} is empty", protocol.split().as_str())));
    }
    if let Some(s) = scenes.iter().find(|s| s.split != protocol.split()) {
        return Err(Error::contract(format!(
            "scene {} belongs to {}, not {}",
            s.scene_id,
            s.split.as_str(),
            protocol.split().as_str()
        )));
    }
    let mut results = Vec::with_capacity(scenes.len());
    for s in scenes {
        let dets = detect(detector, s, cfg.conf_threshold, cfg.nms_iou)?;
        let dets = dets
            .iter()
            .map(|d| {
                let mut sc = Scored::from(d);
                if let Some(a) = aux {
                    sc.class_id = a.classify(s.cell_feature(d.cell))?;
                }
                Ok(sc)
            })
            .collect::<Result<Vec<_>>>()?;
        results.push(SceneResult { dets, gts: &s.objects });
    }
    report_from(protocol, &results, cfg.recall_k)
}

/// One row per (protocol, metric).
pub fn reports_csv(rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::from("detector,protocol,metric,value\n");
    for (name, r) in rows {
        for (m, v) in r.metrics() {
            out.push_str(&format!("{name},{},{m},{v}\n", r.protocol.as_str()));
        }
    }
    out
}

/// Mean confidence over object cells (best decoded box IoU above 0.5 with some
/// ground truth) and over background cells (IoU below 0.2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceProfile {
    pub object_mean: f64,
    pub object_cells: usize,
    pub background_mean: f64,
    pub background_cells: usize,
}

pub fn confidence_profile(detector: &DetectorParams, scenes: &[Scene]) -> Result<ConfidenceProfile> {
    let (mut os, mut on, mut bs, mut bn) = (0.0, 0, 0.0, 0);
    for s in scenes {
        for p in detector.predict_scene(s)? {
            let m = best_cell_match(&p, s);
            if m.iou > FG_IOU {
                os += p.confidence;
                on += 1;
            } else if m.iou < BG_IOU {
                bs += p.confidence;
                bn += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(ConfidenceProfile {
        object_mean: mean(os, on),
        object_cells: on,
        background_mean: mean(bs, bn),
        background_cells: bn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, c: usize) -> ObjectLabel {
        ObjectLabel { bbox: BoundingBox::new(x, 0.5, 0.2, 0.2).unwrap(), class_id: c }
    }

    fn d(x: f64, conf: f64, c: usize) -> Scored {
        Scored { bbox: BoundingBox::new(x, 0.5, 0.2, 0.2).unwrap(), confidence: conf, class_id: c }
    }

    #[test]
    fn matching_cases() {
        let g = [gt(0.3, 1)];
        assert_eq!(match_detections(&[d(0.3, 0.9, 1)], &g, 0.5, false).unwrap(), vec![true]);
        assert_eq!(match_detections(&[d(0.3, 0.9, 1), d(0.3, 0.8, 1)], &g, 0.5, false).unwrap(), vec![true, false]);
        assert_eq!(match_detections(&[d(0.3, 0.9, 2)], &g, 0.5, true).unwrap(), vec![false]);
        assert!(match_detections(&[d(0.3, 0.1, 1), d(0.3, 0.8, 1)], &g, 0.5, false).is_err());
    }

    #[test]
    fn ap_cases() {
        assert_eq!(ap_11point(&[true, true], 2), 1.0);
        assert_eq!(ap_11point(&[], 3), 0.0);
        assert_eq!(ap_11point(&[], 0), 0.0);
        let want = (6.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert!((ap_11point(&[true, false, true], 2) - want).abs() < 1e-12);
    }

    #[test]
    fn recall_conventions() {
        let g = [gt(0.3, 1)];
        let r = [SceneResult { dets: vec![], gts: &[] }];
        assert_eq!(recall_at_k(&r, 100, 0.5, false).unwrap(), 1.0);
        // IoU 0.4 is below threshold: width overlap 0.2·x/(0.04·2 − …)
        let shifted = Scored {
            bbox: BoundingBox::new(0.3 + 0.2 * (1.0 - 0.8 / 1.4), 0.5, 0.2, 0.2).unwrap(),
            confidence: 1.0,
            class_id: 1,
        };
        assert!((iou(&shifted.bbox, &g[0].bbox) - 0.4).abs() < 1e-12);
        let r = [SceneResult { dets: vec![shifted], gts: &g }];
        assert_eq!(recall_at_k(&r, 100, 0.5, false).unwrap(), 0.0);
        assert!(recall_at_k(&r, 0, 0.5, false).is_err());
    }
}
