//! Grid-cell object predictor: per-anchor box locator plus a confidence head
//! and a classifier shared across the anchors of a cell.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::numerics::checkpoint;
use crate::numerics::{
    cross_entropy, sigmoid, Activation, AdamConfig, AdamState, DenseNet, Gradients, LrSchedule,
};
use crate::rng::{self, derive};
use crate::synth::Scene;
use crate::util;

pub const DEFAULT_ANCHORS: [(f64, f64); 5] =
    [(0.08, 0.08), (0.15, 0.08), (0.08, 0.15), (0.2, 0.2), (0.35, 0.35)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSet(pub Vec<(f64, f64)>);

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet(DEFAULT_ANCHORS.to_vec())
    }
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() || self.0.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::config("anchors must be a nonempty list of positive sizes"));
        }
        Ok(())
    }

    /// Index of the anchor shape with the highest IoU against a box of size
    /// `(w, h)` when both are centered at the same point; lowest index on ties.
    pub fn best_for(&self, w: f64, h: f64) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, &(aw, ah)) in self.0.iter().enumerate() {
            let inter = aw.min(w) * ah.min(h);
            let s = inter / (aw * ah + w * h - inter);
            if s > best.1 {
                best = (k, s);
            }
        }
        best.0
    }
}

/// Box for `cell = (row, col)` from raw offsets `(t_x, t_y, t_w, t_h)`.
pub fn decode_box(cell: (usize, usize), anchor: (f64, f64), raw: [f64; 4], grid: usize) -> BoundingBox {
    let g = grid as f64;
    let (i, j) = cell;
    let x = (j as f64 + sigmoid(raw[0])) / g;
    let y = (i as f64 + sigmoid(raw[1])) / g;
    let w = (anchor.0 * raw[2].exp()).clamp(1e-9, 1.0);
    let h = (anchor.1 * raw[3].exp()).clamp(1e-9, 1.0);
    BoundingBox { x, y, w, h }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub lambda_coord: f64,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub scenes_per_batch: usize,
    pub anchors: AnchorSet,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden: 64,
            lambda_coord: 5.0,
            epochs: 60,
            schedule: LrSchedule {
                base: 1e-3,
                factor: 0.5,
                every: 15,
            },
            scenes_per_batch: 1,
            anchors: AnchorSet::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub locator: DenseNet,
    pub conf_head: DenseNet,
    pub clf_head: DenseNet,
    pub anchors: AnchorSet,
    pub grid: usize,
    /// Classifier output `k < seen_ids.len()` is class `seen_ids[k]`; the last output is background.
    pub seen_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: usize,
    pub class_score: f64,
    pub cell: usize,
    pub anchor: usize,
}

/// Raw per-cell outputs before thresholding.
#[derive(Debug, Clone)]
pub struct CellPrediction {
    pub confidence: f64,
    pub boxes: Vec<BoundingBox>,
    pub class_probs: Vec<f64>,
}

impl DetectorParams {
    pub fn new(n_feat: usize, seen_ids: &[usize], grid: usize, cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.anchors.validate()?;
        let a = cfg.anchors.len();
        let h = cfg.hidden;
        let mut r = rng::rng(derive(seed, "locator"));
        let locator = DenseNet::new(n_feat, &[(h, Activation::Relu), (4 * a, Activation::Identity)], &mut r)?;
        let mut r = rng::rng(derive(seed, "conf"));
        let conf_head = DenseNet::new(n_feat, &[(h, Activation::Relu), (1, Activation::Sigmoid)], &mut r)?;
        let mut r = rng::rng(derive(seed, "clf"));
        let clf_head = DenseNet::new(
            n_feat,
            &[(h, Activation::Relu), (seen_ids.len() + 1, Activation::Softmax)],
            &mut r,
        )?;
        Ok(DetectorParams {
            locator,
            conf_head,
            clf_head,
            anchors: cfg.anchors.clone(),
            grid,
            seen_ids: seen_ids.to_vec(),
        })
    }

    pub fn n_feat(&self) -> usize {
        self.conf_head.input_dim()
    }

    pub fn confidence(&self, feature: &[f64]) -> Result<f64> {
        Ok(self.conf_head.predict(feature)?[0])
    }

    /// Index of a seen class in the classifier output.
    pub fn class_index(&self, class_id: usize) -> Option<usize> {
        self.seen_ids.iter().position(|&c| c == class_id)
    }

    pub fn predict_cell(&self, scene: &Scene, cell: usize) -> Result<CellPrediction> {
        let f = scene.cell_feature(cell);
        let confidence = self.confidence(f)?;
        let raw = self.locator.predict(f)?;
        let (row, col) = (cell / self.grid, cell % self.grid);
        let boxes = self
            .anchors
            .0
            .iter()
            .enumerate()
            .map(|(a, &anchor)| {
                let t = [raw[4 * a], raw[4 * a + 1], raw[4 * a + 2], raw[4 * a + 3]];
                decode_box((row, col), anchor, t, self.grid)
            })
            .collect();
        let class_probs = self.clf_head.predict(f)?;
        Ok(CellPrediction {
            confidence,
            boxes,
            class_probs,
        })
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.grid != self.grid || scene.n_feat != self.n_feat() {
            return Err(Error::contract(format!(
                "scene is {}x{}x{} but the detector expects {}x{}x{}",
                scene.grid,
                scene.grid,
                scene.n_feat,
                self.grid,
                self.grid,
                self.n_feat()
            )));
        }
        Ok(())
    }

    pub fn predict_scene(&self, scene: &Scene) -> Result<Vec<CellPrediction>> {
        self.check_scene(scene)?;
        (0..scene.num_cells()).map(|c| self.predict_cell(scene, c)).collect()
    }

    /// Replaces the confidence head, leaving locator and classifier untouched.
    pub fn with_conf_head(&self, conf_head: DenseNet) -> Result<Self> {
        if conf_head.input_dim() != self.conf_head.input_dim()
            || conf_head.output_dim() != self.conf_head.output_dim()
        {
            return Err(Error::contract(format!(
                "confidence head maps {}→{} but the detector needs {}→{}",
                conf_head.input_dim(),
                conf_head.output_dim(),
                self.conf_head.input_dim(),
                self.conf_head.output_dim()
            )));
        }
        Ok(DetectorParams {
            conf_head,
            ..self.clone()
        })
    }

    pub fn save(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        checkpoint::save(&dir.join("locator.json"), &self.locator, config_digest)?;
        checkpoint::save(&dir.join("conf.json"), &self.conf_head, config_digest)?;
        checkpoint::save(&dir.join("clf.json"), &self.clf_head, config_digest)?;
        util::write_json(
            &dir.join("anchors.json"),
            &DetectorMeta {
                anchors: self.anchors.clone(),
                grid: self.grid,
                seen_ids: self.seen_ids.clone(),
                config_digest: config_digest.map(str::to_owned),
            },
        )
    }

    pub fn load(dir: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let meta: DetectorMeta = util::read_json(&dir.join("anchors.json"))?;
        util::check_digest("anchors.json", expected_digest, meta.config_digest.as_deref())?;
        Ok(DetectorParams {
            locator: checkpoint::load(&dir.join("locator.json"), expected_digest)?,
            conf_head: checkpoint::load(&dir.join("conf.json"), expected_digest)?,
            clf_head: checkpoint::load(&dir.join("clf.json"), expected_digest)?,
            anchors: meta.anchors,
            grid: meta.grid,
            seen_ids: meta.seen_ids,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorMeta {
    anchors: AnchorSet,
    grid: usize,
    seen_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Training targets for one scene, indexed by `cell · |anchors| + anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    /// Object index for responsible pairs.
    pub responsible: Vec<Option<usize>>,
    /// 1 for responsible pairs, 0 otherwise.
    pub conf: Vec<f64>,
    pub n_anchors: usize,
}

impl SceneTargets {
    pub fn num_responsible(&self) -> usize {
        self.responsible.iter().filter(|r| r.is_some()).count()
    }

    /// Per-cell confidence target: 1 if any anchor of the cell is responsible.
    pub fn cell_conf(&self, cell: usize) -> f64 {
        let a = self.n_anchors;
        self.conf[cell * a..(cell + 1) * a].iter().copied().fold(0.0, f64::max)
    }

    /// Object each anchor regresses toward. Every anchor of a cell holding a
    /// responsible pair regresses to the cell's responsible object whose
    /// shape best matches that anchor.
    pub fn regression_targets(&self, scene: &Scene, anchors: &AnchorSet) -> Vec<Option<usize>> {
        let a = self.n_anchors;
        let mut out = vec![None; self.responsible.len()];
        for cell in 0..self.responsible.len() / a {
            let owners: Vec<usize> = self.responsible[cell * a..(cell + 1) * a].iter().flatten().copied().collect();
            if owners.is_empty() {
                continue;
            }
            for (k, &(aw, ah)) in anchors.0.iter().enumerate() {
                out[cell * a + k] = Some(match self.responsible[cell * a + k] {
                    Some(o) => o,
                    None => *owners
                        .iter()
                        .max_by(|&&p, &&q| {
                            let s = |o: usize| {
                                let b = scene.objects[o].bbox;
                                let inter = aw.min(b.w) * ah.min(b.h);
                                inter / (aw * ah + b.area() - inter)
                            };
                            s(p).total_cmp(&s(q)).then(q.cmp(&p))
                        })
                        .unwrap(),
                });
            }
        }
        out
    }
}

/// For each object, the pair (center cell, best-shape anchor) is responsible.
/// When two objects claim one pair the larger box wins, then the lower index.
pub fn assign_targets(scene: &Scene, anchors: &AnchorSet) -> SceneTargets {
    let a = anchors.len();
    let n = scene.num_cells() * a;
    let mut responsible: Vec<Option<usize>> = vec![None; n];
    for (oi, obj) in scene.objects.iter().enumerate() {
        let (row, col) = obj.bbox.center_cell(scene.grid);
        let k = anchors.best_for(obj.bbox.w, obj.bbox.h);
        let slot = &mut responsible[(row * scene.grid + col) * a + k];
        match *slot {
            Some(prev) if scene.objects[prev].bbox.area() >= obj.bbox.area() => {}
            _ => *slot = Some(oi),
        }
    }
    let conf = responsible.iter().map(|r| if r.is_some() { 1.0 } else { 0.0 }).collect();
    SceneTargets {
        responsible,
        conf,
        n_anchors: a,
    }
}

fn box_target(obj: &BoundingBox, cell: (usize, usize), anchor: (f64, f64), grid: usize) -> [f64; 4] {
    let g = grid as f64;
    [
        obj.x * g - cell.1 as f64,
        obj.y * g - cell.0 as f64,
        (obj.w / anchor.0).ln(),
        (obj.h / anchor.1).ln(),
    ]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub conf: f64,
    pub coord: f64,
    pub class: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.conf + self.coord + self.class
    }
}

pub struct DetectorGrads {
    pub locator: Gradients,
    pub conf: Gradients,
    pub clf: Gradients,
}

/// Pretraining loss for a batch of scenes, normalized by the number of cells:
/// squared confidence error on every cell, `λ_coord`-weighted squared box
/// error on regression pairs, cross-entropy on responsible pairs.
pub fn detector_loss(params: &DetectorParams, scenes: &[&Scene], lambda_coord: f64) -> Result<(LossParts, DetectorGrads)> {
    let mut grads = DetectorGrads {
        locator: Gradients::zeros_like(&params.locator),
        conf: Gradients::zeros_like(&params.conf_head),
        clf: Gradients::zeros_like(&params.clf_head),
    };
    let mut parts = LossParts::default();
    let n_cells: usize = scenes.iter().map(|s| s.num_cells()).sum();
    if n_cells == 0 {
        return Err(Error::data("empty training batch"));
    }
    let norm = 1.0 / n_cells as f64;
    let a = params.anchors.len();
    for scene in scenes {
        params.check_scene(scene)?;
        let targets = assign_targets(scene, &params.anchors);
        let regress = targets.regression_targets(scene, &params.anchors);
        for cell in 0..scene.num_cells() {
            let f = scene.cell_feature(cell);
            let (c, tape) = params.conf_head.forward(f)?;
            let d = c[0] - targets.cell_conf(cell);
            parts.conf += norm * d * d;
            params.conf_head.backward_accumulate(&tape, &[2.0 * d * norm], Some(&mut grads.conf))?;

            let reg = &regress[cell * a..(cell + 1) * a];
            if reg.iter().all(Option::is_none) {
                continue;
            }
            let (row, col) = (cell / scene.grid, cell % scene.grid);
            let (raw, tape) = params.locator.forward(f)?;
            let mut up = vec![0.0; raw.len()];
            for (k, obj) in reg.iter().enumerate() {
                let Some(o) = obj else { continue };
                let t = box_target(&scene.objects[*o].bbox, (row, col), params.anchors.0[k], scene.grid);
                let sx = sigmoid(raw[4 * k]);
                let sy = sigmoid(raw[4 * k + 1]);
                let pred = [sx, sy, raw[4 * k + 2], raw[4 * k + 3]];
                let dpred = [sx * (1.0 - sx), sy * (1.0 - sy), 1.0, 1.0];
                for m in 0..4 {
                    let e = pred[m] - t[m];
                    parts.coord += norm * lambda_coord * e * e;
                    up[4 * k + m] = norm * lambda_coord * 2.0 * e * dpred[m];
                }
            }
            params.locator.backward_accumulate(&tape, &up, Some(&mut grads.locator))?;

            let owners = targets.responsible[cell * a..(cell + 1) * a].iter().flatten();
            let (probs, tape) = params.clf_head.forward(f)?;
            let mut up = vec![0.0; probs.len()];
            let mut any = false;
            for &o in owners {
                let idx = params.class_index(scene.objects[o].class_id).ok_or_else(|| {
                    Error::data(format!("object of class {} is not a seen class", scene.objects[o].class_id))
                })?;
                let (l, g) = cross_entropy(&probs, idx)?;
                parts.class += norm * l;
                up.iter_mut().zip(&g).for_each(|(u, gi)| *u += norm * gi);
                any = true;
            }
            if any {
                params.clf_head.backward_accumulate(&tape, &up, Some(&mut grads.clf))?;
            }
        }
    }
    Ok((parts, grads))
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: DetectorParams,
    /// Mean per-batch loss for each epoch.
    pub trace: Vec<f64>,
}

pub fn pretrain_detector(
    train: &[Scene],
    n_feat: usize,
    seen_ids: &[usize],
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    if train.is_empty() {
        return Err(Error::data("cannot pretrain on an empty train split"));
    }
    let grid = train[0].grid;
    let mut params = DetectorParams::new(n_feat, seen_ids, grid, cfg, derive(seed, "init"))?;
    let adam = AdamConfig::default();
    let mut st_loc = AdamState::new(&params.locator, adam);
    let mut st_conf = AdamState::new(&params.conf_head, adam);
    let mut st_clf = AdamState::new(&params.clf_head, adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::rng(derive(seed, "shuffle"));
    let bs = cfg.scenes_per_batch.max(1);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at_epoch(epoch);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let scenes: Vec<&Scene> = chunk.iter().map(|&i| &train[i]).collect();
            let (parts, g) = detector_loss(&params, &scenes, cfg.lambda_coord)?;
            let l = parts.total();
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("detector pretraining, epoch {epoch}"),
                    detail: format!("loss = {l}; trace so far {trace:?}"),
                });
            }
            total += l;
            batches += 1;
            st_loc.step(&mut params.locator, &g.locator, lr)?;
            st_conf.step(&mut params.conf_head, &g.conf, lr)?;
            st_clf.step(&mut params.clf_head, &g.clf, lr)?;
        }
        let mean = total / batches as f64;
        log::debug!("detector epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(PretrainOutput { params, trace })
}

/// Decodes every (cell, anchor) prediction, keeps those with confidence at
/// least `conf_threshold`, sorts by confidence (ties by cell then anchor) and
/// applies class-agnostic NMS that drops boxes with IoU above `nms_iou`
/// against an already kept box.
pub fn detect(params: &DetectorParams, scene: &Scene, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf_threshold) || !(0.0..=1.0).contains(&nms_iou) {
        return Err(Error::contract("thresholds must lie in [0, 1]"));
    }
    let preds = params.predict_scene(scene)?;
    let n_seen = params.seen_ids.len();
    let mut dets = Vec::new();
    for (cell, p) in preds.iter().enumerate() {
        if p.confidence < conf_threshold {
            continue;
        }
        let (k, &score) = p.class_probs[..n_seen]
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        for (anchor, b) in p.boxes.iter().enumerate() {
            dets.push(Detection {
                bbox: *b,
                confidence: p.confidence,
                class_id: params.seen_ids[k],
                class_score: score,
                cell,
                anchor,
            });
        }
    }
    sort_detections(&mut dets);
    Ok(nms(dets, nms_iou))
}

/// Descending confidence, ties by ascending (cell, anchor).
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.cell.cmp(&b.cell))
            .then(a.anchor.cmp(&b.anchor))
    });
}

/// Greedy NMS over detections already in ranking order.
pub fn nms(sorted: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}
