//! Balanced pool of real foreground/background cell features drawn from a
//! pretrained detector's own predictions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{CellPrediction, DetectorParams};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::synth::Scene;
use crate::util;

pub const BACKGROUND: i64 = -1;
pub const FG_IOU: f64 = 0.5;
pub const FG_CONF: f64 = 0.6;
pub const BG_IOU: f64 = 0.2;
pub const BG_CONF: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPoint {
    pub f: Vec<f64>,
    pub conf: f64,
    /// Class id, or −1 for background.
    pub class: i64,
}

impl DataPoint {
    pub fn is_background(&self) -> bool {
        self.class == BACKGROUND
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleStats {
    pub foreground_count: usize,
    pub background_count: usize,
    pub ratio: f64,
    /// Points per class id, background under "-1".
    pub per_class: BTreeMap<String, usize>,
    /// Scenes that had fewer background candidates than their quota.
    pub shortfall_scenes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampledSet {
    pub points: Vec<DataPoint>,
    pub foreground_count: usize,
    pub background_count: usize,
    pub ratio: f64,
    pub shortfall_scenes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResampledFile {
    points: Vec<DataPoint>,
    stats: ResampleStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

impl ResampledSet {
    pub fn stats(&self) -> ResampleStats {
        let mut per_class = BTreeMap::new();
        for p in &self.points {
            *per_class.entry(p.class.to_string()).or_insert(0) += 1;
        }
        ResampleStats {
            foreground_count: self.foreground_count,
            background_count: self.background_count,
            ratio: self.ratio,
            per_class,
            shortfall_scenes: self.shortfall_scenes,
        }
    }

    pub fn foreground(&self) -> impl Iterator<Item = &DataPoint> {
        self.points.iter().filter(|p| !p.is_background())
    }

    pub fn background(&self) -> impl Iterator<Item = &DataPoint> {
        self.points.iter().filter(|p| p.is_background())
    }

    pub fn save(&self, path: &Path, config_digest: Option<&str>) -> Result<()> {
        util::write_json(
            path,
            &ResampledFile {
                points: self.points.clone(),
                stats: self.stats(),
                config_digest: config_digest.map(str::to_owned),
            },
        )
    }

    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let file: ResampledFile = util::read_json(path)?;
        util::check_digest("dres.json", expected_digest, file.config_digest.as_deref())?;
        let fg = file.points.iter().filter(|p| !p.is_background()).count();
        let set = ResampledSet {
            foreground_count: fg,
            background_count: file.points.len() - fg,
            points: file.points,
            ratio: file.stats.ratio,
            shortfall_scenes: file.stats.shortfall_scenes,
        };
        if set.foreground_count != file.stats.foreground_count || set.background_count != file.stats.background_count {
            return Err(Error::data("dres.json stats disagree with its points"));
        }
        Ok(set)
    }
}

/// Per cell: the anchor whose decoded box best overlaps any ground truth, that
/// IoU, and the index of the matched object (lowest index on ties).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMatch {
    pub anchor: usize,
    pub iou: f64,
    pub object: Option<usize>,
}

pub fn best_cell_match(pred: &CellPrediction, scene: &Scene) -> CellMatch {
    let mut best = CellMatch { anchor: 0, iou: 0.0, object: None };
    for (a, b) in pred.boxes.iter().enumerate() {
        for (o, obj) in scene.objects.iter().enumerate() {
            let v = iou(b, &obj.bbox);
            if v > best.iou {
                best = CellMatch { anchor: a, iou: v, object: Some(o) };
            }
        }
    }
    best
}

fn scene_matches(scene: &Scene, detector: &DetectorParams) -> Result<(Vec<CellPrediction>, Vec<CellMatch>)> {
    let preds = detector.predict_scene(scene)?;
    let matches = preds.iter().map(|p| best_cell_match(p, scene)).collect();
    Ok((preds, matches))
}

fn foreground_from(scene: &Scene, preds: &[CellPrediction], matches: &[CellMatch]) -> Vec<DataPoint> {
    let mut out = Vec::new();
    for (cell, (p, m)) in preds.iter().zip(matches).enumerate() {
        if m.iou > FG_IOU && p.confidence > FG_CONF {
            let o = m.object.expect("positive IoU implies a matched object");
            out.push(DataPoint {
                f: scene.cell_feature(cell).to_vec(),
                conf: p.confidence,
                class: scene.objects[o].class_id as i64,
            });
        }
    }
    out
}

/// Returns the points and whether the candidate pool fell short of the quota.
fn background_from(
    scene: &Scene,
    preds: &[CellPrediction],
    matches: &[CellMatch],
    k_m: usize,
    ratio: f64,
) -> (Vec<DataPoint>, bool) {
    let quota = util::round_half_up(ratio * k_m as f64);
    if quota == 0 {
        return (Vec::new(), false);
    }
    let mut candidates: Vec<usize> = (0..preds.len())
        .filter(|&c| matches[c].iou < BG_IOU && preds[c].confidence < BG_CONF)
        .collect();
    candidates.sort_by(|&a, &b| matches[a].iou.total_cmp(&matches[b].iou).then(a.cmp(&b)));
    let short = candidates.len() < quota;
    if short {
        log::warn!(
            "scene {}: {} background candidates for a quota of {quota}",
            scene.scene_id,
            candidates.len()
        );
    }
    let points = candidates
        .into_iter()
        .take(quota)
        .map(|c| DataPoint {
            f: scene.cell_feature(c).to_vec(),
            conf: preds[c].confidence,
            class: BACKGROUND,
        })
        .collect();
    (points, short)
}

/// Cells whose best prediction overlaps a ground-truth object with IoU above
/// 0.5 and whose confidence exceeds 0.6.
pub fn collect_foreground(scene: &Scene, detector: &DetectorParams) -> Result<Vec<DataPoint>> {
    let (preds, matches) = scene_matches(scene, detector)?;
    Ok(foreground_from(scene, &preds, &matches))
}

/// The `round(ratio · k_m)` cells with the smallest best-IoU among those with
/// IoU below 0.2 and confidence below 0.2; fewer if candidates run out.
pub fn collect_background(scene: &Scene, detector: &DetectorParams, k_m: usize, ratio: f64) -> Result<Vec<DataPoint>> {
    let (preds, matches) = scene_matches(scene, detector)?;
    Ok(background_from(scene, &preds, &matches, k_m, ratio).0)
}

pub fn build_resampled_set(train: &[Scene], detector: &DetectorParams, ratio: f64) -> Result<ResampledSet> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::config(format!("background ratio {ratio} must be finite and nonnegative")));
    }
    if train.is_empty() {
        return Err(Error::data("cannot resample from an empty train split"));
    }
    let mut order: Vec<&Scene> = train.iter().collect();
    order.sort_by_key(|s| s.scene_id);
    let mut points = Vec::new();
    let (mut fg_total, mut bg_total, mut shortfall) = (0, 0, 0);
    for scene in order {
        let (preds, matches) = scene_matches(scene, detector)?;
        let fg = foreground_from(scene, &preds, &matches);
        let (bg, short) = background_from(scene, &preds, &matches, fg.len(), ratio);
        fg_total += fg.len();
        bg_total += bg.len();
        shortfall += short as usize;
        points.extend(fg);
        points.extend(bg);
    }
    if fg_total == 0 {
        return Err(Error::data(
            "no training cell passed the foreground gates; the detector is too weak to resample from",
        ));
    }
    Ok(ResampledSet {
        points,
        foreground_count: fg_total,
        background_count: bg_total,
        ratio,
        shortfall_scenes: shortfall,
    })
}
