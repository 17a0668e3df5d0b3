//! Synthetic detection benchmark.
//!
//! Classes carry an attribute vector `S_c ∈ [0,1]^N_attr` and a visual
//! prototype `A·S_c + δ_c`, where `A` is a fixed full-rank mixing matrix and
//! `‖δ_c‖ ≤ σ_class`. A scene is a `G×G` grid of cell features; each cell
//! holds Gaussian background noise plus, for every object, the fraction of
//! the cell covered by the object's box times the object's class prototype.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::rng::{self, derive, derive_indexed};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_attr: usize,
    pub n_feat: usize,
    /// Intrinsic dimension of the semantic law; semantics are an affine image
    /// of a `semantic_rank`-dimensional Gaussian, then clamped.
    pub semantic_rank: usize,
    pub semantic_base: f64,
    pub semantic_spread: f64,
    pub attr_noise: f64,
    /// Scale of the mixing matrix entries (`gain / sqrt(n_feat)` std).
    pub mixing_gain: f64,
    pub sigma_class: f64,
    pub sigma_bg: f64,
    /// Per-cell probability of background clutter: a feature `a·A·s` for a
    /// fresh draw `s` of the semantic law, `a ~ U(clutter_min, clutter_max)`.
    pub clutter_prob: f64,
    pub clutter_min: f64,
    pub clutter_max: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            n_seen: 10,
            n_unseen: 10,
            n_attr: 20,
            n_feat: 64,
            semantic_rank: 6,
            semantic_base: 0.3,
            semantic_spread: 0.35,
            attr_noise: 0.03,
            mixing_gain: 1.0,
            sigma_class: 0.1,
            sigma_bg: 0.1,
            clutter_prob: 0.25,
            clutter_min: 0.3,
            clutter_max: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub semantic: Vec<f64>,
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCatalog {
    pub classes: Vec<ClassInfo>,
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
    pub n_attr: usize,
    pub n_feat: usize,
    /// Row-major `n_feat × n_attr`.
    pub mixing: Vec<f64>,
    pub sigma_class: f64,
    pub sigma_bg: f64,
    pub semantic_law: SemanticLaw,
    pub clutter: ClutterLaw,
    pub seed: u64,
}

/// Semantics are `clamp(base + spread·B·u + noise·ε, 0, 1)` with `u ~ N(0, I_rank)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticLaw {
    pub rank: usize,
    pub base: f64,
    pub spread: f64,
    pub noise: f64,
    /// Row-major `n_attr × rank`.
    pub basis: Vec<f64>,
}

impl SemanticLaw {
    pub fn sample(&self, r: &mut rng::Rng) -> Vec<f64> {
        let u: Vec<f64> = (0..self.rank).map(|_| normal(r)).collect();
        self.basis
            .chunks(self.rank)
            .map(|row| {
                let lin: f64 = row.iter().zip(&u).map(|(b, x)| b * x).sum();
                (self.base + self.spread * lin + self.noise * normal(r)).clamp(0.0, 1.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClutterLaw {
    pub prob: f64,
    pub min: f64,
    pub max: f64,
}

impl ClassCatalog {
    pub fn class(&self, id: usize) -> Option<&ClassInfo> {
        self.classes.get(id).filter(|c| c.id == id)
    }

    pub fn semantic(&self, id: usize) -> Result<&[f64]> {
        self.class(id)
            .map(|c| c.semantic.as_slice())
            .ok_or_else(|| Error::contract(format!("class {id} is not in the catalog")))
    }

    pub fn is_seen(&self, id: usize) -> bool {
        self.seen_ids.binary_search(&id).is_ok()
    }

    pub fn is_unseen(&self, id: usize) -> bool {
        self.unseen_ids.binary_search(&id).is_ok()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// `A·s` for the stored mixing matrix.
    pub fn mix(&self, s: &[f64]) -> Vec<f64> {
        (0..self.n_feat)
            .map(|r| {
                let row = &self.mixing[r * self.n_attr..(r + 1) * self.n_attr];
                row.iter().zip(s).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Spectral norm of the mixing matrix (power iteration on `AᵀA`).
    pub fn mixing_operator_norm(&self) -> f64 {
        let gram = gram(&self.mixing, self.n_feat, self.n_attr);
        let n = self.n_attr;
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| gram[i * n + j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm;
            v = w.into_iter().map(|x| x / norm).collect();
            if (next - lambda).abs() <= 1e-14 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda.sqrt()
    }

    fn validate(&self) -> Result<()> {
        let mut ids = self.seen_ids.clone();
        ids.extend(&self.unseen_ids);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::data("seen and unseen class sets intersect"));
        }
        for c in &self.classes {
            if c.semantic.len() != self.n_attr || c.prototype.len() != self.n_feat {
                return Err(Error::data(format!("class {} has wrong vector sizes", c.id)));
            }
            if c.semantic.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::data(format!("class {} semantic outside [0,1]", c.id)));
            }
        }
        Ok(())
    }
}

fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] += row[i] * row[j];
            }
        }
    }
    g
}

/// Cholesky succeeds iff the Gram matrix is positive definite, i.e. full column rank.
fn full_column_rank(a: &[f64], rows: usize, cols: usize) -> bool {
    let mut l = gram(a, rows, cols);
    let n = cols;
    for j in 0..n {
        let mut d = l[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 1e-10 {
            return false;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = l[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    true
}

fn normal(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn make_catalog(cfg: &CatalogConfig, seed: u64) -> Result<ClassCatalog> {
    if cfg.n_seen + cfg.n_unseen < 2 {
        return Err(Error::config("need at least two classes to form splits"));
    }
    if cfg.n_attr < 2 {
        return Err(Error::config("n_attr must be at least 2"));
    }
    if cfg.n_feat < cfg.n_attr {
        return Err(Error::config("n_feat must be at least n_attr"));
    }
    if cfg.semantic_rank == 0 || cfg.sigma_class < 0.0 || cfg.sigma_bg < 0.0 {
        return Err(Error::config("semantic_rank must be positive and sigmas non-negative"));
    }
    if !(0.0..=1.0).contains(&cfg.clutter_prob) || !(0.0 <= cfg.clutter_min && cfg.clutter_min <= cfg.clutter_max) {
        return Err(Error::config("clutter probability must lie in [0, 1] with 0 ≤ min ≤ max"));
    }
    let n_classes = cfg.n_seen + cfg.n_unseen;

    let mut r = rng::rng(derive(seed, "semantic-basis"));
    let basis: Vec<f64> = (0..cfg.n_attr * cfg.semantic_rank)
        .map(|_| normal(&mut r) / (cfg.semantic_rank as f64).sqrt())
        .collect();

    let law = SemanticLaw {
        rank: cfg.semantic_rank,
        base: cfg.semantic_base,
        spread: cfg.semantic_spread,
        noise: cfg.attr_noise,
        basis,
    };
    let mut r = rng::rng(derive(seed, "semantics"));
    let semantics: Vec<Vec<f64>> = (0..n_classes).map(|_| law.sample(&mut r)).collect();

    let mut r = rng::rng(derive(seed, "mixing"));
    let std = cfg.mixing_gain / (cfg.n_feat as f64).sqrt();
    let mixing = loop {
        let m: Vec<f64> = (0..cfg.n_feat * cfg.n_attr)
            .map(|_| std * normal(&mut r))
            .collect();
        if full_column_rank(&m, cfg.n_feat, cfg.n_attr) {
            break m;
        }
    };

    let mut r = rng::rng(derive(seed, "split"));
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut r);
    let mut seen_ids = order[..cfg.n_seen].to_vec();
    let mut unseen_ids = order[cfg.n_seen..].to_vec();
    seen_ids.sort_unstable();
    unseen_ids.sort_unstable();

    let mut catalog = ClassCatalog {
        classes: Vec::with_capacity(n_classes),
        seen_ids,
        unseen_ids,
        n_attr: cfg.n_attr,
        n_feat: cfg.n_feat,
        mixing,
        sigma_class: cfg.sigma_class,
        sigma_bg: cfg.sigma_bg,
        semantic_law: law,
        clutter: ClutterLaw {
            prob: cfg.clutter_prob,
            min: cfg.clutter_min,
            max: cfg.clutter_max,
        },
        seed,
    };
    let mut r = rng::rng(derive(seed, "perturbation"));
    for (id, semantic) in semantics.into_iter().enumerate() {
        let dir: Vec<f64> = (0..cfg.n_feat).map(|_| normal(&mut r)).collect();
        let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let radius = cfg.sigma_class * r.random::<f64>();
        let prototype = catalog
            .mix(&semantic)
            .into_iter()
            .zip(&dir)
            .map(|(p, d)| p + radius * d / dn)
            .collect();
        catalog.classes.push(ClassInfo {
            id,
            name: format!("class{id:02}"),
            semantic,
            prototype,
        });
    }
    catalog.validate()?;
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
    TestMix,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::TestSeen, Split::TestUnseen, Split::TestMix];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
            Split::TestMix => "test_mix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectLabel {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: usize,
    pub split: Split,
    pub grid: usize,
    pub n_feat: usize,
    pub objects: Vec<ObjectLabel>,
    /// Row-major `grid × grid × n_feat`; cell `(row, col)` starts at `(row·grid + col)·n_feat`.
    pub features: Vec<f64>,
}

impl Scene {
    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell_feature(&self, cell: usize) -> &[f64] {
        &self.features[cell * self.n_feat..(cell + 1) * self.n_feat]
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Object placement law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneLaw {
    /// Box side lengths are drawn uniformly in `[size_min_cells, size_max_cells] / grid`.
    pub size_min_cells: f64,
    pub size_max_cells: f64,
    /// Maximum IoU between any two objects of one scene.
    pub max_pair_iou: f64,
    /// Two objects may not share a center cell when set.
    pub distinct_center_cells: bool,
    pub max_retries: usize,
    pub max_objects: usize,
}

impl Default for SceneLaw {
    fn default() -> Self {
        SceneLaw {
            size_min_cells: 1.5,
            size_max_cells: 2.0,
            max_pair_iou: 0.0,
            distinct_center_cells: true,
            max_retries: 200,
            max_objects: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub allowed_classes: Vec<usize>,
    /// Object `i` (for `i < must_include.len()`) is drawn from `must_include[i]`.
    pub must_include: Vec<Vec<usize>>,
    pub law: SceneLaw,
}

/// Lays out objects for one scene without rendering features.
pub fn layout_objects(spec: &SceneSpec, grid: usize, seed: u64) -> Result<Vec<ObjectLabel>> {
    let law = &spec.law;
    if spec.n_objects > law.max_objects {
        return Err(Error::contract(format!(
            "{} objects requested, at most {} allowed",
            spec.n_objects, law.max_objects
        )));
    }
    if spec.n_objects > 0 && spec.allowed_classes.is_empty() {
        return Err(Error::contract("no allowed classes for scene objects"));
    }
    if spec.must_include.len() > spec.n_objects || spec.must_include.iter().any(Vec::is_empty) {
        return Err(Error::contract("must_include does not fit the object count"));
    }
    if !(law.size_min_cells > 0.0 && law.size_min_cells <= law.size_max_cells) {
        return Err(Error::config("invalid object size range"));
    }
    let g = grid as f64;
    let mut r = rng::rng(derive(seed, "layout"));
    let mut objects: Vec<ObjectLabel> = Vec::with_capacity(spec.n_objects);
    for i in 0..spec.n_objects {
        let pool = spec.must_include.get(i).unwrap_or(&spec.allowed_classes);
        let class_id = pool[r.random_range(0..pool.len())];
        let mut placed = None;
        for _ in 0..law.max_retries.max(1) {
            let w = r.random_range(law.size_min_cells..=law.size_max_cells) / g;
            let h = r.random_range(law.size_min_cells..=law.size_max_cells) / g;
            let w = w.min(1.0);
            let h = h.min(1.0);
            let x = if w < 1.0 { r.random_range(w / 2.0..=1.0 - w / 2.0) } else { 0.5 };
            let y = if h < 1.0 { r.random_range(h / 2.0..=1.0 - h / 2.0) } else { 0.5 };
            let b = BoundingBox::new(x, y, w, h)?;
            let ok = objects.iter().all(|o| {
                iou(&o.bbox, &b) <= law.max_pair_iou
                    && (!law.distinct_center_cells || o.bbox.center_cell(grid) != b.center_cell(grid))
            });
            if ok {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::data(format!(
                "could not place object {i} after {} attempts",
                law.max_retries
            ))
        })?;
        objects.push(ObjectLabel { bbox, class_id });
    }
    Ok(objects)
}

/// Background noise and clutter plus coverage-weighted prototypes.
///
/// Noise is drawn from its own stream, so rasterizing the same `noise_seed`
/// with and without objects isolates the object term exactly.
pub fn rasterize(
    catalog: &ClassCatalog,
    objects: &[ObjectLabel],
    grid: usize,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let nf = catalog.n_feat;
    let mut r = rng::rng(noise_seed);
    let mut features: Vec<f64> = (0..grid * grid * nf)
        .map(|_| catalog.sigma_bg * normal(&mut r))
        .collect();
    let law = &catalog.clutter;
    if law.prob > 0.0 {
        let mut r = rng::rng(derive(noise_seed, "clutter"));
        for cell in features.chunks_mut(nf) {
            if r.random::<f64>() < law.prob {
                let a = law.min + (law.max - law.min) * r.random::<f64>();
                let s = catalog.semantic_law.sample(&mut r);
                cell.iter_mut().zip(catalog.mix(&s)).for_each(|(f, m)| *f += a * m);
            }
        }
    }
    for o in objects {
        let proto = &catalog
            .class(o.class_id)
            .ok_or_else(|| Error::contract(format!("class {} is not in the catalog", o.class_id)))?
            .prototype;
        for row in 0..grid {
            for col in 0..grid {
                let a = o.bbox.cell_overlap(row, col, grid);
                if a > 0.0 {
                    let cell = &mut features[(row * grid + col) * nf..(row * grid + col + 1) * nf];
                    cell.iter_mut().zip(proto).for_each(|(f, p)| *f += a * p);
                }
            }
        }
    }
    Ok(features)
}

pub fn render_scene(
    catalog: &ClassCatalog,
    grid: usize,
    spec: &SceneSpec,
    split: Split,
    scene_id: usize,
    seed: u64,
) -> Result<Scene> {
    if spec.allowed_classes.iter().any(|&c| catalog.class(c).is_none()) {
        return Err(Error::contract("allowed class outside the catalog"));
    }
    let objects = layout_objects(spec, grid, seed)?;
    let features = rasterize(catalog, &objects, grid, derive(seed, "noise"))?;
    Ok(Scene {
        scene_id,
        split,
        grid,
        n_feat: catalog.n_feat,
        objects,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    pub test_mix: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::TestSeen => self.test_seen,
            Split::TestUnseen => self.test_unseen,
            Split::TestMix => self.test_mix,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            test_seen: 150,
            test_unseen: 150,
            test_mix: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub grid: usize,
    pub counts: SplitCounts,
    pub min_objects: usize,
    pub max_objects: usize,
    pub law: SceneLaw,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            grid: 13,
            counts: SplitCounts::default(),
            min_objects: 1,
            max_objects: 4,
            law: SceneLaw::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub catalog: ClassCatalog,
    pub grid: usize,
    pub seed: u64,
    pub train: Vec<Scene>,
    pub test_seen: Vec<Scene>,
    pub test_unseen: Vec<Scene>,
    pub test_mix: Vec<Scene>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::TestSeen => &self.test_seen,
            Split::TestUnseen => &self.test_unseen,
            Split::TestMix => &self.test_mix,
        }
    }

    /// Checks the per-split class constraints for every scene.
    pub fn validate(&self) -> Result<()> {
        let cat = &self.catalog;
        for split in Split::ALL {
            for s in self.split(split) {
                if s.split != split || s.grid != self.grid || s.n_feat != cat.n_feat {
                    return Err(Error::data(format!("scene {} does not belong to {}", s.scene_id, split.as_str())));
                }
                if s.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::data(format!("scene {} has non-finite features", s.scene_id)));
                }
                let seen = s.objects.iter().filter(|o| cat.is_seen(o.class_id)).count();
                let unseen = s.objects.iter().filter(|o| cat.is_unseen(o.class_id)).count();
                if seen + unseen != s.objects.len() {
                    return Err(Error::data(format!("scene {} has objects outside the catalog", s.scene_id)));
                }
                let ok = match split {
                    Split::Train | Split::TestSeen => unseen == 0,
                    Split::TestUnseen => seen == 0,
                    Split::TestMix => seen >= 1 && unseen >= 1,
                };
                if !ok {
                    return Err(Error::data(format!(
                        "scene {} violates the {} class constraint",
                        s.scene_id,
                        split.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("bundle serializes");
        util::sha256_hex(&bytes)
    }

    /// Writes `catalog.json`, `bundle.json` and `scenes/<split>/<id>.json`.
    pub fn save(&self, dir: &Path, config_digest: Option<&str>) -> Result<()> {
        util::write_json(&dir.join("catalog.json"), &self.catalog)?;
        let mut index = BTreeMap::new();
        for split in Split::ALL {
            let ids: Vec<usize> = self.split(split).iter().map(|s| s.scene_id).collect();
            index.insert(split.as_str().to_owned(), ids);
            for s in self.split(split) {
                util::write_json(
                    &dir.join("scenes").join(split.as_str()).join(format!("{}.json", s.scene_id)),
                    s,
                )?;
            }
        }
        let meta = BundleMeta {
            grid: self.grid,
            seed: self.seed,
            scenes: index,
            config_digest: config_digest.map(str::to_owned),
        };
        util::write_json(&dir.join("bundle.json"), &meta)
    }

    pub fn load(dir: &Path, expected_digest: Option<&str>) -> Result<Self> {
        let meta: BundleMeta = util::read_json(&dir.join("bundle.json"))?;
        util::check_digest(&dir.display().to_string(), expected_digest, meta.config_digest.as_deref())?;
        let catalog: ClassCatalog = util::read_json(&dir.join("catalog.json"))?;
        let mut splits: BTreeMap<Split, Vec<Scene>> = BTreeMap::new();
        for split in Split::ALL {
            let ids = meta.scenes.get(split.as_str()).cloned().unwrap_or_default();
            let scenes = ids
                .iter()
                .map(|id| {
                    util::read_json(
                        &dir.join("scenes").join(split.as_str()).join(format!("{id}.json")),
                    )
                })
                .collect::<Result<Vec<Scene>>>()?;
            splits.insert(split, scenes);
        }
        let mut take = |s| splits.remove(&s).unwrap_or_default();
        let bundle = DatasetBundle {
            catalog,
            grid: meta.grid,
            seed: meta.seed,
            train: take(Split::Train),
            test_seen: take(Split::TestSeen),
            test_unseen: take(Split::TestUnseen),
            test_mix: take(Split::TestMix),
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    grid: usize,
    seed: u64,
    scenes: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

pub fn make_dataset(catalog: &ClassCatalog, cfg: &DatasetConfig, seed: u64) -> Result<DatasetBundle> {
    if cfg.grid == 0 {
        return Err(Error::config("grid must be positive"));
    }
    if cfg.min_objects > cfg.max_objects || cfg.max_objects > cfg.law.max_objects {
        return Err(Error::config("object count range is inconsistent with the scene law"));
    }
    let seen = catalog.seen_ids.clone();
    let unseen = catalog.unseen_ids.clone();
    if (cfg.counts.train > 0 || cfg.counts.test_seen > 0) && seen.is_empty() {
        return Err(Error::config("seen-only splits requested with no seen classes"));
    }
    if cfg.counts.test_unseen > 0 && unseen.is_empty() {
        return Err(Error::config("test_unseen requested with no unseen classes"));
    }
    if cfg.counts.test_mix > 0 && (unseen.is_empty() || seen.is_empty()) {
        return Err(Error::config("test_mix needs both seen and unseen classes"));
    }
    if cfg.counts.test_mix > 0 && cfg.max_objects < 2 {
        return Err(Error::config("test_mix needs at least two objects per scene"));
    }
    let mut all = seen.clone();
    all.extend(&unseen);
    all.sort_unstable();

    let build = |split: Split| -> Result<Vec<Scene>> {
        (0..cfg.counts.get(split))
            .map(|i| {
                let scene_seed = derive_indexed(seed, split.as_str(), i as u64);
                let mut r = rng::rng(derive(scene_seed, "count"));
                let (allowed, must, min) = match split {
                    Split::Train | Split::TestSeen => (seen.clone(), vec![], cfg.min_objects),
                    Split::TestUnseen => (unseen.clone(), vec![], cfg.min_objects),
                    Split::TestMix => (all.clone(), vec![seen.clone(), unseen.clone()], cfg.min_objects.max(2)),
                };
                let n_objects = r.random_range(min..=cfg.max_objects);
                let spec = SceneSpec {
                    n_objects,
                    allowed_classes: allowed,
                    must_include: must,
                    law: cfg.law.clone(),
                };
                render_scene(catalog, cfg.grid, &spec, split, i, scene_seed)
            })
            .collect()
    };
    let bundle = DatasetBundle {
        catalog: catalog.clone(),
        grid: cfg.grid,
        seed,
        train: build(Split::Train)?,
        test_seen: build(Split::TestSeen)?,
        test_unseen: build(Split::TestUnseen)?,
        test_mix: build(Split::TestMix)?,
    };
    bundle.validate()?;
    Ok(bundle)
}
