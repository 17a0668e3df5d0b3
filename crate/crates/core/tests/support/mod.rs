#![allow(dead_code)]

use delo::detector::{detector_loss, DetectorConfig, DetectorParams};
use delo::generator::{
    attr_target, attribute_loss, classifier_loss, generator_loss, Ablation, CheckerHeads, GenExample, GeneratorConfig,
    GeneratorParams, HeadsConfig, LossWeights,
};
use delo::numerics::gradcheck::{check_params, sample_coords, CheckResult};
use delo::numerics::{Activation, DenseNet, Gradients};
use delo::resample::{DataPoint, BACKGROUND};
use delo::retrain::confidence_loss;
use delo::rng::{self, derive};
use delo::synth::{make_catalog, render_scene, CatalogConfig, ClassCatalog, Scene, SceneLaw, SceneSpec, Split};
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const COORDS_PER_NET: usize = 24;

/// Worst relative error per network for one seed.
pub type Report = Vec<(&'static str, CheckResult)>;

fn scenes(catalog: &ClassCatalog, seed: u64) -> Vec<Scene> {
    (0..2)
        .map(|i| {
            let spec = SceneSpec {
                n_objects: 2 + i,
                allowed_classes: catalog.seen_ids.clone(),
                must_include: Vec::new(),
                law: SceneLaw::default(),
            };
            render_scene(catalog, 13, &spec, Split::Train, i, derive(seed, &format!("scene{i}"))).unwrap()
        })
        .collect()
}

fn check(net: &DenseNet, g: &Gradients, seed: u64, tag: &str, loss: impl FnMut(&DenseNet) -> f64) -> CheckResult {
    let coords = sample_coords(net, COORDS_PER_NET, &mut rng::rng(derive(seed, tag)));
    check_params(net, g, &coords, STEP, loss)
}

pub fn detector_checks(seed: u64) -> Report {
    let catalog = make_catalog(&CatalogConfig::default(), seed).unwrap();
    let owned = scenes(&catalog, seed);
    let batch: Vec<&Scene> = owned.iter().collect();
    let cfg = DetectorConfig::default();
    let params = DetectorParams::new(catalog.n_feat, &catalog.seen_ids, 13, &cfg, seed).unwrap();
    let lc = cfg.lambda_coord;
    let (_, g) = detector_loss(&params, &batch, lc).unwrap();
    let total = |p: &DetectorParams| {
        let (l, _) = detector_loss(p, &batch, lc).unwrap();
        l.conf + l.coord + l.class
    };
    let loc = check(&params.locator, &g.locator, seed, "locator", |n| {
        total(&DetectorParams { locator: n.clone(), ..params.clone() })
    });
    let conf = check(&params.conf_head, &g.conf, seed, "conf", |n| {
        total(&DetectorParams { conf_head: n.clone(), ..params.clone() })
    });
    let clf = check(&params.clf_head, &g.clf, seed, "clf", |n| {
        total(&DetectorParams { clf_head: n.clone(), ..params.clone() })
    });
    vec![("detector locator", loc), ("detector confidence", conf), ("detector classifier", clf)]
}

fn points(catalog: &ClassCatalog, seed: u64, n: usize) -> Vec<DataPoint> {
    let mut r = rng::rng(derive(seed, "points"));
    let mut classes: Vec<i64> = catalog.seen_ids.iter().map(|&c| c as i64).collect();
    classes.push(BACKGROUND);
    (0..n)
        .map(|i| {
            let class = classes[i % classes.len()];
            let f: Vec<f64> = (0..catalog.n_feat).map(|_| StandardNormal.sample(&mut r)).collect();
            DataPoint { f, conf: (i as f64 * 0.37).fract(), class }
        })
        .collect()
}

fn heads(catalog: &ClassCatalog, seed: u64) -> CheckerHeads {
    let h = HeadsConfig::default().hidden;
    let mut r = rng::rng(derive(seed, "heads"));
    let d = catalog.n_feat;
    let k = catalog.seen_ids.len() + 1;
    CheckerHeads {
        conf: DenseNet::new(d, &[(64, Activation::Relu), (1, Activation::Sigmoid)], &mut r).unwrap(),
        clf: DenseNet::new(d, &[(h, Activation::Relu), (k, Activation::Softmax)], &mut r).unwrap(),
        attr: DenseNet::new(d, &[(h, Activation::Relu), (catalog.n_attr, Activation::Sigmoid)], &mut r).unwrap(),
        seen_ids: catalog.seen_ids.clone(),
    }
}

pub fn generator_checks(seed: u64) -> Report {
    let catalog = make_catalog(&CatalogConfig::default(), seed).unwrap();
    let pts = points(&catalog, seed, 6);
    let heads = heads(&catalog, seed);
    let cfg = GeneratorConfig::default();
    let params =
        GeneratorParams::new(catalog.n_feat, catalog.n_attr, &cfg, Ablation::Full.weights(LossWeights::default()), seed)
            .unwrap();
    let mut r = rng::rng(derive(seed, "eps"));
    let eps: Vec<Vec<f64>> =
        pts.iter().map(|_| (0..cfg.latent).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
    let batch: Vec<GenExample> = pts
        .iter()
        .zip(&eps)
        .enumerate()
        .map(|(i, (p, e))| GenExample { point: p, eps: e, class_weight: 1.0 + 0.25 * i as f64 })
        .collect();
    let (_, g) = generator_loss(&params, &heads, &catalog, &batch).unwrap();
    let total = |p: &GeneratorParams| generator_loss(p, &heads, &catalog, &batch).unwrap().0.total(&p.weights);
    let enc = check(&params.encoder, &g.encoder, seed, "encoder", |n| {
        total(&GeneratorParams { encoder: n.clone(), ..params.clone() })
    });
    let dec = check(&params.decoder, &g.decoder, seed, "decoder", |n| {
        total(&GeneratorParams { decoder: n.clone(), ..params.clone() })
    });

    let labels: Vec<usize> = pts.iter().map(|p| heads.label_index(p.class).unwrap()).collect();
    let cb: Vec<(&[f64], usize)> = pts.iter().zip(&labels).map(|(p, &l)| (p.f.as_slice(), l)).collect();
    let (_, gc) = classifier_loss(&heads.clf, &cb).unwrap();
    let clf = check(&heads.clf, &gc, seed, "clf-head", |n| classifier_loss(n, &cb).unwrap().0);

    let targets: Vec<Vec<f64>> = pts.iter().map(|p| attr_target(&catalog, p.class).unwrap()).collect();
    let ab: Vec<(&[f64], &[f64])> = pts.iter().zip(&targets).map(|(p, t)| (p.f.as_slice(), t.as_slice())).collect();
    let (_, ga) = attribute_loss(&heads.attr, &ab).unwrap();
    let attr = check(&heads.attr, &ga, seed, "attr-head", |n| attribute_loss(n, &ab).unwrap().0);

    vec![
        ("generator encoder", enc),
        ("generator decoder", dec),
        ("checker classifier", clf),
        ("checker attributes", attr),
    ]
}

pub fn retrain_checks(seed: u64) -> Report {
    let catalog = make_catalog(&CatalogConfig::default(), seed).unwrap();
    let real = points(&catalog, seed, 8);
    let syn: Vec<DataPoint> = points(&catalog, derive(seed, "syn"), 5);
    let mut r = rng::rng(derive(seed, "conf-head"));
    let head =
        DenseNet::new(catalog.n_feat, &[(64, Activation::Relu), (1, Activation::Sigmoid)], &mut r).unwrap();
    let (_, g) = confidence_loss(&head, &real, &syn).unwrap();
    let res = check(&head, &g, seed, "retrain", |n| confidence_loss(n, &real, &syn).unwrap().0);
    vec![("retrained confidence", res)]
}

pub fn all_checks(seed: u64) -> Report {
    let mut out = detector_checks(seed);
    out.extend(generator_checks(seed));
    out.extend(retrain_checks(seed));
    out
}

/// Independent audit of a resampled pool: every point must be the feature of
/// some training cell passing its gate, carrying that cell's confidence.
pub struct GateAudit {
    pub foreground: usize,
    pub background: usize,
    pub violations: Vec<String>,
}

pub fn audit_gates(train: &[Scene], detector: &DetectorParams, pool: &[DataPoint]) -> GateAudit {
    use delo::geometry::iou;
    let mut cells: Vec<(&[f64], f64, f64)> = Vec::new();
    for s in train {
        let preds = detector.predict_scene(s).unwrap();
        for (cell, p) in preds.iter().enumerate() {
            let best = p
                .boxes
                .iter()
                .flat_map(|b| s.objects.iter().map(move |o| iou(b, &o.bbox)))
                .fold(0.0, f64::max);
            cells.push((s.cell_feature(cell), p.confidence, best));
        }
    }
    let mut audit = GateAudit { foreground: 0, background: 0, violations: Vec::new() };
    for (i, pt) in pool.iter().enumerate() {
        let fg = pt.class != BACKGROUND;
        let ok = cells.iter().any(|&(f, conf, best)| {
            f == pt.f.as_slice()
                && conf == pt.conf
                && if fg { best > 0.5 && conf > 0.6 } else { best < 0.2 && conf < 0.2 }
        });
        if fg {
            audit.foreground += 1;
        } else {
            audit.background += 1;
        }
        if !ok {
            audit.violations.push(format!("point {i} (class {}, conf {:.3})", pt.class, pt.conf));
        }
    }
    audit
}
