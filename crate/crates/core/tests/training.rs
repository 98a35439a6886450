//! Training loop, checkpoint, evaluation and visualization contracts.

mod common;

use std::collections::BTreeMap;

use common::harness::{load, phantoms, tiny_config};
use image::Rgb;
use mammoclu::backbone::{ClusterConfig, Preset, STEM_PATCH};
use mammoclu::checkpoint::{self, CheckpointMeta};
use mammoclu::data::LoadedStudy;
use mammoclu::imaging::PixelBox;
use mammoclu::model::{param_report, predict, Model, View};
use mammoclu::points::POINT_DIMS;
use mammoclu::roi::greedy_roi_select;
use mammoclu::train::{evaluate, train_on};
use mammoclu::viz::{self, GREEN};

#[test]
fn identical_config_and_seed_reproduce_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 6, 32, 1);
    let studies = load(&manifest, 32);
    let cfg = tiny_config(&manifest, None, dir.path(), 2, 1e-3);
    let a = train_on(&cfg, &studies, None, None).unwrap();
    let b = train_on(&cfg, &studies, None, None).unwrap();
    assert_eq!(a.history[0].loss.total.to_bits(), b.history[0].loss.total.to_bits());
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.train_auc, y.train_auc);
    }
    assert!(a.model.params.iter().zip(b.model.params.iter()).all(|(p, q)| p == q));
}

#[test]
fn zero_learning_rate_leaves_parameters_and_loss_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 4, 32, 2);
    let studies = load(&manifest, 32);
    let cfg = tiny_config(&manifest, None, dir.path(), 3, 0.0);
    let fresh = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let out = train_on(&cfg, &studies, None, None).unwrap();
    assert!(out.model.params.iter().zip(fresh.params.iter()).all(|(p, q)| p == q));
    let first = out.history[0].loss;
    assert!(out.history.iter().all(|l| l.loss == first));
}

#[test]
fn tiny_model_overfits_eight_studies() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 8, 32, 3);
    let studies = load(&manifest, 32);
    let cfg = tiny_config(&manifest, None, dir.path(), 200, 1e-3);
    let out = train_on(&cfg, &studies, None, None).unwrap();
    let first = out.history[0].loss.total;
    let last = out.history.last().unwrap().loss.total;
    assert!(last <= 0.5 * first, "loss went from {first} to {last}");
    let eval = evaluate(&out.model, &studies, 0.5, 0.25).unwrap();
    assert_eq!(eval.report.acc, 1.0, "{:?}", eval.report);
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 4, 32, 4);
    let studies = load(&manifest, 32);
    let cfg = tiny_config(&manifest, Some(&manifest), &dir.path().join("run"), 2, 1e-3);
    let out = train_on(&cfg, &studies, Some(&studies), Some(&cfg.output_dir)).unwrap();
    let before = evaluate(&out.model, &studies, 0.5, 0.25).unwrap();

    let path = dir.path().join("model.ckpt");
    let meta = CheckpointMeta {
        config: cfg.clone(),
        epoch: 1,
        history: vec![],
    };
    checkpoint::save(&path, &out.model, &meta).unwrap();
    let (loaded, meta_back) = checkpoint::load(&path).unwrap();
    assert_eq!(meta_back, meta);
    let after = evaluate(&loaded, &studies, 0.5, 0.25).unwrap();
    assert_eq!(before.report.to_json(), after.report.to_json());
    assert_eq!(before.predictions_csv(), after.predictions_csv());
    for (x, y) in before.outputs.iter().zip(&after.outputs) {
        assert_eq!(x.fusion_logit.to_bits(), y.fusion_logit.to_bits());
        assert_eq!(x.f_fusion, y.f_fusion);
    }

    let best = out.best_checkpoint.expect("an output directory was given");
    assert!(best.exists() && checkpoint::sidecar_path(&best).exists());
    assert!(cfg.output_dir.join("train_log.jsonl").exists());
}

#[test]
fn evaluation_files_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 4, 32, 6);
    let studies = load(&manifest, 32);
    let cfg = tiny_config(&manifest, None, dir.path(), 1, 1e-3);
    let model = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    evaluate(&model, &studies, 0.5, 0.25).unwrap().write(&a).unwrap();
    evaluate(&model, &studies, 0.5, 0.25).unwrap().write(&b).unwrap();
    for name in ["metrics.json", "predictions.csv", "roc.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let report = std::fs::read_to_string(a.join("metrics.json")).unwrap();
    assert!(report.contains("\"mdr\""), "phantoms with lesions report mdr");
}

#[test]
fn report_without_boxes_has_no_mdr() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 4, 32, 7);
    let mut studies = load(&manifest, 32);
    for s in &mut studies {
        s.record.boxes = None;
        s.boxes = vec![vec![]; 4];
    }
    let cfg = tiny_config(&manifest, None, dir.path(), 1, 1e-3);
    let model = Model::new(&cfg.model_config(), cfg.seed).unwrap();
    let report = evaluate(&model, &studies, 0.5, 0.25).unwrap().report;
    assert_eq!((report.mdr, report.n_gt), (None, 0));
    assert!(!report.to_json().contains("mdr"));
}

fn linear(din: usize, dout: usize) -> usize {
    din * dout + dout
}

/// Closed-form scalar count of one backbone, written from its layer list.
fn backbone_count(c: &ClusterConfig) -> usize {
    let block = |w: usize| {
        let h = w * c.mlp_ratio;
        2 * w + linear(w, w) + 2 + linear(w, w) + 2 * w + linear(w, h) + linear(h, w)
    };
    let mut din = c.stages[0].width;
    let mut total = linear(STEM_PATCH * STEM_PATCH * POINT_DIMS, din);
    for s in &c.stages {
        total += linear(s.reduce * s.reduce * din, s.width) + s.blocks * block(s.width);
        din = s.width;
    }
    total
}

#[test]
fn tiny_parameter_count_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("m.csv"), None, dir.path(), 1, 1e-3);
    let model = Model::new(&cfg.model_config(), 0).unwrap();
    let tiny = Preset::Tiny.config();
    let d = tiny.final_width();
    let heads = 3 * linear(d, 1);
    let view_fusions = 3 * linear(d, 1);
    let fusion = linear(d, 1) // saliency head
        + linear(d, d) + 2 * linear(d, d) // align_embed
        + linear(d, 1) // instance attention
        + linear(d, d) // fold
        + 2 * d * d; // bias-free fuse_view
    let expected = 2 * backbone_count(&tiny) + fusion + view_fusions + heads;
    assert_eq!(expected, 30_064);
    assert_eq!(model.params.scalar_count(), expected);
    let report = param_report(&model.params);
    assert_eq!(report.modules["global"], backbone_count(&tiny));
    assert_eq!(report.modules.values().sum::<usize>(), report.total);
}

/// Connected components of pixels with exactly `colour`.
fn components(img: &image::RgbImage, colour: [u8; 3]) -> usize {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || img.get_pixel((start % w) as u32, (start / w) as u32) != &Rgb(colour) {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
            for (nx, ny) in nbrs {
                if nx < w && ny < h && !seen[ny * w + nx] && img.get_pixel(nx as u32, ny as u32) == &Rgb(colour) {
                    seen[ny * w + nx] = true;
                    stack.push(ny * w + nx);
                }
            }
        }
    }
    count
}

#[test]
fn visualization_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantoms(&dir.path().join("data"), 2, 32, 8);
    let mut study: LoadedStudy = load(&manifest, 32).remove(0);
    let lcc = vec![
        PixelBox { x_min: 1, y_min: 1, x_max: 9, y_max: 9 },
        PixelBox { x_min: 18, y_min: 20, x_max: 30, y_max: 30 },
    ];
    study.boxes = vec![lcc.clone(), vec![], vec![], vec![]];
    study.record.boxes = Some(BTreeMap::from([(View::Lcc, lcc.clone())]));
    let cfg = tiny_config(&manifest, None, dir.path(), 1, 1e-3);
    let model = Model::new(&cfg.model_config(), 3).unwrap();
    let out_dir = dir.path().join("viz");
    let (out, views) = viz::visualize(&model, &study, &out_dir).unwrap();
    assert_eq!(views.iter().map(|v| v.files.len()).sum::<usize>(), 12);

    let overlay = image::open(&views[View::Lcc.index()].files[0]).unwrap().to_rgb8();
    assert_eq!(components(&overlay, GREEN), 2);

    let again = predict(&model, &study.images).unwrap();
    for (v, r) in views.iter().enumerate() {
        let sel = &out.patch_selections[v];
        let picks = greedy_roi_select(&again.saliency_maps[v].values, sel.coords.len(), sel.crop_size_map).unwrap();
        assert_eq!(picks.iter().map(|p| p.coord).collect::<Vec<_>>(), sel.coords);
        assert_eq!(r.patch_boxes, sel.boxes);

        let clusters = image::open(&r.files[1]).unwrap().to_rgb8();
        let mut colours: Vec<_> = clusters.pixels().map(|p| p.0).collect();
        colours.sort_unstable();
        colours.dedup();
        assert!(colours.len() <= r.clusters_used, "{} colours for {} clusters", colours.len(), r.clusters_used);
    }
}
