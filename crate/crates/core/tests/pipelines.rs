use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fmclass_core::metrics::RunRecord;
use fmclass_core::pipelines::*;
use fmclass_core::probes::load_probe;
use fmclass_core::sampling::ObjectBudget;
use fmclass_core::store::{load_manifest, DatasetManifest, Split};

fn synth(dir: &Path, cfg: &SynthConfig) -> DatasetManifest {
    load_manifest(synth_generate(cfg, dir).unwrap()).unwrap()
}

fn spec(source: FeatureSource, budgets: Vec<ObjectBudget>, out: Option<PathBuf>) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(source, budgets);
    s.folds = 2;
    s.repeats = 2;
    s.rf.n_trees = 20;
    s.rf_side = 32;
    s.out_dir = out;
    s
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    for kind in [SynthKind::Pixel, SynthKind::Object] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig { image_size: 32, ..SynthConfig::new(kind, 3, 6) };
        synth(a.path(), &cfg);
        synth(b.path(), &cfg);
        let ta = tree_bytes(a.path());
        assert!(ta.len() > 6);
        assert_eq!(ta, tree_bytes(b.path()));
        let c = tempfile::tempdir().unwrap();
        synth(c.path(), &SynthConfig { seed: 1, ..cfg });
        assert_ne!(ta, tree_bytes(c.path()));
    }
}

#[test]
fn synth_splits_cover_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &SynthConfig::new(SynthKind::Object, 4, 10));
    let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| m.split(s).count()).collect();
    assert_eq!(counts, vec![6, 2, 2]);
    assert_eq!(m.num_classes(), 4);
}

#[test]
fn noiseless_two_class_pixel_rf_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &SynthConfig { noise: 0.0, ..SynthConfig::new(SynthKind::Pixel, 2, 10) });
    let mut s = spec(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(500)], None);
    s.resize_mode = fmclass_core::store::ResizeMode::Nearest;
    s.rf_side = 16;
    for r in run_pixel_rf(&m, &s).unwrap() {
        assert_eq!(r.f1, 1.0, "{r:?}");
    }
}

#[test]
fn one_record_per_budget_fold_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &SynthConfig { image_size: 32, ..SynthConfig::new(SynthKind::Object, 3, 10) });
    let s = spec(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(10), ObjectBudget::All], None);
    let records = run_object_rf(&m, &s, &ObjectFeatureSpec::default()).unwrap();
    assert_eq!(records.len(), 2 * s.folds * s.repeats);
    let keys: Vec<(String, usize, usize)> = records.iter().map(|r| (r.budget.clone(), r.fold, r.repeat)).collect();
    let mut expected = Vec::new();
    for b in ["10", "all"] {
        for f in 0..2 {
            for r in 0..2 {
                expected.push((b.to_string(), f, r));
            }
        }
    }
    assert_eq!(keys, expected);
    assert!(records.iter().all(|r| r.method == OBJECT_RF && r.model == SYNTH_MODEL));
}

#[test]
fn filterbank_separates_textured_classes() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &SynthConfig { noise: 0.3, ..SynthConfig::new(SynthKind::Pixel, 3, 10) });
    let mut s = spec(FeatureSource::FilterBank, vec![ObjectBudget::Count(3000)], None);
    s.folds = 1;
    s.repeats = 1;
    s.rf_side = 64;
    let r = run_pixel_rf(&m, &s).unwrap();
    assert!(r[0].f1 >= 0.9, "{r:?}");
}

fn run_all(manifest: &DatasetManifest, out: &Path, workers: usize) -> Vec<RunRecord> {
    let mut s = spec(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(20), ObjectBudget::Count(60)], Some(out.to_path_buf()));
    s.record_timings = false;
    s.workers = workers;
    s.predictions = PredictionOutput::All;
    let records = if manifest.records.iter().any(|r| r.instances.is_some()) {
        run_object_rf(manifest, &s, &"mean,std,area".parse().unwrap()).unwrap()
    } else {
        run_pixel_rf(manifest, &s).unwrap()
    };
    write_outputs(&s, &records).unwrap();
    records
}

#[test]
fn reruns_write_identical_outputs() {
    let data = tempfile::tempdir().unwrap();
    for (i, kind) in [SynthKind::Pixel, SynthKind::Object].into_iter().enumerate() {
        let m = synth(&data.path().join(i.to_string()), &SynthConfig { image_size: 32, ..SynthConfig::new(kind, 3, 10) });
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_all(&m, a.path(), 1);
        let rb = run_all(&m, b.path(), 2);
        assert_eq!(ra, rb);
        assert!(ra.iter().all(|r| r.train_s == 0.0 && r.infer_s_per_image == 0.0));
        let ta = tree_bytes(a.path());
        assert!(ta.keys().any(|p| p.ends_with("results.csv")));
        assert!(ta.len() > 2 + 8);
        assert_eq!(ta, tree_bytes(b.path()));
    }
}

#[test]
fn saved_predictions_reproduce_recorded_score() {
    let data = tempfile::tempdir().unwrap();
    for (i, kind) in [SynthKind::Pixel, SynthKind::Object].into_iter().enumerate() {
        let m = synth(&data.path().join(i.to_string()), &SynthConfig { image_size: 32, ..SynthConfig::new(kind, 3, 10) });
        let out = tempfile::tempdir().unwrap();
        let records = run_all(&m, out.path(), 1);
        let r = &records[0];
        let dir = out.path().join("predictions").join(format!("{}_{}_b{}_f0_r0", r.method, r.model, r.budget));
        let scores = evaluate_predictions(&m, &dir, Split::Test, fmclass_core::metrics::F1Average::Macro).unwrap();
        let f1 = scores.object_f1.or(scores.pixel_f1).unwrap();
        assert!((f1 - r.f1).abs() < 1e-12, "{kind:?}: {f1} vs {}", r.f1);
    }
}

#[test]
fn probe_pipelines_save_loadable_probes() {
    let data = tempfile::tempdir().unwrap();
    let small = ProbeShape { input_size: 32, heads: 2, width: 8, ffn_hidden: 8, decoder_channels: 4, max_objects: 32, mlp_hidden: 8, sigma_init: 1.0 };
    for (i, kind) in [SynthKind::Pixel, SynthKind::Object].into_iter().enumerate() {
        let m = synth(&data.path().join(i.to_string()), &SynthConfig { image_size: 32, ..SynthConfig::new(kind, 2, 5) });
        let out = tempfile::tempdir().unwrap();
        let mut s = spec(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(20)], Some(out.path().to_path_buf()));
        s.folds = 1;
        s.probe = small.clone();
        s.train.iterations = 3;
        s.train.eval_every = 2;
        let records = match kind {
            SynthKind::Pixel => run_pixel_deap(&m, &s).unwrap(),
            SynthKind::Object => run_object_obap(&m, &s).unwrap(),
        };
        assert_eq!(records.len(), 1, "probes train once per fold");
        let r = &records[0];
        let dir = out.path().join("predictions").join(format!("{}_{}_b20_f0_r0", r.method, r.model));
        load_probe(dir.join("probe.prbe")).unwrap();
        let scores = evaluate_predictions(&m, &dir, Split::Test, fmclass_core::metrics::F1Average::Macro).unwrap();
        assert!((scores.object_f1.or(scores.pixel_f1).unwrap() - r.f1).abs() < 1e-12);
    }
}

#[test]
fn pixel_rf_score_falls_as_noise_rises() {
    let noises = [0.0, 0.5, 1.0, 2.0];
    let mut mean = vec![0.0; noises.len()];
    for seed in 0..3 {
        for (i, &noise) in noises.iter().enumerate() {
            let dir = tempfile::tempdir().unwrap();
            let m = synth(dir.path(), &SynthConfig { noise, seed, image_size: 32, ..SynthConfig::new(SynthKind::Pixel, 3, 10) });
            let mut s = spec(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(500)], None);
            s.folds = 1;
            s.repeats = 1;
            s.rf_side = 8;
            mean[i] += run_pixel_rf(&m, &s).unwrap()[0].f1 / 3.0;
        }
    }
    assert!(mean.windows(2).all(|w| w[0] >= w[1]), "{mean:?}");
    assert!(mean[0] - mean[3] > 0.2, "{mean:?}");
}
