//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fmclass_autodiff::{grad_check, GradCheckOptions, Tape, TensorError};
use fmclass_core::features::{pixel_filter_bank, FilterBankConfig};
use fmclass_core::forest::{RFConfig, RandomForest};
use fmclass_core::metrics::{macro_f1, ConfusionMatrix};
use fmclass_core::pipelines::*;
use fmclass_core::probes::*;
use fmclass_core::sampling::{sample_inverse_frequency, sample_pixels_deap, ObjectBudget};
use fmclass_core::store::{load_manifest, read_instances, DatasetManifest, FeatureVolume, GrayImage, LabelImage};
use fmclass_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn synth(dir: &Path, cfg: &SynthConfig) -> DatasetManifest {
    load_manifest(synth_generate(cfg, dir).unwrap()).unwrap()
}

fn gaussian_mask() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let f = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let sigma: f64 = rng.random_range(0.05..50.0);
        let d2 = (q[0] - f[0]) * (q[0] - f[0]) + (q[1] - f[1]) * (q[1] - f[1]);
        let expected = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt()) * (-d2 / (2.0 * sigma)).exp();
        let got = gaussian_attention_mask(&[q], &[f], sigma).unwrap()[0];
        worst = worst.max((got - expected).abs());
    }
    check(worst <= 1e-12, format!("max abs error {worst:.3e} over 1000 pairs"))
}

fn toy_volume(seed: u64) -> FeatureVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureVolume::new(8, 8, 4, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions { max_coords_per_param: 24, ..Default::default() };

    let cfg = DeapConfig { input_size: 32, heads: 2, width: 8, ffn_hidden: 8, decoder_channels: 4, ..DeapConfig::new(3, 4) };
    let deap = DeapProbe::new(cfg, 0).unwrap();
    let input = deap.prepare::<f64>(&toy_volume(0)).unwrap();
    let pixels: Vec<usize> = (0..12).map(|i| i * 83 % 1024).collect();
    let classes: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut store = deap.params.cast::<f64>();
    let deap_report =
        grad_check(&mut store, |tape, s| deap.loss(tape, s, &[(&input, &pixels, &classes)], 0.5, 0.5).map_err(tensor_err), &opts).unwrap();

    let cfg = ObapConfig { max_objects: 6, heads: 2, width: 8, mlp_hidden: 8, ..ObapConfig::new(3, 4) };
    let obap = ObapProbe::new(cfg, 0).unwrap();
    let objects = [
        Centroid { id: 1, row: 3.0, col: 4.0 },
        Centroid { id: 2, row: 20.5, col: 9.0 },
        Centroid { id: 4, row: 12.0, col: 28.0 },
    ];
    let input = obap.prepare::<f64>(&toy_volume(1), (32, 32), &objects).unwrap();
    let (slots, targets) = ([0usize, 1, 2], [2usize, 0, 1]);
    let mut store = obap.params.cast::<f64>();
    let obap_report = grad_check(&mut store, |tape, s| obap.loss(tape, s, &[(&input, &slots, &targets)]).map_err(tensor_err), &opts).unwrap();

    let mut tape = Tape::new();
    let fwd = obap.forward_tape(&mut tape, &store, &input).unwrap();
    let logp = tape.log_softmax(fwd.logits).unwrap();
    let valid = tape.gather_rows(logp, &slots).unwrap();
    let loss = tape.sum_all(valid).unwrap();
    let grads = tape.backward(loss, &mut store).unwrap();
    let g = grads.wrt(fwd.queries).unwrap().data();
    let width = g.len() / 6;
    let padded_zero = g[3 * width..].iter().all(|&v| v == 0.0);
    let valid_nonzero = g[..3 * width].iter().any(|&v| v != 0.0);

    let elapsed = start.elapsed();
    check(
        deap_report.max_rel_error < 1e-4 && obap_report.max_rel_error < 1e-4 && padded_zero && valid_nonzero && elapsed < Duration::from_secs(60),
        format!(
            "DeAP max rel {:.2e} ({} coords), ObAP max rel {:.2e} ({} coords), padded query grads zero: {padded_zero}, {:.1}s",
            deap_report.max_rel_error,
            deap_report.coords_checked,
            obap_report.max_rel_error,
            obap_report.coords_checked,
            elapsed.as_secs_f64()
        ),
    )
}

/// Per-class counts taken by walking an explicit list of (truth, prediction)
/// pairs rather than reading matrix rows and columns.
fn brute_force_macro_f1(k: usize, pairs: &[(usize, usize)]) -> f64 {
    let mut scores = Vec::new();
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for &(t, p) in pairs {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        scores.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(2..7);
        let mut cm = ConfusionMatrix::new(k);
        let mut pairs = Vec::new();
        for t in 0..k {
            for p in 0..k {
                let n = if rng.random_bool(0.3) { 0 } else { rng.random_range(0..15) };
                for _ in 0..n {
                    cm.add(t, p);
                    pairs.push((t, p));
                }
            }
        }
        if pairs.is_empty() {
            cm.add(0, 1);
            pairs.push((0, 1));
        }
        if macro_f1(&cm).unwrap().to_bits() != brute_force_macro_f1(k, &pairs).to_bits() {
            mismatches += 1;
        }
    }
    // One true positive, one false positive and one false negative in class 0.
    let cm = ConfusionMatrix::from_counts(3, vec![1, 0, 1, 0, 0, 0, 1, 0, 0]).unwrap();
    let f1_class0 = cm.class_f1()[0].unwrap();
    check(
        mismatches == 0 && f1_class0 == 0.5,
        format!("{mismatches} mismatches in 10000 matrices, TP=FP=FN=1 class F1 {f1_class0}"),
    )
}

fn sampling_statistics() -> Outcome {
    let pool: Vec<u16> = (0..100).map(|i| if i < 90 { 1 } else { 2 }).collect();
    let total: usize = (0..10_000u64).map(|seed| sample_inverse_frequency(&pool, 10, seed).iter().filter(|&&i| pool[i] == 2).count()).sum();
    let mean_b = total as f64 / 10_000.0;

    let mut violations = 0;
    let mut cases = 0;
    for n_images in [2usize, 5, 9] {
        let images: Vec<LabelImage> = (0..n_images)
            .map(|i| LabelImage::new(4, 4, (0..16).map(|p| if p % 4 < 1 + i % 3 { 1 } else { 2 + (i % 2) as u16 }).collect()).unwrap())
            .collect();
        for n_pixels in 1..n_images {
            for seed in 0..20 {
                cases += 1;
                let picked = sample_pixels_deap(&images, n_pixels, seed).unwrap();
                let used = picked.iter().filter(|p| !p.is_empty()).count();
                let one_each = picked.iter().all(|p| p.len() <= 1);
                let labeled = picked.iter().zip(&images).all(|(p, img)| p.iter().all(|&i| img.labels[i] != 0));
                if used != n_pixels || !one_each || !labeled {
                    violations += 1;
                }
            }
        }
    }
    check(
        (4.0..=6.0).contains(&mean_b) && violations == 0,
        format!("mean B count {mean_b:.3}; DeAP sparse rule violated in {violations} of {cases} enumerated cases"),
    )
}

fn blobs(n: usize, d: usize, seed: u64) -> (Vec<f32>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u16;
        let centre = if class == 0 { -1.5 } else { 1.5 };
        for j in 0..d {
            let shift = if j < 2 { centre } else { 0.0 };
            x.push((shift + normal.sample(&mut rng)) as f32);
        }
        y.push(class);
    }
    (x, y)
}

fn random_forest() -> Outcome {
    let (x, y) = blobs(2000, 2, 2);
    let (xt, yt) = blobs(2000, 2, 3);
    let rf = RandomForest::fit(&x, 2, &y, 2, &RFConfig::default()).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    for (t, p) in yt.iter().zip(rf.predict(&xt).unwrap()) {
        cm.add(*t as usize, p as usize);
    }
    let f1 = macro_f1(&cm).unwrap();

    let (x, y) = blobs(100_000, 64, 4);
    let threads = rayon::current_num_threads();
    let start = Instant::now();
    let big = RandomForest::fit(&x, 64, &y, 2, &RFConfig::default()).unwrap();
    let fit = start.elapsed();
    check(
        f1 >= 0.95 && fit < Duration::from_secs(60) && big.trees().len() == 100,
        format!("two-blob test macro F1 {f1:.4}; 1e5 x 64 fit with 100 trees in {:.1}s on {threads} thread(s)", fit.as_secs_f64()),
    )
}

const PIXEL_DEAP_SHAPE: ProbeShape =
    ProbeShape { input_size: 64, heads: 4, width: 32, ffn_hidden: 64, decoder_channels: 16, max_objects: 256, mlp_hidden: 256, sigma_init: 1.0 };

fn label_efficiency() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &SynthConfig { seed: 1, ..SynthConfig::new(SynthKind::Pixel, 3, 30) });
    let mut spec = ExperimentSpec::new(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(10_000)]);
    spec.folds = 1;
    spec.repeats = 1;
    let rf = run_pixel_rf(&m, &spec).unwrap()[0].f1;
    spec.budgets = vec![ObjectBudget::Count(100)];
    spec.probe = PIXEL_DEAP_SHAPE;
    spec.train.iterations = 1000;
    spec.train.learning_rate = 3e-3;
    let deap = run_pixel_deap(&m, &spec).unwrap()[0].f1;
    let elapsed = start.elapsed();
    check(
        deap >= rf && spec.train.iterations <= 2000 && elapsed < Duration::from_secs(600),
        format!("DeAP@100 {deap:.4} vs RF@10000 {rf:.4}, {} iterations, {:.0}s total", spec.train.iterations, elapsed.as_secs_f64()),
    )
}

fn obap_synthetic() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let m = synth(dir.path(), &SynthConfig { seed, ..SynthConfig::new(SynthKind::Object, 4, 50) });
        let mut spec = ExperimentSpec::new(
            FeatureSource::Model(SYNTH_MODEL.into()),
            vec![ObjectBudget::Count(25), ObjectBudget::Count(100), ObjectBudget::All],
        );
        spec.folds = 1;
        spec.seed = seed;
        spec.probe = ProbeShape { heads: 4, width: 32, mlp_hidden: 64, max_objects: 16, sigma_init: 1.0, ..Default::default() };
        spec.train.iterations = 500;
        spec.train.learning_rate = 5e-3;
        spec.train.eval_every = 50;
        let r = run_object_obap(&m, &spec).unwrap();
        let f1: BTreeMap<&str, f64> = r.iter().map(|x| (x.budget.as_str(), x.f1)).collect();
        let (b25, b100, all) = (f1["25"], f1["100"], f1["all"]);
        ok &= b100 >= 0.95 && all >= b25;
        notes.push(format!("seed {seed}: 25 {b25:.3}, 100 {b100:.3}, all {all:.3}"));
    }
    check(ok, notes.join("; "))
}

fn aggregation_dims() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &SynthConfig { image_size: 32, ..SynthConfig::new(SynthKind::Object, 3, 6) });
    let record = &m.records[0];
    let features = fmclass_core::store::read_feature_volume(record.feature_path(SYNTH_MODEL).unwrap()).unwrap();
    let mask = read_instances(record.instances.as_ref().unwrap()).unwrap();
    let c = features.channels();
    let mut notes = Vec::new();
    let mut ok = true;
    for (aggs, expected) in [("mean", c), ("mean,area", c + 1), ("mean,std,area", 2 * c + 1)] {
        let fs: ObjectFeatureSpec = aggs.parse().unwrap();
        let dims: Vec<usize> = object_feature_vectors(&features, &mask, &fs).unwrap().values().map(Vec::len).collect();
        let mut spec = ExperimentSpec::new(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(10)]);
        spec.folds = 1;
        spec.repeats = 1;
        spec.rf.n_trees = 5;
        let runnable = run_object_rf(&m, &spec, &fs).is_ok();
        ok &= !dims.is_empty() && dims.iter().all(|&d| d == expected) && runnable;
        notes.push(format!("{{{aggs}}} -> {} (expected {expected})", dims[0]));
    }
    check(ok, format!("C = {c}: {}", notes.join(", ")))
}

fn direct_gaussian(image: &GrayImage, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let (h, w) = (image.height as isize, image.width as isize);
    let mirror = |i: isize, n: isize| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut weights = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            weights.push((dy, dx, (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = weights.iter().map(|w| w.2).sum();
    let mut out = Vec::with_capacity(image.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = weights.iter().map(|&(dy, dx, g)| g * image.get(mirror(y + dy, h), mirror(x + dx, w)) as f64).sum();
            out.push(acc / total);
        }
    }
    out
}

fn filter_bank() -> Outcome {
    let cfg = FilterBankConfig::default();
    let names = cfg.channel_names();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = GrayImage::new(23, 31, (0..23 * 31).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let bank = pixel_filter_bank(&image, &cfg).unwrap();
    let c = bank.channels();
    let mut worst_gauss = 0.0f64;
    for &sigma in &cfg.scales {
        let ch = names.iter().position(|n| *n == format!("gauss_{sigma}")).unwrap();
        for (i, expected) in direct_gaussian(&image, sigma).iter().enumerate() {
            worst_gauss = worst_gauss.max((bank.values()[i * c + ch] as f64 - expected).abs());
        }
    }

    let flat = GrayImage::new(20, 20, vec![0.7; 400]).unwrap();
    let bank = pixel_filter_bank(&flat, &cfg).unwrap();
    let mut worst_flat = 0.0f32;
    for (ch, name) in names.iter().enumerate() {
        if name.starts_with("log_") || name.starts_with("ggm_") {
            for px in bank.values().chunks_exact(c) {
                worst_flat = worst_flat.max(px[ch].abs());
            }
        }
    }
    let scales_ok = cfg.scales == vec![0.5, 1.0, 2.0, 4.0];
    check(
        worst_gauss <= 1e-6 && worst_flat <= 1e-6 && scales_ok,
        format!(
            "Gaussian vs direct convolution max error {worst_gauss:.2e}; LoG/gradient on constant image max {worst_flat:.2e}; default scales {:?}",
            cfg.scales
        ),
    )
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

fn determinism() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    let pixel = synth(&data.path().join("pixel"), &SynthConfig { image_size: 32, ..SynthConfig::new(SynthKind::Pixel, 3, 8) });
    let object = synth(&data.path().join("object"), &SynthConfig { image_size: 32, ..SynthConfig::new(SynthKind::Object, 3, 8) });
    let run = |out: &Path| {
        let mut spec = ExperimentSpec::new(FeatureSource::Model(SYNTH_MODEL.into()), vec![ObjectBudget::Count(30), ObjectBudget::All]);
        spec.folds = 2;
        spec.repeats = 2;
        spec.rf.n_trees = 10;
        spec.rf_side = 32;
        spec.record_timings = false;
        spec.predictions = PredictionOutput::All;
        spec.probe = ProbeShape { input_size: 32, heads: 2, width: 8, ffn_hidden: 8, decoder_channels: 4, max_objects: 32, mlp_hidden: 8, sigma_init: 1.0 };
        spec.train.iterations = 4;
        spec.train.eval_every = 2;
        let jobs: [(&str, &DatasetManifest); 4] = [("pixel-rf", &pixel), ("pixel-deap", &pixel), ("object-rf", &object), ("object-obap", &object)];
        for (name, m) in jobs {
            spec.out_dir = Some(out.join(name));
            let records = match name {
                "pixel-rf" => run_pixel_rf(m, &spec),
                "pixel-deap" => run_pixel_deap(m, &spec),
                "object-rf" => run_object_rf(m, &spec, &ObjectFeatureSpec::default()),
                _ => run_object_obap(m, &spec),
            }
            .unwrap();
            write_outputs(&spec, &records).unwrap();
        }
        tree_bytes(out)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, tb) = (run(a.path()), run(b.path()));
    let csvs = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let rasters = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    let differing: Vec<&PathBuf> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    check(
        ta.len() == tb.len() && differing.is_empty() && rasters > 0,
        format!("{} files compared ({csvs} CSV, {rasters} PNG), {} differ", ta.len(), differing.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gaussian attention mask", gaussian_mask),
        ("probe gradient checks", gradient_checks),
        ("macro F1 oracle", metric_oracle),
        ("sampling statistics", sampling_statistics),
        ("random forest", random_forest),
        ("DeAP label efficiency", label_efficiency),
        ("ObAP synthetic objects", obap_synthetic),
        ("object aggregation dims", aggregation_dims),
        ("filter bank", filter_bank),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, criterion) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL {name}: {detail} [{secs:.1}s]");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
