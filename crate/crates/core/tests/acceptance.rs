//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach stdout; exits nonzero on any FAIL.

mod common;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segvoc::data::load_canonical;
use segvoc::eval::{average_precision, hungarian_match};
use segvoc::latent::{adaptive_k, project_latent, resize_feature_maps, svd, target_grid, Mode, PixelFeatureMatrix};
use segvoc::pipeline::{load_rgb, Pipeline, Variant};
use segvoc::recognize::{recognize_embeddings, softmax, Label, MatchConfig};
use segvoc::runtime::{FeatureMap, FeatureMapStack};
use segvoc::segment::{cluster_points, labels_to_masks, Linkage, SegmentationResult};
use segvoc::text::BpeTokenizer;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn softmax_reference() -> Check {
    let p = softmax(&[1.3, 5.1, 2.2, 0.7, 1.1]).map_err(|e| e.to_string())?;
    let expected = [0.02, 0.90, 0.05, 0.01, 0.02];
    for (got, want) in p.iter().zip(expected) {
        ensure!((got - want).abs() <= 0.01, "{p:?}");
    }
    Ok(format!("{:?}", p.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
}

fn ap_product() -> Check {
    let ap = 100.0 * average_precision(0.744, 0.545);
    ensure!((ap - 40.5).abs() <= 0.1, "AP {ap}");
    Ok(format!("AP {ap:.3}"))
}

fn adaptive_k_cases() -> Check {
    let fail = |e: segvoc::Error| e.to_string();
    // Convex for positions 2..5, first negative second difference at 6.
    let engineered = [100.0, 80.0, 64.0, 52.0, 44.0, 40.0, 30.0, 25.0, 21.0, 18.0, 16.0];
    let a = adaptive_k(&engineered, 20).map_err(fail)?;
    ensure!(a.slowdown_position == Some(6) && a.k == 5, "engineered: p {:?} k {}", a.slowdown_position, a.k);

    let linear: Vec<f64> = (0..20).map(|i| 100.0 - 4.0 * i as f64).collect();
    let f = adaptive_k(&linear, 20).map_err(fail)?;
    ensure!(f.slowdown_position.is_none() && f.k == 5, "fallback: {:?} {}", f.slowdown_position, f.k);

    // Convex through position 15, then a sharp drop at 16: p − 1 = 15 clamps to 12.
    let mut late: Vec<f64> = (1..=16).map(|i| ((40 - i) * (40 - i)) as f64).collect();
    let (s15, s16) = (late[14], late[15]);
    late.push(2.0 * s16 - s15 - 10.0);
    late.extend([300.0, 290.0, 285.0]);
    let c = adaptive_k(&late, 20).map_err(fail)?;
    ensure!(c.slowdown_position == Some(16) && c.k == 12, "upper clamp: {:?} {}", c.slowdown_position, c.k);

    let early = adaptive_k(&[10.0, 9.0, 1.0, 0.5], 20).map_err(fail)?;
    ensure!(early.slowdown_position == Some(2) && early.k == 2, "lower clamp: {:?} {}", early.slowdown_position, early.k);
    Ok("p=6 -> k=5; fallback 5; clamps 12 and 2".into())
}

fn hungarian_vs_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let small = rng.gen_range(1..=6);
        let large = rng.gen_range(small..=8);
        let (r, c) = if rng.gen_bool(0.5) { (small, large) } else { (large, small) };
        let w: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| if rng.gen_bool(0.2) { 0.5 } else { rng.gen_range(0.0..1.0) })
                    .collect()
            })
            .collect();
        let a = hungarian_match(&w).map_err(|e| e.to_string())?;
        let oracle = common::brute_force_assignment(&w);
        let diff = (a.total_iou - oracle).abs();
        worst = worst.max(diff);
        ensure!(diff <= 1e-9, "matrix {t} ({r}x{c}): {} vs oracle {oracle}", a.total_iou);
        ensure!(a.pairs.len() == small, "matrix {t}: {} pairs", a.pairs.len());
    }
    Ok(format!("1000 matrices, max |diff| {worst:.1e}"))
}

fn svd_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(352);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..2 {
        let a = DMatrix::from_fn(100, 352, |_, _| rng.gen_range(-1.0..1.0));
        let dec = svd(&a).map_err(|e| e.to_string())?;
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(dec.s.clone()));
        let rel = (&dec.u * &sigma * dec.v.transpose() - &a).norm() / a.norm();
        ensure!(rel <= 1e-6, "reconstruction error {rel}");

        let gram = a.transpose() * &a;
        let rows: Vec<Vec<f64>> = gram.row_iter().map(|r| r.iter().copied().collect()).collect();
        let eig = common::jacobi_eigenvalues(&rows);
        let mut eig_err = 0.0f64;
        for (i, e) in eig.iter().enumerate() {
            let s2 = dec.s.get(i).map_or(0.0, |s| s * s);
            eig_err = eig_err.max((s2 - e).abs());
        }
        ensure!(eig_err <= 1e-6, "eigenvalue error {eig_err}");

        let k = 7;
        let m = PixelFeatureMatrix {
            values: a.clone(),
            grid_shape: (10, 10),
        };
        let spectrum = adaptive_k(&dec.s, 20).map_err(|e| e.to_string())?;
        let proj = project_latent(&m, &dec.v, k, spectrum).map_err(|e| e.to_string())?;
        let mut proj_err = 0.0f64;
        for i in 0..100 {
            for j in 0..k {
                let naive: f64 = (0..352).map(|c| a[(i, c)] * dec.v[(c, j)]).sum();
                proj_err = proj_err.max((proj.projections[(i, j)] - naive).abs());
                proj_err = proj_err.max((proj.projections[(i, j)] - dec.u[(i, j)] * dec.s[j]).abs());
            }
        }
        ensure!(proj_err <= 1e-6, "projection error {proj_err}");
        worst = (worst.0.max(rel), worst.1.max(eig_err), worst.2.max(proj_err));
    }
    Ok(format!(
        "recon {:.1e}, eig {:.1e}, proj {:.1e}",
        worst.0, worst.1, worst.2
    ))
}

fn check_partition(seg: &SegmentationResult, k: usize) -> Result<(), String> {
    let (h, w) = seg.image_size;
    ensure!(seg.k == k && seg.masks.len() == k, "k {} masks {} expected {k}", seg.k, seg.masks.len());
    ensure!(seg.labels_full.len() == h * w, "labels_full has {} entries", seg.labels_full.len());
    ensure!(seg.labels_full.iter().all(|&l| l < k), "label out of range");
    for i in 0..h * w {
        let hits = seg.masks.iter().filter(|m| m.as_slice()[i]).count();
        ensure!(hits == 1, "pixel {i} covered {hits} times");
    }
    let used: std::collections::BTreeSet<_> = seg.labels_grid.iter().collect();
    ensure!(used.len() == k, "{} labels used", used.len());
    Ok(())
}

fn partition_invariants(pipeline: &Pipeline) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for t in 0..50 {
        let (gh, gw) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let n = gh * gw;
        let d = rng.gen_range(2..=12);
        let k = rng.gen_range(2..=12.min(n));
        let pts = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-3.0..3.0));
        let labels = cluster_points(&pts, k, Linkage::Ward).map_err(|e| e.to_string())?;
        let scale = rng.gen_range(1..=4);
        let seg = labels_to_masks(&labels, (gh, gw), (gh * scale + 1, gw * scale), Mode::Enlarged)
            .map_err(|e| e.to_string())?;
        check_partition(&seg, k).map_err(|e| format!("random input {t}: {e}"))?;
    }
    let names = ["astronaut", "chelsea", "coffee", "immunohistochemistry", "rocket"];
    let mut session = pipeline.backbone().session();
    let mut ks = Vec::new();
    for name in names {
        let image = load_rgb(&common::fixtures().join(format!("images/{name}.jpg"))).map_err(|e| e.to_string())?;
        let out = pipeline.segment_image(&mut session, &image).map_err(|e| format!("{name}: {e}"))?;
        check_partition(&out.seg, out.seg.k).map_err(|e| format!("{name}: {e}"))?;
        ensure!(out.seg.k == out.latent.spectrum.k.min(out.latent.k()), "{name}: k mismatch");
        ks.push(out.seg.k);
    }
    Ok(format!("50 random inputs; fixture images k = {ks:?}"))
}

fn shape_checks(pipeline: &Pipeline) -> Check {
    let g = common::read_golden("backbone_480x640.block16.bin");
    ensure!(g.shape == [320, 15, 20], "golden shape {:?}", g.shape);
    let (c, h, w) = (g.shape[0], g.shape[1], g.shape[2]);
    let mut hwc = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                hwc[(y * w + x) * c + ch] = g.values[(ch * h + y) * w + x];
            }
        }
    }
    let block = FeatureMap::new("block16_swish", h, w, c, hwc).map_err(|e| e.to_string())?;
    let stem = FeatureMap::new("stem_swish", 240, 320, 32, vec![0.0; 240 * 320 * 32]).map_err(|e| e.to_string())?;
    let stack = FeatureMapStack {
        maps: vec![stem, block],
        source_image_size: (480, 640),
    };
    let native = target_grid(&stack, Mode::Native).map_err(|e| e.to_string())?;
    let enlarged = resize_feature_maps(&stack, Mode::Enlarged).map_err(|e| e.to_string())?;
    ensure!(native == (15, 20), "native grid {native:?}");
    ensure!(
        (enlarged.height, enlarged.width, enlarged.channels) == (64, 86, 352),
        "enlarged grid {}x{}x{}",
        enlarged.height,
        enlarged.width,
        enlarged.channels
    );

    let image = load_rgb(&common::fixtures().join("images/rocket_480x640.jpg")).map_err(|e| e.to_string())?;
    let tensor = segvoc::runtime::preprocess_image(&image, pipeline.backbone().input_spec()).map_err(|e| e.to_string())?;
    let live = pipeline.backbone().session().run_feature_taps(&tensor).map_err(|e| e.to_string())?;
    let shapes: Vec<_> = live.maps.iter().map(|m| (m.height, m.width, m.channels)).collect();
    ensure!(shapes == [(240, 320, 32), (15, 20, 320)], "live tap shapes {shapes:?}");
    Ok("golden block16 15x20 -> OVSRI 15x20, OVSRI2 64x86".into())
}

fn timing_and_determinism(pipeline: &Pipeline) -> Check {
    let image = load_rgb(&common::fixtures().join("images/rocket_480x640.jpg")).map_err(|e| e.to_string())?;
    let mut session = pipeline.backbone().session();
    let start = Instant::now();
    let out = pipeline.segment_image(&mut session, &image).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(out.seg.grid_shape == (64, 86), "grid {:?}", out.seg.grid_shape);
    ensure!(secs <= 30.0, "OVSRI2 segmentation took {secs:.2}s");

    let ds = load_canonical(&common::fixtures().join("canonical10")).map_err(|e| e.to_string())?;
    let variant = [Variant {
        template: pipeline.config().template,
        use_svd: pipeline.config().use_svd,
    }];
    let mut reports = Vec::new();
    for workers in [1, 4, 1] {
        let p = Pipeline::load(common::config(workers), true).map_err(|e| e.to_string())?;
        let r = p.evaluate(&ds, &variant).map_err(|e| e.to_string())?;
        ensure!(r[0].mean.failed == 0, "{} images failed", r[0].mean.failed);
        reports.push(r[0].to_json());
    }
    ensure!(reports[0] == reports[1], "workers=1 and workers=4 reports differ");
    ensure!(reports[0] == reports[2], "repeated workers=1 reports differ");
    Ok(format!("{secs:.2}s per 480x640 image; reports identical across 1/4/1 workers"))
}

fn tokenizer_golden() -> Check {
    let bytes = std::fs::read(common::fixtures().join("golden/tokens.golden.json")).map_err(|e| e.to_string())?;
    let golden: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let ctx = golden["context_length"].as_u64().unwrap_or(77) as usize;
    let tokenizer = BpeTokenizer::from_file(&common::models().join("bpe_merges.txt")).map_err(|e| e.to_string())?;
    let prompts = golden["prompts"].as_array().ok_or("no prompts")?;
    ensure!(prompts.len() == 50, "{} prompts", prompts.len());
    for (prompt, ids) in prompts.iter().zip(golden["ids"].as_array().ok_or("no ids")?) {
        let want: Vec<i64> = ids.as_array().ok_or("bad ids")?.iter().filter_map(|v| v.as_i64()).collect();
        let got = tokenizer.tokenize(prompt.as_str().unwrap_or_default(), ctx).map_err(|e| e.to_string())?;
        ensure!(got.ids == want, "prompt {prompt}");
    }
    Ok("50/50 prompts".into())
}

fn open_set_behavior(pipeline: &Pipeline) -> Check {
    let ds = load_canonical(&common::fixtures().join("canonical10")).map_err(|e| e.to_string())?;
    let cfg = MatchConfig::default();
    let text = pipeline.text_embeddings(&ds.vocabulary, cfg.template).map_err(|e| e.to_string())?;
    let open = text.open_set_index().ok_or("vocabulary has no open-set row")?;

    let closest_to_open = text.rows.rows(open, 1).into_owned();
    let p = recognize_embeddings(closest_to_open, &text, &cfg).map_err(|e| e.to_string())?;
    ensure!(p[0].label == Label::OpenSet, "open-set row labelled {:?}", p[0].label);

    // Equal cosine to every row: x = T⁺·1, normalized.
    let t = &text.rows;
    let pinv = t.clone().pseudo_inverse(1e-12).map_err(|e| e.to_string())?;
    let mut x = pinv * nalgebra::DVector::from_element(t.nrows(), 1.0);
    x /= x.norm();
    let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
    let q = recognize_embeddings(row, &text, &cfg).map_err(|e| e.to_string())?;
    let spread = q[0].probs.iter().fold(0.0f64, |m, &v| m.max((v - 1.0 / t.nrows() as f64).abs()));
    ensure!(spread < 1e-6, "probabilities not uniform: {:?}", q[0].probs);
    ensure!(q[0].label == Label::Rejected, "uniform row labelled {:?}", q[0].label);
    Ok(format!("open-set -> {}, uniform -> {}", p[0].label.as_str(), q[0].label.as_str()))
}

fn main() {
    let pipeline = Pipeline::load(common::config(0), true).expect("fixture models load");
    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("softmax reproduces the reference distribution within 0.01", Box::new(softmax_reference)),
        ("AP = P*R gives 40.5 for P=0.744 R=0.545", Box::new(ap_product)),
        ("adaptive_k slowdown, fallback and clamp cases", Box::new(adaptive_k_cases)),
        ("Hungarian equals injection oracle on 1000 matrices", Box::new(hungarian_vs_oracle)),
        ("SVD suite on random 100x352 matrices", Box::new(svd_suite)),
        ("segmentation partition invariants", Box::new(|| partition_invariants(&pipeline))),
        ("feature grid shapes 15x20 and 64x86", Box::new(|| shape_checks(&pipeline))),
        ("per-image time and report determinism", Box::new(|| timing_and_determinism(&pipeline))),
        ("tokenizer matches golden ids", Box::new(tokenizer_golden)),
        ("open-set and REJECTED behavior", Box::new(|| open_set_behavior(&pipeline))),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}  ({detail}; {secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  ({why}; {secs:.2}s)");
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
