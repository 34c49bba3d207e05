//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ffasim_core::catalog::{Catalog, Condition, ImageRef, Lighting};
use ffasim_core::config::{Command, RunConfig, Variant};
use ffasim_core::eval::{
    adjusted_rand_index, average_precision, build_groups, evaluate_group, EvalGroup, Member, Protocol,
};
use ffasim_core::imaging::ImageTensor;
use ffasim_core::inference::PatchFeatureGrid;
use ffasim_core::metrics::{cosine, ffa_crop_feat, mean_pool, Embedding, EmbeddingSource, PatchMask};
use ffasim_core::reid::{alpha_sweep, cmc, cmc_topk, fuse, FusionConfig, ReidEntry, ReidSet};
use ffasim_core::runner::{evaluate_embeddings, run};
use ffasim_core::ssim::{ssim, C1, C2};
use ffasim_core::testkit::{wild_conditions, write_dataset, FakeBackbone, FakeSegmenter};
use ffasim_core::Matrix;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:?}, limit {limit:?}"))
}

// Oracles, written from the definitions.

fn ap_oracle(rel: &[bool]) -> f64 {
    let mut precisions = Vec::new();
    for k in 0..rel.len() {
        if rel[k] {
            let hits = rel[..=k].iter().filter(|&&r| r).count();
            precisions.push(hits as f64 / (k + 1) as f64);
        }
    }
    precisions.iter().sum::<f64>() / precisions.len() as f64
}

fn ari_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    // Hubert-Arabie form over the pair-confusion counts.
    let num = 2.0 * (ss * dd - sd * ds);
    let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

// Criteria.

fn ap_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for len in 1..=8usize {
        for bits in 1u32..(1 << len) {
            let rel: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            let got = average_precision(&rel).map_err(|e| e.to_string())?;
            let want = ap_oracle(&rel);
            check((got - want).abs() <= 1e-12, format!("{rel:?}: {got} vs {want}"))?;
            checked += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{checked} sequences in {:?}", start.elapsed()))
}

fn ari_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let hand = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).map_err(|e| e.to_string())?;
    check((hand - 12.0 / 37.0).abs() <= 1e-9, format!("hand case {hand}"))?;
    check((hand - 0.32432).abs() < 5e-6, format!("hand case {hand}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let kp = rng.random_range(1..=4);
        let kt = rng.random_range(1..=4);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        let got = adjusted_rand_index(&pred, &truth).map_err(|e| e.to_string())?;
        let want = ari_oracle(&pred, &truth);
        worst = worst.max((got - want).abs());
        check(
            (got - want).abs() <= 1e-9,
            format!("{pred:?} {truth:?}: {got} vs {want}"),
        )?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 pairs, max |diff| {worst:.1e}, ARI(hand) = {hand:.5}"))
}

fn full_catalog(categories: &[&str]) -> Catalog {
    let mut records = Vec::new();
    for cat in categories {
        for instance in 1..=2 {
            let mut conds: Vec<Condition> = Lighting::ALL
                .into_iter()
                .flat_map(|l| (0..24).map(move |p| Condition::studio(l, p).unwrap()))
                .collect();
            conds.extend(wild_conditions());
            for condition in conds {
                records.push(ImageRef {
                    category: cat.to_string(),
                    instance,
                    condition,
                    path: PathBuf::from(format!("{cat}/instance_{instance}/{}.png", condition.descriptor())),
                });
            }
        }
    }
    Catalog::from_records(records)
}

fn group_counts() -> Outcome {
    let cats = ["bottle", "chair", "lamp"];
    let catalog = full_catalog(&cats);
    check(catalog.len() == 600, format!("{} records", catalog.len()))?;
    let mut parts = Vec::new();
    for (p, groups, members) in [
        (Protocol::Illumination, 24, 8),
        (Protocol::Pose, 4, 48),
        (Protocol::Wild, 1, 8),
        (Protocol::All, 1, 200),
    ] {
        let set = build_groups(&catalog, p);
        check(set.warnings.is_empty(), format!("{p}: warnings {:?}", set.warnings))?;
        for cat in cats {
            let gs: Vec<&EvalGroup> = set.groups.iter().filter(|g| g.category == cat).collect();
            check(gs.len() == groups, format!("{p}/{cat}: {} groups", gs.len()))?;
            for g in gs {
                check(
                    g.members.len() == members,
                    format!("{p}/{cat}/{}: {} members", g.key, g.members.len()),
                )?;
                let per_id = g.members.iter().filter(|m| m.label == g.members[0].label).count();
                check(per_id * 2 == members, format!("{p}/{cat}/{}: unbalanced", g.key))?;
            }
        }
        parts.push(format!("{p} {groups}x{members}"));
    }
    Ok(parts.join(", "))
}

fn random_group(rng: &mut impl Rng) -> EvalGroup {
    let ids = rng.random_range(2..=4u32);
    let mut labels = Vec::new();
    for id in 0..ids {
        for _ in 0..rng.random_range(2..=5) {
            labels.push(id);
        }
    }
    labels.shuffle(rng);
    EvalGroup {
        protocol: Protocol::Wild,
        category: "synthetic".into(),
        key: "g".into(),
        members: labels
            .into_iter()
            .enumerate()
            .map(|(index, label)| Member { index, label })
            .collect(),
    }
}

fn rank_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Strictly increasing on [0, 1) and injective on a 2^-20 lattice.
    let shapes: [fn(f64) -> f64; 5] = [|x| x, f64::exp, |x| x * x * x + x, f64::ln_1p, |x| x.atan()];
    let transforms: Vec<(usize, f64, f64)> = (0..20)
        .map(|i| {
            (
                i % shapes.len(),
                rng.random_range(0.5..4.0),
                rng.random_range(-3.0..3.0),
            )
        })
        .collect();
    for _ in 0..100 {
        let g = random_group(&mut rng);
        let n = g.members.len();
        let scores: Vec<f64> = (0..n * n)
            .map(|_| f64::from(rng.random_range(0..1u32 << 20)) / f64::from(1u32 << 20))
            .collect();
        let base = evaluate_group(&g, &|a: usize, b: usize| Ok(scores[a * n + b])).map_err(|e| e.to_string())?;
        for &(s, a, b) in &transforms {
            let f = shapes[s];
            let t = evaluate_group(&g, &|x: usize, y: usize| Ok(a * f(scores[x * n + y]) + b))
                .map_err(|e| e.to_string())?;
            check(t == base, format!("transform {s} ({a}, {b}) changed the outcome"))?;
        }
    }
    Ok("100 groups x 20 transforms".into())
}

fn ffa_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let side = 24;
    let dim = 32;
    let data: Vec<f32> = (0..side * side * dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let grid = PatchFeatureGrid::new(side, dim, data, None).map_err(|e| e.to_string())?;
    for normalize in [false, true] {
        let all = ffa_crop_feat(&grid, &PatchMask::all(side), normalize).map_err(|e| e.to_string())?;
        let pooled = mean_pool(&grid, normalize).map_err(|e| e.to_string())?;
        let diff = all
            .values()
            .iter()
            .zip(pooled.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        check(diff <= 1e-6, format!("all-true mask vs mean pool: {diff}"))?;
    }
    for _ in 0..20 {
        let i = rng.random_range(0..side * side);
        let mut bits = vec![false; side * side];
        bits[i] = true;
        let pm = PatchMask::from_bits(side, bits).map_err(|e| e.to_string())?;
        let e = ffa_crop_feat(&grid, &pm, false).map_err(|e| e.to_string())?;
        check(
            e.values() == grid.patch(i),
            format!("single patch {i} not reproduced exactly"),
        )?;
    }
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let d = rng.random_range(2..64);
        let v = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
        let a = Embedding::new(v(&mut rng), EmbeddingSource::CropFeat).map_err(|e| e.to_string())?;
        let b = Embedding::new(v(&mut rng), EmbeddingSource::CropFeat).map_err(|e| e.to_string())?;
        let c = 10f32.powf(rng.random_range(-3.0..3.0));
        let base = cosine(&a, &b).map_err(|e| e.to_string())?;
        let scaled = cosine(&a.scaled(c).map_err(|e| e.to_string())?, &b).map_err(|e| e.to_string())?;
        worst = worst.max((base - scaled).abs());
    }
    check(worst <= 1e-6, format!("cosine scale drift {worst}"))?;
    Ok(format!(
        "mean-pool and single-patch exact, cosine scale drift {worst:.1e}"
    ))
}

fn ssim_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let img = ImageTensor::from_fn(48, 40, |_, _| [rng.random(), rng.random(), rng.random()]);
        let s = ssim(&img, &img).map_err(|e| e.to_string())?;
        check((f64::from(s) - 1.0).abs() <= 1e-9, format!("ssim(x, x) = {s}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b): (u8, u8) = (rng.random(), rng.random());
        let x = ImageTensor::filled(24, 24, [a; 3]);
        let y = ImageTensor::filled(24, 24, [b; 3]);
        let (fa, fb) = (f64::from(a), f64::from(b));
        let want = (2.0 * fa * fb + C1) / (fa * fa + fb * fb + C1);
        let got = f64::from(ssim(&x, &y).map_err(|e| e.to_string())?);
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-6, format!("closed form drift {worst}"))?;
    check(C2 > C1, "constants")?;
    Ok(format!("self-similarity exact, closed-form drift {worst:.1e}"))
}

fn monte_carlo_wild() -> Outcome {
    let pairs = 1250;
    let mut records = Vec::new();
    for c in 0..pairs {
        for instance in 1..=2 {
            for condition in wild_conditions() {
                records.push(ImageRef {
                    category: format!("pair{c:04}"),
                    instance,
                    condition,
                    path: PathBuf::from(format!("{c}/{instance}/{}.png", condition.descriptor())),
                });
            }
        }
    }
    let catalog = Catalog::from_records(records);
    let groups = build_groups(&catalog, Protocol::Wild).groups;
    check(groups.len() == pairs, format!("{} groups", groups.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let embeddings: Vec<Option<Embedding>> = (0..catalog.len())
        .map(|_| {
            let v: Vec<f32> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            Embedding::new(v, EmbeddingSource::GlobalToken).ok()
        })
        .collect();
    let (r, _) = evaluate_embeddings(&groups, &embeddings, None, 0);
    let expected = 3.0 / 7.0;
    check(r.queries >= 10_000, format!("{} queries", r.queries))?;
    check(
        (r.chance_top1 - expected).abs() < 1e-12,
        format!("analytic baseline {}", r.chance_top1),
    )?;
    let rel = (r.top1 - expected).abs() / expected;
    check(
        rel <= 0.05,
        format!("top-1 {} vs {expected:.4} ({:.1}% off)", r.top1, rel * 100.0),
    )?;
    Ok(format!(
        "{} queries, top-1 {:.4} vs 3/7 = {expected:.4} ({:.2}% off)",
        r.queries,
        r.top1,
        rel * 100.0
    ))
}

fn random_reid(rng: &mut ChaCha8Rng) -> ReidSet {
    let ids = rng.random_range(2..6u32);
    let entry = |rng: &mut ChaCha8Rng| ReidEntry {
        path: PathBuf::new(),
        vehicle_id: rng.random_range(1..=ids),
        camera_id: Some(rng.random_range(0..3)),
    };
    let nq = rng.random_range(1..8);
    let ng = rng.random_range(2..12);
    ReidSet {
        queries: (0..nq).map(|_| entry(rng)).collect(),
        gallery: (0..ng).map(|_| entry(rng)).collect(),
    }
}

/// Distances on a 2^-10 lattice, so positive power-of-two scaling plus a
/// lattice shift is exact in f32.
fn lattice_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(0..4096u32) as f32 / 1024.0)
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn fusion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = FusionConfig::default();
    let mut sweeps = 0;
    for _ in 0..200 {
        let set = random_reid(&mut rng);
        let (q, g) = (set.queries.len(), set.gallery.len());
        let rand_m =
            |rng: &mut ChaCha8Rng| Matrix::new(q, g, (0..q * g).map(|_| rng.random::<f32>() * 2.0).collect()).unwrap();
        let (m, s) = (rand_m(&mut rng), rand_m(&mut rng));
        let f0 = fuse(&m, &s, 0.0).map_err(|e| e.to_string())?;
        let f1 = fuse(&m, &s, 1.0).map_err(|e| e.to_string())?;
        check(f0.to_bytes() == s.to_bytes(), "alpha = 0 is not the external matrix")?;
        check(f1.to_bytes() == m.to_bytes(), "alpha = 1 is not the model matrix")?;

        let d = lattice_matrix(&mut rng, q, g);
        let scale = 2f32.powi(rng.random_range(-3..=3));
        let shift = rng.random_range(0..8192u32) as f32 / 1024.0;
        let moved = Matrix::new(q, g, d.data().iter().map(|v| v * scale + shift).collect()).unwrap();
        for excl in [true, false] {
            let a = cmc(&d, &set, &[1, 3, 5], excl).map_err(|e| e.to_string())?;
            let b = cmc(&moved, &set, &[1, 3, 5], excl).map_err(|e| e.to_string())?;
            check(a == b, format!("CMC changed under x{scale} + {shift}"))?;
        }

        let (lm, ls) = (lattice_matrix(&mut rng, q, g), lattice_matrix(&mut rng, q, g));
        let sweep = alpha_sweep(&lm, &ls, &set, &cfg).map_err(|e| e.to_string())?;
        let mut best = (f64::NEG_INFINITY, f32::NAN);
        for &alpha in &cfg.grid {
            let t = cmc_topk(&fuse(&lm, &ls, alpha).unwrap(), &set, 1, cfg.camera_exclusion).unwrap();
            if t > best.0 {
                best = (t, alpha);
            }
        }
        check(
            sweep.best_alpha == best.1,
            format!("sweep chose {} not {}", sweep.best_alpha, best.1),
        )?;
        sweeps += 1;
    }
    let set = ReidSet {
        queries: vec![ReidEntry {
            path: PathBuf::new(),
            vehicle_id: 1,
            camera_id: None,
        }],
        gallery: vec![
            ReidEntry {
                path: PathBuf::new(),
                vehicle_id: 1,
                camera_id: None,
            },
            ReidEntry {
                path: PathBuf::new(),
                vehicle_id: 2,
                camera_id: None,
            },
        ],
    };
    let flat = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
    let tie = alpha_sweep(&flat, &flat, &set, &cfg).map_err(|e| e.to_string())?;
    check(
        tie.best_alpha == 0.1,
        format!("all-tied sweep chose {}", tie.best_alpha),
    )?;
    Ok(format!(
        "{sweeps} random sets: identities bit-exact, CMC affine-invariant, argmax with low tie-break"
    ))
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let paths =
        write_dataset(root.join("data"), &["cups", "shoes"], 2, &wild_conditions(), 64).map_err(|e| e.to_string())?;
    check(paths.len() == 16, format!("{} images", paths.len()))?;
    FakeBackbone::default()
        .write(root.join("b.onnx"))
        .map_err(|e| e.to_string())?;
    FakeSegmenter::default()
        .write(root.join("s.onnx"))
        .map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for variant in [Variant::CropFeat, Variant::CropImg, Variant::Global, Variant::Ssim] {
        let tables: Vec<Vec<u8>> = [1usize, 8]
            .into_iter()
            .map(|jobs| {
                let cfg = RunConfig {
                    dataset: Some(root.join("data")),
                    backbone: Some(root.join("b.onnx")),
                    segmenter: Some(root.join("s.onnx")),
                    variant,
                    seed: 1234,
                    jobs,
                    out: root.join(format!("out_{variant}_{jobs}")),
                    ..Default::default()
                };
                run(Command::Benchmark, &cfg).map_err(|e| e.to_string())?;
                std::fs::read(cfg.out.join("table.csv")).map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        check(
            tables[0] == tables[1],
            format!("{variant}: table.csv differs between 1 and 8 workers"),
        )?;
        check(!tables[0].is_empty(), format!("{variant}: empty table"))?;
        summary.push(variant.as_str());
    }
    Ok(format!(
        "16 images, byte-identical table.csv at 1 and 8 workers for {}",
        summary.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("ap_oracle_equivalence", ap_oracle_equivalence),
        ("ari_oracle_equivalence", ari_oracle_equivalence),
        ("group_construction_counts", group_counts),
        ("rank_invariance", rank_invariance),
        ("ffa_kernel", ffa_kernel),
        ("ssim_identities", ssim_checks),
        ("monte_carlo_wild_top1", monte_carlo_wild),
        ("fusion_identities", fusion_identities),
        ("end_to_end_determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
