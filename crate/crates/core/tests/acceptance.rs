//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria can be selected by name: `cargo test --test acceptance -- P4 P7`.
//! The desk GAN trained for P4 is cached under the cargo test temp
//! directory and reused when its stored configuration matches exactly; set
//! `CPGGAN_ACCEPTANCE_FRESH=1` to retrain.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use cpggan::dataset::{split_dataset, DatasetSplits};
use cpggan::detector::{decode_grid, detection_loss, encode_targets, nms, AnchorSet, DetLossConfig, Detection};
use cpggan::embed::{conditional_affinities, confusion_stats, responses_from_counts, tsne_embed, Label, TsneConfig};
use cpggan::gan::{
    build_schedule, critic_loss, downsample2, generator_loss, gradient_penalty, input_gradient, upsample2, Cpggan, Critic,
    GanConfig, Generator, StagePos,
};
use cpggan::harness::{all_setups, run_matrix, MatrixConfig};
use cpggan::img2img::train_img2img;
use cpggan::metrics::{evaluate, iou};
use cpggan::nn;
use cpggan::phantom::{generate_corpus, PhantomSpec};
use cpggan::trainer::{load_cpggan, passes_contrast, sample_images, train_gan, GanTrainConfig, SampleRequest, TrainedGan};
use cpggan::vtt::{replay_audit, TestKind, VttSession};
use cpggan::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tch::{Kind, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const REFERENCE_CONFIG: &str = include_str!("../../../configs/reference.toml");
const DESK_SEED: u64 = 7;

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn bb(a: i32, b: i32, c: i32, d: i32) -> BoundingBox {
    BoundingBox::new(a, b, c, d).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn p1_loss_oracles() -> Outcome {
    let t = |v: &[f64]| Tensor::from_slice(v);
    let zero = Tensor::from(0.0f64);
    let d = scalar(&critic_loss(&t(&[2.0; 8]), &t(&[0.5; 8]), &zero).unwrap());
    ensure!(close(d, -1.5, 1e-6), "critic loss {d}, expected -1.5");
    let g = scalar(&generator_loss(&t(&[3.0; 8])).unwrap());
    ensure!(close(g, -3.0, 1e-6), "generator loss {g}, expected -3.0");
    let g0 = scalar(&generator_loss(&t(&[0.0; 4])).unwrap());
    ensure!(close(g0, 0.0, 1e-6), "generator loss on zeros {g0}");
    let fake = t(&[0.3, -1.2, 2.5]);
    let neg = scalar(&critic_loss(&t(&[0.0; 3]), &fake, &zero).unwrap());
    ensure!(close(scalar(&generator_loss(&fake).unwrap()), -neg, 1e-12), "generator loss is not the negated fake term");

    let cfg = DetLossConfig::default();
    let anchors = AnchorSet::new(vec![(4.0, 4.0), (10.0, 10.0)]).unwrap();
    let batch = |v: &[f64], m: &[bool]| {
        let m: Vec<f64> = m.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        (Tensor::from_slice(v).view([1, 8, 8, 2, 6]), Tensor::from_slice(&m).view([1, 8, 8, 2]))
    };
    let target = encode_targets(&[bb(27, 27, 37, 37)], 8, 64, &anchors, 1);
    let (tv, tm) = batch(&target.values, &target.responsible);
    let exact = scalar(&detection_loss(&tv, &tv, &tm, &cfg).unwrap());
    ensure!(close(exact, 0.0, 1e-6), "identical predictions give {exact}");
    let slot = target.responsible.iter().position(|&r| r).unwrap();
    let mut shifted = target.values.clone();
    shifted[slot * 6] += 0.1;
    let x_off = scalar(&detection_loss(&batch(&shifted, &target.responsible).0, &tv, &tm, &cfg).unwrap());
    ensure!(close(x_off, 0.05, 1e-6), "x offset by 0.1 gives {x_off}, expected 0.05");
    let empty = encode_targets(&[], 8, 64, &anchors, 1);
    let (ev, em) = batch(&empty.values, &empty.responsible);
    let mut conf = empty.values.clone();
    conf[empty.slot(2, 3, 0) * 6 + 4] = 0.2;
    let noobj = scalar(&detection_loss(&batch(&conf, &empty.responsible).0, &ev, &em, &cfg).unwrap());
    ensure!(close(noobj, 0.02, 1e-6), "stray confidence 0.2 gives {noobj}, expected 0.02");
    Ok(format!("critic {d}, generator {g}, detection {exact}/{x_off:.6}/{noobj:.6}"))
}

fn p2_gradient_penalty() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let real = nn::uniform(&mut rng, &[4, 1, 4, 4], -1.0, 1.0, Kind::Double);
    let fake = nn::uniform(&mut rng, &[4, 1, 4, 4], -1.0, 1.0, Kind::Double);
    let eps = cpggan::gan::sample_epsilon(&mut rng, 4, Kind::Double);

    let constant = |x: &Tensor| Ok(x.flatten(1, -1).sum_dim_intlist([1i64].as_slice(), false, Kind::Double) * 0.0 + 3.0);
    let gp_const = scalar(&gradient_penalty(constant, &real, &fake, 10.0, &eps).unwrap());
    ensure!(gp_const == 10.0, "constant critic penalty {gp_const}, expected exactly 10");

    let w = nn::randn(&mut rng, &[16], Kind::Double);
    let w = &w / w.norm();
    let linear = |x: &Tensor| Ok(x.flatten(1, -1).matmul(&w));
    let gp_lin = scalar(&gradient_penalty(linear, &real, &fake, 10.0, &eps).unwrap());
    ensure!(gp_lin.abs() <= 1e-10, "unit linear critic penalty {gp_lin}");

    let cfg = GanConfig {
        latent_dim: 8,
        target_resolution: 8,
        fmap_base: 64,
        fmap_max: 8,
        minibatch_stddev: false,
        ..GanConfig::default()
    };
    let critic = Critic::new(&cfg, 5, Kind::Double).unwrap();
    let masks = Tensor::zeros([4, 1, 8, 8], (Kind::Double, tch::Device::Cpu));
    let _ = masks.narrow(2, 1, 4).narrow(3, 3, 4).fill_(1.0);
    let pos = StagePos::stable(0);
    let f = |x: &Tensor| critic.forward(x, &masks, pos);
    let mixed = &eps * &real + (1.0 - &eps) * &fake;
    let grad = input_gradient(f, &mixed).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut fd_penalty = 0.0;
    for b in 0..4 {
        let mut sq = 0.0;
        for i in 0..16 {
            let (r, c) = (i / 4, i % 4);
            let bump = |d: f64| {
                let y = mixed.copy();
                let _ = y.get(b).get(0).get(r).get(c).fill_(mixed.double_value(&[b, 0, r, c]) + d);
                tch::no_grad(|| f(&y).unwrap()).double_value(&[b])
            };
            sq += ((bump(h) - bump(-h)) / (2.0 * h)).powi(2);
        }
        let an: f64 = grad.get(b).square().sum(Kind::Double).double_value(&[]).sqrt();
        let fd = sq.sqrt();
        worst = worst.max((an - fd).abs() / fd.max(1e-12));
        fd_penalty += 10.0 * (fd - 1.0).powi(2) / 4.0;
    }
    let gp = scalar(&gradient_penalty(f, &real, &fake, 10.0, &eps).unwrap());
    let gp_rel = (gp - fd_penalty).abs() / fd_penalty.max(1e-12);
    ensure!(worst < 1e-4, "gradient norm relative error {worst:e}");
    ensure!(gp_rel < 1e-4, "penalty {gp} vs finite-difference penalty {fd_penalty}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("constant {gp_const}, linear {gp_lin:.1e}, norm rel err {worst:.1e}, {secs:.2}s"))
}

fn p3_shape_ladder() -> Outcome {
    let start = Instant::now();
    let cfg = GanConfig::desk();
    let model = Cpggan::new(&cfg, 3, Kind::Float).unwrap();
    let (g, d): (&Generator, &Critic) = (&model.generator, &model.critic);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = model.sample_latent(3, &mut rng, Kind::Float);
    let masks = Tensor::zeros([3, 1, 64, 64], (Kind::Float, tch::Device::Cpu));
    let _ = masks.narrow(2, 20, 12).narrow(3, 8, 20).fill_(1.0);
    ensure!(cfg.num_stages() == 5, "{} stages for target 64", cfg.num_stages());
    let mut worst = 0.0f64;
    for stage in 0..5 {
        for alpha in [0.0, 0.5, 1.0] {
            let pos = StagePos { stage, alpha };
            let r = 4i64 << stage;
            let img = g.forward(&z, &masks, pos).unwrap();
            ensure!(img.size() == vec![3, 1, r, r], "stage {stage} alpha {alpha}: generator gave {:?}", img.size());
            let s = d.forward(&img, &masks, pos).unwrap();
            ensure!(s.size() == vec![3], "stage {stage} alpha {alpha}: critic gave {:?}", s.size());
            if stage > 0 && alpha == 0.0 {
                let prev = StagePos::stable(stage - 1);
                let coarse = upsample2(&g.forward(&z, &masks, prev).unwrap());
                worst = worst.max(scalar(&(&img - coarse).abs().max()));
                let down = d.forward(&downsample2(&img), &masks, prev).unwrap();
                worst = worst.max(scalar(&(&s - down).abs().max()));
            }
        }
    }
    ensure!(worst <= 1e-6, "alpha-0 blend differs from the previous stage by {worst:e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("5 stages x 3 alphas, alpha-0 max deviation {worst:.1e}, {secs:.2}s"))
}

/// The desk corpus and split shared by P4 and P7.
fn desk_splits() -> &'static DatasetSplits {
    static SPLITS: OnceLock<DatasetSplits> = OnceLock::new();
    SPLITS.get_or_init(|| {
        let records = generate_corpus(&PhantomSpec::desk(), DESK_SEED).unwrap();
        split_dataset(records, (0.7, 0.1, 0.2), DESK_SEED).unwrap()
    })
}

fn desk_train_config() -> GanTrainConfig {
    GanTrainConfig {
        total_steps: 40_000,
        seed: DESK_SEED,
        ..GanTrainConfig::desk()
    }
}

/// Trains the desk GAN, or reuses a cached checkpoint whose stored model,
/// training and schedule configuration and training subjects all match.
fn desk_gan() -> &'static Result<(PathBuf, String), String> {
    static GAN: OnceLock<Result<(PathBuf, String), String>> = OnceLock::new();
    GAN.get_or_init(|| {
        let splits = desk_splits();
        let gan_cfg = GanConfig::desk();
        let cfg = desk_train_config();
        let schedule = build_schedule(64, cfg.fade_images, cfg.stable_images).map_err(|e| e.to_string())?;
        let dir = work_dir().join("desk_gan");
        let path = dir.join("cpggan-final.ckpt");
        let subjects: Vec<String> = DatasetSplits::subjects(&splits.train).into_iter().map(String::from).collect();
        let fresh = std::env::var("CPGGAN_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
        if !fresh {
            if let Ok(h) = nn::read_checkpoint_header(&path) {
                let matches = h.config["model"] == serde_json::to_value(&gan_cfg).unwrap()
                    && h.config["train"] == serde_json::to_value(&cfg).unwrap()
                    && h.config["schedule"] == serde_json::to_value(&schedule).unwrap()
                    && h.step == cfg.total_steps
                    && h.train_subjects == subjects;
                if matches {
                    let how = format!("reused checkpoint {}", path.display());
                    return Ok((path, how));
                }
            }
        }
        let start = Instant::now();
        let trained = train_gan(&gan_cfg, &cfg, &splits.train, &[], &schedule, Some(&dir)).map_err(|e| e.to_string())?;
        let test_ids: BTreeSet<&str> = splits.test.iter().map(|r| r.id.as_str()).collect();
        if trained.batch_ids.iter().any(|id| test_ids.contains(id.as_str())) {
            return Err("test images entered GAN batches".into());
        }
        Ok((path, format!("trained {} steps in {:.0}s", cfg.total_steps, start.elapsed().as_secs_f64())))
    })
}

fn p4_conditioning() -> Outcome {
    let splits = desk_splits();
    ensure!(splits.train.len() >= 2000, "only {} training images", splits.train.len());
    let (path, how) = desk_gan().clone()?;
    let gan: TrainedGan<Cpggan> = load_cpggan(&path).map_err(|e| e.to_string())?;
    let pos = gan.final_position();
    ensure!(pos.stage == 4 && pos.alpha == 1.0, "GAN stopped at {pos:?}");
    let request = SampleRequest {
        count: 200,
        augment: true,
        quality_filter: 0.0,
        tag: "p4".into(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(DESK_SEED);
    let out = sample_images(&gan.model, pos, &request, &splits.train, &mut rng).map_err(|e| e.to_string())?;
    let pass = out.records.iter().filter(|r| passes_contrast(&r.image, &r.boxes, 20.0)).count();
    let rate = pass as f64 / out.records.len() as f64;
    ensure!(rate >= 0.8, "{pass}/200 samples reach +20 gray levels ({how})");
    Ok(format!("{pass}/200 samples reach +20 gray levels ({how})"))
}

/// Matching written independently of the library: pixel-count IoU and a
/// direct scan in confidence order.
fn brute_counts(dets: &[Detection], gt: &[BoundingBox], thr: f64) -> (usize, usize) {
    let pixels = |b: &BoundingBox| -> BTreeSet<(i32, i32)> { (b.x_min..b.x_max).flat_map(|x| (b.y_min..b.y_max).map(move |y| (x, y))).collect() };
    let pix_iou = |a: &BoundingBox, b: &BoundingBox| {
        let (pa, pb) = (pixels(a), pixels(b));
        pa.intersection(&pb).count() as f64 / pa.union(&pb).count() as f64
    };
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
    let mut free = vec![true; gt.len()];
    let (mut matched, mut fps) = (0, 0);
    for d in order {
        let mut best = None;
        let mut best_v = -1.0;
        for g in 0..gt.len() {
            let v = pix_iou(&dets[d].bbox, &gt[g]);
            if free[g] && v >= thr && v > best_v {
                best = Some(g);
                best_v = v;
            }
        }
        match best {
            Some(g) => {
                free[g] = false;
                matched += 1;
            }
            None => fps += 1,
        }
    }
    (matched, fps)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (w, h) = (rng.random_range(2..=12), rng.random_range(2..=12));
    let (x, y) = (rng.random_range(0..=32 - w), rng.random_range(0..=32 - h));
    bb(x, y, x + w, y + h)
}

fn p5_metric_oracle() -> Outcome {
    ensure!(iou(&bb(0, 0, 2, 2), &bb(1, 1, 3, 3)) == 1.0 / 7.0, "1/7 case gives {}", iou(&bb(0, 0, 2, 2), &bb(1, 1, 3, 3)));
    ensure!(iou(&bb(3, 4, 9, 9), &bb(3, 4, 9, 9)) == 1.0, "identical boxes");
    ensure!(iou(&bb(0, 0, 4, 4), &bb(4, 0, 8, 4)) == 0.0, "touching boxes");
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for scene in 0..100 {
        let mut dets = BTreeMap::new();
        let mut gt = BTreeMap::new();
        let (mut m50, mut f50, mut m25, mut f25, mut total) = (0, 0, 0, 0, 0);
        for img in 0..rng.random_range(1..=4) {
            let boxes: Vec<BoundingBox> = (0..rng.random_range(0..=3)).map(|_| random_box(&mut rng)).collect();
            let found: Vec<Detection> = (0..rng.random_range(0..=5))
                .map(|_| {
                    let b = if !boxes.is_empty() && rng.random_bool(0.6) {
                        let g = boxes[rng.random_range(0..boxes.len())];
                        let (dx, dy) = (rng.random_range(-2..=2), rng.random_range(-2..=2));
                        BoundingBox::new(g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy)
                            .ok()
                            .and_then(|b| b.clamped(32, 32))
                            .unwrap_or(g)
                    } else {
                        random_box(&mut rng)
                    };
                    Detection::new(b, (rng.random_range(0..1000) as f64) / 1000.0)
                })
                .collect();
            let (a, b) = brute_counts(&found, &boxes, 0.5);
            let (c, d) = brute_counts(&found, &boxes, 0.25);
            (m50, f50, m25, f25, total) = (m50 + a, f50 + b, m25 + c, f25 + d, total + boxes.len());
            gt.insert(format!("img{img}"), boxes);
            dets.insert(format!("img{img}"), found);
        }
        if total == 0 {
            ensure!(evaluate(&dets, &gt).is_err(), "scene {scene}: no ground truth should be an error");
            continue;
        }
        let r = evaluate(&dets, &gt).unwrap();
        let c = (r.counts_50, r.counts_25);
        ensure!(
            (c.0.matched_gt, c.0.unmatched_detections, c.1.matched_gt, c.1.unmatched_detections, c.0.total_gt) == (m50, f50, m25, f25, total),
            "scene {scene}: library {c:?} vs oracle ({m50},{f50},{m25},{f25},{total})"
        );
        ensure!(r.sensitivity_50 == m50 as f64 / total as f64, "scene {scene}: sensitivity");
        ensure!(r.fps_per_slice_50 == f50 as f64 / gt.len() as f64, "scene {scene}: FPs per slice");
    }
    Ok("100 scenes identical at IoU 0.5 and 0.25; IoU examples exact".into())
}

fn p6_round_trip_and_nms() -> Outcome {
    let anchors = AnchorSet::new(vec![(4.0, 4.0), (8.0, 6.0), (12.0, 12.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = 0.0f64;
    for scene in 0..100 {
        let mut boxes: Vec<BoundingBox> = Vec::new();
        let want = rng.random_range(1..=4);
        while boxes.len() < want {
            let (w, h) = (rng.random_range(2..=20), rng.random_range(2..=20));
            let (x, y) = (rng.random_range(0..=64 - w), rng.random_range(0..=64 - h));
            let b = bb(x, y, x + w, y + h);
            if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                boxes.push(b);
            }
        }
        let t = encode_targets(&boxes, 8, 64, &anchors, 1);
        let got = decode_grid(&t.values, 8, 3, 6, 64, 1.0, 0.45);
        ensure!(got.len() == boxes.len(), "scene {scene}: {} boxes decoded from {}", got.len(), boxes.len());
        for b in &boxes {
            let d = got
                .iter()
                .map(|d| d.bbox)
                .min_by_key(|d| (d.x_min - b.x_min).abs() + (d.y_min - b.y_min).abs() + (d.x_max - b.x_max).abs() + (d.y_max - b.y_max).abs())
                .unwrap();
            for (p, q) in [(b.x_min, d.x_min), (b.y_min, d.y_min), (b.x_max, d.x_max), (b.y_max, d.y_max)] {
                worst = worst.max(((p - q) as f64).abs());
            }
        }
    }
    ensure!(worst <= 0.5, "round trip off by {worst} px");

    for set in 0..1000 {
        let dets: Vec<Detection> = (0..rng.random_range(0..=25)).map(|_| Detection::new(random_box(&mut rng), rng.random_range(0.0..1.0))).collect();
        let thr = [0.3, 0.45, 0.6][set % 3];
        let kept = nms(&dets, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                ensure!(iou(&a.bbox, &b.bbox) <= thr, "set {set}: kept pair overlaps at {}", iou(&a.bbox, &b.bbox));
            }
        }
        for d in &dets {
            if !kept.contains(d) {
                ensure!(
                    kept.iter().any(|k| k.confidence >= d.confidence && iou(&k.bbox, &d.bbox) > thr),
                    "set {set}: suppressed detection has no dominating survivor"
                );
            }
        }
    }
    Ok(format!("100 scenes within {worst} px; 1000 NMS sets are antichains"))
}

fn p7_directional() -> Outcome {
    let splits = desk_splits();
    let (gan_path, _) = desk_gan().clone()?;
    let mut base = MatrixConfig::from_toml(REFERENCE_CONFIG).map_err(|e| e.to_string())?;
    base.setups = vec!["real_only".into(), "cpggan_4k".into()];
    base.checkpoints.cpggan = Some(gan_path);
    let start = Instant::now();
    let mut rows = Vec::new();
    for offset in 0..3 {
        let mut cfg = base.clone();
        cfg.seed = base.seed + offset;
        let out = run_matrix(&cfg, splits, &work_dir().join(format!("p7_seed{}", cfg.seed))).map_err(|e| e.to_string())?;
        ensure!(out.rows.len() == 2 && out.audits.iter().all(|a| a.is_clean()), "seed {}: incomplete or leaky run", cfg.seed);
        let (b, s) = (&out.rows[0].result, &out.rows[1].result);
        rows.push((cfg.seed, b.sensitivity_50, b.fps_per_slice_50, s.sensitivity_50, s.fps_per_slice_50));
    }
    let mean = |f: fn(&(u64, f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (bs, bf, ss, sf) = (mean(|r| r.1), mean(|r| r.2), mean(|r| r.3), mean(|r| r.4));
    let per_seed: Vec<String> = rows.iter().map(|r| format!("seed {}: {:.3}/{:.2} -> {:.3}/{:.2}", r.0, r.1, r.2, r.3, r.4)).collect();
    let detail = format!(
        "sens@0.5 {bs:.3} -> {ss:.3}, FPs/slice {bf:.2} -> {sf:.2} [{}] in {:.0}s",
        per_seed.join("; "),
        start.elapsed().as_secs_f64()
    );
    ensure!(ss >= bs, "synthetic mean sensitivity below baseline: {detail}");
    ensure!(sf > bf, "FPs per slice did not increase: {detail}");
    ensure!(rows.iter().all(|r| r.3 >= r.1 - 0.02), "a seed fell more than 0.02 below baseline: {detail}");
    Ok(detail)
}

/// Two-means on 2-D points, seeded from the two mutually farthest points.
fn two_means(y: &[[f64; 2]]) -> Vec<usize> {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let (mut i0, mut i1, mut far) = (0, 0, -1.0);
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            if d2(y[i], y[j]) > far {
                (i0, i1, far) = (i, j, d2(y[i], y[j]));
            }
        }
    }
    let mut c = [y[i0], y[i1]];
    let mut assign = vec![0; y.len()];
    for _ in 0..100 {
        for (a, p) in assign.iter_mut().zip(y) {
            *a = usize::from(d2(*p, c[1]) < d2(*p, c[0]));
        }
        for (k, ck) in c.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = y.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *ck = [members.iter().map(|p| p[0]).sum::<f64>() / n, members.iter().map(|p| p[1]).sum::<f64>() / n];
            }
        }
    }
    assign
}

fn p8_tsne() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centre: Vec<f64> = (0..1024).map(|_| noise.sample(&mut rng)).collect();
    let x: Vec<Vec<f64>> = (0..600)
        .map(|i| {
            let sign = if i < 300 { 1.0 } else { -1.0 };
            centre.iter().map(|c| sign * 0.5 * c + noise.sample(&mut rng)).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..600).map(|i| usize::from(i >= 300)).collect();

    let (p, _) = conditional_affinities(&x, 30.0);
    let mut worst = 0.0f64;
    for i in 0..600 {
        let h: f64 = p[i * 600..(i + 1) * 600].iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
        worst = worst.max((h.exp() - 30.0).abs() / 30.0);
    }
    ensure!(worst <= 0.01, "row perplexity off by {:.3}%", worst * 100.0);

    let cfg = TsneConfig {
        perplexity: 30.0,
        seed: 4,
        ..TsneConfig::default()
    };
    let y = tsne_embed(&x, &cfg).map_err(|e| e.to_string())?;
    ensure!(tsne_embed(&x, &cfg).map_err(|e| e.to_string())? == y, "embedding is not seed-deterministic");
    let assign = two_means(&y);
    let agree = assign.iter().zip(&labels).filter(|(a, l)| a == l).count();
    let purity = agree.max(600 - agree) as f64 / 600.0;
    ensure!(purity >= 0.95, "purity {purity:.3}");
    Ok(format!("purity {:.1}%, worst row perplexity error {:.4}%, deterministic", purity * 100.0, worst * 100.0))
}

fn p9_leakage() -> Outcome {
    let dir = work_dir().join("p9");
    let _ = std::fs::remove_dir_all(&dir);
    let splits = common::splits(9);
    let normals = common::normals(9);
    let schedule = build_schedule(common::SIZE as i64, 4, 4).unwrap();
    let test_ids: BTreeSet<String> = splits.test.iter().map(|r| r.id.clone()).collect();
    let test_subjects: BTreeSet<&str> = DatasetSplits::subjects(&splits.test);

    let mut gan_batches: Vec<(&str, BTreeSet<String>, Vec<String>)> = Vec::new();
    let cp = train_gan(&common::gan(), &common::gan_train(6, 1), &splits.train, &[], &schedule, Some(&dir.join("cpggan"))).unwrap();
    gan_batches.push(("cpggan", cp.batch_ids, cp.header.train_subjects));
    let normal_cfg = GanTrainConfig {
        include_normals: true,
        ..common::gan_train(6, 2)
    };
    let cn = train_gan(&common::gan(), &normal_cfg, &splits.train, &normals, &schedule, Some(&dir.join("cpggan_normal"))).unwrap();
    gan_batches.push(("cpggan_normal", cn.batch_ids, cn.header.train_subjects));
    let ii = train_img2img(&common::unet(), &common::gan_train(4, 3), &splits.train, &[], Some(&dir.join("img2img"))).unwrap();
    gan_batches.push(("img2img", ii.batch_ids, ii.header.train_subjects));
    for (name, ids, subjects) in &gan_batches {
        ensure!(ids.is_disjoint(&test_ids), "{name}: test images in GAN batches");
        ensure!(subjects.iter().all(|s| !test_subjects.contains(s.as_str())), "{name}: test subjects in GAN training");
    }

    let mut cfg = MatrixConfig {
        seed: 1,
        desk_factor: 0.1,
        detector: common::detector(2),
        ..MatrixConfig::default()
    };
    cfg.sample.quality_filter = 0.0;
    cfg.checkpoints.cpggan = Some(dir.join("cpggan/cpggan-final.ckpt"));
    cfg.checkpoints.cpggan_normal = Some(dir.join("cpggan_normal/cpggan-final.ckpt"));
    cfg.checkpoints.img2img = Some(dir.join("img2img/img2img-final.ckpt"));
    let out = run_matrix(&cfg, &splits, &dir.join("matrix")).map_err(|e| e.to_string())?;
    ensure!(out.skipped.is_empty(), "skipped setups: {:?}", out.skipped);
    let setups: Vec<String> = out.audits.iter().map(|a| a.setup_id.clone()).collect();
    ensure!(setups == all_setups(), "audited {setups:?}");
    for a in &out.audits {
        ensure!(a.is_clean(), "{}: {a:?}", a.setup_id);
    }

    // The audit must notice a test record smuggled into training.
    let mut leaky = splits.clone();
    leaky.train.push(splits.test[0].clone());
    let control = MatrixConfig {
        setups: vec!["real_only".into()],
        ..cfg.clone()
    };
    let out = run_matrix(&control, &leaky, &dir.join("control")).map_err(|e| e.to_string())?;
    ensure!(!out.audits[0].is_clean(), "planted leak went unnoticed");
    Ok(format!("{} setups clean across detector, anchors, selection, annotations and 3 GANs; planted leak detected", setups.len()))
}

fn p10_confusion() -> Outcome {
    let m = confusion_stats(&responses_from_counts(40, 10, 2, 48)).map_err(|e| e.to_string())?;
    ensure!(m.accuracy == 0.88, "accuracy {}", m.accuracy);

    // The same counts through a rater session and its audit log.
    let real: Vec<String> = (0..50).map(|i| format!("r{i}.png")).collect();
    let synt: Vec<String> = (0..50).map(|i| format!("s{i}.png")).collect();
    let mut session = VttSession::create("p10", &real, &synt, 50, TestKind::Crop32Plain, 10).unwrap();
    let (mut real_left_as_real, mut synt_left_as_real) = (40, 2);
    while let Some(item) = session.next_item() {
        let truth = session.item(&item.item_id).unwrap().truth;
        let left = if truth == Label::Real { &mut real_left_as_real } else { &mut synt_left_as_real };
        let answer = if *left > 0 {
            *left -= 1;
            Label::Real
        } else {
            Label::Synthetic
        };
        session.record_response(&item.item_id, answer, 0).unwrap();
    }
    let report = session.finalize(1).unwrap();
    let replayed = replay_audit(&report.log).map_err(|e| e.to_string())?;
    ensure!(replayed == m && report.matrix == m, "session gave {:?}", report.matrix);
    Ok(format!("accuracy {:.0}% from both the fixture and a replayed session", m.accuracy * 100.0))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("P1", "loss oracles", p1_loss_oracles),
        ("P2", "gradient penalty", p2_gradient_penalty),
        ("P3", "progressive shape ladder", p3_shape_ladder),
        ("P4", "conditioning efficacy", p4_conditioning),
        ("P5", "metric oracle equivalence", p5_metric_oracle),
        ("P6", "encode/decode and NMS", p6_round_trip_and_nms),
        ("P7", "directional augmentation result", p7_directional),
        ("P8", "t-SNE sanity", p8_tsne),
        ("P9", "leakage audit", p9_leakage),
        ("P10", "confusion fixture", p10_confusion),
    ];
    let _ = std::fs::create_dir_all(work_dir());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
