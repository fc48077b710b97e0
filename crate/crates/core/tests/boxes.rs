use cpggan::detector::{compute_anchors, decode_grid, encode_targets, AnchorSet, Detection};
use cpggan::metrics::{iou, match_detections};
use cpggan::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bb(a: i32, b: i32, c: i32, d: i32) -> BoundingBox {
    BoundingBox::new(a, b, c, d).unwrap()
}

fn mean(v: &[(f64, f64)]) -> (f64, f64) {
    let n = v.len() as f64;
    (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n)
}

#[test]
fn two_size_modes_give_two_anchors_near_the_mode_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut boxes = Vec::new();
    let mut small = Vec::new();
    let mut large = Vec::new();
    for i in 0..200 {
        let (w, h) = if i % 2 == 0 {
            (rng.random_range(5..=6), rng.random_range(7..=8))
        } else {
            (rng.random_range(24..=26), rng.random_range(18..=20))
        };
        if i % 2 == 0 { &mut small } else { &mut large }.push((w as f64, h as f64));
        boxes.push(bb(0, 0, w, h));
    }
    let anchors = compute_anchors(&boxes, 2, 0).unwrap();
    let (ms, ml) = (mean(&small), mean(&large));
    // Both labelings of the two centers; the better one must be within 5%.
    let close = |a: (f64, f64), m: (f64, f64)| (a.0 - m.0).abs() <= 0.05 * m.0 && (a.1 - m.1).abs() <= 0.05 * m.1;
    let a = &anchors.anchors;
    assert!(
        (close(a[0], ms) && close(a[1], ml)) || (close(a[1], ms) && close(a[0], ml)),
        "{a:?} vs {ms:?} {ml:?}"
    );
    assert_eq!(compute_anchors(&boxes, 2, 0).unwrap(), anchors);
}

#[test]
fn adding_synthetic_boxes_moves_the_anchors() {
    let real: Vec<BoundingBox> = (0..60).map(|i| bb(0, 0, 4 + i % 5, 4 + (i * 3) % 7)).collect();
    let mut mixed = real.clone();
    mixed.extend((0..60).map(|i| bb(0, 0, 14 + i % 4, 12 + i % 3)));
    assert_ne!(compute_anchors(&real, 3, 1).unwrap(), compute_anchors(&mixed, 3, 1).unwrap());
}

fn random_box(rng: &mut ChaCha8Rng, size: i32) -> BoundingBox {
    let w = rng.random_range(2..=size / 3);
    let h = rng.random_range(2..=size / 3);
    let x = rng.random_range(0..=size - w);
    let y = rng.random_range(0..=size - h);
    bb(x, y, x + w, y + h)
}

/// Largest matching over pairs with IoU at or above the threshold, by
/// exhaustive search over ground-truth assignments.
fn optimal_matches(dets: &[Detection], gt: &[BoundingBox], thr: f64) -> usize {
    fn go(d: usize, dets: &[Detection], gt: &[BoundingBox], used: &mut Vec<bool>, thr: f64) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, dets, gt, used, thr);
        for g in 0..gt.len() {
            if !used[g] && iou(&dets[d].bbox, &gt[g]) >= thr {
                used[g] = true;
                best = best.max(1 + go(d + 1, dets, gt, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gt, &mut vec![false; gt.len()], thr)
}

#[test]
fn greedy_matching_against_exhaustive_bipartite() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut conflict_free = 0;
    for _ in 0..50 {
        let gt: Vec<BoundingBox> = (0..rng.random_range(1..=4)).map(|_| random_box(&mut rng, 64)).collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=5))
            .map(|_| {
                let b = if rng.random_bool(0.6) {
                    let g = gt[rng.random_range(0..gt.len())];
                    let dx = rng.random_range(-2..=2);
                    let dy = rng.random_range(-2..=2);
                    BoundingBox::new(g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy)
                        .ok()
                        .and_then(|b| b.clamped(64, 64))
                        .unwrap_or(g)
                } else {
                    random_box(&mut rng, 64)
                };
                Detection::new(b, rng.random_range(0.0..1.0))
            })
            .collect();
        for thr in [0.5, 0.25] {
            let greedy = match_detections(&dets, &gt, thr).pairs.len();
            let optimal = optimal_matches(&dets, &gt, thr);
            // No detection and no box has more than one candidate partner.
            let candidates = |i: usize| gt.iter().filter(|g| iou(&dets[i].bbox, *g) >= thr).count();
            let gt_candidates = |g: &BoundingBox| dets.iter().filter(|d| iou(&d.bbox, g) >= thr).count();
            if (0..dets.len()).all(|i| candidates(i) <= 1) && gt.iter().all(|g| gt_candidates(g) <= 1) {
                assert_eq!(greedy, optimal);
                conflict_free += 1;
            } else {
                assert!(greedy <= optimal);
            }
        }
    }
    assert!(conflict_free > 20);
}

#[test]
fn encode_decode_recovers_random_scenes() {
    let anchors = AnchorSet::new(vec![(4.0, 4.0), (8.0, 6.0), (12.0, 12.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let mut boxes: Vec<BoundingBox> = Vec::new();
        while boxes.len() < 3 {
            let b = random_box(&mut rng, 64);
            if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                boxes.push(b);
            }
        }
        let t = encode_targets(&boxes, 8, 64, &anchors, 1);
        let got = decode_grid(&t.values, 8, 3, 6, 64, 1.0, 0.45);
        assert_eq!(got.len(), t.responsible_count());
        for d in &got {
            assert_eq!(d.confidence, 1.0);
            let b = boxes.iter().find(|b| iou(*b, &d.bbox) > 0.0).unwrap();
            for (p, q) in [(b.x_min, d.bbox.x_min), (b.y_min, d.bbox.y_min), (b.x_max, d.bbox.x_max), (b.y_max, d.bbox.y_max)] {
                assert!(((p - q) as f64).abs() <= 0.5);
            }
        }
    }
}
