//! Acceptance criteria, one PASS/FAIL line each. Runs with a custom harness
//! so the lines are always printed; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rfl_lab::ensemble::{fuse, FusionConfig};
use rfl_lab::experiment::{run_experiment, ExperimentConfig, ExperimentReport};
use rfl_lab::geometry::{apply_tta, invert_tta, tile_grid, SceneDims, TtaStep, TtaTransform};
use rfl_lab::gradcheck::{run_gradcheck, GradCheckConfig};
use rfl_lab::loss::{ce_loss, focal_loss, reduced_focal_loss, LossParams, ProbPoint};
use rfl_lab::metrics::{iou, map_and_mrecall, BBox, Detection, GroundTruth};
use rfl_lab::rng::rng;

type Outcome = Result<String, String>;
type Coord = fn(&BBox) -> f64;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let (ia, ib) = (a.to_bits() as i64, b.to_bits() as i64);
    if (ia < 0) != (ib < 0) {
        return u64::MAX;
    }
    ia.abs_diff(ib)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(&GradCheckConfig::default());
    let secs = t.elapsed().as_secs_f64();
    let worst = report.worst.as_ref().map_or(0.0, |w| w.rel_err / w.tol);
    if !report.passed() {
        return Err(format!(
            "{} of {} samples over tolerance, worst {:?}",
            report.failures.len(),
            report.checked,
            report.worst
        ));
    }
    check(
        secs < 10.0,
        format!("{} samples, worst err/tol {worst:.3}, {secs:.2}s", report.checked),
        format!("took {secs:.2}s"),
    )
}

fn piecewise_identities() -> Outcome {
    let t = Instant::now();
    let grid = GradCheckConfig::default();
    let mut gammas = grid.gammas.clone();
    if !gammas.contains(&0.0) {
        gammas.push(0.0);
    }
    let mut checked = 0usize;
    let mut worst = 0u64;
    for &gamma in &gammas {
        for &th in &grid.thresholds {
            let params = LossParams::reduced_focal(gamma, th).map_err(|e| e.to_string())?;
            for &pt in &grid.pts {
                let p = ProbPoint::new(pt).map_err(|e| e.to_string())?;
                let ce = ce_loss(p);
                let fl = focal_loss(p, &params);
                let rfl = reduced_focal_loss(p, &params);
                let mut pairs = Vec::new();
                if pt < th {
                    pairs.push(("RFL=CE", rfl, ce));
                } else {
                    pairs.push(("FL=th^g*RFL", fl, th.powf(gamma) * rfl));
                }
                if gamma == 0.0 {
                    pairs.push(("FL=CE at g=0", fl, ce));
                    pairs.push(("RFL=CE at g=0", rfl, ce));
                }
                for (name, a, b) in pairs {
                    let u = ulps(a, b);
                    worst = worst.max(u);
                    checked += 1;
                    if u > 2 {
                        return Err(format!("{name} off by {u} ulp at pt={pt} g={gamma} th={th}"));
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        secs < 1.0,
        format!("{checked} identities, worst {worst} ulp"),
        format!("took {secs:.3}s"),
    )
}

fn experiment_a(r: &ExperimentReport) -> Outcome {
    let arm = |n: &str| r.arm(n).map(|a| a.mean.mrecall).ok_or(format!("missing arm {n}"));
    let (ce, fl, rfl) = (arm("CE")?, arm("FL")?, arm("RFL")?);
    let msg = format!("mRecall CE {ce:.4}, FL {fl:.4}, RFL {rfl:.4} over {} seeds", r.seeds.len());
    check(rfl > fl && rfl > ce && r.seeds.len() == 5, msg.clone(), msg)
}

fn experiment_b(r: &ExperimentReport) -> Outcome {
    let arm = |n: &str| {
        r.two_stage_arm(n)
            .map(|a| a.mean_proposal_recall)
            .ok_or(format!("missing two-stage arm {n}"))
    };
    let (ce, fl) = (arm("CE")?, arm("FL")?);
    let msg = format!("proposal recall CE {ce:.4}, FL {fl:.4}");
    check(ce > fl, msg.clone(), msg)
}

fn experiment_c(r: &ExperimentReport) -> Outcome {
    let base = r.arm("RFL").ok_or("missing arm RFL")?;
    let us = r.arm("RFL+undersample").ok_or("missing arm RFL+undersample")?;
    let msg = format!(
        "rarest-5 recall {:.4} -> {:.4}; most frequent class {:.4} -> {:.4}",
        base.mean.rare_recall, us.mean.rare_recall, base.mean.per_class_recall[0], us.mean.per_class_recall[0]
    );
    check(us.mean.rare_recall > base.mean.rare_recall, msg.clone(), msg)
}

fn experiment_runtime(elapsed: Duration) -> Outcome {
    let secs = elapsed.as_secs_f64();
    check(secs < 300.0, format!("{secs:.1}s"), format!("took {secs:.1}s"))
}

fn determinism(cfg: &ExperimentConfig, first: &str) -> Outcome {
    let second = run_experiment(cfg, None, false)
        .and_then(|r| r.to_canonical_json())
        .map_err(|e| e.to_string())?;
    check(
        first == second,
        format!("{} bytes identical", first.len()),
        "reports differ".into(),
    )
}

fn tile_invariants() -> Outcome {
    let mut g = rng(0x7115);
    for trial in 0..1000 {
        let w = g.gen_range(1.0..5000.0f64).round();
        let h = g.gen_range(1.0..5000.0f64).round();
        let tile = g.gen_range(16.0..1200.0f64).round();
        let overlap = (g.gen_range(0.0..0.9) * tile).floor();
        let scene = SceneDims::new(w, h).map_err(|e| e.to_string())?;
        let tiles = tile_grid(scene, tile, overlap).map_err(|e| e.to_string())?;
        let fail = |what: &str| Err(format!("trial {trial} ({w}x{h}, tile {tile}, overlap {overlap}): {what}"));
        let mut xs: Vec<(f64, f64)> = tiles.iter().map(|t| (t.origin_x, t.tile_w)).collect();
        let mut ys: Vec<(f64, f64)> = tiles.iter().map(|t| (t.origin_y, t.tile_h)).collect();
        xs.sort_by(|a, b| a.0.total_cmp(&b.0));
        xs.dedup();
        ys.sort_by(|a, b| a.0.total_cmp(&b.0));
        ys.dedup();
        if tiles.len() != xs.len() * ys.len() {
            return fail("grid is not a full product");
        }
        for (axis, dim) in [(&xs, w), (&ys, h)] {
            if axis[0].0 != 0.0 {
                return fail("first tile does not start at 0");
            }
            let last = axis[axis.len() - 1];
            if last.0 + last.1 != dim {
                return fail("last tile does not end at the scene edge");
            }
            for win in axis.windows(2) {
                let (a, b) = (win[0], win[1]);
                if b.0 > a.0 + a.1 {
                    return fail("gap between neighbours");
                }
                if a.0 + a.1 - b.0 < overlap {
                    return fail("neighbours overlap less than requested");
                }
            }
            if axis.iter().any(|&(o, len)| o < 0.0 || o + len > dim || len != tile.min(dim)) {
                return fail("tile outside the scene or wrong size");
            }
        }
        // every tile is visited once in row-major order
        for (i, t) in tiles.iter().enumerate() {
            if t.iy * xs.len() + t.ix != i {
                return fail("tiles not in row-major order");
            }
        }
    }
    Ok("1000 random scene/tile/overlap triples".into())
}

fn tta_roundtrip() -> Outcome {
    let mut g = rng(0x77a);
    let rigid = ["identity", "fliph", "rot90", "rot180", "rot270", "rot90+fliph", "rot270+rot90+rot180"];
    let mut exact = 0usize;
    let mut worst_scale = 0.0f64;
    for trial in 0..500 {
        let w = g.gen_range(1..4096) as f64;
        let h = g.gen_range(1..4096) as f64;
        let scene = SceneDims::new(w, h).map_err(|e| e.to_string())?;
        // pixel coordinates on a 1/16 grid
        let q = |v: f64| (v * 16.0).floor() / 16.0;
        let boxes: Vec<BBox> = (0..8)
            .map(|_| {
                let (x1, y1) = (q(g.gen_range(0.0..w)), q(g.gen_range(0.0..h)));
                BBox::from_corners((x1, y1), (q(g.gen_range(x1..=w)), q(g.gen_range(y1..=h))))
            })
            .collect();
        for name in rigid {
            let t: TtaTransform = name.parse().map_err(|e: rfl_lab::Error| e.to_string())?;
            let back = invert_tta(&apply_tta(&boxes, scene, &t), scene, &t);
            if back != boxes {
                return Err(format!("trial {trial}: `{name}` round-trip not exact"));
            }
            exact += boxes.len();
        }
        let s = g.gen_range(0.25..4.0);
        let t = TtaTransform::new(vec![TtaStep::Scale(s), TtaStep::Rot90]).map_err(|e| e.to_string())?;
        let raw: Vec<BBox> = boxes
            .iter()
            .map(|b| BBox::from_corners((b.x1 + g.gen_range(0.0..0.01), b.y1), (b.x2, b.y2)))
            .collect();
        for (a, b) in raw.iter().zip(invert_tta(&apply_tta(&raw, scene, &t), scene, &t)) {
            for e in [a.x1 - b.x1, a.y1 - b.y1, a.x2 - b.x2, a.y2 - b.y2] {
                worst_scale = worst_scale.max(e.abs());
            }
        }
    }
    check(
        worst_scale < 1e-9,
        format!("{exact} rigid round-trips exact, worst scale error {worst_scale:.2e}"),
        format!("scale round-trip error {worst_scale:.2e}"),
    )
}

fn tile_fixture() -> Outcome {
    let scene = SceneDims::new(1000.0, 1000.0).map_err(|e| e.to_string())?;
    let n = tile_grid(scene, 700.0, 80.0).map_err(|e| e.to_string())?.len();
    check(n == 4, "1000x1000 / 700 / 80 -> 4 tiles".into(), format!("{n} tiles"))
}

/// Brute-force AP: sweep the score threshold over every detection, re-run
/// greedy matching on the retained prefix, and integrate the interpolated
/// precision at each recall step.
fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    // (tp count, kept) for every prefix
    let mut curve = Vec::new();
    for k in 1..=order.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &d in &order[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let v = iou(&dets[d].bbox, &gt.bbox);
                if !used[gi] && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, v)) = best.filter(|&(_, v)| v >= thr && v > 0.0) {
                let _ = v;
                used[gi] = true;
                tp += 1;
            }
        }
        curve.push((tp, k));
    }
    let mut sum = 0.0;
    let mut prev_tp = 0;
    for i in 0..curve.len() {
        if curve[i].0 > prev_tp {
            prev_tp = curve[i].0;
            // best precision at any recall at least this high
            let p = curve[i..]
                .iter()
                .map(|&(tp, k)| tp as f64 / k as f64)
                .fold(0.0, f64::max);
            sum += p;
        }
    }
    Some(sum / gts.len() as f64)
}

fn random_box(g: &mut impl Rng) -> BBox {
    let x = g.gen_range(0..8) as f64;
    let y = g.gen_range(0..8) as f64;
    BBox::from_corners((x, y), (x + g.gen_range(1..5) as f64, y + g.gen_range(1..5) as f64))
}

fn metrics_oracle() -> Outcome {
    let mut g = rng(0xa9);
    let trials = 500;
    for trial in 0..trials {
        let classes = g.gen_range(1..=3);
        let n_gt = g.gen_range(1..=5);
        let n_det = g.gen_range(0..=5);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth::new(random_box(&mut g), g.gen_range(0..classes)))
            .collect();
        // distinct scores keep the ranking unambiguous
        let mut scores: Vec<u32> = (1..=100).collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                let s = scores.swap_remove(g.gen_range(0..scores.len()));
                Detection::new(random_box(&mut g), g.gen_range(0..classes), s as f64 / 100.0).unwrap()
            })
            .collect();
        let thr = [0.3, 0.5, 0.75][trial % 3];
        let summary = map_and_mrecall(&dets, &gts, thr).map_err(|e| e.to_string())?;
        let mut aps = Vec::new();
        for c in 0..classes {
            let d: Vec<Detection> = dets.iter().filter(|x| x.class_id == c).cloned().collect();
            let gg: Vec<GroundTruth> = gts.iter().filter(|x| x.class_id == c).cloned().collect();
            let expect = brute_force_ap(&d, &gg, thr);
            let got = summary.per_class.iter().find(|e| e.class_id == c).and_then(|e| e.ap);
            if got != expect {
                return Err(format!("trial {trial} class {c}: AP {got:?} vs oracle {expect:?}"));
            }
            if !gg.is_empty() {
                aps.push(expect.unwrap_or(0.0));
            }
        }
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        if map != summary.map {
            return Err(format!("trial {trial}: mAP {} vs oracle {map}", summary.map));
        }
    }
    let fp = Detection::new(BBox::new(50.0, 50.0, 60.0, 60.0).unwrap(), 0, 0.9).unwrap();
    let tp = Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 0, 0.8).unwrap();
    let gt = GroundTruth::new(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 0);
    let ap = map_and_mrecall(&[fp, tp], &[gt], 0.5).map_err(|e| e.to_string())?.map;
    check(
        ap == 0.5,
        format!("{trials} random fixtures match exactly; FP-then-TP AP = {ap}"),
        format!("FP-then-TP AP = {ap}"),
    )
}

fn random_dets(g: &mut impl Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = g.gen_range(0.0..60.0f64);
            let y = g.gen_range(0.0..60.0f64);
            let b = BBox::from_corners((x, y), (x + g.gen_range(2.0..25.0), y + g.gen_range(2.0..25.0)));
            let src = ["a", "b", "c"][g.gen_range(0..3)];
            Detection::new(b, g.gen_range(0..2), g.gen_range(0.01..1.0))
                .unwrap()
                .with_source(src)
        })
        .collect()
}

fn fusion_suite() -> Outcome {
    let mut g = rng(0xf05e);
    let cfg = FusionConfig::default();
    for trial in 0..300 {
        let n = g.gen_range(1..30);
        let dets = random_dets(&mut g, n);
        let once = fuse(&dets, &cfg).map_err(|e| e.to_string())?;
        let twice = fuse(&once, &cfg).map_err(|e| e.to_string())?;
        if once != twice {
            return Err(format!("trial {trial}: fuse is not idempotent"));
        }
        let clusters = rfl_lab::ensemble::fuse_clusters(&dets, &cfg).map_err(|e| e.to_string())?;
        for c in &clusters {
            let members: Vec<&BBox> = c.members.iter().map(|&i| &dets[i].bbox).collect();
            let lo = |f: fn(&BBox) -> f64| members.iter().map(|b| f(b)).fold(f64::INFINITY, f64::min);
            let hi = |f: fn(&BBox) -> f64| members.iter().map(|b| f(b)).fold(f64::NEG_INFINITY, f64::max);
            let b = c.detection.bbox;
            let corners: [(f64, Coord); 4] =
                [(b.x1, |b| b.x1), (b.y1, |b| b.y1), (b.x2, |b| b.x2), (b.y2, |b| b.y2)];
            if corners.iter().any(|&(v, f)| v < lo(f) || v > hi(f)) {
                return Err(format!("trial {trial}: fused box outside member hull"));
            }
        }
    }

    let fixture = vec![
        Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 0, 0.6).unwrap(),
        Detection::new(BBox::new(1.0, 1.0, 11.0, 11.0).unwrap(), 0, 0.2).unwrap(),
    ];
    let fused = fuse(&fixture, &FusionConfig { iou_thresh: 0.5, ..cfg.clone() }).map_err(|e| e.to_string())?;
    if fused.len() != 1 || fused[0].bbox != BBox::new(0.25, 0.25, 10.25, 10.25).unwrap() {
        return Err(format!("weighted fixture gave {fused:?}"));
    }

    let disjoint: Vec<Detection> = (0..6)
        .map(|i| {
            let x = 20.0 * i as f64;
            Detection::new(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), 0, 0.9 - 0.1 * i as f64)
                .unwrap()
                .with_source("a")
        })
        .collect();
    let out = fuse(&disjoint, &cfg).map_err(|e| e.to_string())?;
    check(
        out == disjoint,
        "300 random inputs idempotent and hull-contained; weighted fixture exact; disjoint input fixpoint".into(),
        "single-source disjoint input changed".into(),
    )
}

fn main() -> ExitCode {
    let mut results: BTreeMap<usize, (&str, Outcome)> = BTreeMap::new();
    let mut record = |name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(m) => format!("PASS  {name}: {m}"),
            Err(m) => format!("FAIL  {name}: {m}"),
        };
        println!("{line}");
        results.insert(results.len(), (name, outcome));
    };

    record("gradient suite", gradient_suite());
    record("piecewise identities", piecewise_identities());

    let cfg = ExperimentConfig::long_tailed_default();
    let started = Instant::now();
    match run_experiment(&cfg, None, false) {
        Ok(report) => {
            let elapsed = started.elapsed();
            record("experiment A: RFL mRecall above FL and CE", experiment_a(&report));
            record("experiment B: CE proposal recall above FL", experiment_b(&report));
            record("experiment C: undersampling lifts rare recall", experiment_c(&report));
            record("experiments A-C runtime under 5 min", experiment_runtime(elapsed));
            match report.to_canonical_json() {
                Ok(json) => record("determinism: byte-identical report", determinism(&cfg, &json)),
                Err(e) => record("determinism: byte-identical report", Err(e.to_string())),
            }
        }
        Err(e) => record("experiments A-C", Err(e.to_string())),
    }

    record("geometry: tile coverage and overlap", tile_invariants());
    record("geometry: TTA round-trip", tta_roundtrip());
    record("geometry: 4-tile fixture", tile_fixture());
    record("metrics oracle", metrics_oracle());
    record("fusion suite", fusion_suite());

    let failed = results.values().filter(|(_, o)| o.is_err()).count();
    println!("{} criteria, {} failed", results.len(), failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
