//! Acceptance suite. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line
//! straight to stdout so the verdicts survive output capture.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistree::diff::{backward, backward_from, check_gradients, Op, Tape, Var, BOUNDARY_TOLERANCE};
use vistree::env::RenderConfig;
use vistree::features::{
    benchmark_extractors, build_dataset, evaluate_surrogate, train_surrogate, DatasetConfig, FeatureSpec,
    ReferenceExtractor, Split, Surrogate, SurrogateHyper,
};
use vistree::segment::{find_color_objects, segment_image, ColorPalette, Image, Rgb};
use vistree::trainer::{evaluate_policy, train, ExtractorChoice, FeatureSource, Policy, PolicyKind, TrainConfig};
use vistree::tree::{
    Action, ActionDistribution, ActionSpace, ControlTree, Mode, RecordedPolicy, Relaxation, TreeInit,
};
use vistree::vlm::bundle::{Bundle, DEFAULT_QUERIES, ENVIRONMENTS};
use vistree::vlm::{propose_features, run_walkthrough, Runner};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE {n:>2} {} {name}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

// ---- tree helpers ----

/// Tree with every parameter redrawn: weights and biases in [-1, 1],
/// alpha in [0.5, 3].
fn random_tree(rng: &mut ChaCha8Rng, depth: usize, f: usize, space: ActionSpace) -> ControlTree {
    let mut t = ControlTree::new(depth, f, space, &TreeInit::default(), rng).unwrap();
    let mut p: Vec<f64> = (0..t.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p[t.n_nodes() * (f + 1)] = rng.gen_range(0.5..3.0);
    t.set_params(&p);
    t
}

fn record_log_prob(tree: &ControlTree, tape: &mut Tape, params: Var, x: &[f64], action: &Action, relax: Relaxation) -> Var {
    let bound = tree.bind(tape, params);
    let rec = bound.record(tree, tape, x, relax, None);
    rec.log_prob(tape, action)
}

#[test]
fn criterion_01_tree_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut crisp_worst, mut soft_worst) = (0.0f64, 0.0f64);
    let mut trees = 0;
    let mut resampled = 0;
    while trees < 100 {
        let space = if trees % 2 == 0 {
            ActionSpace::Discrete(3)
        } else {
            ActionSpace::Continuous(2)
        };
        let tree = random_tree(&mut rng, 3, 4, space);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dist = tree.forward(&x, Mode::Infer, &mut rng).unwrap().dist;
        let action = match &dist {
            ActionDistribution::Discrete { probs } => Action::Discrete(rng.gen_range(0..probs.len())),
            ActionDistribution::Continuous { mean, std } => {
                Action::Continuous(mean.iter().zip(std).map(|(m, s)| m + s * rng.gen_range(-1.0..1.0)).collect())
            }
        };
        let params = tree.params();
        let check = |relax| {
            check_gradients(|tape, p| record_log_prob(&tree, tape, p, &x, &action, relax), &params, 1e-6).unwrap()
        };
        let crisp = check(Relaxation::Hard);
        let soft = check(Relaxation::Soft);
        if crisp.excluded || soft.excluded {
            resampled += 1;
            continue;
        }
        crisp_worst = crisp_worst.max(crisp.max_rel_error);
        soft_worst = soft_worst.max(soft.max_rel_error);
        trees += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "tree gradient fidelity",
        crisp_worst <= 1e-5 && secs < 60.0,
        &format!(
            "max relative error {crisp_worst:.2e} over {trees} trees ({resampled} resampled within {BOUNDARY_TOLERANCE} of a kink); \
             fully soft recording {soft_worst:.2e} (reported only); {secs:.1} s"
        ),
    );
}

/// Independent root-to-leaf descent.
fn oracle_leaf(tree: &ControlTree, x: &[f64], alpha: f64) -> (usize, f64) {
    let mut i = 0;
    let mut margin = f64::INFINITY;
    for _ in 0..tree.depth {
        let w = &tree.nodes[i].weights;
        let mut k = 0;
        for j in 1..w.len() {
            if w[j].abs() > w[k].abs() {
                k = j;
            }
        }
        let z = alpha * (w[k] * x[k] - tree.nodes[i].bias);
        margin = margin.min(z.abs());
        i = if z > 0.0 { 2 * i + 2 } else { 2 * i + 1 };
    }
    (i - tree.n_nodes(), margin)
}

#[test]
fn criterion_02_tree_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut points, mut mismatches, mut pmf_worst, mut alpha_flips, mut checked) = (0, 0, 0.0f64, 0, 0);
    for depth in 1..=3 {
        for _ in 0..10 {
            let mut tree = random_tree(&mut rng, depth, 2, ActionSpace::Discrete(3));
            for n in &mut tree.nodes {
                n.bias *= 0.5;
            }
            let mut scaled = tree.clone();
            scaled.alpha *= 10.0;
            for gx in 0..100 {
                for gy in 0..100 {
                    let x = [gx as f64 / 99.0, gy as f64 / 99.0];
                    points += 1;
                    let out = tree.forward(&x, Mode::Infer, &mut rng).unwrap();
                    let (leaf, margin) = oracle_leaf(&tree, &x, tree.alpha);
                    if out.leaf != leaf || out.trace.len() != depth {
                        mismatches += 1;
                    }
                    let ActionDistribution::Discrete { probs } = &out.dist else { unreachable!() };
                    pmf_worst = pmf_worst.max((probs.iter().sum::<f64>() - 1.0).abs());
                    if margin >= 1e-6 {
                        checked += 1;
                        if scaled.forward(&x, Mode::Infer, &mut rng).unwrap().leaf != out.leaf {
                            alpha_flips += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        2,
        "tree semantics",
        mismatches == 0 && pmf_worst <= 1e-9 && alpha_flips == 0,
        &format!(
            "{points} grid points: {mismatches} routing mismatches, max |sum p - 1| {pmf_worst:.1e}, {alpha_flips}/{checked} leaf changes under 10x alpha"
        ),
    );
}

// ---- segmentation oracle ----

struct OracleObject {
    color: Rgb,
    pixels: Vec<usize>,
    bbox: [usize; 4],
    centroid: [f64; 2],
}

/// Depth-first flood fill, color by color in ascending pixel count.
fn flood_fill_oracle(img: &Image) -> Vec<OracleObject> {
    let mut counts: HashMap<Rgb, usize> = HashMap::new();
    for p in &img.pixels {
        *counts.entry(*p).or_insert(0) += 1;
    }
    let mut by_count: Vec<(Rgb, usize)> = counts.into_iter().collect();
    // background: most frequent, ties to the smaller triple
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let background = by_count[0].0;
    let mut colors: Vec<(Rgb, usize)> = by_count.into_iter().filter(|c| c.0 != background).collect();
    colors.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));

    let (w, h) = (img.width as i64, img.height as i64);
    let mut seen = vec![false; img.pixels.len()];
    let mut out = Vec::new();
    for (color, _) in colors {
        for y in 0..h {
            for x in 0..w {
                let s = (y * w + x) as usize;
                if seen[s] || img.pixels[s] != color {
                    continue;
                }
                let mut stack = vec![(x, y)];
                seen[s] = true;
                let mut pixels = Vec::new();
                while let Some((cx, cy)) = stack.pop() {
                    pixels.push((cy * w + cx) as usize);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nx, ny) = (cx + dx, cy + dy);
                            if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                                continue;
                            }
                            let q = (ny * w + nx) as usize;
                            if !seen[q] && img.pixels[q] == color {
                                seen[q] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
                if pixels.len() < 2 {
                    continue;
                }
                pixels.sort_unstable();
                let xs = pixels.iter().map(|&p| p % img.width);
                let ys = pixels.iter().map(|&p| p / img.width);
                let (x0, x1) = (xs.clone().min().unwrap(), xs.clone().max().unwrap());
                let (y0, y1) = (ys.clone().min().unwrap(), ys.clone().max().unwrap());
                let n = pixels.len() as f64;
                out.push(OracleObject {
                    color,
                    bbox: [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
                    centroid: [xs.sum::<usize>() as f64 / n, ys.sum::<usize>() as f64 / n],
                    pixels,
                });
            }
        }
    }
    out
}

fn synthetic_scene(rng: &mut ChaCha8Rng) -> Image {
    let colors: [Rgb; 6] = [[255, 0, 0], [0, 0, 255], [0, 160, 0], [250, 250, 0], [0, 0, 0], [128, 128, 128]];
    let (w, h) = (rng.gen_range(16..80), rng.gen_range(16..60));
    let mut img = Image::new(w, h, [255, 255, 255]);
    for _ in 0..rng.gen_range(0..14) {
        let c = colors[rng.gen_range(0..colors.len())];
        img.fill_rect(
            rng.gen_range(-4..w as i64),
            rng.gen_range(-4..h as i64),
            rng.gen_range(1..16),
            rng.gen_range(1..16),
            c,
        );
    }
    for _ in 0..rng.gen_range(0..30) {
        let c = colors[rng.gen_range(0..colors.len())];
        img.set(rng.gen_range(0..w), rng.gen_range(0..h), c);
    }
    img
}

#[test]
fn criterion_03_segmentation_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let palette = ColorPalette::default();
    let (mut mismatched, mut objects) = (0, 0);
    for _ in 0..200 {
        let img = synthetic_scene(&mut rng);
        let found = find_color_objects(&img).unwrap();
        let seg = segment_image(&img, &palette).unwrap();
        let expect = flood_fill_oracle(&img);
        objects += expect.len();
        let mut ok = found.len() == expect.len() && seg.objects == found;
        if ok {
            for (i, (f, e)) in found.iter().zip(&expect).enumerate() {
                let pixels: Vec<usize> = (0..img.pixels.len()).filter(|&p| seg.owner[p] == Some(i)).collect();
                let inside: HashSet<usize> = pixels.iter().copied().collect();
                let contour_ok = f.contour.iter().all(|&[x, y]| inside.contains(&(y * img.width + x)));
                ok &= f.color == e.color
                    && pixels == e.pixels
                    && f.area == e.pixels.len()
                    && f.bbox == e.bbox
                    && f.centroid == e.centroid
                    && contour_ok;
            }
        }
        if !ok {
            mismatched += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "segmentation oracle",
        mismatched == 0 && secs < 60.0,
        &format!("{mismatched}/200 scenes differ from the flood-fill oracle ({objects} objects), {secs:.1} s"),
    );
}

// ---- vlm fixtures ----

#[test]
fn criterion_04_candidate_selection_rows() {
    let b = Bundle::bundled();
    let scratch = tempfile::tempdir().unwrap();
    let mut table = String::new();
    for env in ENVIRONMENTS {
        let walk = run_walkthrough(
            &b.query(env, DEFAULT_QUERIES).unwrap(),
            &b.scene(env).unwrap(),
            &b.probes(env, scratch.path()).unwrap(),
            &Runner::python(),
            &mut b.replay(),
        )
        .unwrap();
        table.push_str(&walk.table_rows(env));
    }
    let expect = "cartpole,single,0,0,38\ncartpole,multi,0,0,100\n\
                  skiing,single,28,14,26\nskiing,multi,0,0,100\n\
                  boxing,single,20,46,14\n";
    let got: Vec<&str> = table.lines().filter(|l| !l.ends_with(",-,-,-")).collect();
    verdict(
        4,
        "candidate-selection statistics",
        got == expect.lines().collect::<Vec<_>>(),
        &got.join(" | "),
    );
}

#[test]
fn criterion_05_feature_proposal_voting() {
    let b = Bundle::bundled();
    let mut detail = Vec::new();
    let mut ok = true;
    for (env, count, coverage, features) in [("boxing", 24, 48.0, 7), ("skiing", 7, 14.0, 5)] {
        let out = propose_features(&b.query(env, DEFAULT_QUERIES).unwrap(), &b.scene(env).unwrap(), &mut b.replay())
            .unwrap();
        let top = out.report.clusters.iter().copied().max().unwrap_or(0);
        ok &= out.report.n == 50 && top == count && out.report.coverage == coverage && out.winner.phrases.len() == features;
        detail.push(format!(
            "{env} {top}/{} ({}%) with {} features",
            out.report.n,
            out.report.coverage,
            out.winner.phrases.len()
        ));
    }
    verdict(5, "feature-proposal voting", ok, &detail.join(", "));
}

// ---- surrogate ----

struct SurrogateRun {
    model: Surrogate,
    manifest: [usize; 3],
    mse: Vec<(String, f64)>,
    secs: f64,
}

fn surrogate_run() -> &'static SurrogateRun {
    static RUN: OnceLock<SurrogateRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let spec = FeatureSpec::cart_pole();
        let mut ex = ReferenceExtractor::new(&spec, ColorPalette::default()).unwrap();
        let ds = build_dataset(&DatasetConfig::new(10_000, 0), &spec, &mut ex, None).unwrap();
        let m = ds.manifest(0);
        let model = train_surrogate(&ds, &SurrogateHyper::default(), |_| {}).unwrap();
        let table = evaluate_surrogate(&model, &ds, Split::Test).unwrap();
        SurrogateRun {
            model,
            manifest: [m.train, m.val, m.test],
            mse: table.rows.iter().map(|r| (r.name.clone(), r.mse.unwrap_or(f64::NAN))).collect(),
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_06_surrogate_accuracy() {
    let run = surrogate_run();
    let ok = run.manifest == [7000, 2000, 1000] && run.mse.iter().all(|(_, e)| *e <= 0.02) && run.secs < 1800.0;
    let errs: Vec<String> = run.mse.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    verdict(
        6,
        "surrogate accuracy",
        ok,
        &format!(
            "split {:?}, test MSE {}, {:.0} s",
            run.manifest,
            errs.join(", "),
            run.secs
        ),
    );
}

fn random_frames(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = vistree::env::CartPole::new(seed, RenderConfig::default());
    let mut frames = Vec::with_capacity(n);
    while frames.len() < n {
        frames.push(env.render());
        if env.step(rng.gen_range(0..2)).unwrap().2 {
            env.reset_next();
        }
    }
    frames
}

#[test]
fn criterion_07_extraction_speedup() {
    let run = surrogate_run();
    let start = Instant::now();
    let spec = FeatureSpec::cart_pole();
    let reference = ReferenceExtractor::new(&spec, ColorPalette::default()).unwrap();
    let frames = random_frames(256, 77);
    let report = benchmark_extractors(&frames, &reference, &run.model, &[8, 16, 32, 64, 128], 10).unwrap();
    let at64 = report.row(64).unwrap().speedup;
    let all: Vec<String> = report.rows.iter().map(|r| format!("{}:{:.1}x", r.batch, r.speedup)).collect();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "extraction speedup",
        at64 >= 10.0 && secs < 300.0,
        &format!("{at64:.1}x at batch 64 (all: {}), {secs:.0} s", all.join(" ")),
    );
}

// ---- training ----

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_08_training_ordering() {
    let start = Instant::now();
    let spec = FeatureSpec::cart_pole();
    let source = FeatureSource::Surrogate {
        spec,
        model: Box::new(surrogate_run().model.clone()),
    };
    let render = RenderConfig::default();
    let seeds = [0u64, 1, 2, 3, 4];
    let (mut ict, mut mlp, mut init, mut random) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &seed in &seeds {
        let eval_seed = 5_000_000 + seed;
        let base = TrainConfig {
            seed,
            extractor: ExtractorChoice::Surrogate,
            ..TrainConfig::default()
        };
        let run = |policy: PolicyKind, steps: usize| -> f64 {
            let cfg = TrainConfig {
                policy,
                total_steps: steps,
                ..base.clone()
            };
            let out = train(&cfg, &source, None, |_| {}).unwrap();
            let best = if steps == 0 { out.final_policy } else { out.best };
            evaluate_policy(&best, &source, render, cfg.frame_lag, 100, eval_seed).unwrap().mean
        };
        ict.push(run(PolicyKind::Ict, base.total_steps));
        mlp.push(run(PolicyKind::Mlp, base.total_steps));
        init.push(run(PolicyKind::Ict, 0));
        random.push(
            evaluate_policy(&Policy::Random { actions: 2 }, &source, render, 1, 100, eval_seed)
                .unwrap()
                .mean,
        );
    }
    let gt_cfg = TrainConfig::default();
    let gt = train(&gt_cfg, &FeatureSource::GroundTruth, None, |_| {}).unwrap();
    let reached = gt
        .curve
        .iter()
        .find(|p| p.mean_return >= 150.0)
        .map(|p| p.step.to_string())
        .unwrap_or_else(|| "never".into());

    let (ict_m, mlp_m, init_m, rand_m) = (mean(&ict), mean(&mlp), mean(&init), mean(&random));
    let secs = start.elapsed().as_secs_f64();
    let ok = ict_m > 4.0 * rand_m && gt.best_return >= 150.0 && secs < 7200.0;
    verdict(
        8,
        "training ordering",
        ok,
        &format!(
            "5 seeds on surrogate features: trained tree {ict_m:.1}, trained MLP {mlp_m:.1} (tree {} MLP), \
             random-init tree {init_m:.1}, random {rand_m:.1}; ground-truth tree best {:.1}, >= 150 at step {reached}; {secs:.0} s",
            if ict_m >= mlp_m { ">=" } else { "<" },
            gt.best_return
        ),
    );
}

#[test]
fn criterion_09_straight_through_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut pairs, mut mismatches) = (0usize, 0usize);
    for case in 0..1000 {
        let space = if case % 2 == 0 {
            ActionSpace::Discrete(2)
        } else {
            ActionSpace::Continuous(2)
        };
        let tree = random_tree(&mut rng, 1 + case % 3, 3, space);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise = tree.sample_noise(&mut rng);
        let action = match space {
            ActionSpace::Discrete(m) => Action::Discrete(rng.gen_range(0..m)),
            ActionSpace::Continuous(m) => Action::Continuous((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let mut tape = Tape::new();
        let pv = tape.row(&tree.params());
        let bound = tree.bind(&mut tape, pv);
        let rec: RecordedPolicy = bound.record(&tree, &mut tape, &x, Relaxation::StraightThrough, Some(&noise));
        let out = rec.log_prob(&mut tape, &action);
        let full = backward(&tape, out).unwrap();
        for i in 0..tape.len() {
            let node = Var::from_index(i);
            let Op::StraightThrough(soft) = *tape.op(node) else { continue };
            pairs += 1;
            // the adjoint that reaches the hard node is handed to its surrogate unchanged
            let same_adjoint = full.get(node).iter().map(|v| v.to_bits()).eq(full.get(soft).iter().map(|v| v.to_bits()));
            let seed: Vec<f64> = (0..tape.value(node).len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let via_hard = backward_from(&tape, node, &seed).unwrap();
            let via_soft = backward_from(&tape, soft, &seed).unwrap();
            let same_params = via_hard.get(pv).iter().map(|v| v.to_bits()).eq(via_soft.get(pv).iter().map(|v| v.to_bits()));
            if !(same_adjoint && same_params) {
                mismatches += 1;
            }
        }
    }
    verdict(
        9,
        "straight-through contract",
        pairs > 0 && mismatches == 0,
        &format!("1000 cases, {pairs} hard nodes, {mismatches} not bitwise equal to their soft surrogate"),
    );
}

// ---- end to end ----

fn vistree(out: &Path, args: &[&str]) -> (bool, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_vistree"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    (
        o.status.success(),
        format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr)),
    )
}

/// Minimal checker for the DOT subset: `digraph ID { stmt; ... }` with node,
/// edge and default-attribute statements. Returns node labels by id.
fn parse_dot(text: &str) -> Result<(HashMap<String, String>, Vec<(String, String)>), String> {
    let body = text
        .trim()
        .strip_prefix("digraph")
        .ok_or("missing digraph keyword")?
        .trim_start();
    let open = body.find('{').ok_or("missing {")?;
    let name = body[..open].trim();
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(format!("bad graph id {name:?}"));
    }
    let inner = body[open + 1..].strip_suffix('}').ok_or("missing closing }")?;
    // split on ';' outside quotes
    let mut stmts = Vec::new();
    let (mut cur, mut quoted, mut escaped) = (String::new(), false, false);
    for c in inner.chars() {
        match c {
            _ if escaped => escaped = false,
            '\\' if quoted => escaped = true,
            '"' => quoted = !quoted,
            ';' if !quoted => {
                stmts.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if quoted {
        return Err("unterminated string".into());
    }
    if !cur.trim().is_empty() {
        return Err(format!("trailing text {:?}", cur.trim()));
    }
    let attrs = |s: &str| -> Result<HashMap<String, String>, String> {
        let s = s.trim();
        let s = s.strip_prefix('[').and_then(|s| s.strip_suffix(']')).ok_or(format!("bad attr list {s:?}"))?;
        let mut map = HashMap::new();
        let mut rest = s.trim();
        while !rest.is_empty() {
            let eq = rest.find('=').ok_or(format!("attr without = in {rest:?}"))?;
            let key = rest[..eq].trim().to_string();
            rest = rest[eq + 1..].trim_start();
            let value;
            if let Some(r) = rest.strip_prefix('"') {
                let mut end = None;
                let mut esc = false;
                for (i, c) in r.char_indices() {
                    match c {
                        _ if esc => esc = false,
                        '\\' => esc = true,
                        '"' => {
                            end = Some(i);
                            break;
                        }
                        _ => {}
                    }
                }
                let end = end.ok_or("unterminated attr string")?;
                value = r[..end].to_string();
                rest = r[end + 1..].trim_start();
            } else {
                let end = rest.find(',').unwrap_or(rest.len());
                value = rest[..end].trim().to_string();
                rest = &rest[end..];
            }
            map.insert(key, value);
            rest = rest.trim_start().trim_start_matches(',').trim_start();
        }
        Ok(map)
    };
    let is_id = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    let (mut nodes, mut edges) = (HashMap::new(), Vec::new());
    for s in stmts.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let (head, attr) = match s.find('[') {
            Some(i) => (s[..i].trim(), Some(attrs(&s[i..])?)),
            None => (s, None),
        };
        if let Some((a, b)) = head.split_once("->") {
            let (a, b) = (a.trim(), b.trim());
            if !is_id(a) || !is_id(b) {
                return Err(format!("bad edge {head:?}"));
            }
            edges.push((a.to_string(), b.to_string()));
        } else if matches!(head, "node" | "edge" | "graph") {
            attr.ok_or("default statement without attributes")?;
        } else if is_id(head) {
            let label = attr.and_then(|a| a.get("label").cloned()).unwrap_or_default();
            nodes.insert(head.to_string(), label);
        } else {
            return Err(format!("unrecognized statement {s:?}"));
        }
    }
    for (a, b) in &edges {
        if !nodes.contains_key(a) || !nodes.contains_key(b) {
            return Err(format!("edge {a} -> {b} references an undeclared node"));
        }
    }
    Ok((nodes, edges))
}

#[test]
fn criterion_10_offline_walkthrough() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let steps: [&[&str]; 11] = [
        &["vlm", "propose"],
        &["vlm", "judge"],
        &["vlm", "codegen", "--stage", "single"],
        &["vlm", "select", "--stage", "single"],
        &["vlm", "codegen", "--stage", "multi"],
        &["vlm", "select", "--stage", "multi"],
        &["dataset", "build", "--n", "300", "--labeler", "program"],
        &["surrogate", "train"],
        &["train", "--extractor", "surrogate", "--steps", "4096"],
        &["export-tree"],
        &["eval", "--extractor", "surrogate", "--episodes", "5"],
    ];
    let mut failed = None;
    for args in steps {
        let (ok, log) = vistree(out, args);
        if !ok {
            failed = Some(format!("`vistree {}` failed: {log}", args.join(" ")));
            break;
        }
    }
    let mut ok = failed.is_none();
    let detail;
    if let Some(f) = failed {
        detail = f;
    } else {
        let spec: FeatureSpec = FeatureSpec::load(&out.join("feature_spec.json")).unwrap();
        let names = spec.names();
        let dot = std::fs::read_to_string(out.join("tree.dot")).unwrap();
        match parse_dot(&dot) {
            Err(e) => {
                ok = false;
                detail = format!("invalid DOT: {e}");
            }
            Ok((nodes, edges)) => {
                let decisions: Vec<&String> = nodes.values().filter(|l| !l.starts_with("leaf")).collect();
                let single_feature = |label: &str| -> bool {
                    let Some((lhs, rhs)) = label.split_once(" > ") else { return false };
                    let Some((w, feat)) = lhs.split_once('·') else { return false };
                    w.parse::<f64>().is_ok()
                        && rhs.parse::<f64>().is_ok()
                        && names.iter().filter(|n| n.as_str() == feat).count() == 1
                };
                let bad = decisions.iter().filter(|l| !single_feature(l)).count();
                ok = decisions.len() == 7 && nodes.len() == 15 && edges.len() == 14 && bad == 0;
                detail = format!(
                    "{} decision nodes, {} edges, {bad} predicates not naming exactly one of {:?}",
                    decisions.len(),
                    edges.len(),
                    names
                );
            }
        }
    }
    verdict(
        10,
        "offline walkthrough",
        ok,
        &format!("{detail}; {:.0} s", start.elapsed().as_secs_f64()),
    );
}
