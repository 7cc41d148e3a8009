//! Rebuilds the bundled VLM fixture corpus: scenes, probe frames, scripted
//! answer banks recorded as replay files, and golden outputs of the
//! selected programs.
//!
//! cargo run -p vistree --example make_fixtures

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistree::env::{CartPole, RenderConfig};
use vistree::segment::{Image, Rgb};
use vistree::vlm::bundle::{Bundle, DEFAULT_QUERIES};
use vistree::vlm::{run_walkthrough, ProbeFrame, ProbeSet, RecordingTransport, Runner, ScriptedTransport};

const W: usize = 160;
const H: usize = 120;

fn skiing_frames(seed: u64, n: usize) -> Vec<Image> {
    const SNOW: Rgb = [255, 255, 255];
    const SKIER: Rgb = [220, 20, 20];
    const POLE: Rgb = [30, 40, 220];
    const TREE: Rgb = [20, 110, 20];
    const SCORE: Rgb = [50, 50, 50];
    const SKIER_Y: i64 = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut v) = (80.0f64, 0.0f64);
    let mut gates: Vec<(f64, f64)> = vec![(rng.gen_range(40.0..120.0), 60.0), (rng.gen_range(40.0..120.0), 135.0)];
    let mut trees: Vec<(f64, f64)> = [45.0, 95.0, 140.0]
        .iter()
        .map(|&y| (rng.gen_range(15.0..145.0), y))
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img = Image::new(W, H, SNOW);
        img.fill_rect(4, 4, 6, 8, SCORE);
        img.fill_rect(12, 4, 6, 8, SCORE);
        for &(tx, ty) in &trees {
            img.fill_rect(tx as i64 - 4, ty as i64 - 6, 8, 12, TREE);
        }
        for &(cx, gy) in &gates {
            img.fill_rect(cx as i64 - 15, gy as i64 - 4, 2, 8, POLE);
            img.fill_rect(cx as i64 + 13, gy as i64 - 4, 2, 8, POLE);
        }
        img.fill_rect(x.round() as i64 - 3, SKIER_Y - 5, 6, 10, SKIER);
        out.push(img);

        v = (v + rng.gen_range(-0.6..0.6)).clamp(-3.0, 3.0);
        x += v;
        if !(12.0..=148.0).contains(&x) {
            x = x.clamp(12.0, 148.0);
            v = -v;
        }
        for g in &mut gates {
            g.1 -= 3.0;
            if g.1 < -10.0 {
                *g = (rng.gen_range(40.0..120.0), g.1 + 150.0);
            }
        }
        for t in &mut trees {
            t.1 -= 3.0;
            if t.1 < -10.0 {
                *t = (rng.gen_range(15.0..145.0), t.1 + 150.0);
            }
        }
    }
    out
}

fn boxing_frames(seed: u64, n: usize) -> Vec<Image> {
    const CANVAS: Rgb = [60, 130, 60];
    const ROPE: Rgb = [200, 200, 200];
    const AGENT: Rgb = [240, 240, 240];
    const OPPONENT: Rgb = [20, 20, 20];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut img = Image::new(W, H, CANVAS);
            img.fill_rect(20, 24, 120, 2, ROPE);
            img.fill_rect(20, 114, 120, 2, ROPE);
            img.fill_rect(20, 24, 2, 92, ROPE);
            img.fill_rect(138, 24, 2, 92, ROPE);
            for (x, c) in [(30, AGENT), (38, AGENT), (116, OPPONENT), (124, OPPONENT)] {
                img.fill_rect(x, 4, 6, 8, c);
            }
            let (ax, ay) = (rng.gen_range(26..=60), rng.gen_range(30..=92));
            let (ox, oy) = (rng.gen_range(90..=124), rng.gen_range(30..=92));
            img.fill_rect(ax, ay, 10, 16, AGENT);
            img.fill_rect(ox, oy, 10, 16, OPPONENT);
            if rng.gen_bool(0.3) {
                img.fill_rect(ax + 12, ay + 6, 4, 3, AGENT);
            } else {
                img.fill_rect(ax + 10, ay + 6, 3, 3, AGENT);
            }
            if rng.gen_bool(0.3) {
                img.fill_rect(ox - 6, oy + 6, 4, 3, OPPONENT);
            } else {
                img.fill_rect(ox - 3, oy + 6, 3, 3, OPPONENT);
            }
            img
        })
        .collect()
}

fn save_probes(dir: &Path, frames: Vec<Image>, pairs: Vec<[usize; 2]>, seed: u64) {
    let _ = std::fs::remove_dir_all(dir);
    let frames = frames
        .into_iter()
        .enumerate()
        .map(|(i, img)| ProbeFrame::new(dir.join(format!("probe_{i:04}.png")), img).unwrap())
        .collect();
    ProbeSet {
        seed: Some(seed),
        frames,
        pairs,
    }
    .save(dir)
    .unwrap();
}

fn listing(phrases: &[&str], style: usize) -> String {
    let lines: Vec<String> = phrases
        .iter()
        .enumerate()
        .map(|(i, p)| match style % 5 {
            0 => format!("State element {}: {p}", i + 1),
            1 => format!("state element {}: {}.", i + 1, p.to_lowercase()),
            2 => format!("State Element {}:  {p}", i + 1),
            3 => format!("- State element {}: {p}", i + 1),
            _ => format!("State element {}: {p};", i + 1),
        })
        .collect();
    let body = lines.join("\n");
    if style % 7 == 2 {
        format!("Here are the features.\n\n{body}\n")
    } else {
        body
    }
}

fn repeat(phrases: &[&str], n: usize, bank: &mut Vec<String>) {
    for k in 0..n {
        bank.push(listing(phrases, bank.len() + k));
    }
}

fn proposals(env: &str) -> Vec<String> {
    let mut bank = Vec::new();
    match env {
        "cartpole" => repeat(
            &["Cart position", "Cart velocity", "Pole angle", "Pole angular velocity"],
            50,
            &mut bank,
        ),
        "skiing" => {
            let w = [
                "Position of the skier (x and y)",
                "Position of the next gate (x and y)",
                "Distance to the next gate",
                "Position of the trees below the skier (x and y)",
                "Horizontal speed of the skier",
            ];
            repeat(&w, 7, &mut bank);
            repeat(&[w[0], w[1], w[2], w[4]], 5, &mut bank);
            let mut dir = w.to_vec();
            dir.push("Direction the skier is facing");
            repeat(&dir, 4, &mut bank);
            let mut others: Vec<Vec<&str>> = Vec::new();
            for drop in [0, 1, 2, 4] {
                others.push(w.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, p)| *p).collect());
            }
            for extra in [
                "Skier angle",
                "Number of gates passed",
                "Elapsed time",
                "Position of the flags (x and y)",
                "Slope of the course",
                "Distance to the nearest tree",
                "Whether the skier has fallen",
            ] {
                let mut v = w.to_vec();
                v.push(extra);
                others.push(v);
            }
            others.push(vec![w[1], w[0], w[2], w[3], w[4]]);
            others.push(vec![w[4], w[0], w[1], w[2], w[3]]);
            for (slot, alt) in [
                (4, "Skier velocity (horizontal)"),
                (2, "Distance to the closest gate"),
                (0, "Location of the skier (x and y)"),
                (3, "Position of the nearest tree (x and y)"),
            ] {
                let mut v = w.to_vec();
                v[slot] = alt;
                others.push(v);
            }
            for o in &others {
                repeat(o, 2, &mut bank);
            }
        }
        "boxing" => {
            let w = [
                "Position of the agent",
                "Position of the opponent",
                "Distance between the agent and the opponent",
                "Agent's fist position (extended or not)",
                "Opponent's fist position (extended or not)",
                "Agent's position relative to the ring boundaries",
                "Opponent's position relative to the ring boundaries",
            ];
            repeat(&w, 24, &mut bank);
            repeat(&w[..5], 11, &mut bank);
            let mut tweak = w.to_vec();
            tweak[5] = "Agent's position relative to ring boundaries";
            tweak[6] = "Opponent's position relative to ring boundaries";
            repeat(&tweak, 8, &mut bank);
            let no_dist: Vec<&str> = w.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, p)| *p).collect();
            repeat(&no_dist, 4, &mut bank);
            let mut timed = w.to_vec();
            timed.push("Remaining round time");
            repeat(&timed, 2, &mut bank);
            repeat(&[w[1], w[0], w[2], w[4], w[3], w[6], w[5]], 1, &mut bank);
        }
        _ => unreachable!(),
    }
    bank
}

fn judgments(env: &str) -> Vec<String> {
    let spec: &[(&str, usize)] = match env {
        "cartpole" => &[("2, 4", 40), ("Features 2 and 4.", 6), ("2", 3), ("2, 3, 4", 1)],
        "skiing" => &[("8", 44), ("8, 5", 4), ("none", 2)],
        _ => &[("None", 30), ("None.", 12), ("none of them", 8)],
    };
    spec.iter().flat_map(|(a, n)| std::iter::repeat(a.to_string()).take(*n)).collect()
}

fn code_bank(root: &Path, env: &str, stage: &str, counts: &[(&str, usize)]) -> Vec<String> {
    let mut bank = Vec::new();
    for (file, n) in counts {
        let path = root.join("candidates").join(env).join(stage).join(format!("{file}.py"));
        let src = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        for k in 0..*n {
            bank.push(if k % 3 == 1 {
                format!("Here is the extractor.\n\n```python\n{src}```\n")
            } else {
                format!("```python\n{src}```")
            });
        }
    }
    bank
}

fn single_counts(env: &str) -> Vec<(&'static str, usize)> {
    match env {
        "cartpole" => vec![("centroid", 19), ("bbox_center", 12), ("pixel_span", 10), ("degrees", 9)],
        "skiing" => vec![
            ("nearest_below", 13),
            ("bbox_centers", 9),
            ("nearest_any", 7),
            ("orange_skier", 7),
            ("missing_module", 5),
            ("wrong_key", 4),
            ("syntax_error", 3),
            ("repr_output", 2),
        ],
        _ => vec![
            ("ring_relative", 7),
            ("bbox_positions", 6),
            ("image_relative", 4),
            ("arcade_colours", 12),
            ("top_band", 11),
            ("missing_module", 6),
            ("syntax_error", 4),
        ],
    }
}

fn multi_counts(env: &str) -> Vec<(&'static str, usize)> {
    match env {
        "cartpole" => vec![("difference", 50)],
        "skiing" => vec![("speed", 50)],
        _ => vec![],
    }
}

fn shuffled(mut bank: Vec<String>, seed: u64) -> Vec<String> {
    assert_eq!(bank.len(), DEFAULT_QUERIES);
    bank.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    bank
}

fn main() {
    let bundle = Bundle::bundled();
    let root = bundle.root.clone();
    for sub in ["scenes", "probes", "replay", "golden"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    let _ = std::fs::remove_dir_all(bundle.replay_dir());

    let cart = CartPole::new(3, RenderConfig::default());
    cart.render().save(&bundle.scene_path("cartpole")).unwrap();
    let ski = skiing_frames(11, 102);
    ski[0].save(&bundle.scene_path("skiing")).unwrap();
    save_probes(
        &bundle.probe_dir("skiing"),
        ski[1..].to_vec(),
        (0..100).map(|i| [i, i + 1]).collect(),
        11,
    );
    let boxing = boxing_frames(13, 101);
    boxing[0].save(&bundle.scene_path("boxing")).unwrap();
    save_probes(&bundle.probe_dir("boxing"), boxing[1..].to_vec(), Vec::new(), 13);

    let scratch = tempfile_dir();
    for (k, env) in vistree::vlm::bundle::ENVIRONMENTS.iter().enumerate() {
        let seed = 100 + k as u64;
        let mut answers = shuffled(proposals(env), seed);
        answers.extend(shuffled(judgments(env), seed + 10));
        answers.extend(shuffled(code_bank(&root, env, "single", &single_counts(env)), seed + 20));
        let multi = multi_counts(env);
        if !multi.is_empty() {
            answers.extend(shuffled(code_bank(&root, env, "multi", &multi), seed + 30));
        }
        let mut transport = RecordingTransport::new(ScriptedTransport::new(answers), bundle.replay_dir()).unwrap();
        let q = bundle.query(env, DEFAULT_QUERIES).unwrap();
        let scene = bundle.scene(env).unwrap();
        let probes = bundle.probes(env, &scratch).unwrap();
        let walk = run_walkthrough(&q, &scene, &probes, &Runner::python(), &mut transport).unwrap();
        assert!(transport.inner.answers.is_empty(), "{env}: unused scripted answers");
        println!("{env}: recorded {} answers", transport.recorded);
        println!("  proposal {}", walk.proposal.report);
        println!("  spec {:?}", walk.judge.spec.names());
        println!("  multi-frame {:?}", walk.judge.multi);
        for f in &walk.judge.spec.features {
            if let Some(b) = &f.base {
                println!("  {} <- {}", f.name, b);
            }
        }
        println!("  single {}", walk.single.report);
        if let Some(m) = &walk.multi {
            println!("  multi {}", m.report);
        }
        print!("{}", walk.table_rows(env));
        let golden = root.join("golden").join(format!("{env}_single.json"));
        let outputs = walk.single.program().outputs.clone().unwrap();
        std::fs::write(&golden, serde_json::to_string(&outputs).unwrap() + "\n").unwrap();
    }
    let _ = std::fs::remove_dir_all(&scratch);
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("vistree-fixtures-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
