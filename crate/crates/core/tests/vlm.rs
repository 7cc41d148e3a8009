use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;

use proptest::prelude::*;
use vistree::segment::Image;
use vistree::vlm::bundle::{Bundle, DEFAULT_QUERIES, PROBE_COUNT};
use vistree::vlm::pipeline::parse_judgment;
use vistree::vlm::prompt;
use vistree::vlm::{
    canonical, generate_candidates, judge_multiframe, propose_features, request_hash, run_candidate,
    run_walkthrough, select_candidate, CandidateProgram, CandidateStatus, LiveTransport, ProbeFrame, ProbeSet,
    QueryConfig, ReplayTransport, Runner, ScriptedTransport, Stage, Transport, VlmError, VoteReport,
};

fn shell_runner(dir: &Path) -> Runner {
    Runner {
        command: vec!["sh".into(), "{program}".into()],
        extension: "sh".into(),
        timeout_s: 10.0,
        work_dir: Some(dir.to_path_buf()),
    }
}

fn probes(dir: &Path, n: usize) -> ProbeSet {
    let frames = (0..n)
        .map(|i| {
            let mut img = Image::new(8, 8, [255, 255, 255]);
            img.fill_rect(i as i64 % 6, 2, 2, 2, [0, 0, 0]);
            ProbeFrame::new(dir.join(format!("p{i}.png")), img).unwrap()
        })
        .collect();
    ProbeSet {
        seed: Some(5),
        frames,
        pairs: (0..n.saturating_sub(1)).map(|i| [i, i + 1]).collect(),
    }
}

fn q(n: usize) -> QueryConfig {
    QueryConfig {
        model: "m".into(),
        domain: "a test task".into(),
        n,
    }
}

fn candidate(id: usize, source: &str, runner: &Runner) -> CandidateProgram {
    CandidateProgram::new(id, Stage::Single, source.to_string(), vec!["a".into()], runner.clone())
}

#[test]
fn replay_miss_names_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let req = prompt::step1("d", Image::new(2, 2, [0, 0, 0]), "m", 0);
    let err = ReplayTransport::new(dir.path()).send(&req).unwrap_err();
    match err {
        VlmError::FixtureMiss { hash } => assert_eq!(hash, request_hash(&req)),
        other => panic!("expected fixture miss, got {other}"),
    }
}

#[test]
fn replay_serves_recorded_answer() {
    let dir = tempfile::tempdir().unwrap();
    let req = prompt::step1("d", Image::new(2, 2, [0, 0, 0]), "m", 3);
    std::fs::write(dir.path().join(format!("{}.txt", request_hash(&req))), "State element 1: x").unwrap();
    assert_eq!(ReplayTransport::new(dir.path()).send(&req).unwrap(), "State element 1: x");
}

#[test]
fn hash_separates_samples_and_images() {
    let img = Image::new(2, 2, [0, 0, 0]);
    let a = request_hash(&prompt::step1("d", img.clone(), "m", 0));
    assert_eq!(a, request_hash(&prompt::step1("d", img.clone(), "m", 0)));
    assert_ne!(a, request_hash(&prompt::step1("d", img.clone(), "m", 1)));
    assert_ne!(a, request_hash(&prompt::step1("d", img.clone(), "other", 0)));
    let mut other = img;
    other.set(1, 1, [1, 0, 0]);
    assert_ne!(a, request_hash(&prompt::step1("d", other, "m", 0)));
}

#[test]
fn single_query_proposal_has_full_coverage() {
    let mut t = ScriptedTransport::new(["State element 1: Cart position".to_string()]);
    let out = propose_features(&q(1), &Image::new(4, 4, [0, 0, 0]), &mut t).unwrap();
    assert_eq!(out.report.coverage, 100.0);
    assert_eq!(out.spec.names(), vec!["cart_position"]);
}

#[test]
fn proposal_counts_transport_failures() {
    let mut t = ScriptedTransport::new(["State element 1: Speed".to_string()]);
    t.push_failure("reset");
    t.answers.push_back(Ok("State element 1: speed.".into()));
    let out = propose_features(&q(3), &Image::new(4, 4, [0, 0, 0]), &mut t).unwrap();
    assert_eq!(out.report.failures, 1);
    assert_eq!(out.report.clusters, vec![2]);

    let mut dead = ScriptedTransport::default();
    dead.push_failure("down");
    let err = propose_features(&q(1), &Image::new(4, 4, [0, 0, 0]), &mut dead).unwrap_err();
    assert!(matches!(err, VlmError::Unavailable(_)));
}

#[test]
fn unparseable_winner_keeps_raw_text() {
    let mut t = ScriptedTransport::new(vec!["I cannot see the image.".to_string(); 2]);
    let err = propose_features(&q(2), &Image::new(4, 4, [0, 0, 0]), &mut t).unwrap_err();
    match err {
        VlmError::Parse { raw, .. } => assert_eq!(raw, "I cannot see the image."),
        other => panic!("{other}"),
    }
}

#[test]
fn empty_spec_judged_without_queries() {
    let spec = vistree::features::FeatureSpec { features: vec![] };
    let mut t = ScriptedTransport::default();
    let out = judge_multiframe(&q(50), &spec, &mut t).unwrap();
    assert!(out.multi.is_empty());
    assert!(out.report.is_none());
}

#[test]
fn multi_stage_without_multi_features_sends_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _) = vistree::vlm::phrases_to_spec(&["Cart position".into()]).unwrap();
    let mut t = ScriptedTransport::default();
    let g = generate_candidates(
        &q(50),
        &spec,
        &probes(dir.path(), 2).frames,
        Stage::Multi,
        None,
        &shell_runner(dir.path()),
        &mut t,
    )
    .unwrap();
    assert!(g.candidates.is_empty());
}

#[test]
fn identical_answers_give_identical_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _) = vistree::vlm::phrases_to_spec(&["Cart position".into()]).unwrap();
    let answer = "```python\nprint(1)\n```".to_string();
    let mut t = ScriptedTransport::new(vec![answer; 50]);
    let g = generate_candidates(
        &q(50),
        &spec,
        &probes(dir.path(), 2).frames,
        Stage::Single,
        None,
        &Runner::python(),
        &mut t,
    )
    .unwrap();
    assert_eq!(g.candidates.len(), 50);
    assert!(g.candidates.iter().all(|c| c.source == "print(1)\n" && c.status == CandidateStatus::Untested));
}

#[test]
fn runner_protocol_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let runner = shell_runner(dir.path());
    let frame = &probes(dir.path(), 1).frames[0];
    let run = |src: &str| run_candidate(&candidate(0, src, &runner), frame).unwrap();

    assert_eq!(run("cat >/dev/null; echo '{\"features\": {\"a\": 0.25}}'").unwrap(), vec![Some(0.25)]);
    assert_eq!(run("echo '{\"features\": {\"a\": null}}'").unwrap(), vec![None]);
    let f = run("echo boom >&2; exit 3").unwrap_err();
    assert!(f.reason.contains("exit status"), "{f}");
    assert!(f.stderr.contains("boom"));
    assert!(run("echo '{\"features\": {}}'").unwrap_err().reason.contains("missing a"));
    assert!(run("echo 'not json'").unwrap_err().reason.contains("malformed"));
    assert!(run("echo '{\"features\": {\"a\": \"x\"}}'").unwrap_err().reason.contains("malformed"));

    let slow = Runner {
        timeout_s: 0.3,
        ..runner.clone()
    };
    let f = run_candidate(&candidate(0, "sleep 5", &slow), frame).unwrap().unwrap_err();
    assert!(f.reason.contains("timed out"), "{f}");
}

#[test]
fn runner_receives_wire_payload() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::python();
    let frame = &probes(dir.path(), 1).frames[0];
    let src = "import json, sys\nf = json.load(sys.stdin)\n\
o = f['objects'][0]\n\
print(json.dumps({'features': {'a': f['image_width'] * 100 + o['area'] + len(o['color_label'])}}))\n";
    let out = run_candidate(&candidate(0, src, &runner), frame).unwrap().unwrap();
    assert_eq!(out, vec![Some(800.0 + 4.0 + 5.0)]);
}

#[test]
fn selection_filters_and_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let runner = shell_runner(dir.path());
    let set = probes(dir.path(), 4);
    // Output depends on the first object's bbox x, which varies across probes.
    let varying = "x=$(tr -d ' \\n' | sed 's/.*\"bbox\":\\[\\([0-9]*\\).*/\\1/'); echo \"{\\\"features\\\": {\\\"a\\\": $x}}\"";
    let varying_twice = "x=$(tr -d ' \\n' | sed 's/.*\"bbox\":\\[\\([0-9]*\\).*/\\1/'); echo \"{\\\"features\\\": {\\\"a\\\": $((x * 2))}}\"";
    let constant = "echo '{\"features\": {\"a\": 1}}'";
    let broken = "exit 1";
    let mut cands = vec![
        candidate(0, broken, &runner),
        candidate(1, varying_twice, &runner),
        candidate(2, constant, &runner),
        candidate(3, varying, &runner),
        candidate(4, varying, &runner),
    ];
    let (winner, report) = select_candidate(&mut cands, &set, 4, None).unwrap();
    assert_eq!(winner, 3);
    assert_eq!(report.clusters, vec![1, 2]);
    assert_eq!(report.row(), "20,20,40");
    assert_eq!(report.probe_seed, Some(5));
    let status: Vec<_> = cands.iter().map(|c| c.status).collect();
    assert_eq!(
        status,
        vec![
            CandidateStatus::Failed,
            CandidateStatus::Clustered,
            CandidateStatus::Constant,
            CandidateStatus::Clustered,
            CandidateStatus::Clustered
        ]
    );
    assert_eq!(cands[3].outputs.as_ref().unwrap().len(), 4);

    let mut again: Vec<_> = cands
        .iter()
        .map(|c| candidate(c.id, &c.source, &runner))
        .collect();
    assert_eq!(select_candidate(&mut again, &set, 4, None).unwrap(), (winner, report));
}

#[test]
fn selection_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let runner = shell_runner(dir.path());
    let set = probes(dir.path(), 2);
    assert!(select_candidate(&mut [], &set, 2, None).is_err());
    let mut c = vec![candidate(0, "exit 0", &runner)];
    assert!(select_candidate(&mut c, &set, 3, None).is_err());
    let mut c = vec![candidate(0, "exit 1", &runner)];
    match select_candidate(&mut c, &set, 2, None).unwrap_err() {
        VlmError::NoWinner { report } => assert_eq!(report.row(), "100,0,0"),
        other => panic!("{other}"),
    }
    let mut m = vec![CandidateProgram::new(0, Stage::Multi, "exit 0".into(), vec!["a".into()], runner)];
    assert!(select_candidate(&mut m, &set, 1, None).is_err());
}

#[test]
fn status_only_leaves_untested() {
    let mut c = candidate(0, "", &Runner::python());
    c.advance(CandidateStatus::Constant).unwrap();
    assert!(c.advance(CandidateStatus::Clustered).is_err());
    assert!(c.advance(CandidateStatus::Untested).is_err());
}

fn bundled_proposal(env: &str) -> vistree::vlm::ProposalOutcome {
    let b = Bundle::bundled();
    propose_features(&b.query(env, DEFAULT_QUERIES).unwrap(), &b.scene(env).unwrap(), &mut b.replay()).unwrap()
}

#[test]
fn bundled_proposals_and_judgments() {
    let b = Bundle::bundled();
    let boxing = bundled_proposal("boxing");
    assert_eq!(boxing.report.clusters.iter().max(), Some(&24));
    assert_eq!(boxing.report.coverage, 48.0);
    assert_eq!(boxing.spec.len(), 7);
    let judged = judge_multiframe(&b.query("boxing", DEFAULT_QUERIES).unwrap(), &boxing.spec, &mut b.replay()).unwrap();
    assert!(judged.multi.is_empty());

    let skiing = bundled_proposal("skiing");
    assert_eq!(skiing.report.coverage, 14.0);
    assert_eq!(skiing.winner.phrases.len(), 5);

    let cart = bundled_proposal("cartpole");
    let judged = judge_multiframe(&b.query("cartpole", DEFAULT_QUERIES).unwrap(), &cart.spec, &mut b.replay()).unwrap();
    assert_eq!(judged.multi, vec!["cart_velocity", "pole_angular_velocity"]);
    assert_eq!(judged.spec.features[1].base.as_deref(), Some("cart_position"));
    assert_eq!(judged.spec.features[3].base.as_deref(), Some("pole_angle"));
}

#[test]
fn bundled_replay_misses_on_other_model() {
    let b = Bundle::bundled();
    let mut cfg = b.query("boxing", 1).unwrap();
    cfg.model = "another".into();
    let err = propose_features(&cfg, &b.scene("boxing").unwrap(), &mut b.replay()).unwrap_err();
    assert!(matches!(err, VlmError::FixtureMiss { .. }));
}

#[test]
fn cartpole_walkthrough_matches_golden_outputs() {
    let b = Bundle::bundled();
    let scratch = tempfile::tempdir().unwrap();
    let probes = b.probes("cartpole", scratch.path()).unwrap();
    assert_eq!(probes.frames.len(), PROBE_COUNT.max(probes.frames.len()));
    let walk = run_walkthrough(
        &b.query("cartpole", DEFAULT_QUERIES).unwrap(),
        &b.scene("cartpole").unwrap(),
        &probes,
        &Runner::python(),
        &mut b.replay(),
    )
    .unwrap();
    assert_eq!(walk.single.report.row(), "0,0,38");
    assert_eq!(walk.multi.as_ref().unwrap().report.row(), "0,0,100");
    let golden: Vec<Vec<Option<f64>>> =
        serde_json::from_str(&std::fs::read_to_string(b.root.join("golden/cartpole_single.json")).unwrap()).unwrap();
    let got = walk.single.program().outputs.clone().unwrap();
    assert_eq!(got.len(), PROBE_COUNT);
    for (g, w) in got.iter().zip(&golden) {
        let bits = |r: &Vec<Option<f64>>| r.iter().map(|v| v.map(f64::to_bits)).collect::<Vec<_>>();
        assert_eq!(bits(g), bits(w));
    }

    // The composed extractor recovers the direction of motion.
    let ex = walk.extractor().unwrap();
    let [i, j] = probes.pairs[0];
    let v = ex.extract(&probes.frames[i], &probes.frames[j]).unwrap();
    assert_eq!(v.len(), 4);
    let pos = |k: usize| ex.single.outputs.as_ref().unwrap()[k][0].unwrap();
    assert_eq!(v[1], Some(pos(j) - pos(i)));
}

/// Serves one canned HTTP response and hands back the raw request.
fn stub_server(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream);
        let mut head = String::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            head.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        reader.get_mut().write_all(response.as_bytes()).unwrap();
        head + &String::from_utf8(body).unwrap()
    });
    (url, handle)
}

fn live(url: &str, var: &str) -> LiveTransport {
    LiveTransport {
        credential_env: var.into(),
        ..LiveTransport::new(url)
    }
}

#[test]
fn live_transport_against_stub_server() {
    let (url, server) = stub_server("200 OK", r#"{"choices":[{"message":{"content":"State element 1: x"}}]}"#);
    std::env::set_var("VISTREE_TEST_KEY_OK", "secret-1");
    let mut img = Image::new(3, 2, [255, 255, 255]);
    img.fill_rect(0, 0, 1, 1, [0, 0, 0]);
    let req = prompt::step2_single(
        "d",
        &vistree::features::FeatureSpec { features: vec![] },
        &[],
        &[(img.clone(), vistree::segment::find_color_objects(&img).unwrap())],
        "model-x",
        0,
    );
    let answer = live(&url, "VISTREE_TEST_KEY_OK").send(&req).unwrap();
    assert_eq!(answer, "State element 1: x");
    let raw = server.join().unwrap();
    assert!(raw.contains("Bearer secret-1"));
    assert!(raw.contains("data:image/png;base64,"));
    let body: serde_json::Value = serde_json::from_str(raw.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["model"], "model-x");
    assert_eq!(body["temperature"], 0.0);
    assert!(raw.contains("Objects in image 1"));
}

#[test]
fn live_transport_errors() {
    let (url, server) = stub_server("401 Unauthorized", r#"{"error":"bad key"}"#);
    std::env::set_var("VISTREE_TEST_KEY_BAD", "nope");
    let req = prompt::step1("d", Image::new(2, 2, [0, 0, 0]), "m", 0);
    let err = live(&url, "VISTREE_TEST_KEY_BAD").send(&req).unwrap_err();
    assert!(matches!(err, VlmError::Auth(_)), "{err}");
    server.join().unwrap();

    let err = live(&url, "VISTREE_TEST_KEY_UNSET_ANYWHERE").send(&req).unwrap_err();
    assert!(matches!(err, VlmError::Auth(_)));

    std::env::set_var("VISTREE_TEST_KEY_NET", "k");
    let closed = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/", l.local_addr().unwrap())
    };
    let err = live(&closed, "VISTREE_TEST_KEY_NET").send(&req).unwrap_err();
    assert!(matches!(err, VlmError::Network(_)), "{err}");
    assert!(err.is_transport());
}

#[test]
fn judgment_variants_vote_together() {
    let (spec, _) = vistree::vlm::phrases_to_spec(&[
        "Cart position".into(),
        "Cart velocity".into(),
        "Pole angle".into(),
        "Pole angular velocity".into(),
    ])
    .unwrap();
    assert_eq!(parse_judgment("2, 4", &spec), parse_judgment("Features 2 and 4.", &spec));
}

proptest! {
    #[test]
    fn canonical_is_idempotent(s in "\\PC{0,40}") {
        let c = canonical(&s);
        prop_assert_eq!(canonical(&c), c.clone());
        prop_assert!(!c.starts_with(' ') && !c.ends_with(' ') && !c.contains("  "));
    }

    #[test]
    fn report_rates_bounded(spare in 0usize..20, f in 0usize..20, k in 0usize..20, sizes in proptest::collection::vec(1usize..10, 0..6)) {
        let n = (spare + f + k + sizes.iter().sum::<usize>()).max(1);
        let r = VoteReport::new("s", n, f, k, sizes.clone());
        for x in [r.failure_rate, r.constant_rate, r.coverage] {
            prop_assert!((0.0..=100.0).contains(&x));
        }
        prop_assert!(r.failure_rate + r.constant_rate + r.coverage <= 100.0 + 1e-9);
        match r.winner_cluster {
            None => prop_assert!(sizes.is_empty()),
            Some(w) => {
                prop_assert!(sizes.iter().all(|&s| s <= sizes[w]));
                prop_assert!(sizes[..w].iter().all(|&s| s < sizes[w]));
            }
        }
    }
}
