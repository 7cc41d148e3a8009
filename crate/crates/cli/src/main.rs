mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use vistree::env::{CartPole, RenderConfig};
use vistree::features::{
    benchmark_extractors, build_dataset, evaluate_surrogate, train_surrogate, DatasetConfig, FeatureDataset,
    FeatureSpec, ReferenceExtractor, Split, Surrogate,
};
use vistree::segment::{draw_overlay, segment_image, ColorPalette, Image};
use vistree::trainer::{
    curve_csv, evaluate_policy, train, ExtractorChoice, FeatureSource, Policy, PolicyKind, CART_POLE_ACTIONS,
};
use vistree::vlm::bundle::Bundle;
use vistree::vlm::pipeline::{generate_candidates, judge_multiframe, propose_features, FinalExtractor};
use vistree::vlm::{
    select_candidate, CandidateProgram, Generation, JudgeOutcome, LiveTransport, ProbeSet, ProgramExtractor,
    ProposalOutcome, QueryConfig, RecordingTransport, Runner, Stage, Transport,
};

use config::{Labeler, RunConfig, TransportKind};
use error::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "vistree", version, about = "Semantic features from frames and interpretable control trees")]
struct Cli {
    /// Run configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the flat-color objects of an image.
    Segment {
        image: PathBuf,
        /// Write the objects in the extractor wire format.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write a copy with bounding boxes drawn.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Feature proposal, judging, code generation and selection.
    Vlm {
        #[command(flatten)]
        opts: VlmOpts,
        #[command(subcommand)]
        step: VlmStep,
    },
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    Surrogate {
        #[command(subcommand)]
        cmd: SurrogateCmd,
    },
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint or the uniform random policy.
    Eval(EvalArgs),
    /// Write a tree checkpoint as text rules and Graphviz DOT.
    ExportTree {
        /// Defaults to the best checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        dot: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VlmOpts {
    /// Task whose fixtures, scene and probes are used.
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportKind>,
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Record live answers as replay fixtures here.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VlmStep {
    /// Ask for decision-relevant features and keep the majority answer.
    Propose {
        /// Frame to show instead of the task scene.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Task description file instead of the bundled one.
        #[arg(long)]
        domain: Option<PathBuf>,
    },
    /// Decide which proposed features need more than one frame.
    Judge,
    /// Request extractor programs for one stage.
    Codegen {
        #[arg(long, value_enum, default_value = "single")]
        stage: StageArg,
    },
    /// Filter, cluster and pick among generated programs.
    Select {
        #[arg(long, value_enum, default_value = "single")]
        stage: StageArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StageArg {
    Single,
    Multi,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Single => Stage::Single,
            StageArg::Multi => Stage::Multi,
        }
    }
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Roll out a random policy and label every frame.
    Build {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        labeler: Option<Labeler>,
    },
}

#[derive(Subcommand)]
enum SurrogateCmd {
    /// Fit the fast regressor on the run's dataset.
    Train,
    /// Per-feature error table (MSE scaled by 1e3).
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Time reference extraction against batched surrogate inference.
    Extractors {
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PolicyArg {
    Ict,
    Mlp,
    Random,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ExtractorArg {
    GroundTruth,
    Reference,
    Surrogate,
}

impl From<ExtractorArg> for ExtractorChoice {
    fn from(e: ExtractorArg) -> Self {
        match e {
            ExtractorArg::GroundTruth => ExtractorChoice::GroundTruth,
            ExtractorArg::Reference => ExtractorChoice::Reference,
            ExtractorArg::Surrogate => ExtractorChoice::Surrogate,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    extractor: Option<ExtractorArg>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// `random`, or omit and pass --checkpoint.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    extractor: Option<ExtractorArg>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Segment { image, json, overlay } => cmd_segment(&image, json.as_deref(), overlay.as_deref()),
        Command::Vlm { opts, step } => {
            apply_vlm_opts(&mut cfg, opts);
            cmd_vlm(&cfg, step)
        }
        Command::Dataset {
            cmd: DatasetCmd::Build { n, labeler },
        } => {
            if let Some(n) = n {
                cfg.dataset.n = n;
            }
            if let Some(l) = labeler {
                cfg.dataset.labeler = l;
            }
            cfg.echo("dataset")?;
            cmd_dataset(&cfg)
        }
        Command::Surrogate { cmd } => {
            cfg.echo("surrogate")?;
            match cmd {
                SurrogateCmd::Train => cmd_surrogate_train(&cfg),
                SurrogateCmd::Eval { split } => cmd_surrogate_eval(
                    &cfg,
                    match split {
                        SplitArg::Train => Split::Train,
                        SplitArg::Val => Split::Val,
                        SplitArg::Test => Split::Test,
                    },
                ),
            }
        }
        Command::Bench {
            cmd: BenchCmd::Extractors { batches, iterations },
        } => {
            if let Some(b) = batches {
                cfg.bench.batches = b;
            }
            if let Some(i) = iterations {
                cfg.bench.iterations = i;
            }
            cfg.echo("bench")?;
            cmd_bench(&cfg)
        }
        Command::Train(a) => {
            if let Some(p) = a.policy {
                cfg.train.policy = policy_kind(p);
            }
            if let Some(e) = a.extractor {
                cfg.train.extractor = e.into();
            }
            if let Some(s) = a.steps {
                cfg.train.total_steps = s;
            }
            cfg.train.seed = cfg.seed;
            cfg.train.render = cfg.render;
            cfg.echo("train")?;
            cmd_train(&cfg)
        }
        Command::Eval(a) => {
            if let Some(e) = a.extractor {
                cfg.train.extractor = e.into();
            }
            cfg.echo("eval")?;
            cmd_eval(&cfg, a.policy, a.checkpoint.as_deref(), a.episodes)
        }
        Command::ExportTree { checkpoint, text, dot } => {
            cmd_export(&cfg, checkpoint.as_deref(), text.as_deref(), dot.as_deref())
        }
    }
}

fn policy_kind(p: PolicyArg) -> PolicyKind {
    match p {
        PolicyArg::Ict => PolicyKind::Ict,
        PolicyArg::Mlp => PolicyKind::Mlp,
        PolicyArg::Random => PolicyKind::Random,
    }
}

fn input_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(input_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(input_err(dir))?;
    }
    std::fs::write(path, text).map_err(input_err(path))
}

fn cmd_segment(image: &Path, json: Option<&Path>, overlay: Option<&Path>) -> Result<()> {
    let img = Image::load(image)?;
    let seg = segment_image(&img, &ColorPalette::default())?;
    println!("{} objects", seg.objects.len());
    if !seg.objects.is_empty() {
        println!("{:>3} {:<11} {:>6} {:>17} {:>16}", "#", "label", "area", "bbox", "centroid");
    }
    for (i, o) in seg.objects.iter().enumerate() {
        println!(
            "{:>3} {:<11} {:>6} {:>17} {:>16}",
            i,
            o.color_label,
            o.area,
            format!("{:?}", o.bbox),
            format!("({:.1}, {:.1})", o.centroid[0], o.centroid[1])
        );
    }
    if let Some(p) = json {
        let doc = serde_json::json!({
            "image_path": image.display().to_string(),
            "image_width": img.width,
            "image_height": img.height,
            "objects": seg.objects,
        });
        write_json(p, &doc)?;
    }
    if let Some(p) = overlay {
        draw_overlay(&img, &seg.objects, [255, 0, 255]).save(p)?;
    }
    Ok(())
}

// ---- vlm ----

fn apply_vlm_opts(cfg: &mut RunConfig, o: VlmOpts) {
    let v = &mut cfg.vlm;
    if let Some(t) = o.task {
        v.task = t;
    }
    if let Some(t) = o.transport {
        v.transport = t;
    }
    if o.fixtures.is_some() {
        v.fixtures = o.fixtures;
    }
    if o.endpoint.is_some() {
        v.endpoint = o.endpoint;
    }
    if let Some(m) = o.model {
        v.model = m;
    }
    if let Some(n) = o.n {
        v.n = n;
    }
    if o.record.is_some() {
        v.record = o.record;
    }
}

fn bundle(cfg: &RunConfig) -> Bundle {
    cfg.vlm.fixtures.clone().map(Bundle::new).unwrap_or_else(Bundle::bundled)
}

fn transport(cfg: &RunConfig) -> Result<Box<dyn Transport>> {
    match cfg.vlm.transport {
        TransportKind::Replay => Ok(Box::new(bundle(cfg).replay())),
        TransportKind::Live => {
            let endpoint = cfg
                .vlm
                .endpoint
                .as_deref()
                .ok_or_else(|| CliError::Input("live transport needs --endpoint".into()))?;
            let live = LiveTransport {
                credential_env: cfg.vlm.credential_env.clone(),
                ..LiveTransport::new(endpoint)
            };
            match &cfg.vlm.record {
                Some(dir) => Ok(Box::new(RecordingTransport::new(live, dir)?)),
                None => Ok(Box::new(live)),
            }
        }
    }
}

fn vlm_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("vlm")
}

fn query(cfg: &RunConfig, domain: Option<&Path>) -> Result<QueryConfig> {
    let mut q = bundle(cfg).query(&cfg.vlm.task, cfg.vlm.n)?;
    q.model = cfg.vlm.model.clone();
    if let Some(p) = domain {
        q.domain = std::fs::read_to_string(p).map_err(input_err(p))?;
    }
    Ok(q)
}

fn probes(cfg: &RunConfig) -> Result<ProbeSet> {
    Ok(bundle(cfg).probes(&cfg.vlm.task, &vlm_dir(cfg))?)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Single => "single",
        Stage::Multi => "multi",
    }
}

fn cmd_vlm(cfg: &RunConfig, step: VlmStep) -> Result<()> {
    let dir = vlm_dir(cfg);
    let spec_path = dir.join("spec.json");
    match step {
        VlmStep::Propose { image, domain } => {
            cfg.echo("vlm-propose")?;
            let q = query(cfg, domain.as_deref())?;
            let scene = match &image {
                Some(p) => Image::load(p)?,
                None => bundle(cfg).scene(&cfg.vlm.task)?,
            };
            let out: ProposalOutcome = propose_features(&q, &scene, transport(cfg)?.as_mut())?;
            write_json(&dir.join("proposal.json"), &out)?;
            out.spec.save(&spec_path)?;
            write_text(&dir.join("propose.csv"), &out.report.to_csv())?;
            eprintln!("{}", out.report);
            for r in &out.review {
                eprintln!("review: no keyword rule matched \"{r}\"; defaulted to a [0, 1] range");
            }
            println!("{}", serde_json::to_string_pretty(&out.spec).expect("spec serializes"));
        }
        VlmStep::Judge => {
            cfg.echo("vlm-judge")?;
            let spec = FeatureSpec::load(&spec_path)?;
            let out: JudgeOutcome = judge_multiframe(&query(cfg, None)?, &spec, transport(cfg)?.as_mut())?;
            write_json(&dir.join("judge.json"), &out)?;
            out.spec.save(&spec_path)?;
            if let Some(r) = &out.report {
                eprintln!("{r}");
            }
            if out.multi.is_empty() {
                println!("multi-frame features: none");
            } else {
                println!("multi-frame features: {}", out.multi.join(", "));
            }
        }
        VlmStep::Codegen { stage } => {
            let stage: Stage = stage.into();
            cfg.echo(&format!("vlm-codegen-{}", stage_name(stage)))?;
            let spec = FeatureSpec::load(&spec_path)?;
            if stage == Stage::Multi && spec.multi_frame_names().is_empty() {
                println!("multi-frame stage skipped: no multi-frame features");
                return Ok(());
            }
            let single = match stage {
                Stage::Multi => Some(read_json::<CandidateProgram>(&dir.join("selected_single.json"))?),
                Stage::Single => None,
            };
            let probes = probes(cfg)?;
            let g: Generation = generate_candidates(
                &query(cfg, None)?,
                &spec,
                &probes.examples(),
                stage,
                single.as_ref(),
                &Runner::python(),
                transport(cfg)?.as_mut(),
            )?;
            write_json(&dir.join(format!("candidates_{}.json", stage_name(stage))), &g)?;
            println!(
                "{} {} candidates, {} queries failed",
                g.candidates.len(),
                stage_name(stage),
                g.failures
            );
        }
        VlmStep::Select { stage } => {
            let stage: Stage = stage.into();
            let name = stage_name(stage);
            cfg.echo(&format!("vlm-select-{name}"))?;
            let spec = FeatureSpec::load(&spec_path)?;
            if stage == Stage::Multi && spec.multi_frame_names().is_empty() {
                println!("multi-frame stage skipped: no multi-frame features");
                write_final(&dir, spec)?;
                return Ok(());
            }
            let mut g: Generation = read_json(&dir.join(format!("candidates_{name}.json")))?;
            let single = match stage {
                Stage::Multi => Some(read_json::<CandidateProgram>(&dir.join("selected_single.json"))?),
                Stage::Single => None,
            };
            let probes = probes(cfg)?;
            let (winner, report) = select_candidate(
                &mut g.candidates,
                &probes,
                vistree::vlm::bundle::PROBE_COUNT,
                single.as_ref(),
            )?;
            write_json(&dir.join(format!("selected_{name}.json")), &g.candidates[winner])?;
            write_json(&dir.join(format!("candidates_{name}.json")), &g)?;
            write_text(&dir.join(format!("report_{name}.csv")), &report.to_csv())?;
            write_text(&dir.join(format!("report_{name}.json")), &(report.to_json() + "\n"))?;
            eprintln!("{report}");
            print!("{}", report.to_csv());
            if stage == Stage::Multi || spec.multi_frame_names().is_empty() {
                write_final(&dir, spec)?;
            }
        }
    }
    Ok(())
}

fn write_final(dir: &Path, spec: FeatureSpec) -> Result<()> {
    let single: CandidateProgram = read_json(&dir.join("selected_single.json"))?;
    let multi = if spec.multi_frame_names().is_empty() {
        None
    } else {
        Some(read_json::<CandidateProgram>(&dir.join("selected_multi.json"))?)
    };
    let fin = FinalExtractor::new(spec, single, multi)?;
    write_json(&dir.join("extractor.json"), &fin)
}

// ---- features ----

/// Spec for dataset labelling and feature-based policies.
fn feature_spec(cfg: &RunConfig) -> Result<FeatureSpec> {
    if let Some(p) = &cfg.feature_spec {
        return Ok(FeatureSpec::load(p)?);
    }
    let run_spec = cfg.out_dir.join("feature_spec.json");
    if run_spec.exists() {
        return Ok(FeatureSpec::load(&run_spec)?);
    }
    Ok(FeatureSpec::cart_pole())
}

fn cmd_dataset(cfg: &RunConfig) -> Result<()> {
    let dcfg = DatasetConfig {
        n: cfg.dataset.n,
        seed: cfg.seed,
        fractions: cfg.dataset.fractions,
        render: cfg.render,
    };
    let out = cfg.out_dir.join("dataset");
    let (spec, ds) = match cfg.dataset.labeler {
        Labeler::Reference => {
            let spec = match &cfg.feature_spec {
                Some(p) => FeatureSpec::load(p)?,
                None => FeatureSpec::cart_pole(),
            };
            let mut ex = ReferenceExtractor::new(&spec, ColorPalette::default())?;
            let ds = build_dataset(&dcfg, &spec, &mut ex, Some(&out))?;
            (spec, ds)
        }
        Labeler::Program => {
            let dir = vlm_dir(cfg);
            let spec = FeatureSpec::load(&dir.join("spec.json"))?;
            let program: CandidateProgram = read_json(&dir.join("selected_single.json"))?;
            let mut ex = ProgramExtractor::new(&spec, program, cfg.out_dir.join("scratch"))?;
            let ds = build_dataset(&dcfg, &spec, &mut ex, Some(&out))?;
            (spec, ds)
        }
    };
    spec.save(&cfg.out_dir.join("feature_spec.json"))?;
    let m = ds.manifest(cfg.seed);
    println!("{} frames: {}/{}/{} train/val/test", m.n, m.train, m.val, m.test);
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn cmd_surrogate_train(cfg: &RunConfig) -> Result<()> {
    let ds = FeatureDataset::load(&cfg.out_dir.join("dataset"))?;
    let mut hyper = cfg.surrogate.clone();
    hyper.seed = cfg.seed;
    let model = train_surrogate(&ds, &hyper, |e| {
        eprintln!("epoch {:>3} train loss {:.6} val error {:.6}", e.epoch, e.train_loss, e.val_error)
    })?;
    model.save(&cfg.out_dir.join("surrogate.json"))?;
    let table = evaluate_surrogate(&model, &ds, Split::Test)?;
    write_text(&cfg.out_dir.join("surrogate_errors.csv"), &table.to_csv())?;
    print!("{table}");
    Ok(())
}

fn cmd_surrogate_eval(cfg: &RunConfig, split: Split) -> Result<()> {
    let ds = FeatureDataset::load(&cfg.out_dir.join("dataset"))?;
    let model = Surrogate::load(&cfg.out_dir.join("surrogate.json"))?;
    let table = evaluate_surrogate(&model, &ds, split)?;
    println!("split: {}", split_name(split));
    print!("{table}");
    Ok(())
}

/// Frames from uniform-random rollouts.
fn random_frames(n: usize, seed: u64, render: RenderConfig) -> Vec<Image> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut env = CartPole::new(rng.gen(), render);
    let mut frames = Vec::with_capacity(n);
    while frames.len() < n {
        frames.push(env.render());
        let (_, _, done) = env.step(rng.gen_range(0..2)).expect("env running");
        if done {
            env.reset_next();
        }
    }
    frames
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let model = Surrogate::load(&cfg.out_dir.join("surrogate.json"))?;
    let spec = feature_spec(cfg)?;
    let spec = if spec.single_frame().features.iter().all(|f| f.object_binding.is_some()) {
        spec
    } else {
        FeatureSpec::cart_pole()
    };
    let reference = ReferenceExtractor::new(&spec, ColorPalette::default())?;
    let frames = random_frames(cfg.bench.frames, cfg.seed, cfg.render);
    let report = benchmark_extractors(&frames, &reference, &model, &cfg.bench.batches, cfg.bench.iterations)?;
    write_text(&cfg.out_dir.join("bench.csv"), &report.to_csv())?;
    print!("{report}");
    Ok(())
}

// ---- policies ----

fn feature_source(cfg: &RunConfig) -> Result<FeatureSource> {
    Ok(match cfg.train.extractor {
        ExtractorChoice::GroundTruth => FeatureSource::GroundTruth,
        ExtractorChoice::Reference => {
            let spec = feature_spec(cfg)?;
            let extractor = ReferenceExtractor::new(&spec, ColorPalette::default())?;
            FeatureSource::Reference { spec, extractor }
        }
        ExtractorChoice::Surrogate => {
            let model = Surrogate::load(&cfg.out_dir.join("surrogate.json"))?;
            let spec = feature_spec(cfg)?;
            if spec.single_frame().names() != model.spec.names() {
                return Err(CliError::Input(format!(
                    "surrogate predicts {:?} but the feature spec needs {:?}",
                    model.spec.names(),
                    spec.single_frame().names()
                )));
            }
            FeatureSource::Surrogate {
                spec,
                model: Box::new(model),
            }
        }
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let source = feature_source(cfg)?;
    let dir = cfg.out_dir.join("train");
    let outcome = train(&cfg.train, &source, Some(&dir), |p| {
        eprintln!(
            "step {:>7} eval {:>7.1} train {}",
            p.step,
            p.mean_return,
            p.train_return.map(|r| format!("{r:.1}")).unwrap_or_else(|| "-".into())
        )
    })?;
    write_text(&dir.join("curve.csv"), &curve_csv(&outcome.curve))?;
    println!("best eval return {:.1}", outcome.best_return);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, policy: Option<PolicyArg>, checkpoint: Option<&Path>, episodes: usize) -> Result<()> {
    let (policy, source) = match (policy, checkpoint) {
        (Some(PolicyArg::Random), None) => (
            Policy::Random {
                actions: CART_POLE_ACTIONS.len(),
            },
            FeatureSource::GroundTruth,
        ),
        (None, Some(p)) => (Policy::load(p)?, feature_source(cfg)?),
        (None, None) => {
            let p = cfg.out_dir.join("train/best_policy.json");
            (Policy::load(&p)?, feature_source(cfg)?)
        }
        _ => {
            return Err(CliError::Input(
                "pass either --policy random or a --checkpoint to evaluate".into(),
            ))
        }
    };
    let res = evaluate_policy(&policy, &source, cfg.render, cfg.train.frame_lag, episodes, cfg.seed)?;
    write_json(&cfg.out_dir.join("eval.json"), &res)?;
    println!("mean return {:.2} ± {:.2} over {} episodes", res.mean, res.std, episodes);
    Ok(())
}

fn cmd_export(cfg: &RunConfig, checkpoint: Option<&Path>, text: Option<&Path>, dot: Option<&Path>) -> Result<()> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("train/best_policy.json"));
    let tree = match Policy::load(&path)? {
        Policy::Ict { tree } => tree,
        other => {
            return Err(CliError::Input(format!(
                "{} holds a {:?} policy, not a tree",
                path.display(),
                other.kind()
            )))
        }
    };
    let rules = tree.export_text()?;
    let graph = tree.export_dot()?;
    let text_path = text.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("tree.txt"));
    let dot_path = dot.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("tree.dot"));
    write_text(&text_path, &rules)?;
    write_text(&dot_path, &graph)?;
    print!("{rules}");
    Ok(())
}
