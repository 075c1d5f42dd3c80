use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use relcap::data::{generate_world, load_jsonl, save_jsonl, Scene, WorldConfig};
use relcap::model::FusionMode;
use relcap::pipeline::{train, Captioner, RunConfig};
use relcap::tasks::{build_caption_graph, emit_dot, retrieve, sample_queries};
use relcap::{checkpoint, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "relcap", version, about = "Dense relational captioning on a synthetic scene world")]
pub struct Cli {
    /// Worker threads for eval, caption, graph and retrieve.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSONL.
    GenData(GenData),
    /// Train a model and write a checkpoint plus a JSONL loss log.
    Train(Train),
    /// Evaluate a checkpoint and print the metrics report as JSON.
    Eval(Eval),
    /// Print the captions of every region pair, highest score first.
    Caption(Caption),
    /// Write one caption graph per scene as DOT.
    Graph(Graph),
    /// Sentence-based image retrieval; prints recall and median rank as JSON.
    Retrieve(Retrieve),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    scenes: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    objects_min: Option<usize>,
    #[arg(long)]
    objects_max: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    no_pos_loss: bool,
}

#[derive(Args, Debug)]
struct Proposals {
    #[arg(long)]
    n_before_nms: Option<usize>,
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    proposals: Proposals,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Caption {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Only this scene; otherwise every scene, each headed by `# <id>`.
    #[arg(long)]
    scene: Option<String>,
    #[command(flatten)]
    proposals: Proposals,
}

#[derive(Args, Debug)]
struct Graph {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory receiving `<scene id>.dot` files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scene: Option<String>,
}

#[derive(Args, Debug)]
struct Retrieve {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    queries: u64,
    /// Pool size: the first N scenes of the dataset.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pool: u64,
    /// Proposals kept before NMS for every pool image.
    #[arg(long, default_value_t = 100)]
    proposals: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse::<FusionMode>().map_err(|e| e.to_string())
}

/// 1 for usage and configuration problems, 2 for data and format problems,
/// 3 for numeric failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs as usize;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => eval(a, jobs),
        Command::Caption(a) => caption(a, jobs),
        Command::Graph(a) => graph(a, jobs),
        Command::Retrieve(a) => cmd_retrieve(a, jobs),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = WorldConfig::default();
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.objects_min {
        cfg.objects_min = v;
    }
    if let Some(v) = a.objects_max {
        cfg.objects_max = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
    }
    let world = generate_world(a.seed, a.scenes as usize, &cfg)?;
    save_jsonl(&a.out, &world)?;
    log::info!("wrote {} scenes to {}", world.len(), a.out.display());
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn cmd_train(a: Train) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.epochs {
        run.epochs = v;
    }
    if let Some(v) = a.lr {
        run.lr = v;
    }
    if let Some(v) = a.seed {
        run.seed = v;
    }
    if let Some(v) = a.batch_size {
        run.batch_size = v;
    }
    if let Some(v) = a.fusion {
        run.model.fusion = v;
    }
    if a.no_pos_loss {
        run.model.use_pos_loss = false;
    }
    run.validate()?;
    let scenes = load_jsonl(&a.data)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = create(&log_path)?;
    let model = train(&scenes, &run, |entry| {
        let line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&a.out, &model)?;
    log::info!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn load_model(ckpt: &Path, proposals: Option<&Proposals>) -> Result<Captioner> {
    let mut model = checkpoint::load(ckpt)?;
    if let Some(p) = proposals {
        if let Some(v) = p.n_before_nms {
            model.run.n_before_nms = v;
        }
        if let Some(v) = p.nms_iou {
            model.run.nms_iou = v;
        }
    }
    model.run.validate()?;
    Ok(model)
}

fn load_scenes(path: &Path, model: &Captioner) -> Result<Vec<Scene>> {
    let scenes = load_jsonl(path)?;
    model.run.check_dataset(&scenes)?;
    Ok(scenes)
}

fn select<'a>(scenes: &'a [Scene], id: Option<&str>) -> Result<Vec<&'a Scene>> {
    match id {
        None => Ok(scenes.iter().collect()),
        Some(id) => scenes
            .iter()
            .find(|s| s.id == id)
            .map(|s| vec![s])
            .ok_or_else(|| Error::Lookup(format!("scene {id:?} not found"))),
    }
}

fn eval(a: Eval, jobs: usize) -> Result<()> {
    let model = load_model(&a.ckpt, Some(&a.proposals))?;
    let scenes = load_scenes(&a.data, &model)?;
    let report = model.evaluate(&scenes, jobs)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, format!("{json}\n")).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn fmt_box(b: &relcap::geometry::BBox) -> String {
    format!("[{:.4},{:.4},{:.4},{:.4}]", b.x, b.y, b.w, b.h)
}

fn caption(a: Caption, jobs: usize) -> Result<()> {
    let model = load_model(&a.ckpt, Some(&a.proposals))?;
    let scenes = load_scenes(&a.data, &model)?;
    let chosen = select(&scenes, a.scene.as_deref())?;
    let captions = relcap::pipeline::par_map(jobs, &chosen, |s| model.caption(s))?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let w = |e| Error::io("<stdout>", e);
    for (scene, caps) in chosen.iter().zip(captions) {
        if a.scene.is_none() {
            writeln!(out, "# {}", scene.id).map_err(w)?;
        }
        for l in caps.lines {
            let tags: Vec<&str> = l.tags.iter().map(|t| t.as_str()).collect();
            writeln!(
                out,
                "{:.6}\t{}\t{}\t{}\t{}",
                l.score,
                fmt_box(&l.subject_box),
                fmt_box(&l.object_box),
                l.words.join(" "),
                tags.join(" ")
            )
            .map_err(w)?;
        }
    }
    Ok(())
}

fn graph(a: Graph, jobs: usize) -> Result<()> {
    let model = load_model(&a.ckpt, None)?;
    let scenes = load_scenes(&a.data, &model)?;
    let chosen = select(&scenes, a.scene.as_deref())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let graphs = relcap::pipeline::par_map(jobs, &chosen, |s| build_caption_graph(s, &model))?;
    for (scene, g) in chosen.iter().zip(graphs) {
        let path = a.out.join(format!("{}.dot", scene.id));
        fs::write(&path, emit_dot(&g)).map_err(|e| Error::io(&path, e))?;
    }
    log::info!("wrote {} graphs to {}", chosen.len(), a.out.display());
    Ok(())
}

fn cmd_retrieve(a: Retrieve, jobs: usize) -> Result<()> {
    let model = load_model(&a.ckpt, None)?;
    let scenes = load_scenes(&a.data, &model)?;
    let pool = a.pool as usize;
    if scenes.len() < pool {
        return Err(Error::Config(format!(
            "pool of {pool} requested but {} has {} scenes",
            a.data.display(),
            scenes.len()
        )));
    }
    let pool = &scenes[..pool];
    let queries = sample_queries(pool, a.queries as usize, a.seed)?;
    let (report, _) = retrieve(&model, &queries, pool, a.proposals, jobs)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    println!("{json}");
    Ok(())
}
