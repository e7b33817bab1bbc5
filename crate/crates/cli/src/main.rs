use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use subjground::config::PipelineConfig;
use subjground::corpus::Split;
use subjground::io::write_json;
use subjground::model::ModelVariant;
use subjground::pipeline::{self, Artifacts, Layout};

#[derive(Parser, Debug)]
#[command(name = "subjground", version, about = "Subjective ground attention pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; also sets the synth, split and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory holding every artifact.
    #[arg(long, global = true, default_value = "work")]
    out_dir: PathBuf,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Model variant (kebab-case name).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with known annotator profiles.
    Synth,
    /// Validate and code the raw corpus files.
    Ingest {
        /// Directory with situations.jsonl, comments.jsonl and rots.jsonl.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit topic clusters over DPlus situations.
    Cluster,
    /// Build each annotator's subjective ground base.
    BuildSg,
    /// Train one variant.
    Train(RunArgs),
    /// Write predictions and traces for a D split.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Render attention explanations.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// A single instance id; otherwise the first D-test instances.
        #[arg(long)]
        instance: Option<String>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Score a trained variant on D-test.
    Eval(RunArgs),
    /// Value and subjective-ground consistency of a trained variant.
    Consistency(RunArgs),
    /// Train and evaluate every configured variant and seed.
    Sweep,
    /// Run synth, ingest, cluster, build-sg and sweep in sequence.
    Pipeline,
    /// Check the configuration against the reference shape.
    Audit,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Cluster => "cluster",
            Command::BuildSg => "build-sg",
            Command::Train(_) => "train",
            Command::Predict { .. } => "predict",
            Command::Explain { .. } => "explain",
            Command::Eval(_) => "eval",
            Command::Consistency(_) => "consistency",
            Command::Sweep => "sweep",
            Command::Pipeline => "pipeline",
            Command::Audit => "audit",
        }
    }
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: Option<String>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: u64,
    config: &'a PipelineConfig,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digest(root: &Path, path: &Path) -> FileDigest {
    let sha256 = std::fs::read(path)
        .ok()
        .map(|bytes| Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect());
    let shown = path.strip_prefix(root).unwrap_or(path);
    FileDigest {
        path: shown.display().to_string(),
        sha256,
    }
}

fn load_config(g: &Global) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &g.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = g.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn variant_of(cfg: &PipelineConfig, run: &RunArgs) -> anyhow::Result<ModelVariant> {
    match &run.variant {
        Some(v) => Ok(v.parse()?),
        None => Ok(cfg.train.variant),
    }
}

fn run_seed(cfg: &PipelineConfig) -> u64 {
    cfg.train.seeds.first().copied().unwrap_or(cfg.seed)
}

fn execute(cli: &Cli, cfg: &PipelineConfig, layout: &Layout) -> anyhow::Result<Artifacts> {
    let seed = run_seed(cfg);
    let art = match &cli.command {
        Command::Synth => {
            let (out, art) = pipeline::run_synth(cfg, layout)?;
            println!(
                "synth: {} situations, {} comments, {} perturbations",
                out.raw.situations.len(),
                out.raw.comments.len(),
                out.perturbations.len()
            );
            art
        }
        Command::Ingest { input } => {
            let (corpus, art) = pipeline::run_ingest(cfg, layout, input.as_deref())?;
            let r = corpus.report();
            println!("ingest: {}", serde_json::to_string(&r)?);
            art
        }
        Command::Cluster => {
            let (c, art) = pipeline::run_cluster(cfg, layout)?;
            println!(
                "cluster: k={} inertia {:.4} mean silhouette {:.4}",
                c.model.k, c.model.inertia, c.mean_silhouette
            );
            art
        }
        Command::BuildSg => {
            let (bases, art) = pipeline::run_build_sg(cfg, layout)?;
            println!("build-sg: {} annotators", bases.len());
            art
        }
        Command::Train(run) => {
            let v = variant_of(cfg, run)?;
            let prepared = pipeline::prepare(cfg, layout)?;
            let (_, summary, art) = pipeline::run_train(cfg, layout, &prepared, v, seed)?;
            println!("train: {v} seed {seed} valid macro F1 {:.2}", summary.valid_f1);
            art
        }
        Command::Predict { run, split } => {
            let v = variant_of(cfg, run)?;
            let prepared = pipeline::prepare(cfg, layout)?;
            let (traces, art) = pipeline::run_predict(cfg, layout, &prepared, v, seed, (*split).into())?;
            println!("predict: {} instances", traces.len());
            art
        }
        Command::Explain { run, instance, limit } => {
            let v = variant_of(cfg, run)?;
            let prepared = pipeline::prepare(cfg, layout)?;
            let (text, art) = pipeline::run_explain(cfg, layout, &prepared, v, seed, instance.as_deref(), *limit)?;
            print!("{text}");
            art
        }
        Command::Eval(run) => {
            let v = variant_of(cfg, run)?;
            let prepared = pipeline::prepare(cfg, layout)?;
            let (report, art) = pipeline::run_eval(cfg, layout, &prepared, v, seed)?;
            print!("{}", pipeline::render_eval(&report));
            art
        }
        Command::Consistency(run) => {
            let v = variant_of(cfg, run)?;
            let prepared = pipeline::prepare(cfg, layout)?;
            let (report, art) = pipeline::run_consistency(cfg, layout, &prepared, v, seed)?;
            print!("{}", pipeline::render_consistency(&report));
            art
        }
        Command::Sweep => {
            let prepared = pipeline::prepare(cfg, layout)?;
            let (report, art) = pipeline::run_sweep(cfg, layout, &prepared)?;
            print!("{}", pipeline::render_sweep(&report));
            art
        }
        Command::Pipeline => {
            let mut art = Artifacts::default();
            let steps: [&dyn Fn() -> anyhow::Result<Artifacts>; 4] = [
                &|| Ok(pipeline::run_synth(cfg, layout)?.1),
                &|| Ok(pipeline::run_ingest(cfg, layout, None)?.1),
                &|| Ok(pipeline::run_cluster(cfg, layout)?.1),
                &|| Ok(pipeline::run_build_sg(cfg, layout)?.1),
            ];
            for step in steps {
                let a = step()?;
                art.inputs
                    .extend(a.inputs.into_iter().filter(|p| !art.outputs.contains(p)));
                art.outputs.extend(a.outputs);
            }
            let prepared = pipeline::prepare(cfg, layout)?;
            let (report, a) = pipeline::run_sweep(cfg, layout, &prepared)?;
            art.outputs.extend(a.outputs);
            print!("{}", pipeline::render_sweep(&report));
            art
        }
        Command::Audit => {
            let lines = cfg.audit();
            for l in &lines {
                let mark = if l.ok { "ok" } else { "MISMATCH" };
                println!("{:<28} expected {:<6} actual {:<6} {mark}", l.key, l.expected, l.actual);
            }
            if let Some(bad) = lines.iter().find(|l| !l.ok) {
                anyhow::bail!(subjground::Error::Config(format!(
                    "{} is {} (expected {})",
                    bad.key, bad.actual, bad.expected
                )));
            }
            Artifacts::default()
        }
    };
    Ok(art)
}

fn write_manifest(cli: &Cli, cfg: &PipelineConfig, layout: &Layout, art: &Artifacts) -> anyhow::Result<()> {
    let name = cli.command.name();
    let manifest = RunManifest {
        command: name,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        inputs: art.inputs.iter().map(|p| digest(&layout.root, p)).collect(),
        outputs: art.outputs.iter().map(|p| digest(&layout.root, p)).collect(),
    };
    let path = layout.root.join("manifests").join(format!("{name}.json"));
    write_json(&path, &manifest).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn error_code(e: &anyhow::Error) -> &'static str {
    if let Some(core) = e.downcast_ref::<subjground::Error>() {
        core.code()
    } else {
        "E_INTERNAL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let layout = Layout::new(&cli.global.out_dir);
    let result = load_config(&cli.global).and_then(|cfg| {
        let art = execute(&cli, &cfg, &layout)?;
        if !matches!(cli.command, Command::Audit) {
            write_manifest(&cli, &cfg, &layout, &art)?;
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}: {msg}", error_code(&e));
            ExitCode::FAILURE
        }
    }
}
