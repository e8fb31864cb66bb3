use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;

use objmst::assets::load_style_set;
use objmst::inversion::{LossMode, Target};
use objmst::metrics::{evaluate_table, load_manifest, EvalMode};
use objmst::models::Role;
use objmst::pipeline::{run_ablation, run_invert, run_job, run_segment, AblationArm, AblationConfig, InvertJob, JobSpec, Mode};
use objmst::s2k_transfer::{AttentionKind, StylePooling};
use objmst::weights::{fetch_weights, ModelStore, WeightsManifest};
use objmst::Error;

#[derive(Parser)]
#[command(name = "objmst", version, about = "Object-focused multimodal style transfer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Checkpoint cache root.
    #[arg(long, env = "OBJMST_WEIGHTS_DIR", global = true)]
    weights_dir: Option<PathBuf>,
    /// Weights manifest (JSON). Defaults to the built-in checkpoints.
    #[arg(long, global = true)]
    weights_manifest: Option<PathBuf>,
    /// Compute device tag. Only `cpu` is available.
    #[arg(long, env = "OBJMST_DEVICE", default_value = "cpu", global = true)]
    device: String,
    /// 1 forces deterministic kernels.
    #[arg(long, env = "OBJMST_DETERMINISTIC", default_value = "1", global = true)]
    deterministic: String,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Segment the salient object and write a binary mask.
    Segment {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        working_resolution: Option<usize>,
    },
    /// Invert style representations for one target.
    Invert(InvertArgs),
    /// Run the full pipeline.
    Stylize(StylizeArgs),
    /// Score run outputs against an evaluation manifest.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "stylized", value_parser = parse_enum::<EvalMode>)]
        mode: EvalMode,
        /// Per-image CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Paired ablation over a style set.
    Ablate {
        #[arg(long, value_parser = parse_enum::<AblationArm>)]
        arm: AblationArm,
        #[arg(long)]
        style_set: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        working_resolution: Option<usize>,
        /// JSON report output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download and verify checkpoints.
    FetchWeights {
        /// Roles to fetch; all when omitted.
        #[arg(long, value_delimiter = ',')]
        roles: Vec<String>,
    },
}

#[derive(Args, Default)]
struct InversionFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_enum::<LossMode>)]
    loss_mode: Option<LossMode>,
}

impl InversionFlags {
    fn apply(&self, cfg: &mut objmst::inversion::InversionConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.n_crop {
            cfg.n_crop = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.loss_mode {
            cfg.loss_mode = v;
        }
    }
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    text: String,
    #[arg(long)]
    style_image: Option<PathBuf>,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "fg", value_parser = parse_enum::<Target>)]
    target: Target,
    #[arg(long, default_value_t = 6)]
    count: usize,
    #[arg(long, default_value_t = 512)]
    working_resolution: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    inversion: InversionFlags,
}

#[derive(Args)]
struct StylizeArgs {
    /// JSON job spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<Mode>)]
    mode: Option<Mode>,
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    style_text_fg: Option<String>,
    #[arg(long)]
    style_text_bg: Option<String>,
    #[arg(long)]
    style_image_fg: Option<PathBuf>,
    #[arg(long)]
    style_image_bg: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    working_resolution: Option<usize>,
    #[arg(long)]
    full_frame: bool,
    #[arg(long, value_parser = parse_enum::<AttentionKind>)]
    attention: Option<AttentionKind>,
    #[arg(long, value_parser = parse_enum::<StylePooling>)]
    pooling: Option<StylePooling>,
    #[arg(long)]
    bg_reference: Option<PathBuf>,
    #[arg(long)]
    dump_features: bool,
    #[command(flatten)]
    inversion: InversionFlags,
}

impl StylizeArgs {
    fn job_spec(&self) -> Result<JobSpec, Error> {
        let mut spec = match &self.config {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::Validation(format!("config {}: {e}", p.display())))?;
                JobSpec::from_json(&bytes)?
            }
            None => JobSpec::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    spec.$field = v.clone();
                }
            };
            ($field:ident, opt) => {
                if let Some(v) = &self.$field {
                    spec.$field = Some(v.clone());
                }
            };
        }
        set!(mode);
        set!(content);
        set!(mask, opt);
        set!(style_text_fg);
        set!(style_text_bg, opt);
        set!(style_image_fg, opt);
        set!(style_image_bg, opt);
        set!(out_dir);
        set!(count);
        set!(working_resolution);
        set!(bg_reference, opt);
        if self.full_frame {
            spec.full_frame = true;
        }
        if self.dump_features {
            spec.dump_features = true;
        }
        if let Some(a) = self.attention {
            spec.transfer.attention = a;
        }
        if let Some(p) = self.pooling {
            spec.transfer.pooling = p;
        }
        self.inversion.apply(&mut spec.inversion);
        Ok(spec)
    }
}

/// Parse a snake_case enum through its serde representation.
fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn weights_dir(global: &Global) -> PathBuf {
    global.weights_dir.clone().unwrap_or_else(|| {
        std::env::var_os("HOME")
            .map(|h| PathBuf::from(h).join(".cache/objmst/weights"))
            .unwrap_or_else(|| PathBuf::from("weights"))
    })
}

fn manifest(global: &Global) -> Result<WeightsManifest, Error> {
    match &global.weights_manifest {
        Some(p) => WeightsManifest::load(p),
        None => Ok(WeightsManifest::builtin()),
    }
}

fn load_store(global: &Global, roles: &[Role]) -> Result<ModelStore, Error> {
    let dir = weights_dir(global);
    info!("weights dir {}", dir.display());
    ModelStore::load(&manifest(global)?, roles, &dir)
}

fn check_env(global: &Global) -> Result<(), Error> {
    if global.device != "cpu" {
        return Err(Error::Validation(format!("device {:?} is not available (only cpu)", global.device)));
    }
    match global.deterministic.as_str() {
        "1" | "true" => {}
        "0" | "false" => warn!("all kernels are deterministic; OBJMST_DETERMINISTIC=0 has no effect"),
        other => return Err(Error::Validation(format!("OBJMST_DETERMINISTIC must be 0 or 1, got {other:?}"))),
    }
    Ok(())
}

fn metric_roles() -> Vec<Role> {
    vec![Role::EncoderText, Role::EncoderImage, Role::Lpips, Role::Nima, Role::Contrique]
}

fn write_out(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    objmst::fsutil::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    check_env(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Segment {
            content,
            out,
            working_resolution,
        } => {
            let store = load_store(g, &[Role::Segmenter])?;
            let mask = run_segment(&store, &content, working_resolution, &out)?;
            println!("{} (foreground {:.4})", out.display(), mask.area_fraction());
        }
        Command::Invert(a) => {
            let mut inversion = Default::default();
            a.inversion.apply(&mut inversion);
            let job = InvertJob {
                style_text: a.text,
                style_image: a.style_image,
                content: a.content,
                mask: a.mask,
                target: a.target,
                count: a.count,
                working_resolution: a.working_resolution,
                inversion,
                out_dir: a.out_dir,
            };
            job.inversion.validate()?;
            let mut roles = vec![Role::EncoderText, Role::EncoderImage, Role::Generator];
            if job.mask.is_none() {
                roles.push(Role::Segmenter);
            }
            let store = load_store(g, &roles)?;
            for (i, o) in run_invert(&job, &store)?.iter().enumerate() {
                println!(
                    "{}_{i}: loss {:.5} -> {:.5} (best step {})",
                    job.target.as_str(),
                    o.initial_loss,
                    o.final_loss,
                    o.best_step
                );
            }
        }
        Command::Stylize(a) => {
            let spec = a.job_spec()?;
            spec.validate()?;
            let store = load_store(g, &spec.required_roles())?;
            let summary = run_job(&spec, &store)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", summary.final_path.display());
        }
        Command::Eval {
            run_dir,
            manifest,
            mode,
            csv,
        } => {
            let entries = load_manifest(&manifest)?;
            let store = load_store(g, &metric_roles())?;
            let report = evaluate_table(&store.metrics(), &run_dir, mode, &entries)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(p) = csv {
                write_out(&p, &report.to_csv()?)?;
            }
            print!("{}", report.format_table(mode));
        }
        Command::Ablate {
            arm,
            style_set,
            config,
            steps,
            count,
            seed,
            working_resolution,
            out,
        } => {
            let mut cfg: AblationConfig = match config {
                Some(p) => {
                    let bytes = std::fs::read(&p).map_err(|e| Error::Validation(format!("config {}: {e}", p.display())))?;
                    serde_json::from_slice(&bytes).map_err(|e| Error::Validation(format!("config: {e}")))?
                }
                None => AblationConfig::default(),
            };
            if let Some(v) = steps {
                cfg.inversion.steps = v;
            }
            if let Some(v) = count {
                cfg.count = v;
            }
            if let Some(v) = seed {
                cfg.inversion.seed = v;
            }
            if let Some(v) = working_resolution {
                cfg.working_resolution = v;
            }
            cfg.inversion.validate()?;
            let entries = load_style_set(&style_set)?;
            let mut roles = metric_roles();
            roles.extend([Role::Generator, Role::VggEncoder, Role::S2kMapper, Role::Decoder]);
            if entries.iter().any(|e| e.mask.is_none()) {
                roles.push(Role::Segmenter);
            }
            let store = load_store(g, &roles)?;
            let report = run_ablation(&store, arm, &entries, &cfg)?;
            if let Some(p) = out {
                write_out(&p, &serde_json::to_vec_pretty(&report)?)?;
            }
            print!("{}", report.summary());
        }
        Command::FetchWeights { roles } => {
            let roles: Vec<Role> = if roles.is_empty() {
                Role::ALL.to_vec()
            } else {
                roles
                    .iter()
                    .map(|r| r.parse::<Role>().map_err(|_| Error::Validation(format!("unknown role {r:?}"))))
                    .collect::<Result<_, _>>()?
            };
            let dir = weights_dir(g);
            let report = fetch_weights(&manifest(g)?, &roles, &dir)?;
            for (role, path) in &report.paths {
                let state = if report.cached.contains(role) { "cached" } else { "fetched" };
                println!("{role}: {state} {}", path.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_weights_error() => 4,
        Some(e) if matches!(e.root(), Error::Validation(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(inner) => eprintln!("error: {inner}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
