//! `t2l`: text-driven layered editing of images and atlas-decomposed videos.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use t2l_core::config::{self, RunConfig};
use t2l_core::video::{synthetic_package, SyntheticSpec};
use t2l_core::{run, Error, Result};

#[derive(Parser)]
#[command(name = "t2l", version, about = "Text-driven layered image and video editing")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit a single image.
    Image {
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Edit a video given as a layered-atlas package.
    Video {
        #[arg(long)]
        package: Option<PathBuf>,
        #[arg(long, value_enum)]
        layer: Option<LayerArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a procedural atlas package.
    SynthPackage {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        fg_shift: usize,
        #[arg(long, default_value_t = 0)]
        bg_shift: usize,
        #[arg(long)]
        atlas_resolution: Option<usize>,
        /// Identity UV maps on square frames of side `--height`.
        #[arg(long)]
        identity: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target text.
    #[arg(long)]
    prompt: Option<String>,
    /// Text describing the region to edit.
    #[arg(long)]
    roi: Option<String>,
    /// Subject of the green-screen prompt.
    #[arg(long)]
    screen: Option<String>,
    /// Loss term to turn off, or `augmentation`; repeatable.
    #[arg(long, value_name = "TERM")]
    disable: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the randomly initialized tiny backend with this seed.
    #[arg(long, value_name = "SEED")]
    synthetic_backend: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Fg,
    Bg,
    Both,
}

fn set(t: &mut toml::Table, path: &[&str], v: toml::Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = t;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("override parents are tables");
    }
    cur.insert(last.to_string(), v);
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn build_config(mode: &str, common: &Common, extra: impl FnOnce(&mut toml::Table)) -> Result<RunConfig> {
    let mut raw = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config {
                path: String::new(),
                message: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    let mut over = toml::Table::new();
    set(&mut over, &["mode"], toml::Value::String(mode.into()));
    if let Some(p) = &common.prompt {
        set(&mut over, &["prompts", "target"], toml::Value::String(p.clone()));
    }
    if let Some(r) = &common.roi {
        set(&mut over, &["prompts", "roi"], toml::Value::String(r.clone()));
    }
    if let Some(s) = &common.screen {
        set(&mut over, &["prompts", "screen_subject"], toml::Value::String(s.clone()));
    }
    if let Some(o) = &common.out {
        set(&mut over, &["out"], path_value(o));
    }
    if let Some(n) = common.steps {
        set(&mut over, &["train", "total_steps"], toml::Value::Integer(n as i64));
    }
    if let Some(s) = common.seed {
        set(&mut over, &["seed"], toml::Value::Integer(s as i64));
    }
    if let Some(s) = common.synthetic_backend {
        let mut b = toml::Table::new();
        b.insert("kind".into(), toml::Value::String("synthetic".into()));
        b.insert("seed".into(), toml::Value::Integer(s as i64));
        over.insert("backend".into(), toml::Value::Table(b));
    }
    extra(&mut over);
    config::merge_tables(&mut raw, over);
    let mut cfg = config::validate_config(raw)?;
    for term in &common.disable {
        cfg.disable(term)?;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Image { input, common } => {
            let cfg = build_config("image", &common, |t| {
                if let Some(i) = &input {
                    set(t, &["input"], path_value(i));
                }
            })?;
            let out = run::run(&cfg)?;
            println!("{}", out.dir.display());
        }
        Command::Video { package, layer, common } => {
            let cfg = build_config("video", &common, |t| {
                if let Some(p) = &package {
                    set(t, &["package"], path_value(p));
                }
                if let Some(l) = layer {
                    let name = match l {
                        LayerArg::Fg => "fg",
                        LayerArg::Bg => "bg",
                        LayerArg::Both => "both",
                    };
                    set(t, &["layer"], toml::Value::String(name.into()));
                }
            })?;
            let out = run::run(&cfg)?;
            println!("{}", out.dir.display());
        }
        Command::SynthPackage {
            out,
            frames,
            height,
            width,
            fg_shift,
            bg_shift,
            atlas_resolution,
            identity,
        } => {
            let spec = if identity {
                SyntheticSpec::identity(frames, height)
            } else {
                SyntheticSpec {
                    frame_count: frames,
                    height,
                    width,
                    fg_shift,
                    bg_shift,
                    atlas_resolution,
                    ..SyntheticSpec::default()
                }
            };
            synthetic_package(&spec)?.save(&out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
