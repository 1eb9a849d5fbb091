//! The `odg` command line: scene generation, fitting, evaluation, rendering
//! export and ablation tables. Every output lands under `--out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use odg_core::metrics::{miou, MetricReport};
use odg_core::render::{render_view_with, write_depth_pgm, write_semantic_ppm, RenderOptions};
use odg_core::scene::VoxelGrid;
use odg_core::synthgen::{generate_scene, load_packet, save_packet, FramePacket, SceneSpec};
use odg_core::train::{
    box_region_mask, depth_l1, eval_rays, fit, keyframe_visibility, predict_grid, Ablation, FittedState, RunConfig,
    StepRecord, BOX_REGION_MARGIN, STATE_FILE,
};
use odg_core::OdgError;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(name = "odg", version, about = "Dual-query Gaussian occupancy toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene packet.
    Gen {
        /// Scene spec (TOML or JSON). Defaults to the `--scene` preset.
        #[arg(long, conflicts_with = "scene")]
        config: Option<PathBuf>,
        /// Built-in scene used when no spec file is given.
        #[arg(long, value_enum, default_value_t = ScenePreset::Street)]
        scene: ScenePreset,
        /// Preset variant, or the `seed` field of a spec file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Gaussians or train the query network on a packet.
    Fit {
        /// Run config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        packet: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fitted state directory or a grid file against a packet.
    Eval {
        /// A directory holding `state.json`, or a `grid.bin` file.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        packet: PathBuf,
        /// Stage of a fitted state to score (default: last).
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export depth (PGM) and semantic (PPM) images per stage and camera.
    Render {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        packet: PathBuf,
        /// Keep every `stride`-th pixel per axis.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and score every row of a config matrix.
    Ablate {
        /// Matrix file: a `base` run config and at least two `rows`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        packet: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status for an error: 2 for configuration problems, 3 for data and I/O
/// problems, 4 for numerical divergence.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(o) = cause.downcast_ref::<OdgError>() {
            return match o {
                OdgError::Config { .. } => EXIT_CONFIG,
                OdgError::Divergence { .. } | OdgError::NonFinite(_) => EXIT_DIVERGED,
                _ => EXIT_DATA,
            };
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            scene,
            seed,
            out,
        } => cmd_gen(config.as_deref(), scene, seed, &out).map(|_| ()),
        Command::Fit {
            config,
            packet,
            seed,
            out,
        } => {
            let mut cfg: RunConfig = read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_fit(&cfg, &packet, &out).map(|_| ())
        }
        Command::Eval {
            pred,
            packet,
            stage,
            out,
        } => cmd_eval(&pred, &packet, stage, &out).map(|_| ()),
        Command::Render {
            state,
            packet,
            stride,
            out,
        } => cmd_render(&state, &packet, stride, &out).map(|_| ()),
        Command::Ablate {
            config,
            packet,
            seed,
            out,
        } => {
            let mut m: AblationMatrix = read_config(&config)?;
            if let Some(s) = seed {
                m.base.seed = s;
            }
            cmd_ablate(&m, &packet, &out).map(|_| ())
        }
    }
}

/// Parses a TOML or (by `.json` extension) JSON file. Parse failures are
/// configuration errors naming the file and the offending field.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OdgError::config(path.display().to_string(), e.to_string()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|reason| OdgError::config(path.display().to_string(), reason).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| OdgError::io(path, e))?;
    Ok(())
}

/// Built-in scene specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenePreset {
    /// Street with two moving cars and one parked car.
    Street,
    /// Street with four moving cars and no parked ones.
    MovingBoxes,
}

impl ScenePreset {
    pub fn spec(self, seed: u64) -> SceneSpec {
        match self {
            Self::Street => SceneSpec::street(seed),
            Self::MovingBoxes => SceneSpec::moving_boxes(seed),
        }
    }
}

pub fn cmd_gen(config: Option<&Path>, scene: ScenePreset, seed: Option<u64>, out: &Path) -> Result<FramePacket> {
    let spec = match config {
        Some(p) => {
            let mut s: SceneSpec = read_config(p)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            s
        }
        None => scene.spec(seed.unwrap_or(0)),
    };
    let packet = generate_scene(&spec)?;
    save_packet(&packet, out)?;
    log::info!(
        "wrote packet with {} frames x {} cameras to {}",
        packet.frames.len(),
        packet.cameras.len(),
        out.display()
    );
    Ok(packet)
}

/// Fits `cfg` on the packet in `packet_dir`, writing the step log, the resolved
/// config, the fitted state and (for pipeline runs) the network weights.
pub fn cmd_fit(cfg: &RunConfig, packet_dir: &Path, out: &Path) -> Result<FittedState> {
    cfg.validate()?;
    let packet = load_packet(packet_dir)?;
    create_dir(out)?;
    write_text(
        &out.join("config.json"),
        &serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;
    let log_path = out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| OdgError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let result = fit(&packet, cfg, &mut |r: &StepRecord| {
        writeln!(log, "{}", r.to_json()).map_err(|e| OdgError::io(&log_path, e))
    });
    log.flush().map_err(|e| OdgError::io(&log_path, e))?;
    let fitted = result?;
    fitted.state.save(out)?;
    if let Some(w) = &fitted.weights {
        w.save(out)?;
    }
    if let (Some(first), Some(last)) = (fitted.log.first(), fitted.log.last()) {
        log::info!(
            "loss {:.4} -> {:.4} over {} steps",
            first.loss.total,
            last.loss.total,
            cfg.steps
        );
    }
    Ok(fitted.state)
}

fn load_prediction(pred: &Path, packet: &FramePacket, stage: Option<usize>) -> Result<VoxelGrid> {
    if pred.is_dir() {
        let state = FittedState::load(pred)?;
        let st = match stage {
            Some(l) => state
                .stages
                .iter()
                .find(|s| s.stage == l)
                .ok_or_else(|| OdgError::InvalidArgument(format!("fitted state has no stage {l}")))?,
            None => state.final_stage()?,
        };
        Ok(predict_grid(&st.gaussians, &packet.grid)?)
    } else {
        Ok(VoxelGrid::load(pred)?)
    }
}

/// Scores a prediction and writes `metrics.json`.
pub fn cmd_eval(pred: &Path, packet_dir: &Path, stage: Option<usize>, out: &Path) -> Result<MetricReport> {
    let packet = load_packet(packet_dir)?;
    let grid = load_prediction(pred, &packet, stage)?;
    packet.grid.check_geometry(&grid)?;
    let mask = keyframe_visibility(&packet)?;
    let report = odg_core::metrics::evaluate(&grid, &packet.grid, Some(&mask), &eval_rays(&packet)?)?;
    create_dir(out)?;
    write_text(&out.join(METRICS_FILE), &report.to_json())?;
    log::info!("mIoU {:.4}, RayIoU {:.4}", report.miou, report.rayiou);
    Ok(report)
}

/// Image file names for one stage and camera.
pub fn render_names(stage: usize, cam: usize) -> (String, String) {
    (
        format!("stage{stage}_cam{cam}_depth.pgm"),
        format!("stage{stage}_cam{cam}_sem.ppm"),
    )
}

/// Renders every stage of a fitted state from every keyframe camera. Returns
/// the number of image pairs written.
pub fn cmd_render(state_dir: &Path, packet_dir: &Path, stride: usize, out: &Path) -> Result<usize> {
    if stride == 0 {
        return Err(OdgError::config("--stride", "must be at least 1").into());
    }
    let state = FittedState::load(state_dir)?;
    let packet = load_packet(packet_dir)?;
    if state.num_classes != packet.num_classes() {
        bail!(OdgError::data(
            state_dir.join(STATE_FILE),
            format!(
                "state has {} classes, packet has {}",
                state.num_classes,
                packet.num_classes()
            )
        ));
    }
    create_dir(out)?;
    let cams = packet.key_cameras(stride);
    let opts = RenderOptions::default();
    let mut pairs = 0;
    for st in &state.stages {
        for (c, cam) in cams.iter().enumerate() {
            let r = render_view_with(&st.gaussians, cam, &opts)?;
            let (d, s) = render_names(st.stage, c);
            write_depth_pgm(&r, &out.join(d))?;
            write_semantic_ppm(&r, &out.join(s))?;
            pairs += 1;
        }
    }
    log::info!("wrote {pairs} image pairs to {}", out.display());
    Ok(pairs)
}

/// A base run config and the ablation flags of each row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    #[serde(default)]
    pub ablation: Ablation,
}

/// One line of the comparison table. Failed rows carry `error` and no scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub ablation: Ablation,
    pub miou: Option<f64>,
    pub rayiou: Option<f64>,
    pub rayiou_set: Option<f64>,
    /// mIoU over visible voxels near annotated boxes.
    pub box_miou: Option<f64>,
    /// Final-stage depth error over valid keyframe pixels (meters).
    pub depth_l1: Option<f64>,
    pub error: Option<String>,
}

fn score_row(cfg: &RunConfig, packet_dir: &Path, packet: &FramePacket, dir: &Path) -> Result<AblationResult> {
    let state = cmd_fit(cfg, packet_dir, dir)?;
    let report = cmd_eval(dir, packet_dir, None, dir)?;
    let gauss = &state.final_stage()?.gaussians;
    let pred = predict_grid(gauss, &packet.grid)?;
    let region = box_region_mask(packet, BOX_REGION_MARGIN)?;
    Ok(AblationResult {
        name: String::new(),
        ablation: cfg.ablation,
        miou: Some(report.miou),
        rayiou: Some(report.rayiou),
        rayiou_set: Some(report.rayiou_set),
        box_miou: Some(miou(&pred, &packet.grid, Some(&region))?.miou),
        depth_l1: Some(depth_l1(gauss, packet, cfg.render_stride)?),
        error: None,
    })
}

fn row_dir_name(i: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{i:02}_{clean}")
}

/// Runs fit and eval for every row; a failing row is recorded and the rest
/// still run. Writes `ablation.json`.
pub fn cmd_ablate(m: &AblationMatrix, packet_dir: &Path, out: &Path) -> Result<Vec<AblationResult>> {
    if m.rows.len() < 2 {
        return Err(OdgError::config("rows", format!("need at least 2 rows, got {}", m.rows.len())).into());
    }
    m.base.validate()?;
    let packet = load_packet(packet_dir)?;
    create_dir(out)?;
    let mut table = Vec::with_capacity(m.rows.len());
    for (i, row) in m.rows.iter().enumerate() {
        let cfg = RunConfig {
            ablation: row.ablation,
            ..m.base.clone()
        };
        let dir = out.join("rows").join(row_dir_name(i, &row.name));
        let mut res = match score_row(&cfg, packet_dir, &packet, &dir) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("row {} failed: {e:#}", row.name);
                AblationResult {
                    name: String::new(),
                    ablation: row.ablation,
                    miou: None,
                    rayiou: None,
                    rayiou_set: None,
                    box_miou: None,
                    depth_l1: None,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        res.name = row.name.clone();
        table.push(res);
    }
    write_text(
        &out.join(ABLATION_FILE),
        &serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    Ok(table)
}
