use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Parser, Subcommand};
use serde_json::json;

use fus3d_core::bench::corridor_sweep;
use fus3d_core::config::parse_f64;
use fus3d_core::formats::{load_labels, load_prompts, read_labels, save_labels, save_prompts, write_labels, LABEL_MAGIC};
use fus3d_core::metrics::evaluate;
use fus3d_core::pipeline::{fuse_global, Mapper, MappingMode};
use fus3d_core::snapshot::{MapSnapshot, SNAPSHOT_MAGIC};
use fus3d_core::stream::StreamReader;
use fus3d_core::synth::scenes::{self, OrbitOptions};
use fus3d_core::synth::{default_intrinsics, generate_stream, NoiseModel, Synthesizer};
use fus3d_core::{predict_classes, similarity_map, Error, LayerSelection, MapConfig, PromptSet, Result};

/// Dual-layer semantic voxel mapping.
#[derive(Parser)]
#[command(name = "fus3d", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a map snapshot from a frame stream.
    Map {
        /// Stream file, or `-` for stdin.
        #[arg(default_value = "-")]
        stream: String,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "global")]
        mode: String,
        /// Meters, or `inf`.
        #[arg(long)]
        window_radius: Option<String>,
        #[arg(long)]
        fusion_period: Option<u32>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Overridden by FUS3D_SEED when set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Snapshot path, or `-` for stdout.
        #[arg(long, default_value = "-")]
        out: String,
        /// Optional run report JSON path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run whole-map fusion on a snapshot and store the fused sections.
    Fuse {
        #[arg(default_value = "-")]
        snapshot: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Similarity CSV for one label, or predicted classes for all labels.
    Query {
        #[arg(default_value = "-")]
        snapshot: String,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value = "instance-fused")]
        layer: String,
        /// Emit `ix,iy,iz,similarity` for this label instead of predictions.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Score predictions (label file or snapshot) against ground truth.
    Eval {
        /// Label file or snapshot, or `-` for stdin.
        #[arg(default_value = "-")]
        input: String,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Layer used when the input is a snapshot.
        #[arg(long, default_value = "instance-fused")]
        layer: String,
        #[arg(long)]
        no_background: bool,
    },
    /// Generate a synthetic stream with prompts and ground truth.
    Synth {
        #[arg(long, default_value = "orbit")]
        scene: String,
        #[arg(long, default_value = "default")]
        noise_profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        patch_size: u32,
        #[arg(long, default_value_t = 0.05)]
        voxel_size: f64,
        /// Orbit frame count.
        #[arg(long, default_value_t = 120)]
        frames: usize,
        /// Corridor length in meters.
        #[arg(long, default_value_t = 20.0)]
        length: f64,
        #[arg(long, default_value_t = 1.0)]
        objects_per_meter: f64,
        #[arg(long, default_value = "-")]
        out: String,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Corridor sweep reporting semantic bytes per mode.
    BenchMemory {
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        lengths: Vec<f64>,
        #[arg(long, default_value_t = 6.0)]
        window_radius: f64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        objects_per_meter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string().trim().replace('\n', " "), None);
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let offset = match &e {
                Error::Parse { offset, .. } => Some(*offset),
                _ => None,
            };
            report_error(e.kind(), &e.to_string(), offset);
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str, offset: Option<u64>) {
    let mut err = json!({ "kind": kind, "message": message });
    if let Some(o) = offset {
        err["offset"] = json!(o);
    }
    eprintln!("{}", json!({ "error": err }));
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Map { stream, config, mode, window_radius, fusion_period, lambda, seed, out, report } => {
            let mode = MappingMode::parse(&mode)
                .ok_or_else(|| Error::Config(format!("unknown mode {mode:?}, expected global or sliding-window")))?;
            let seed = effective_seed(seed)?;
            let mut reader = StreamReader::new(input(&stream)?)?;
            let h = *reader.header();

            let (mut cfg, explicit) = match &config {
                Some(p) => MapConfig::parse_kv(&std::fs::read_to_string(p)?)?,
                None => (MapConfig::default(), Vec::new()),
            };
            if !explicit.iter().any(|k| k == "embedding_dim") {
                cfg.embedding_dim = h.geometry.dim;
            }
            if !explicit.iter().any(|k| k == "patch_size") {
                cfg.patch_size = h.geometry.patch_size;
            }
            if let Some(r) = window_radius {
                cfg.window_radius =
                    parse_f64(&r).ok_or_else(|| Error::Config(format!("invalid window radius {r:?}")))?;
            }
            if let Some(p) = fusion_period {
                cfg.fusion_period = p;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            cfg.validate()?;
            Mapper::check_geometry(&cfg, h.geometry.dim, h.geometry.patch_size)?;
            let mut mapper = Mapper::new(cfg, h.intrinsics, mode, seed)?;

            // Parse the next frame on a second thread while this one integrates.
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(1);
                let parser = s.spawn(move || -> Result<()> {
                    while let Some(frame) = reader.next_frame()? {
                        if tx.send(frame).is_err() {
                            break;
                        }
                    }
                    Ok(())
                });
                let mut result = Ok(());
                for frame in rx.iter() {
                    if let Err(e) = mapper.process_frame(&frame) {
                        result = Err(e);
                        break;
                    }
                }
                drop(rx);
                let parsed = parser.join().expect("parser thread panicked");
                result.and(parsed)
            })?;
            mapper.finish();

            if let Some(p) = report {
                let text = serde_json::to_string_pretty(mapper.report()).expect("report serializes");
                std::fs::write(p, text + "\n")?;
            }
            write_output(&out, |w| mapper.into_snapshot().write(w))
        }
        Cmd::Fuse { snapshot, lambda, out } => {
            let mut snap = MapSnapshot::read(input(&snapshot)?)?;
            if let Some(l) = lambda {
                snap.config.lambda = l;
                snap.config.validate()?;
            }
            let fused = fuse_global(&snap.dense, &mut snap.instances, snap.config.lambda);
            snap.fused_dense = Some(fused.dense);
            write_output(&out, |w| snap.write(w))
        }
        Cmd::Query { snapshot, prompts, layer, label, out } => {
            let layer = parse_layer(&layer)?;
            let snap = MapSnapshot::read(input(&snapshot)?)?;
            let prompts = load_prompts(&prompts)?;
            check_prompt_dim(&prompts, snap.dim())?;
            match label {
                Some(name) => {
                    let i = prompts.index_of(&name).ok_or_else(|| Error::InvalidInput(format!("unknown label {name:?}")))?;
                    let sims = similarity_map(&snap.view(), layer, &prompts.embeddings[i])?;
                    write_output(&out, |w| {
                        writeln!(w, "ix,iy,iz,similarity")?;
                        for (k, s) in &sims {
                            writeln!(w, "{},{},{},{}", k.ix, k.iy, k.iz, s)?;
                        }
                        Ok(())
                    })
                }
                None => {
                    let pred = predict_classes(&snap.view(), layer, &prompts)?;
                    write_output(&out, |w| write_labels(w, snap.config.voxel_size, &pred))
                }
            }
        }
        Cmd::Eval { input: src, gt, prompts, layer, no_background } => {
            let mut bytes = Vec::new();
            input(&src)?.read_to_end(&mut bytes)?;
            let prompts = load_prompts(&prompts)?;
            let gt = load_labels(&gt)?;
            let predictions = if bytes.starts_with(SNAPSHOT_MAGIC) {
                let snap = MapSnapshot::read(bytes.as_slice())?;
                check_prompt_dim(&prompts, snap.dim())?;
                check_voxel_size(snap.config.voxel_size, gt.voxel_size)?;
                predict_classes(&snap.view(), parse_layer(&layer)?, &prompts)?
            } else if bytes.starts_with(LABEL_MAGIC) {
                let labels = read_labels(bytes.as_slice())?;
                check_voxel_size(labels.voxel_size, gt.voxel_size)?;
                labels.labels
            } else {
                return Err(Error::Parse { offset: 0, message: "input is neither a snapshot nor a label file".into() });
            };
            let report = evaluate(&predictions, &gt, &prompts, no_background)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Cmd::Synth {
            scene,
            noise_profile,
            seed,
            dim,
            patch_size,
            voxel_size,
            frames,
            length,
            objects_per_meter,
            out,
            prompts,
            gt,
        } => {
            let seed = effective_seed(seed)?;
            let noise = NoiseModel::profile(&noise_profile)?;
            let (scene, traj) = match scene.as_str() {
                "orbit" => scenes::orbit_room(dim, seed, OrbitOptions { frames, ..OrbitOptions::default() })?,
                "corridor" => scenes::corridor(length, objects_per_meter, dim, seed)?,
                "apartment" => scenes::apartment(dim, seed)?,
                "single-box" => scenes::single_box(dim, seed)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown scene {other:?}, expected orbit, corridor, apartment or single-box"
                    )))
                }
            };
            let synth = Synthesizer { scene: &scene, intrinsics: default_intrinsics(), patch_size, noise, seed };
            if let Some(p) = prompts {
                save_prompts(&p, &scene.prompts())?;
            }
            // Side files land before stdout closes, so downstream stages in a
            // pipe can rely on them once their input ends.
            write_output(&out, |w| {
                let result = generate_stream(&synth, &traj, voxel_size, w)?;
                if let Some(p) = gt {
                    save_labels(&p, voxel_size, &result.gt.labels)?;
                }
                Ok(())
            })
        }
        Cmd::BenchMemory { lengths, window_radius, dim, objects_per_meter, seed } => {
            let seed = effective_seed(seed)?;
            let cfg = MapConfig { embedding_dim: dim, window_radius, ..MapConfig::default() };
            let sweep = corridor_sweep(&lengths, objects_per_meter, &cfg, seed)?;
            println!("{}", serde_json::to_string_pretty(&sweep).expect("sweep serializes"));
            Ok(())
        }
    }
}

fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var("FUS3D_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("FUS3D_SEED is not an unsigned integer: {v:?}"))),
        Err(_) => Ok(flag),
    }
}

fn parse_layer(s: &str) -> Result<LayerSelection> {
    LayerSelection::parse(s).ok_or_else(|| {
        Error::Config(format!("unknown layer {s:?}, expected dense, dense-fused, instance or instance-fused"))
    })
}

fn check_prompt_dim(prompts: &PromptSet, dim: usize) -> Result<()> {
    match prompts.dim() {
        Some(d) if d != dim => Err(Error::Config(format!("prompt dimension {d} differs from map dimension {dim}"))),
        None => Err(Error::InvalidInput("prompt file has no labels".into())),
        _ => Ok(()),
    }
}

fn check_voxel_size(pred: f64, gt: f64) -> Result<()> {
    // label files store f32 voxel sizes
    if (pred - gt).abs() > 1e-6 * gt.abs().max(1.0) {
        return Err(Error::Config(format!("voxel size {pred} differs from ground truth {gt}")));
    }
    Ok(())
}

fn input(path: &str) -> Result<Box<dyn Read + Send>> {
    Ok(if path == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(File::open(Path::new(path))?))
    })
}

fn write_output(path: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut w: Box<dyn Write> = if path == "-" {
        Box::new(BufWriter::new(io::stdout().lock()))
    } else {
        Box::new(BufWriter::new(File::create(path)?))
    };
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
