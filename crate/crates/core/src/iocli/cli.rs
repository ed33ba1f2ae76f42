//! Command-line front end. Every subcommand reads its inputs, writes only
//! under the paths it is given, and maps failures to exit codes (1 for bad
//! input or usage, 2 for numerical failure).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::npy::{read_npy, read_npy_raw, write_npy};
use super::pgm::{read_pgm, write_pgm};
use crate::decoder::{load_checkpoint, save_checkpoint, Decoder};
use crate::episodic::{
    evaluate_split, predict, shot_prototype, synth_dataset, train_toy, Dataset, EncoderConfig, EvalConfig,
    PrototypeMode, Split, SynthConfig, ToyEncoder, TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, AblationEntry, Mask, MetricsRow, Report};
use crate::spectral::{
    affinity_matrix, build_hypercolumn, eigendecompose, fiedler_partition, laplacian, mean_prototypes, EigenSolver,
    Hypercolumn, LaplacianMode, PrototypeSet, Provenance, SpectralConfig,
};
use crate::tensorkit::Tensor;

/// Training configuration stored next to a decoder checkpoint.
pub const TRAIN_CONFIG: &str = "train_config.json";

#[derive(Parser, Debug)]
#[command(name = "afss", version, about = "Annotation-free few-shot segmentation")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Total number of classes.
        #[arg(long, default_value_t = 12)]
        classes: usize,
        /// How many of them are held out for testing.
        #[arg(long, default_value_t = 4)]
        test_classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Spectral decomposition of a feature map.
    Decompose {
        /// `[1, C, H, W]` or `[C, H, W]` feature map, or `[N, D]` rows on a
        /// square grid.
        #[arg(long)]
        features: PathBuf,
        /// Affinity grid side (defaults to the feature map's own size).
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, value_enum, default_value = "sym")]
        mode: LaplacianMode,
        #[arg(long, default_value_t = 5)]
        vectors: usize,
        #[arg(long, value_enum, default_value = "auto")]
        solver: EigenSolver,
        #[arg(long)]
        out: PathBuf,
    },
    /// Support prototype of a directory of support images.
    Prototype {
        /// `*.npy` images `[1, 3, H, W]`, optional `<stem>.pgm` masks.
        #[arg(long)]
        support_dir: PathBuf,
        #[arg(long, value_enum, default_value = "free")]
        mode: PrototypeMode,
        /// Checkpoint whose encoder and spectral settings to use.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic training of the decoder on a dataset directory.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Predict the query mask of one episode directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// `query.npy`, `support_*.npy` with optional masks, optional
        /// `query.pgm` for metrics.
        #[arg(long)]
        episode_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<PrototypeMode>,
        /// Precomputed prototype (from `prototype`) used instead of the
        /// supports.
        #[arg(long)]
        prototype: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum)]
        mode: Option<PrototypeMode>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate the four CLKA / MS-AG on-off variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving one checkpoint and log per variant.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        report: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Synth {
            out,
            classes,
            test_classes,
            per_class,
            size,
        } => {
            if test_classes == 0 || test_classes >= classes {
                return Err(Error::invalid(format!(
                    "need 0 < test classes < classes, got {test_classes} of {classes}"
                )));
            }
            let cfg = SynthConfig {
                train_classes: classes - test_classes,
                test_classes,
                per_class,
                image_size: size,
                seed: cli.seed.unwrap_or(0),
            };
            synth_dataset(&cfg)?.save(&out)
        }
        Command::Decompose {
            features,
            grid,
            mode,
            vectors,
            solver,
            out,
        } => decompose(&features, grid, mode, vectors, solver, cli.seed.unwrap_or(0), &out),
        Command::Prototype {
            support_dir,
            mode,
            ckpt,
            out,
        } => {
            let (enc, spectral) = match ckpt {
                Some(dir) => {
                    let cfg = read_train_config(&dir)?;
                    (cfg.encoder, cfg.spectral)
                }
                None => (EncoderConfig::default(), crate::episodic::toy_spectral()),
            };
            let enc = ToyEncoder::new(enc)?;
            let spectral = seeded(spectral, cli.seed);
            let protos = support_prototype(&enc, &support_dir, mode, &spectral)?;
            let flat = protos.concat();
            write_npy(&out, &Tensor::new(vec![flat.len()], flat)?)
        }
        Command::TrainToy { data, config, out, log } => {
            let cfg = load_train_config(config.as_deref(), cli.seed)?;
            let ds = Dataset::load(&data)?;
            let decoder = train_logged(&ds, &cfg, &log)?;
            write_checkpoint(&out, &decoder, &cfg)
        }
        Command::Infer {
            ckpt,
            episode_dir,
            mode,
            prototype,
            out,
        } => {
            let cfg = read_train_config(&ckpt)?;
            let decoder: Decoder<f32> = load_checkpoint(&ckpt)?;
            let enc = ToyEncoder::new(cfg.encoder.clone())?;
            let spectral = seeded(cfg.spectral.clone(), cli.seed);
            let protos = match prototype {
                Some(path) => {
                    let flat: Tensor<f64> = read_npy(&path)?;
                    PrototypeSet::split(flat.data(), enc.channels(), Provenance::Spectral)?
                }
                None => support_prototype(&enc, &episode_dir, mode.unwrap_or(cfg.mode()), &spectral)?,
            };
            let query: Tensor<f32> = read_npy(episode_dir.join("query.npy"))?;
            let (_, _, h, w) = query.dims4()?;
            let pred = predict(&decoder, &protos, &enc.encode(&query)?, h, w, 0.5)?;
            write_pgm(&out, &pred)?;
            let gt_path = episode_dir.join("query.pgm");
            if gt_path.exists() {
                let row = MetricsRow::compute(0, &pred, &read_pgm(&gt_path)?)?;
                println!("{}", serde_json::to_string(&row)?);
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            split,
            k,
            mode,
            report,
        } => {
            let cfg = read_train_config(&ckpt)?;
            let decoder: Decoder<f32> = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let eval_cfg = EvalConfig {
                k,
                mode: mode.unwrap_or(cfg.mode()),
                seed: cli.seed.unwrap_or(0),
                threads,
                spectral: cfg.spectral.clone(),
                ..Default::default()
            };
            let rows = evaluate_split(&ds, split, &decoder, &ToyEncoder::new(cfg.encoder)?, &eval_cfg)?;
            let rep = evaluate(&rows);
            print!("{}", rep.render_text());
            write_json(&report, &rep)
        }
        Command::Ablate {
            data,
            config,
            out,
            k,
            report,
        } => {
            let base = load_train_config(config.as_deref(), cli.seed)?;
            let ds = Dataset::load(&data)?;
            let eval_cfg = EvalConfig {
                k,
                mode: base.mode(),
                seed: cli.seed.unwrap_or(0),
                threads,
                spectral: base.spectral.clone(),
                ..Default::default()
            };
            let enc = ToyEncoder::new(base.encoder.clone())?;
            let mut full: Option<Report> = None;
            let mut table = Vec::new();
            for (use_clka, use_msag) in [(true, true), (true, false), (false, true), (false, false)] {
                let mut cfg = base.clone();
                cfg.decoder.use_clka = use_clka;
                cfg.decoder.use_msag = use_msag;
                let name = format!("clka{}_msag{}", use_clka as u8, use_msag as u8);
                let dir = out.join(&name);
                let decoder = train_logged(&ds, &cfg, &out.join(format!("{name}.jsonl")))
                    .map_err(|e| e.context(format!("variant {name}")))?;
                write_checkpoint(&dir, &decoder, &cfg)?;
                let rep = evaluate(&evaluate_split(&ds, Split::Test, &decoder, &enc, &eval_cfg)?);
                eprintln!("{name}: mIoU {:.4}", rep.overall.miou);
                table.push(AblationEntry {
                    use_clka,
                    use_msag,
                    miou: rep.overall.miou,
                });
                full.get_or_insert(rep);
            }
            let mut rep = full.expect("four variants ran");
            rep.ablation = Some(table);
            print!("{}", rep.render_text());
            write_json(&report, &rep)
        }
    }
}

fn seeded(mut spectral: SpectralConfig, seed: Option<u64>) -> SpectralConfig {
    if let Some(s) = seed {
        spectral.seed = s;
    }
    spectral
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.decoder.seed = s;
        cfg.spectral.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_train_config(ckpt: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json(&ckpt.join(TRAIN_CONFIG))?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_checkpoint(dir: &Path, decoder: &Decoder<f32>, cfg: &TrainConfig) -> Result<()> {
    save_checkpoint(dir, decoder)?;
    write_json(&dir.join(TRAIN_CONFIG), cfg)
}

/// Trains while streaming one JSON line per episode to `log`.
fn train_logged(ds: &Dataset, cfg: &TrainConfig, log: &Path) -> Result<Decoder<f32>> {
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(log).map_err(|e| Error::io(log, e))?;
    let mut w = BufWriter::new(file);
    let out = train_toy(ds, cfg, |rec| {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(log, e))?;
        if let Some(m) = rec.heldout_miou {
            eprintln!("episode {}: held-out mIoU {m:.4}", rec.episode);
        }
        Ok(())
    })?;
    w.flush().map_err(|e| Error::io(log, e))?;
    Ok(out.decoder)
}

/// Mean prototype of the `*.npy` images in `dir` other than `query.npy`.
fn support_prototype(
    enc: &ToyEncoder,
    dir: &Path,
    mode: PrototypeMode,
    spectral: &SpectralConfig,
) -> Result<PrototypeSet> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "npy") && p.file_stem().is_some_and(|s| s != "query"))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::invalid(format!(
            "no support images (*.npy) in {}",
            dir.display()
        )));
    }
    let sets = images
        .iter()
        .map(|path| {
            let image: Tensor<f32> = read_npy(path)?;
            let mask_path = path.with_extension("pgm");
            let mask: Option<Mask> = if mask_path.exists() {
                Some(read_pgm(&mask_path)?)
            } else {
                None
            };
            let pyramid = enc.encode(&image)?;
            shot_prototype(&pyramid, mask.as_ref(), mode, spectral).map_err(|e| e.context(path.display().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_prototypes(&sets)
}

#[derive(Serialize)]
struct Eigenvalues<'a> {
    mode: LaplacianMode,
    grid_h: usize,
    grid_w: usize,
    seed: u64,
    eigenvalues: &'a [f64],
}

fn decompose(
    features: &Path,
    grid: Option<usize>,
    mode: LaplacianMode,
    vectors: usize,
    solver: EigenSolver,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let raw = read_npy_raw(features)?;
    let hc = match raw.shape[..] {
        [n, d] => {
            let side = grid.unwrap_or_else(|| (n as f64).sqrt().round() as usize);
            if side * side != n {
                return Err(Error::invalid(format!(
                    "{n} feature rows do not fill a {side}x{side} grid"
                )));
            }
            Hypercolumn::from_rows(side, side, d, raw.data)?
        }
        [c, h, w] | [1, c, h, w] => {
            let t: Tensor<f64> = Tensor::new(vec![1, c, h, w], raw.data)?;
            let (gh, gw) = grid.map_or((h, w), |g| (g, g));
            build_hypercolumn(&[t], gh, gw)?
        }
        _ => {
            return Err(Error::invalid(format!(
                "features must be [N, D], [C, H, W] or [1, C, H, W], got {:?}",
                raw.shape
            )))
        }
    };
    let (gh, gw) = (hc.grid_h, hc.grid_w);
    let lap = laplacian(&affinity_matrix(&hc), mode)?;
    let eigen = eigendecompose(&lap, vectors, solver, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("eigenvalues.json"),
        &Eigenvalues {
            mode,
            grid_h: gh,
            grid_w: gw,
            seed,
            eigenvalues: &eigen.eigenvalues,
        },
    )?;
    for (i, v) in eigen.eigenvectors.iter().enumerate() {
        write_npy(
            out.join(format!("eigvec_{i}.npy")),
            &Tensor::new(vec![gh, gw], v.clone())?,
        )?;
    }
    let part = fiedler_partition(&eigen, gh, gw)?;
    write_pgm(out.join("partition.pgm"), &Mask::new(gh, gw, part.mask.clone())?)?;
    write_json(&out.join("bbox.json"), &part.bbox)
}
