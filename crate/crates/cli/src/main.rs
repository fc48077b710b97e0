use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cpggan::dataset::{read_split, read_splits, split_dataset, write_split, ImageRecord};
use cpggan::detector::{ground_truth, train_detector, AnchorSet, DetectorConfig};
use cpggan::embed::{extract_crops, extract_images, tsne_embed, Category, EmbeddingInput, TsneConfig};
use cpggan::gan::{build_schedule, GanConfig};
use cpggan::harness::{run_matrix, MatrixConfig};
use cpggan::img2img::{load_img2img, train_img2img, UNetConfig};
use cpggan::metrics::{evaluate, format_detections, write_results_csv, ResultsRow};
use cpggan::nn::read_checkpoint_header;
use cpggan::phantom::{generate_corpus, PhantomSpec};
use cpggan::trainer::{load_cpggan, sample_images, train_gan, GanTrainConfig, SampleRequest};
use cpggan::vtt::{write_pool, TestKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

mod plot;

#[derive(Parser)]
#[command(name = "cpggan", version, about = "Box-conditioned GAN augmentation for grid object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Cpggan,
    Img2img,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMode {
    Crops,
    Images,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom corpus and write train/val/test splits.
    PhantomGen {
        /// TOML phantom spec; the desk preset when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate lesion-free slices into a single `normal` split.
        #[arg(long)]
        normal: bool,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a box-conditioned generator on the train split.
    TrainGan {
        /// TOML with `[model]` and `[train]` tables; desk presets fill gaps.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Dataset root holding a `normal` split, used when the config
        /// enables `include_normals`.
        #[arg(long)]
        normals: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "cpggan")]
        arch: Arch,
        /// Flip labels at random with this probability instead of on the
        /// fixed period.
        #[arg(long)]
        flip_prob: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate synthetic records from a trained generator.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root whose train split supplies the box layouts.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        augment: bool,
        /// Minimum interior-over-ring contrast in gray levels; 0 disables.
        #[arg(long, default_value_t = 20.0)]
        filter_contrast: f64,
        #[arg(long, default_value = "syn")]
        tag: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and select a detector, then score it on the test split.
    TrainDetector {
        /// First root supplies train/val/test; later roots add their
        /// `synthetic` split to training.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        /// TOML detector config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `auto` or `w,h;w,h;...` in image pixels.
        #[arg(long, default_value = "auto")]
        anchors: String,
        #[arg(long)]
        train_res: Option<i64>,
        #[arg(long)]
        eval_res: Option<i64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the augmentation experiment matrix.
    Experiment {
        #[arg(long)]
        matrix: PathBuf,
        /// Results CSV; run artifacts go to a sibling `<stem>_runs` directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed real and synthetic images in 2-D.
    Tsne {
        #[arg(long)]
        real: PathBuf,
        #[arg(long, default_value = "train")]
        real_split: String,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        synthetic_normal: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "crops")]
        mode: EmbedMode,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 500)]
        per_category: usize,
        #[arg(long, default_value_t = 100.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_png: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Write rater images for one pool of a Visual Turing Test.
    VttPrepare {
        #[arg(long)]
        data: PathBuf,
        /// Split to draw from (`test`, `synthetic`, ...).
        #[arg(long)]
        split: String,
        #[arg(long)]
        kind: TestKind,
        #[arg(long, value_parser = ["real", "synthetic"])]
        label: String,
        #[arg(long)]
        pools: PathBuf,
    },
    /// Serve Visual Turing Test sessions over HTTP.
    VttServe {
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        journal: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Let raters change earlier answers.
        #[arg(long)]
        allow_revisit: bool,
    },
}

#[derive(Serialize, Deserialize)]
struct GanRunConfig<M> {
    model: M,
    train: GanTrainConfig,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gan_run_config<M: DeserializeOwned + Serialize>(path: Option<&Path>, model: M) -> Result<GanRunConfig<M>> {
    let base = GanRunConfig {
        model,
        train: GanTrainConfig::desk(),
    };
    let Some(path) = path else { return Ok(base) };
    // Overlay the file on the presets so partial configs are accepted.
    let mut merged = toml::Value::try_from(&base)?;
    let file: toml::Value = read_toml(path)?;
    merge(&mut merged, file);
    Ok(merged.try_into()?)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_anchors(s: &str) -> Result<Option<AnchorSet>> {
    if s == "auto" {
        return Ok(None);
    }
    let anchors = s
        .split(';')
        .map(|pair| {
            let (w, h) = pair.split_once(',').context("anchor must be w,h")?;
            Ok((w.trim().parse()?, h.trim().parse()?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(Some(AnchorSet::new(anchors)?))
}

fn phantom_gen(spec: Option<&Path>, seed: u64, normal: bool, split_seed: u64, out: &Path) -> Result<()> {
    let mut spec = match spec {
        Some(p) => read_toml(p)?,
        None => PhantomSpec::desk(),
    };
    if normal {
        spec.tumor_count_range = [0, 0];
    }
    let records = generate_corpus(&spec, seed)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("phantom.toml"), toml::to_string_pretty(&spec)?)?;
    if normal {
        write_split(out, "normal", &records)?;
        println!("{} normal slices", records.len());
        return Ok(());
    }
    let splits = split_dataset(records, (0.7, 0.1, 0.2), split_seed)?;
    for (name, recs) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_split(out, name, recs)?;
        println!("{name}: {} slices", recs.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_gan_cmd(
    config: Option<&Path>,
    data: &Path,
    normals: Option<&Path>,
    out: &Path,
    arch: Arch,
    flip_prob: Option<f64>,
    steps: Option<u64>,
) -> Result<()> {
    let train = read_split(data, "train")?;
    let normals = match normals {
        Some(root) => read_split(root, "normal")?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(out)?;
    let adjust = |t: &mut GanTrainConfig| {
        if flip_prob.is_some() {
            t.flip_prob = flip_prob;
        }
        if let Some(s) = steps {
            t.total_steps = s;
        }
    };
    let (history, path) = match arch {
        Arch::Cpggan => {
            let mut cfg = gan_run_config(config, GanConfig::desk())?;
            adjust(&mut cfg.train);
            std::fs::write(out.join("gan.toml"), toml::to_string_pretty(&cfg)?)?;
            let schedule = build_schedule(cfg.model.target_resolution, cfg.train.fade_images, cfg.train.stable_images)?;
            let trained = train_gan(&cfg.model, &cfg.train, &train, &normals, &schedule, Some(out))?;
            (trained.history, out.join("cpggan-final.ckpt"))
        }
        Arch::Img2img => {
            let mut cfg = gan_run_config(config, UNetConfig::default())?;
            adjust(&mut cfg.train);
            std::fs::write(out.join("gan.toml"), toml::to_string_pretty(&cfg)?)?;
            let trained = train_img2img(&cfg.model, &cfg.train, &train, &normals, Some(out))?;
            (trained.history, out.join("img2img-final.ckpt"))
        }
    };
    let mut csv = String::from("step,stage,alpha,critic_loss,gradient_penalty,generator_loss,flipped\n");
    for r in &history {
        let g = r.generator_loss.map(|g| g.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{g},{}\n",
            r.step, r.stage, r.alpha, r.critic_loss, r.gradient_penalty, r.flipped
        ));
    }
    std::fs::write(out.join("losses.csv"), csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(ckpt: &Path, data: &Path, count: usize, augment: bool, filter: f64, tag: String, seed: u64, out: &Path) -> Result<()> {
    let source = read_split(data, "train")?;
    let request = SampleRequest {
        count,
        augment,
        quality_filter: filter,
        tag,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = match read_checkpoint_header(ckpt)?.kind.as_str() {
        "cpggan" => {
            let g = load_cpggan(ckpt)?;
            sample_images(&g.model, g.final_position(), &request, &source, &mut rng)?
        }
        "img2img" => {
            let g = load_img2img(ckpt)?;
            sample_images(&g.model, g.final_position(), &request, &source, &mut rng)?
        }
        other => bail!("{} holds a {other} checkpoint, not a generator", ckpt.display()),
    };
    write_split(out, "synthetic", &outcome.records)?;
    println!(
        "{} images written ({} attempts, acceptance {:.3})",
        outcome.records.len(),
        outcome.attempts,
        outcome.acceptance_rate()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_detector_cmd(
    data: &[PathBuf],
    config: Option<&Path>,
    anchors: &str,
    train_res: Option<i64>,
    eval_res: Option<i64>,
    steps: Option<u64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg: DetectorConfig = match config {
        Some(p) => read_toml(p)?,
        None => DetectorConfig::desk(),
    };
    cfg.anchors = parse_anchors(anchors)?;
    cfg.train_res = train_res.unwrap_or(cfg.train_res);
    cfg.eval_res = eval_res.unwrap_or(cfg.eval_res);
    cfg.steps = steps.unwrap_or(cfg.steps);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let splits = read_splits(&data[0])?;
    let mut train = splits.train.clone();
    for extra in &data[1..] {
        let syn = read_split(extra, "synthetic")?;
        println!("adding {} synthetic images from {}", syn.len(), extra.display());
        train.extend(syn);
    }
    std::fs::create_dir_all(out)?;
    let trained = train_detector(&cfg, &train, &splits.val, Some(out))?;
    std::fs::write(out.join("detector.toml"), toml::to_string_pretty(&serde_json::from_value::<DetectorConfig>(trained.header.config.clone())?)?)?;
    println!("selected step {}", trained.selected.step);
    if splits.test.is_empty() {
        return Ok(());
    }
    let dets = trained.net.detect_records(&splits.test, cfg.eval_res, cfg.conf_threshold, cfg.nms_iou)?;
    std::fs::write(out.join("test_detections.txt"), format_detections(&dets))?;
    let result = evaluate(&dets, &ground_truth(&splits.test))?;
    let row = ResultsRow {
        setup: "detector".into(),
        result,
    };
    write_results_csv(&out.join("results.csv"), std::slice::from_ref(&row))?;
    println!("{}", row.csv_line());
    Ok(())
}

fn experiment(matrix: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(matrix).with_context(|| format!("reading {}", matrix.display()))?;
    let mut config = MatrixConfig::from_toml(&text)?;
    config.resolve_paths(matrix.parent().unwrap_or(Path::new(".")));
    let data = config.data.clone().context("matrix config needs a `data` root")?;
    let splits = read_splits(&data)?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "results".into());
    let work = out.with_file_name(format!("{stem}_runs"));
    let outcome = run_matrix(&config, &splits, &work)?;
    write_results_csv(out, &outcome.rows)?;
    for (setup, reason) in &outcome.skipped {
        println!("skipped {setup}: {reason}");
    }
    if outcome.audits.iter().any(|a| !a.is_clean()) {
        bail!("test data leaked into training; see {}", work.join("leakage.json").display());
    }
    println!("{} rows written to {}", outcome.rows.len(), out.display());
    Ok(())
}

fn read_any(root: &Path, preferred: &str) -> Result<Vec<ImageRecord>> {
    for split in [preferred, "synthetic", "normal", "train"] {
        if root.join(format!("{split}.txt")).exists() {
            return Ok(read_split(root, split)?);
        }
    }
    bail!("no annotation file under {}", root.display())
}

#[allow(clippy::too_many_arguments)]
fn tsne_cmd(
    real: &Path,
    real_split: &str,
    synthetic: Option<&Path>,
    synthetic_normal: Option<&Path>,
    mode: EmbedMode,
    size: usize,
    per_category: usize,
    tsne: TsneConfig,
    out_png: &Path,
    out_csv: &Path,
) -> Result<()> {
    let mut input = EmbeddingInput::default();
    let sources = [
        (Some(real), Category::Real, real_split),
        (synthetic, Category::Synthetic, "synthetic"),
        (synthetic_normal, Category::SyntheticNormal, "synthetic"),
    ];
    for (root, category, split) in sources {
        let Some(root) = root else { continue };
        let records = read_any(root, split)?;
        let part = match mode {
            EmbedMode::Crops => extract_crops(&records, category, size)?.0,
            EmbedMode::Images => extract_images(&records, category, size),
        };
        input.extend(part)?;
    }
    let input = input.limit_per_category(per_category);
    println!("embedding {} vectors of dimension {}", input.len(), input.dim);
    let points = tsne_embed(&input.vectors, &tsne)?;
    let mut csv = String::from("x,y,label\n");
    for (p, l) in points.iter().zip(&input.labels) {
        csv.push_str(&format!("{},{},{}\n", p[0], p[1], l.as_str()));
    }
    std::fs::write(out_csv, csv)?;
    plot::scatter(&points, &input.labels, 800).save(out_png)?;
    for c in [Category::Real, Category::Synthetic, Category::SyntheticNormal] {
        let [r, g, b] = plot::color(c);
        println!("{}: rgb({r},{g},{b})", c.as_str());
    }
    Ok(())
}

fn vtt_prepare(data: &Path, split: &str, kind: TestKind, label: &str, pools: &Path) -> Result<()> {
    let records = read_split(data, split)?;
    let dir = pools.join(kind.as_str()).join(label);
    let names = write_pool(&records, kind, &dir)?;
    println!("{} images in {}", names.len(), dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::PhantomGen {
            spec,
            seed,
            normal,
            split_seed,
            out,
        } => phantom_gen(spec.as_deref(), seed, normal, split_seed, &out),
        Command::TrainGan {
            config,
            data,
            normals,
            out,
            arch,
            flip_prob,
            steps,
        } => train_gan_cmd(config.as_deref(), &data, normals.as_deref(), &out, arch, flip_prob, steps),
        Command::Sample {
            ckpt,
            data,
            count,
            augment,
            filter_contrast,
            tag,
            seed,
            out,
        } => sample_cmd(&ckpt, &data, count, augment, filter_contrast, tag, seed, &out),
        Command::TrainDetector {
            data,
            config,
            anchors,
            train_res,
            eval_res,
            steps,
            seed,
            out,
        } => train_detector_cmd(&data, config.as_deref(), &anchors, train_res, eval_res, steps, seed, &out),
        Command::Experiment { matrix, out } => experiment(&matrix, &out),
        Command::Tsne {
            real,
            real_split,
            synthetic,
            synthetic_normal,
            mode,
            size,
            per_category,
            perplexity,
            iterations,
            seed,
            out_png,
            out_csv,
        } => {
            let tsne = TsneConfig {
                perplexity,
                iterations,
                seed,
                ..TsneConfig::default()
            };
            tsne_cmd(
                &real,
                &real_split,
                synthetic.as_deref(),
                synthetic_normal.as_deref(),
                mode,
                size,
                per_category,
                tsne,
                &out_png,
                &out_csv,
            )
        }
        Command::VttPrepare {
            data,
            split,
            kind,
            label,
            pools,
        } => vtt_prepare(&data, &split, kind, &label, &pools),
        Command::VttServe {
            pools,
            journal,
            addr,
            allow_revisit,
        } => {
            let config = vtt_server::ServerConfig {
                pool_root: pools,
                journal_dir: journal,
                allow_revisit,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(vtt_server::serve(config, addr))?;
            Ok(())
        }
    }
}
