#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use rfl_lab::ensemble::{ensemble_pipeline, FusionConfig, ScoreMode, TtaPass};
use rfl_lab::experiment::{report_svgs, run_experiment, seed_datasets, ExperimentConfig};
use rfl_lab::geometry::{clip_boxes_to_tile, tile_grid, SceneDims, TtaTransform};
use rfl_lab::gradcheck::{run_gradcheck, GradCheckConfig};
use rfl_lab::loss::{cutoff_factor, loss_value, LossKind, LossParams, ProbPoint};
use rfl_lab::metrics::{map_and_mrecall, read_detections, read_jsonl, BBox, GroundTruth, HasBox};
use rfl_lab::sampling::write_csv;

#[derive(Parser)]
#[command(name = "rfl-lab", version, about = "Focal-loss variants, long-tail experiments and detection tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print CE, FL and RFL over a grid of pt values as CSV.
    LossTable {
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        th: f64,
        #[arg(long, default_value_t = 99)]
        steps: usize,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Half-width of the band around the RFL threshold that is skipped.
        #[arg(long)]
        skip_kink_band: Option<f64>,
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
    /// Run a multi-arm experiment from a JSON config.
    Experiment {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Seed used when neither the config nor --seeds give one.
        #[arg(long, env = "RFL_LAB_SEED")]
        fallback_seed: Option<u64>,
        /// Also write SVG plots.
        #[arg(long)]
        svg: bool,
        /// Record wall-clock time (the report is then not reproducible).
        #[arg(long)]
        timing: bool,
        /// Also write each seed's training and test sets as CSV.
        #[arg(long)]
        write_data: bool,
    },
    /// Split scene boxes into overlapping tiles.
    Tile {
        /// Scene size as WIDTHxHEIGHT.
        #[arg(long)]
        scene: SceneDims,
        #[arg(long)]
        tile: f64,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        /// JSONL file with one object per line carrying a "box" field.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        min_visibility: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fuse detections from several TTA passes or models.
    Fuse {
        /// Detection JSONL, one per pass.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Source tag per input; defaults to the file stem.
        #[arg(long = "source")]
        sources: Vec<String>,
        /// Transform per input, e.g. `identity`, `fliph`, `rot90+scale0.5`.
        #[arg(long = "transform")]
        transforms: Vec<TtaTransform>,
        /// Scene size as WIDTHxHEIGHT.
        #[arg(long)]
        scene: SceneDims,
        /// JSON fusion config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        min_votes: Option<usize>,
        #[arg(long)]
        score_mode: Option<ScoreMode>,
        /// Output JSONL; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute mAP and mRecall of detections against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
}

/// A JSONL record kept verbatim apart from its "box".
#[derive(Clone)]
struct Record(Value);

impl HasBox for Record {
    fn bbox(&self) -> BBox {
        serde_json::from_value(self.0["box"].clone()).expect("validated on read")
    }

    fn with_bbox(&self, bbox: BBox) -> Self {
        let mut v = self.0.clone();
        v["box"] = serde_json::to_value(bbox).expect("boxes serialise");
        Record(v)
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let values: Vec<Value> = read_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value::<BBox>(v["box"].clone())
                .with_context(|| format!("{} line {}: bad or missing \"box\"", path.display(), i + 1))?;
            Ok(Record(v))
        })
        .collect()
}

fn write_lines<W: Write>(mut w: W, values: impl IntoIterator<Item = Value>) -> Result<()> {
    for v in values {
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn loss_table(gamma: f64, th: f64, steps: usize) -> Result<()> {
    if steps == 0 {
        bail!("--steps must be positive");
    }
    let ce = LossParams::cross_entropy();
    let fl = LossParams::focal(gamma)?;
    let rfl = LossParams::reduced_focal(gamma, th)?;
    let mut out = BufWriter::new(io::stdout().lock());
    writeln!(out, "pt,CE,FL,RFL,cutoff_factor")?;
    for i in 0..steps {
        let p = ProbPoint::new((i + 1) as f64 / (steps + 1) as f64)?;
        writeln!(
            out,
            "{},{},{},{},{}",
            p.get(),
            loss_value(p, &ce),
            loss_value(p, &fl),
            loss_value(p, &rfl),
            cutoff_factor(p, &rfl)
        )?;
    }
    out.flush()?;
    Ok(())
}

fn gradcheck(skip_kink_band: Option<f64>, flip: bool) -> Result<bool> {
    let mut cfg = GradCheckConfig::default();
    if let Some(b) = skip_kink_band {
        if !(b >= 0.0) {
            bail!("--skip-kink-band must be non-negative");
        }
        cfg.kink_band = b;
    }
    cfg.flip_sign = flip;
    let report = run_gradcheck(&cfg);
    println!(
        "checked {} samples, skipped {} near the RFL threshold, {} failures",
        report.checked,
        report.skipped_kink,
        report.failures.len()
    );
    let at_kink = report
        .failures
        .iter()
        .filter(|f| f.kind == LossKind::ReducedFocal && (f.pt - f.threshold).abs() < 1e-3)
        .count();
    if at_kink > 0 {
        println!("{at_kink} failures sit at the RFL threshold kink pt = th, where the derivative jumps");
    }
    if let Some(w) = &report.worst {
        println!("worst: {}", serde_json::to_string(w)?);
    }
    Ok(report.passed())
}

fn experiment(
    config: &Path,
    out_dir: &Path,
    seeds: Vec<u64>,
    fallback: Option<u64>,
    svg: bool,
    timing: bool,
    write_data: bool,
) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("cannot read {}", config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", config.display()))?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    cfg.validate().with_context(|| format!("invalid config {}", config.display()))?;
    let report = run_experiment(&cfg, fallback, timing)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    fs::write(out_dir.join("report.json"), report.to_canonical_json()?)?;
    if svg {
        for (name, body) in report_svgs(&report) {
            fs::write(out_dir.join(name), body)?;
        }
    }
    if write_data {
        for &seed in &report.seeds {
            let (train, test) = seed_datasets(&cfg, seed);
            write_csv(BufWriter::new(fs::File::create(out_dir.join(format!("train_seed{seed}.csv")))?), &train)?;
            write_csv(BufWriter::new(fs::File::create(out_dir.join(format!("test_seed{seed}.csv")))?), &test)?;
        }
    }
    println!("{:<20} {:>9} {:>9} {:>9}", "arm", "accuracy", "mRecall", "rare");
    for arm in &report.arms {
        println!(
            "{:<20} {:>9.4} {:>9.4} {:>9.4}",
            arm.name, arm.mean.accuracy, arm.mean.mrecall, arm.mean.rare_recall
        );
    }
    if !report.two_stage_arms.is_empty() {
        println!("{:<20} {:>9} {:>9} {:>9}", "stage-1 arm", "recall", "mRecall", "e2e");
        for arm in &report.two_stage_arms {
            println!(
                "{:<20} {:>9.4} {:>9.4} {:>9.4}",
                arm.name, arm.mean_proposal_recall, arm.mean_proposal_mrecall, arm.mean_end_to_end_mrecall
            );
        }
    }
    println!("wrote {}", out_dir.join("report.json").display());
    Ok(())
}

fn tile(scene: SceneDims, size: f64, overlap: f64, boxes: Option<&Path>, min_vis: f64, out_dir: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&min_vis) {
        bail!("--min-visibility must lie in [0, 1]");
    }
    let records = match boxes {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    let tiles = tile_grid(scene, size, overlap)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut manifest = Vec::with_capacity(tiles.len());
    for t in &tiles {
        let kept = clip_boxes_to_tile(&records, t, min_vis);
        let file = format!("{}.jsonl", t.file_stem());
        let w = BufWriter::new(fs::File::create(out_dir.join(&file))?);
        write_lines(w, kept.iter().map(|r| r.0.clone()))?;
        manifest.push(json!({
            "file": file,
            "ix": t.ix,
            "iy": t.iy,
            "origin": [t.origin_x, t.origin_y],
            "size": [t.tile_w, t.tile_h],
            "boxes": kept.len(),
        }));
    }
    let manifest = json!({
        "scene": [scene.width, scene.height],
        "tile": size,
        "overlap": overlap,
        "min_visibility": min_vis,
        "tiles": manifest,
    });
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} tiles to {}", tiles.len(), out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fuse(
    inputs: &[PathBuf],
    sources: &[String],
    transforms: &[TtaTransform],
    scene: SceneDims,
    config: Option<&Path>,
    iou: Option<f64>,
    min_votes: Option<usize>,
    score_mode: Option<ScoreMode>,
    out: Option<&Path>,
) -> Result<()> {
    if !sources.is_empty() && sources.len() != inputs.len() {
        bail!("{} --source values for {} inputs", sources.len(), inputs.len());
    }
    if !transforms.is_empty() && transforms.len() != inputs.len() {
        bail!("{} --transform values for {} inputs", transforms.len(), inputs.len());
    }
    let mut cfg: FusionConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid fusion config {}", p.display()))?
        }
        None => FusionConfig::default(),
    };
    if let Some(v) = iou {
        cfg.iou_thresh = v;
    }
    if let Some(v) = min_votes {
        cfg.min_votes = v;
    }
    if let Some(v) = score_mode {
        cfg.score_mode = v;
    }
    let mut passes = Vec::with_capacity(inputs.len());
    for (i, path) in inputs.iter().enumerate() {
        let detections = read_detections(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        let source = match sources.get(i) {
            Some(s) => s.clone(),
            None => path.file_stem().map_or_else(|| format!("pass{i}"), |s| s.to_string_lossy().into_owned()),
        };
        passes.push(TtaPass {
            source,
            transform: transforms.get(i).cloned().unwrap_or_else(TtaTransform::identity),
            detections,
        });
    }
    let fused = ensemble_pipeline(&passes, scene, &cfg)?;
    let lines = fused.into_iter().map(|c| {
        let mut v = serde_json::to_value(&c.detection).expect("detections serialise");
        v["votes"] = json!(c.votes);
        v
    });
    match out {
        Some(p) => write_lines(BufWriter::new(fs::File::create(p)?), lines)?,
        None => write_lines(io::stdout().lock(), lines)?,
    }
    Ok(())
}

fn eval(dets: &Path, gts: &Path, iou: f64) -> Result<()> {
    let d = read_detections(open(dets)?).with_context(|| format!("reading {}", dets.display()))?;
    let g: Vec<GroundTruth> = read_jsonl(open(gts)?).with_context(|| format!("reading {}", gts.display()))?;
    let summary = map_and_mrecall(&d, &g, iou)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::LossTable { gamma, th, steps } => loss_table(gamma, th, steps)?,
        Command::Gradcheck {
            skip_kink_band,
            inject_wrong_sign,
        } => return gradcheck(skip_kink_band, inject_wrong_sign),
        Command::Experiment {
            config,
            out_dir,
            seeds,
            fallback_seed,
            svg,
            timing,
            write_data,
        } => experiment(&config, &out_dir, seeds, fallback_seed, svg, timing, write_data)?,
        Command::Tile {
            scene,
            tile: size,
            overlap,
            boxes,
            min_visibility,
            out_dir,
        } => tile(scene, size, overlap, boxes.as_deref(), min_visibility, &out_dir)?,
        Command::Fuse {
            inputs,
            sources,
            transforms,
            scene,
            config,
            iou,
            min_votes,
            score_mode,
            out,
        } => fuse(
            &inputs,
            &sources,
            &transforms,
            scene,
            config.as_deref(),
            iou,
            min_votes,
            score_mode,
            out.as_deref(),
        )?,
        Command::Eval { dets, gts, iou } => eval(&dets, &gts, iou)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
