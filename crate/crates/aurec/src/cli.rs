//! Command-line front end.
//!
//! All subcommands read one TOML run configuration plus flag overrides,
//! stamp their artifacts with the config hash and seed, and write
//! deterministically: the same inputs and seed give byte-identical outputs.
//! Relative output paths resolve under `$AUREC_OUT` when that is set.

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::batch::prepare_eval;
use crate::data::flow_io::{write_wflo, FlowField};
use crate::data::rules::CenterPair;
use crate::data::tvl1::{extract_flow, TvL1Params};
use crate::data::{
    build_dataset, read_png, rule_table, synthetic, write_png, Sample,
};
use crate::error::{Error, Result};
use crate::metrics::{report_csv, report_markdown, subject_kfold, evaluate};
use crate::model::checkpoint::read_checkpoint;
use crate::model::roii::crop_random_au;
use crate::model::{gather_tokens_at, Model};
use crate::nn::Tape;
use crate::trainer::Trainer;
use crate::viz;

/// Environment variable naming the root directory for relative outputs.
pub const OUT_ROOT_ENV: &str = "AUREC_OUT";

#[derive(Parser, Debug)]
#[command(name = "aurec", version, about = "Weakly supervised AU recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus as an on-disk manifest dataset.
    SynthData(SynthDataArgs),
    /// Compute TV-L1 optical flow between two frames.
    ExtractFlow(ExtractFlowArgs),
    /// Train a model and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the F1 report.
    Eval(EvalArgs),
    /// Render predicted flow as grayscale u|v panes per sample.
    VizFlow(VizFlowArgs),
    /// Render the cropped / original / recovered inpainting grid.
    VizInpaint(VizInpaintArgs),
    /// Render the AU query similarity heatmap and CSV exports.
    VizSimilarity(VizSimilarityArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        Ok(run)
    }
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractFlowArgs {
    /// First frame (PNG).
    #[arg(long)]
    pub frame_a: PathBuf,
    /// Aligned later frame (PNG).
    #[arg(long)]
    pub frame_b: PathBuf,
    /// Output flow file (WFLO).
    #[arg(long)]
    pub out: PathBuf,
    /// Solver pyramid levels.
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Solver iterations per warp.
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run output directory (metric log, checkpoints, run metadata).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Override the configured batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override the configured learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Subject-independent fold count; enables a held-out fold.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Which fold to hold out (requires --folds).
    #[arg(long)]
    pub heldout_fold: Option<usize>,
    /// Resume from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Subject-independent fold count.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Evaluate this fold's held-out subjects only (requires --folds).
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Args, Debug)]
pub struct VizFlowArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for flow_NNN.png.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples to render.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct VizInpaintArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for inpaint.png.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of grid columns.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct VizSimilarityArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for similarity.png / similarity.csv / queries.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap cell side in pixels.
    #[arg(long, default_value_t = 24)]
    pub cell: usize,
}

/// Resolve a user path against `$AUREC_OUT` when it is relative.
pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write_run_meta(dir: &Path, command: &str, run: &RunConfig) -> Result<()> {
    let meta = json!({
        "command": command,
        "config_hash": run.hash(),
        "seed": run.train.seed,
    });
    std::fs::write(dir.join("run_meta.json"), format!("{meta:#}\n"))?;
    Ok(())
}

/// Parse argv and run; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::ExtractFlow(a) => extract_flow_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::VizFlow(a) => viz_flow(a),
        Command::VizInpaint(a) => viz_inpaint(a),
        Command::VizSimilarity(a) => viz_similarity(a),
    }
}

fn synth_data(a: SynthDataArgs) -> Result<()> {
    let run = a.config.load()?;
    run.validate()?;
    let seed = run.train.seed;
    let set = synthetic::generate(&run.model, &run.data.synthetic, seed)?;

    let dir = out_path(&a.out);
    for sub in ["images", "landmarks", "flow"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }

    let mut labeled = String::new();
    let mut unlabeled = String::new();
    let mut pairs = String::new();
    for (i, sample) in set.samples.iter().enumerate() {
        let stem = format!("{}_{i:04}", sample.subject_id);
        let image_rel = format!("images/{stem}.png");
        let frame_b_rel = format!("images/{stem}_b.png");
        let lm_rel = format!("landmarks/{stem}.txt");
        let flow_rel = format!("flow/{stem}.wflo");

        write_png(&dir.join(&image_rel), &sample.image.view())?;
        write_png(&dir.join(&frame_b_rel), &set.frames_b[i].view())?;
        let lm_text: String = sample
            .landmarks
            .iter()
            .map(|p| format!("{} {}\n", p[0], p[1]))
            .collect();
        std::fs::write(dir.join(&lm_rel), lm_text)?;

        let mut record = json!({
            "image_path": image_rel,
            "landmarks_path": lm_rel,
            "subject_id": sample.subject_id,
        });
        if let Some(flow) = &sample.flow_gt {
            let (h, w) = (flow.shape()[0], flow.shape()[1]);
            let mut field = FlowField::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    field.u[[y, x]] = flow[[y, x, 0]];
                    field.v[[y, x]] = flow[[y, x, 1]];
                }
            }
            write_wflo(&dir.join(&flow_rel), &field)?;
            record["flow_path"] = json!(flow_rel);
        }
        if let Some(labels) = &sample.labels {
            record["labels"] = json!(labels);
            labeled.push_str(&format!("{record}\n"));
        } else {
            unlabeled.push_str(&format!("{record}\n"));
        }
        pairs.push_str(&format!(
            "{}\n",
            json!({"frame_a": image_rel, "frame_b": frame_b_rel, "flow_path": flow_rel})
        ));
    }
    std::fs::write(dir.join("manifest.jsonl"), labeled)?;
    std::fs::write(dir.join("unlabeled.jsonl"), unlabeled)?;
    std::fs::write(dir.join("pairs.jsonl"), pairs)?;
    write_run_meta(&dir, "synth-data", &run)?;
    println!(
        "wrote {} samples ({} subjects) to {}",
        set.samples.len(),
        run.data.synthetic.subjects,
        dir.display()
    );
    Ok(())
}

fn extract_flow_cmd(a: ExtractFlowArgs) -> Result<()> {
    let frame_a = read_png(&a.frame_a)?;
    let frame_b = read_png(&a.frame_b)?;
    let params = TvL1Params {
        levels: a.levels,
        iterations: a.iterations,
        ..TvL1Params::default()
    };
    let flow = extract_flow(&frame_a, &frame_b, &params)?;
    let out = out_path(&a.out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_wflo(&out, &flow)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Split a dataset into train and held-out parts by subject fold.
fn split_heldout(
    samples: Vec<Sample>,
    folds: Option<usize>,
    fold: Option<usize>,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (Some(k), Some(i)) = (folds, fold) else {
        if folds.is_some() != fold.is_some() {
            return Err(Error::Config(
                "--folds and the fold index must be given together".into(),
            ));
        }
        return Ok((samples, Vec::new()));
    };
    let ids: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    let splits = subject_kfold(&ids, k, seed)?;
    let (_, test_subjects) = splits
        .get(i)
        .ok_or_else(|| Error::Config(format!("fold {i} out of range for {k} folds")))?;
    let (held, train): (Vec<Sample>, Vec<Sample>) = samples
        .into_iter()
        .partition(|s| test_subjects.contains(&s.subject_id));
    Ok((train, held))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = a.config.load()?;
    if let Some(v) = a.iterations {
        run.train.iterations = v;
    }
    if let Some(v) = a.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        run.train.lr = v;
    }
    run.validate()?;

    let samples = build_dataset(&run, run.train.seed)?;
    let (train_set, heldout) =
        split_heldout(samples, a.folds, a.heldout_fold, run.train.seed)?;

    let dir = out_path(&a.out);
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::<f32>::resume(run.clone(), train_set, heldout, ckpt)?,
        None => Trainer::<f32>::new(run.clone(), train_set, heldout)?,
    };
    std::fs::create_dir_all(&dir)?;
    write_run_meta(&dir, "train", &run)?;
    let result = trainer.fit(Some(&dir))?;
    let last = result.evals.last();
    println!(
        "trained {} iterations; final train F1 {}",
        result.stopped_at,
        last.map(|e| format!("{:.4}", e.1)).unwrap_or_default()
    );
    if let Some((_, _, Some(held))) = last {
        println!("held-out F1 {held:.4}");
    }
    if result.all_masked_warnings > 0 {
        eprintln!(
            "warning: {} joint steps had every supervised target masked",
            result.all_masked_warnings
        );
    }
    Ok(())
}

/// Build the model and load checkpoint tensors, enforcing the config hash.
fn load_model(run: &RunConfig, checkpoint: &Path) -> Result<Model<f32>> {
    let ckpt = read_checkpoint(checkpoint, Some(&run.hash()))?;
    let mut model = Model::<f32>::new(&run.model, run.train.seed)?;
    model.import_tensors(&ckpt.tensors)?;
    Ok(model)
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = a.config.load()?;
    run.validate()?;
    let model = load_model(&run, &a.checkpoint)?;
    let samples = build_dataset(&run, run.train.seed)?;
    let (train_set, heldout) = split_heldout(samples, a.folds, a.fold, run.train.seed)?;
    let eval_set: Vec<Sample> = if a.folds.is_some() { heldout } else { train_set }
        .into_iter()
        .filter(|s| s.is_labeled)
        .collect();
    let table = rule_table(&run);
    let report = evaluate(&model, &eval_set, &table, run.train.threshold)?;

    let dir = out_path(&a.out);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.md"), report_markdown(&report))?;
    std::fs::write(dir.join("report.csv"), report_csv(&report))?;
    write_run_meta(&dir, "eval", &run)?;
    println!("average F1 {:.4} over {} samples", report.average, eval_set.len());
    Ok(())
}

/// First `n` labeled eval-prepared samples of the configured dataset.
fn prepared_samples(run: &RunConfig, n: usize) -> Result<Vec<crate::data::batch::PreparedSample>> {
    let samples = build_dataset(run, run.train.seed)?;
    let table = rule_table(run);
    samples
        .iter()
        .filter(|s| s.is_labeled)
        .take(n)
        .map(|s| prepare_eval(s, &run.model, &table))
        .collect()
}

fn nearest_upscale(img: &Array2<f32>, factor: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| img[[y / factor, x / factor]])
}

fn viz_flow(a: VizFlowArgs) -> Result<()> {
    let run = a.config.load()?;
    run.validate()?;
    let model = load_model(&run, &a.checkpoint)?;
    let prepared = prepared_samples(&run, a.samples.max(1))?;
    let dir = out_path(&a.out);
    std::fs::create_dir_all(&dir)?;

    for (i, p) in prepared.iter().enumerate() {
        let image = p.image.mapv(|v| v).into_dyn().insert_axis(Axis(0));
        let t = Tape::no_grad();
        let out = model.forward(&t, image, std::slice::from_ref(&p.centers))?;
        let pred = model.flow.apply(&t, &model.store, out.deepest);
        let flow = t.value(pred);
        let (h, w) = (flow.shape()[2], flow.shape()[3]);
        let mut u = Array2::zeros((h, w));
        let mut v = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                u[[y, x]] = flow[[0, 0, y, x]];
                v[[y, x]] = flow[[0, 1, y, x]];
            }
        }
        let factor = run.model.image_size / run.model.flow_size();
        let pane = viz::flow_panes(&nearest_upscale(&u, factor), &nearest_upscale(&v, factor))?;
        write_png(&dir.join(format!("flow_{i:03}.png")), &pane.view())?;
    }
    write_run_meta(&dir, "viz-flow", &run)?;
    println!("wrote {} flow panes to {}", prepared.len(), dir.display());
    Ok(())
}

fn viz_inpaint(a: VizInpaintArgs) -> Result<()> {
    let run = a.config.load()?;
    run.validate()?;
    let model = load_model(&run, &a.checkpoint)?;
    let prepared = prepared_samples(&run, a.samples.max(1))?;
    let n = prepared.len();
    let size = run.model.image_size;
    let patch = run.model.patch_size();

    let mut images = ArrayD::<f32>::zeros(IxDyn(&[n, 3, size, size]));
    for (i, p) in prepared.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), i)
            .assign(&p.image.view().into_dyn());
    }
    let centers: Vec<Vec<CenterPair>> = prepared.iter().map(|p| p.centers.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let crop = crop_random_au(&images, &centers, patch, &mut rng);

    let t = Tape::no_grad();
    let out = model.forward(&t, crop.images_cropped.clone(), &centers)?;
    let picks: Vec<(usize, usize)> = crop.au.iter().copied().enumerate().collect();
    let z_l = gather_tokens_at(&t, out.decoded.decoded_left, &picks);
    let z_r = gather_tokens_at(&t, out.decoded.decoded_right, &picks);
    let fake_l = t.value(model.generator.apply(&t, &model.store, z_l));
    let fake_r = t.value(model.generator.apply(&t, &model.store, z_r));

    let mut recovered = crop.images_cropped.clone();
    for (i, fakes) in [(0usize, &fake_l), (1, &fake_r)] {
        let boxes = if i == 0 { &crop.left_boxes } else { &crop.right_boxes };
        for (bi, &(b, y0, x0)) in boxes.iter().enumerate() {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        recovered[[b, c, y0 + dy, x0 + dx]] = fakes[[bi, c, dy, dx]];
                    }
                }
            }
        }
    }

    let column = |src: &ArrayD<f32>, i: usize| -> Result<Array3<f32>> {
        let item = src.index_axis(Axis(0), i);
        let item = item
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        viz::chw_to_hwc(&item)
    };
    let mut cropped_row = Vec::new();
    let mut original_row = Vec::new();
    let mut recovered_row = Vec::new();
    for i in 0..n {
        cropped_row.push(column(&crop.images_cropped, i)?);
        original_row.push(column(&images, i)?);
        recovered_row.push(column(&recovered, i)?);
    }
    let grid = viz::inpaint_grid(&cropped_row, &original_row, &recovered_row)?;

    let dir = out_path(&a.out);
    std::fs::create_dir_all(&dir)?;
    write_png(&dir.join("inpaint.png"), &grid.view())?;
    write_run_meta(&dir, "viz-inpaint", &run)?;
    println!("wrote inpainting grid ({n} columns) to {}", dir.display());
    Ok(())
}

fn viz_similarity(a: VizSimilarityArgs) -> Result<()> {
    let run = a.config.load()?;
    run.validate()?;
    let model = load_model(&run, &a.checkpoint)?;
    let sim = model.relation.query_similarity(&model.store)?;
    let heat = viz::similarity_heatmap(&sim, a.cell.max(1))?;

    let q = model.store.value(model.relation.queries);
    let queries = Array2::from_shape_fn((q.shape()[0], q.shape()[1]), |(i, j)| {
        f64::from(q[[i, j]])
    });

    let dir = out_path(&a.out);
    std::fs::create_dir_all(&dir)?;
    write_png(&dir.join("similarity.png"), &heat.view())?;
    std::fs::write(dir.join("similarity.csv"), viz::similarity_csv(&sim))?;
    std::fs::write(dir.join("queries.csv"), viz::queries_csv(&queries))?;
    write_run_meta(&dir, "viz-similarity", &run)?;
    println!("wrote similarity artifacts to {}", dir.display());
    Ok(())
}
