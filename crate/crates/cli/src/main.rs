use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use langgrasp_cli::bench::{nested_manifests, run_bench_complexity, run_bench_efficiency, run_bench_modes};
use langgrasp_cli::eval::{run_cross_eval, run_eval, EvalOptions, EvalOutput, Model};
use langgrasp_cli::tools::{decode_maps_file, filter_file, gen_data, lift, run_gradcheck, GradcheckOptions, LiftOptions};
use langgrasp_cli::train::{run_train, TrainOptions};
use langgrasp_cli::{to_jsonl, write_text, CliError, Result};
use langgrasp_core::geometry3d::parse_pool;
use langgrasp_core::metrics::SuccessCriteria;
use langgrasp_core::synthgen::{Dataset, DatasetConfig};
use langgrasp_core::training::{predict, Optimizer, TrainConfig, TrainMode};
use langgrasp_core::GraspRect;

#[derive(Parser)]
#[command(name = "langgrasp", version, about = "Language-conditioned grasp detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tabletop dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset's train split.
    Train(TrainCmd),
    /// Evaluate a checkpoint (or the ground-truth oracle) on a split.
    Eval(EvalCmd),
    /// Decode ranked grasps from a map container or a model prediction.
    Decode(DecodeCmd),
    /// Lift a planar grasp to a 6-DoF pose over the scene's point cloud.
    Lift(LiftCmd),
    /// Finite-difference gradient check of the network on a toy input.
    Gradcheck(GradcheckCmd),
    /// Train on nested fractions of the training split and evaluate each.
    BenchEfficiency(BenchEfficiencyCmd),
    /// Compare two-stage and single-stage training on identical seeds and data.
    BenchModes(BenchModesCmd),
    /// Top-1 accuracy per expression complexity band.
    BenchComplexity(BenchComplexityCmd),
    /// Evaluate a checkpoint trained on one dataset against another.
    CrossEval(CrossEvalCmd),
    /// Keep the grasps of a JSON-lines file whose score reaches a threshold.
    Filter(FilterCmd),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_val: usize,
    #[arg(long, default_value_t = 100)]
    n_test_seen: usize,
    #[arg(long, default_value_t = 100)]
    n_test_unseen: usize,
    #[arg(long, default_value_t = 96)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    min_objects: usize,
    #[arg(long, default_value_t = 7)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.7)]
    seen_fraction: f64,
    #[arg(long, default_value_t = 0.70)]
    grasp_threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    distractor_rate: f64,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// two_stage or single_stage.
    #[arg(long, default_value = "two_stage")]
    mode: TrainMode,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 15)]
    stage1_epochs: usize,
    #[arg(long, default_value_t = 45)]
    stage2_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Quality weight gain of the map losses.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Smooth-L1 transition point.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Use plain SGD instead of Adam.
    #[arg(long)]
    sgd: bool,
    /// Ablation: no cross-attention between text and vision.
    #[arg(long)]
    no_cross_attention: bool,
    #[arg(long, default_value_t = 0.1)]
    unk_rate: f64,
    #[arg(long, default_value_t = 100)]
    val_limit: usize,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        let mut cfg = TrainConfig {
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            learning_rate: self.lr,
            optimizer: if self.sgd { Optimizer::Sgd } else { Optimizer::Adam },
            batch_size: self.batch_size,
            seed: self.seed,
            mode: self.mode,
            data_fraction: self.fraction,
            unk_rate: self.unk_rate,
            val_limit: self.val_limit,
            ..TrainConfig::default()
        };
        cfg.loss.alpha = self.alpha;
        cfg.loss.beta = self.beta;
        TrainOptions {
            cross_attention: !self.no_cross_attention,
            ..TrainOptions::new(cfg)
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint path; a `.json` sidecar and `.log.jsonl` are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    /// Also save every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct EvalArgs {
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    nms_radius: usize,
    #[arg(long, default_value_t = 0.25)]
    iou_threshold: f64,
    #[arg(long, default_value_t = 30.0)]
    angle_threshold_deg: f64,
}

impl EvalArgs {
    fn options(&self, oracle: bool) -> EvalOptions {
        EvalOptions {
            k: self.k,
            nms_radius: self.nms_radius,
            criteria: SuccessCriteria {
                iou_threshold: self.iou_threshold,
                angle_threshold_deg: self.angle_threshold_deg,
            },
            oracle,
        }
    }
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test_seen")]
    split: String,
    #[command(flatten)]
    eval: EvalArgs,
    /// Score the ground-truth maps instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Directory for report.{json,csv,txt} and records.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeCmd {
    /// Container with a 3 x H x W (quality, angle, width) map stack.
    #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
    maps: Option<PathBuf>,
    #[arg(long, requires_all = ["dataset", "scene", "text"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    nms_radius: usize,
    /// JSON-lines output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LiftCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scene: String,
    /// Planar grasp as `x,y,w,theta[,h]` in image pixels and radians.
    #[arg(long, conflicts_with = "checkpoint")]
    rect: Option<String>,
    /// Predict the grasp from this checkpoint and `--text` instead.
    #[arg(long, requires = "text")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    /// JSON-lines candidate pool; sampled from the scene when absent.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    n_candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| CliError::Usage(format!("cannot parse list item {v:?}"))))
        .collect()
}

#[derive(Args)]
struct BenchEfficiencyCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "0.2,0.4,0.6,0.8,1.0")]
    fractions: String,
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value = "test_seen")]
    split: String,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    eval: EvalArgs,
    /// Directory for efficiency.csv and the subset manifests.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchModesCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value = "test_seen")]
    split: String,
    /// Epochs without a validation gain of `tol` that count as converged.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    eval: EvalArgs,
    /// Directory for modes.csv and the run logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchComplexityCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test_seen")]
    split: String,
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    eval: EvalArgs,
    /// CSV output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossEvalCmd {
    /// Dataset the checkpoint was trained on.
    #[arg(long)]
    train_dataset: PathBuf,
    /// Dataset to evaluate against.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test_seen")]
    split: String,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterCmd {
    /// JSON lines of scored grasp rectangles.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.70)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Writes to `out` when given, otherwise prints.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_eval(out: &EvalOutput, dir: Option<&Path>) -> Result<()> {
    match dir {
        Some(d) => out.write(d)?,
        None => {
            let mut json = out.report.to_flat_json();
            json["split"] = out.split.clone().into();
            println!("{}", serde_json::to_string(&json)?);
        }
    }
    eprint!("{}", out.report.table());
    Ok(())
}

fn parse_rect(s: &str) -> Result<GraspRect> {
    let v: Vec<f64> = parse_list(s)?;
    match v[..] {
        [x, y, w, theta] => Ok(GraspRect::new(x, y, w, theta, w * langgrasp_core::grasp_maps::DEFAULT_HEIGHT_RATIO)),
        [x, y, w, theta, h] => Ok(GraspRect::new(x, y, w, theta, h)),
        _ => Err(CliError::Usage(format!("--rect needs x,y,w,theta[,h], got {s:?}"))),
    }
}

fn scene<'a>(ds: &'a Dataset, id: &str) -> Result<&'a langgrasp_core::synthgen::SceneRecord> {
    ds.scene(id).ok_or_else(|| CliError::Usage(format!("scene {id:?} not in dataset")))
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = DatasetConfig {
                seed: a.seed,
                image_size: a.image_size,
                min_objects: a.min_objects,
                max_objects: a.max_objects,
                n_train: a.n_train,
                n_val: a.n_val,
                n_test_seen: a.n_test_seen,
                n_test_unseen: a.n_test_unseen,
                seen_fraction: a.seen_fraction,
                grasp_threshold: a.grasp_threshold,
                distractor_rate: a.distractor_rate,
            };
            let ds = gen_data(&cfg, &a.out)?;
            let n_expr: usize = ds.scenes.iter().map(|s| s.expressions.len()).sum();
            eprintln!("wrote {} scenes, {n_expr} expressions to {}", ds.scenes.len(), a.out.display());
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                checkpoint_every: a.checkpoint_every,
                ..a.train.options()
            };
            let ck = run_train(&a.dataset, &a.out, &opts, a.resume.as_deref(), progress)?;
            eprintln!("saved epoch {} checkpoint to {}", ck.state.epoch, a.out.display());
        }
        Command::Eval(a) => {
            let out = run_eval(&a.dataset, a.checkpoint.as_deref(), &a.split, &a.eval.options(a.oracle))?;
            print_eval(&out, a.out.as_deref())?;
        }
        Command::Decode(a) => {
            let rects = match (&a.maps, &a.checkpoint) {
                (Some(m), _) => decode_maps_file(m, a.k, a.nms_radius)?,
                (None, Some(ck)) => {
                    if a.k == 0 {
                        return Err(CliError::Usage("k must be at least 1".into()));
                    }
                    let ds = Dataset::load(a.dataset.as_deref().expect("required by clap"))?;
                    let model = Model::load(ck)?;
                    let s = scene(&ds, a.scene.as_deref().expect("required by clap"))?;
                    let image = langgrasp_core::autonet::Image::new(s.height, s.width, s.image.clone())?;
                    let tokens = model.vocabulary.encode(a.text.as_deref().expect("required by clap"));
                    predict(&model.arch, &model.params, &image, &tokens, a.k, a.nms_radius)?.1
                }
                (None, None) => return Err(CliError::Usage("pass --maps, or --checkpoint with --dataset, --scene and --text".into())),
            };
            emit(a.out.as_deref(), &to_jsonl(&rects)?)?;
        }
        Command::Lift(a) => {
            let ds = Dataset::load(&a.dataset)?;
            let s = scene(&ds, &a.scene)?;
            let pool = a
                .candidates
                .as_deref()
                .map(|p| std::fs::read_to_string(p).map_err(|e| langgrasp_core::Error::io(p, e)))
                .transpose()?
                .map(|t| parse_pool(&t))
                .transpose()?;
            let rect = match (&a.rect, &a.checkpoint) {
                (Some(r), _) => parse_rect(r)?,
                (None, Some(ck)) => {
                    let model = Model::load(ck)?;
                    let image = langgrasp_core::autonet::Image::new(s.height, s.width, s.image.clone())?;
                    let tokens = model.vocabulary.encode(a.text.as_deref().expect("required by clap"));
                    *predict(&model.arch, &model.params, &image, &tokens, 1, 0)?
                        .1
                        .first()
                        .ok_or(langgrasp_core::Error::NoGrasp)?
                }
                (None, None) => return Err(CliError::Usage("pass --rect or --checkpoint with --text".into())),
            };
            let opts = LiftOptions {
                stride: a.stride,
                n_candidates: a.n_candidates,
                seed: a.seed,
                ..LiftOptions::default()
            };
            let out = lift(s, &rect, pool, &opts)?;
            emit(a.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
        }
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions {
                seed: a.seed,
                size: a.size,
                tokens: a.tokens,
                step: a.step,
                tolerance: a.tolerance,
                ..GradcheckOptions::default()
            };
            let out = run_gradcheck(&opts)?;
            emit(a.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
            if !out.passed {
                return Err(CliError::CheckFailed(format!(
                    "max relative error {:.3e} at {}[{}], frozen-head gradient {:.3e}",
                    out.report.max_rel_error, out.report.worst_param, out.report.worst_index, out.stage1_head_grad_max
                )));
            }
        }
        Command::BenchEfficiency(a) => {
            let fractions: Vec<f64> = parse_list(&a.fractions)?;
            let seeds: Vec<u64> = parse_list(&a.seeds)?;
            let ds = Dataset::load(&a.dataset)?;
            let out = run_bench_efficiency(&ds, &fractions, &seeds, &a.train.options(), &a.split, &a.eval.options(false), &mut progress)?;
            out.write(&a.out)?;
            print!("{}", out.csv());
            if !nested_manifests(&a.out)? {
                return Err(CliError::CheckFailed("training subsets are not nested".into()));
            }
        }
        Command::BenchModes(a) => {
            let seeds: Vec<u64> = parse_list(&a.seeds)?;
            let ds = Dataset::load(&a.dataset)?;
            let out = run_bench_modes(
                &ds,
                &seeds,
                &a.train.options(),
                &a.split,
                &a.eval.options(false),
                a.patience,
                a.tol,
                &mut progress,
            )?;
            out.write(&a.out)?;
            print!("{}", out.csv());
        }
        Command::BenchComplexity(a) => {
            let ds = Dataset::load(&a.dataset)?;
            ds.manifest.splits.scenes(&a.split)?;
            let model = match (&a.checkpoint, a.oracle) {
                (Some(p), false) => Some(Model::load(p)?),
                _ => None,
            };
            let out = run_bench_complexity(&ds, model.as_ref(), &a.split, &a.eval.options(a.oracle))?;
            emit(a.out.as_deref(), &out.csv())?;
            eprintln!(
                "overall top-1 {:.4} over {} records; lexicon/generator band agreement {:.4}",
                out.top1, out.n_records, out.band_agreement
            );
        }
        Command::CrossEval(a) => {
            let out = run_cross_eval(&a.train_dataset, &a.dataset, &a.checkpoint, &a.split, &a.eval.options(false))?;
            print_eval(&out.eval, a.out.as_deref())?;
            eprintln!("out-of-vocabulary words: {}; UNK token rate {:.4}", out.oov_words.len(), out.unk_token_rate);
        }
        Command::Filter(a) => {
            let kept = filter_file(&a.input, a.threshold)?;
            emit(a.out.as_deref(), &to_jsonl(&kept)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
