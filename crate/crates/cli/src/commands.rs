//! Subcommand handlers. Every JSON artifact carries the resolved config and
//! every output directory gets a `config.json` echo.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use biasprior_core::dataset::{
    read_json, read_label, read_prior_csv, read_tum, write_csv, write_json, write_label, write_prior_csv,
    write_synthetic_euroc, write_text, write_tum, TumPose,
};
use biasprior_core::eval::{MetricReport, StampedPose};
use biasprior_core::fusion::{FixedLagOutput, TimedBiasPrior};
use biasprior_core::ImuBias;
use biasprior_nn::ipnet::{bench_inference, sliding_inference, train, BenchReport, LabeledSequence, ModelWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PriorMode, RunConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, TruthSidecar, TRUTH_FILE};
use crate::{Cli, Command};

pub const CONFIG_ECHO: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const FUSE_SUMMARY_FILE: &str = "fuse_summary.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const BENCH_FILE: &str = "bench.json";

pub const BIAS_CSV_HEADER: &str = "t,prior_ba_x,prior_ba_y,prior_ba_z,prior_bw_x,prior_bw_y,prior_bw_z,\
est_ba_x,est_ba_y,est_ba_z,est_bw_x,est_bw_y,est_bw_z,\
label_ba_x,label_ba_y,label_ba_z,label_bw_x,label_bw_y,label_bw_z";

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.label.json"))
}

pub fn prior_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.prior.csv"))
}

#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    config: &'a RunConfig,
}

struct Ctx<'a> {
    cfg: RunConfig,
    out: &'a Path,
    quiet: bool,
}

impl Ctx<'_> {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn report(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn write_artifact<T: Serialize>(&self, name: &str, body: &T) -> CliResult<()> {
        write_json(
            &self.out.join(name),
            &WithConfig {
                body,
                config: &self.cfg,
            },
        )?;
        Ok(())
    }
}

/// Resolves the config and runs one subcommand.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Fuse { prior: Some(p), .. } = &cli.command {
        cfg.fusion.prior = p.clone();
    }
    cfg.validate()?;
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    write_json(&out.join(CONFIG_ECHO), &cfg)?;
    let ctx = Ctx {
        cfg,
        out,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::GenSynthetic => gen_synthetic(&ctx),
        Command::MakeLabels { data } => make_labels(&ctx, data),
        Command::Train { data, labels } => train_cmd(&ctx, data, labels.as_deref().unwrap_or(data)),
        Command::Infer { data, weights } => infer(&ctx, data, weights),
        Command::Fuse {
            data, labels, weights, ..
        } => fuse(&ctx, data, labels.as_deref(), weights.as_deref()),
        Command::Eval { est, gt } => eval(&ctx, est, gt),
        Command::BenchInfer {
            data,
            weights,
            max_windows,
        } => bench(&ctx, data, weights.as_deref(), *max_windows),
    }
}

fn gen_synthetic(ctx: &Ctx) -> CliResult<()> {
    let plans = pipeline::plan_synthetic(&ctx.cfg);
    plans
        .par_iter()
        .map(|plan| {
            let (bundle, truth) = pipeline::synthesize(plan, &ctx.cfg)?;
            let dir = ctx.out.join(&plan.id);
            write_synthetic_euroc(&bundle, &dir)?;
            write_json(&dir.join(TRUTH_FILE), &truth)?;
            Ok(())
        })
        .collect::<CliResult<Vec<()>>>()?;
    ctx.report(format!("wrote {} sequences to {}", plans.len(), ctx.out.display()));
    Ok(())
}

fn make_labels(ctx: &Ctx, data: &Path) -> CliResult<()> {
    let dirs = pipeline::discover_sequences(data)?;
    let labels = dirs
        .par_iter()
        .map(|dir| {
            let bundle = pipeline::load_sequence(dir, ctx.quiet)?;
            let label = pipeline::label_sequence(&bundle, &ctx.cfg.labeling)?;
            write_label(&label_path(ctx.out, &bundle.id), &label)?;
            Ok(label)
        })
        .collect::<CliResult<Vec<_>>>()?;
    for l in labels {
        ctx.report(format!(
            "{}: ba {:?} bw {:?} converged {}",
            l.sequence_id, l.ba_mean, l.bw_mean, l.residual_stats.converged
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    param_count: usize,
    best_epoch: Option<usize>,
    initial_val_loss: f64,
    best_val_loss: f64,
}

fn train_cmd(ctx: &Ctx, data: &Path, labels: &Path) -> CliResult<()> {
    let t = &ctx.cfg.training;
    let dirs = pipeline::discover_sequences(data)?;
    let wanted = |id: &str| t.train_ids.is_empty() || t.train_ids.iter().chain(&t.schedule.val_ids).any(|w| w == id);
    let seqs = dirs
        .par_iter()
        .map(|dir| {
            let bundle = pipeline::load_sequence(dir, ctx.quiet)?;
            if !wanted(&bundle.id) {
                return Ok(None);
            }
            let label = read_label(&label_path(labels, &bundle.id))?;
            Ok(Some(LabeledSequence {
                id: bundle.id,
                samples: bundle.imu,
                label: label.bias(),
            }))
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    for id in t.train_ids.iter().chain(&t.schedule.val_ids) {
        if !seqs.iter().any(|s| &s.id == id) {
            return Err(CliError::Data(format!("sequence {id} not found under {}", data.display())));
        }
    }
    ctx.progress(format!("training on {} sequences", seqs.len()));
    let result = train(&seqs, &t.ipnet, &t.schedule, ctx.cfg.seed)?;
    result.model.save(&ctx.out.join(WEIGHTS_FILE))?;
    let rows: Vec<Vec<f64>> = result
        .log
        .iter()
        .map(|e| vec![e.epoch as f64, e.lr, e.train_loss, e.val_loss])
        .collect();
    write_csv(&ctx.out.join(LOSS_LOG_FILE), &["epoch", "lr", "train_loss", "val_loss"], &rows)?;
    let best_val_loss = result
        .log
        .iter()
        .map(|e| e.val_loss)
        .fold(result.initial_val_loss, f64::min);
    let summary = TrainSummary {
        train_ids: seqs.iter().filter(|s| !t.schedule.val_ids.contains(&s.id)).map(|s| s.id.clone()).collect(),
        val_ids: t.schedule.val_ids.clone(),
        param_count: result.model.param_count(),
        best_epoch: result.best_epoch,
        initial_val_loss: result.initial_val_loss,
        best_val_loss,
    };
    ctx.write_artifact(TRAIN_SUMMARY_FILE, &summary)?;
    let best = summary.best_epoch.map_or("initialization".to_string(), |e| format!("epoch {e}"));
    ctx.report(format!(
        "best {best} val loss {:.6} (initial {:.6})",
        summary.best_val_loss, summary.initial_val_loss
    ));
    Ok(())
}

fn load_model(ctx: &Ctx, weights: &Path) -> CliResult<ModelWeights> {
    Ok(ModelWeights::load(weights, &ctx.cfg.training.ipnet)?)
}

fn infer(ctx: &Ctx, data: &Path, weights: &Path) -> CliResult<()> {
    let model = load_model(ctx, weights)?;
    let dirs = pipeline::discover_sequences(data)?;
    let counts = dirs
        .par_iter()
        .map(|dir| {
            let bundle = pipeline::load_sequence(dir, ctx.quiet)?;
            let priors = sliding_inference(&bundle.imu, &model, ctx.cfg.fusion.initial_bias)?;
            write_prior_csv(&prior_path(ctx.out, &bundle.id), &priors)?;
            Ok((bundle.id, priors.len()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (id, n) in counts {
        ctx.report(format!("{id}: {n} priors"));
    }
    Ok(())
}

/// Label used for oracle targets: the label file when present, else the
/// synthetic truth sidecar.
pub fn lookup_label(labels: Option<&Path>, id: &str, seq_dir: &Path) -> CliResult<Option<ImuBias>> {
    if let Some(dir) = labels {
        let p = label_path(dir, id);
        if p.is_file() {
            return Ok(Some(read_label(&p)?.bias()));
        }
    }
    let truth = seq_dir.join(TRUTH_FILE);
    if truth.is_file() {
        let t: TruthSidecar = read_json(&truth)?;
        return Ok(Some(t.mean_bias));
    }
    Ok(None)
}

#[derive(Serialize)]
struct FuseEntry {
    sequence_id: String,
    keyframes: usize,
    observed_keyframes: usize,
    window_solves: usize,
    metrics: MetricReport,
}

#[derive(Serialize)]
struct FuseSummary {
    prior: String,
    sequences: Vec<FuseEntry>,
}

fn fmt_bias(s: &mut String, b: Option<ImuBias>) {
    match b {
        Some(b) => {
            for v in b.to_array() {
                let _ = write!(s, ",{v}");
            }
        }
        None => s.push_str(",,,,,,"),
    }
}

pub fn write_bias_csv(path: &Path, out: &FixedLagOutput, label: Option<ImuBias>) -> CliResult<()> {
    let mut s = String::from(BIAS_CSV_HEADER);
    s.push('\n');
    for k in &out.keyframes {
        let _ = write!(s, "{}", k.state.t);
        fmt_bias(&mut s, k.prior_target);
        fmt_bias(&mut s, Some(k.state.bias));
        fmt_bias(&mut s, label);
        s.push('\n');
    }
    write_text(path, &s)?;
    Ok(())
}

pub fn tum_poses(out: &FixedLagOutput) -> Vec<TumPose> {
    out.keyframes
        .iter()
        .map(|k| TumPose {
            t: k.state.t,
            p: k.state.p,
            q: k.state.q,
        })
        .collect()
}

fn fuse(ctx: &Ctx, data: &Path, labels: Option<&Path>, weights: Option<&Path>) -> CliResult<()> {
    let mode = ctx.cfg.prior_mode()?;
    let model = match (&mode, weights) {
        (PriorMode::Network, Some(w)) => Some(load_model(ctx, w)?),
        (PriorMode::Network, None) => return Err(CliError::Usage("--prior network needs --weights".into())),
        _ => None,
    };
    let dirs = pipeline::discover_sequences(data)?;
    let entries = dirs
        .par_iter()
        .enumerate()
        .map(|(index, dir)| {
            let bundle = pipeline::load_sequence(dir, ctx.quiet)?;
            let id = bundle.id.clone();
            let label = lookup_label(labels, &id, dir)?;
            let priors: Option<Vec<TimedBiasPrior>> = match &mode {
                PriorMode::Off => None,
                PriorMode::Oracle => {
                    let bias = label.ok_or_else(|| {
                        CliError::Data(format!("{id}: oracle prior needs a label file or {TRUTH_FILE}"))
                    })?;
                    Some(pipeline::constant_prior(&bundle, bias))
                }
                PriorMode::Network => Some(sliding_inference(
                    &bundle.imu,
                    model.as_ref().expect("loaded above"),
                    ctx.cfg.fusion.initial_bias,
                )?),
                PriorMode::File(p) => {
                    let p = if p.is_dir() { prior_path(p, &id) } else { p.clone() };
                    Some(read_prior_csv(&p)?)
                }
            };
            let seed = pipeline::observation_seed(ctx.cfg.seed, index);
            let out = pipeline::fuse_sequence(&bundle, priors.as_deref(), &ctx.cfg, seed)?;
            write_tum(&ctx.out.join(format!("{id}.tum")), &tum_poses(&out))?;
            write_bias_csv(&ctx.out.join(format!("{id}.bias.csv")), &out, label)?;
            write_prior_csv(&ctx.out.join(format!("{id}.online_bias.csv")), &pipeline::online_priors(&out))?;
            let gt = pipeline::gt_poses(pipeline::require_gt(&bundle)?);
            let metrics = pipeline::evaluate(&pipeline::keyframe_poses(&out), &gt, &ctx.cfg.eval)?;
            Ok(FuseEntry {
                sequence_id: id,
                keyframes: out.keyframes.len(),
                observed_keyframes: out.keyframes.iter().filter(|k| k.observed).count(),
                window_solves: out.window_solves,
                metrics,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    for e in &entries {
        ctx.report(format!(
            "{}: ATE {:.6} m RPE {:.6} rad over {} keyframes",
            e.sequence_id, e.metrics.ate_rmse_m, e.metrics.rpe_rmse_rad, e.keyframes
        ));
    }
    ctx.write_artifact(
        FUSE_SUMMARY_FILE,
        &FuseSummary {
            prior: mode.label(),
            sequences: entries,
        },
    )
}

fn tum_to_stamped(poses: Vec<TumPose>) -> Vec<StampedPose> {
    poses
        .into_iter()
        .map(|p| StampedPose { t: p.t, p: p.p, q: p.q })
        .collect()
}

/// Ground truth from a TUM file or an EuRoC sequence directory.
fn load_gt_poses(path: &Path, quiet: bool) -> CliResult<Vec<StampedPose>> {
    if path.is_dir() {
        let bundle = pipeline::load_sequence(path, quiet)?;
        Ok(pipeline::gt_poses(pipeline::require_gt(&bundle)?))
    } else {
        Ok(tum_to_stamped(read_tum(path)?))
    }
}

#[derive(Serialize)]
struct MetricSet {
    sequences: BTreeMap<String, MetricReport>,
}

fn eval(ctx: &Ctx, est: &Path, gt: &Path) -> CliResult<()> {
    if !est.is_dir() {
        let report = pipeline::evaluate(
            &tum_to_stamped(read_tum(est)?),
            &load_gt_poses(gt, ctx.quiet)?,
            &ctx.cfg.eval,
        )?;
        ctx.report(format!(
            "ATE {:.6} m RPE {:.6} rad ({} associated)",
            report.ate_rmse_m, report.rpe_rmse_rad, report.n_associated
        ));
        return ctx.write_artifact(METRICS_FILE, &report);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(est)
        .map_err(|e| CliError::Data(format!("{}: {e}", est.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tum"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no .tum files in {}", est.display())));
    }
    let reports = files
        .par_iter()
        .map(|f| {
            let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let tum = gt.join(format!("{id}.tum"));
            let gt_path = if tum.is_file() { tum } else { gt.join(&id) };
            let r = pipeline::evaluate(
                &tum_to_stamped(read_tum(f)?),
                &load_gt_poses(&gt_path, ctx.quiet)?,
                &ctx.cfg.eval,
            )?;
            Ok((id, r))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (id, r) in &reports {
        ctx.report(format!("{id}: ATE {:.6} m RPE {:.6} rad", r.ate_rmse_m, r.rpe_rmse_rad));
    }
    ctx.write_artifact(
        METRICS_FILE,
        &MetricSet {
            sequences: reports.into_iter().collect(),
        },
    )
}

#[derive(Serialize)]
struct BenchSummary {
    sequence_id: String,
    param_count: usize,
    threads: usize,
    #[serde(flatten)]
    report: BenchReport,
}

fn bench(ctx: &Ctx, data: &Path, weights: Option<&Path>, max_windows: usize) -> CliResult<()> {
    let model = match weights {
        Some(w) => load_model(ctx, w)?,
        None => ModelWeights::init(&ctx.cfg.training.ipnet, &mut ChaCha8Rng::seed_from_u64(ctx.cfg.seed))?,
    };
    let dir = pipeline::discover_sequences(data)?.remove(0);
    let bundle = pipeline::load_sequence(&dir, ctx.quiet)?;
    let report = bench_inference(&bundle.imu, &model, max_windows)?;
    ctx.report(format!(
        "{} windows, {:.1} windows/s, latency p50 {:.3} ms p90 {:.3} ms p99 {:.3} ms",
        report.windows, report.windows_per_sec, report.latency_ms_p50, report.latency_ms_p90, report.latency_ms_p99
    ));
    ctx.write_artifact(
        BENCH_FILE,
        &BenchSummary {
            sequence_id: bundle.id,
            param_count: model.param_count(),
            threads: rayon::current_num_threads(),
            report,
        },
    )
}
