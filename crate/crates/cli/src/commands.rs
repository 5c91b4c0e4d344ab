//! The four subcommands. Each one validates every input before it creates
//! any output file, so a failed run leaves nothing half-written behind.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use spheregate_core::boundary;
use spheregate_core::checkpoint;
use spheregate_core::config::TrainConfig;
use spheregate_core::data::{self, DatasetBundle, SyntheticSpec};
use spheregate_core::experts::{
    gzsl_predict_batch, FilePredictions, NearestCenterExpert, Route, UnseenExpert,
};
use spheregate_core::metrics;
use spheregate_core::training::{self, TrainEvent};

use crate::runconfig::{self, FileConfig};
use crate::{CliError, CliResult};
use crate::{EvalGzslArgs, EvalOodArgs, MakeSyntheticArgs, TrainArgs};

pub fn make_synthetic(args: &MakeSyntheticArgs) -> CliResult<()> {
    let bundle = data::make_synthetic(SyntheticSpec {
        n_seen: args.n_seen,
        n_unseen: args.n_unseen,
        attr_dim: args.attr_dim,
        feat_dim: args.feat_dim,
        samples_per_class: args.samples_per_class,
        noise_scale: args.noise,
        seed: args.seed,
    })?;
    data::save_bundle(&args.out, &bundle)?;
    println!(
        "wrote bundle to {}: {} rows, {} seen + {} unseen classes, {} features, {} attributes",
        args.out.display(),
        bundle.features.nrows(),
        bundle.seen_classes.len(),
        bundle.unseen_classes.len(),
        bundle.feat_dim(),
        bundle.attr_dim(),
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let file = FileConfig::load_or_empty(args.config.as_deref())?;
    let cfg = runconfig::resolve_train(&file, &args.overrides)?;
    let checkpoint_every = match args.checkpoint_every {
        Some(k) => k,
        None => file.get("checkpoint_every")?.unwrap_or(0),
    };
    let mut bundle = data::load_bundle(&args.data)?;
    if cfg.standardize {
        bundle.standardize();
    }

    fs::create_dir_all(&args.out).map_err(spheregate_core::Error::from)?;
    let log_path = args.out.join("training_log.csv");
    let mut log = open_log(&log_path)?;
    let started = Instant::now();
    let out_dir = args.out.clone();
    let cfg_for_cadence = cfg.clone();
    let (model, report) = training::fit_with_observer(&bundle, &cfg, |event| {
        match event {
            TrainEvent::Step(rec) => {
                writeln!(
                    log,
                    "{},{},{},{},{},{},{},{:.3}",
                    rec.epoch,
                    rec.step,
                    rec.losses.l_f_svae,
                    rec.losses.l_a_svae,
                    rec.losses.l_cr,
                    rec.losses.l_cls,
                    rec.losses.l_overall,
                    started.elapsed().as_secs_f64()
                )?;
            }
            TrainEvent::EpochEnd { epoch, model, .. } => {
                let completed = epoch + 1;
                if checkpoint_every > 0 && completed % checkpoint_every == 0 {
                    let path = out_dir.join(format!("checkpoint_epoch_{completed}.bin"));
                    checkpoint::save(&path, model, &cfg_for_cadence)?;
                }
            }
        }
        Ok(())
    })?;
    let checkpoint_path = args.out.join("checkpoint.bin");
    checkpoint::save(&checkpoint_path, &model, &cfg)?;

    let mut doc = report_header("train", &[("data", args.data.display().to_string())], &cfg);
    kv(&mut doc, "n_params", model.n_params());
    kv(&mut doc, "epochs_run", report.epoch_losses.len());
    kv(&mut doc, "steps_run", report.steps);
    if let Some(last) = report.epoch_losses.last() {
        kv(&mut doc, "final_l_f_svae", last.l_f_svae);
        kv(&mut doc, "final_l_a_svae", last.l_a_svae);
        kv(&mut doc, "final_l_cr", last.l_cr);
        kv(&mut doc, "final_l_cls", last.l_cls);
        kv(&mut doc, "final_l_overall", last.l_overall);
    }
    write_text(&args.out.join("train_report.txt"), &doc)?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s; checkpoint at {}",
        report.epoch_losses.len(),
        report.steps,
        started.elapsed().as_secs_f64(),
        checkpoint_path.display()
    );
    Ok(())
}

pub fn eval_ood(args: &EvalOodArgs) -> CliResult<()> {
    let file = FileConfig::load_or_empty(args.config.as_deref())?;
    let gammas: Vec<f64> = match &args.gamma_grid {
        Some(grid) => {
            if args.gamma.is_some() {
                return Err(CliError::Config(
                    "use either --gamma or --gamma-grid, not both".into(),
                ));
            }
            if grid.is_empty() {
                return Err(CliError::Config("--gamma-grid needs at least one value".into()));
            }
            for &g in grid {
                runconfig::validate_gamma(g)?;
            }
            grid.clone()
        }
        None => vec![runconfig::resolve_gamma(&file, args.gamma)?],
    };
    let (model, cfg) = checkpoint::load(&args.checkpoint)?;
    let bundle = load_eval_bundle(&args.data, &cfg)?;

    fs::create_dir_all(&args.out).map_err(spheregate_core::Error::from)?;
    let mut doc = report_header(
        "eval-ood",
        &[
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
        ],
        &cfg,
    );
    let single = gammas.len() == 1;
    let mut summary = String::new();
    for &gamma in &gammas {
        let set = boundary::build_from_bundle(&bundle, &model, gamma)?;
        let curve = metrics::evaluate_ood(&bundle, &model, &set)?;
        let fpr95 = metrics::fpr_at_tpr(&curve, 0.95)?;
        let roc_name = if single {
            "roc.csv".to_string()
        } else {
            format!("roc_gamma_{gamma}.csv")
        };
        let mut roc = String::from("fpr,tpr\n");
        for (fpr, tpr) in &curve.points {
            writeln!(roc, "{fpr},{tpr}").expect("string write cannot fail");
        }
        write_text(&args.out.join(&roc_name), &roc)?;
        let bounds_name = if single {
            "boundaries.txt".to_string()
        } else {
            format!("boundaries_gamma_{gamma}.txt")
        };
        boundary::save_boundaries(&args.out.join(&bounds_name), &set)?;
        writeln!(
            doc,
            "row = gamma={gamma} auc={:.4} fpr_at_95tpr={:.4}",
            curve.auc * 100.0,
            fpr95 * 100.0
        )
        .expect("string write cannot fail");
        if single {
            kv(&mut doc, "gamma", gamma);
            kv(&mut doc, "auc", format!("{:.4}", curve.auc * 100.0));
            kv(&mut doc, "fpr_at_95tpr", format!("{:.4}", fpr95 * 100.0));
        }
        write!(
            summary,
            "gamma {gamma}: auc {:.2}%, fpr@95tpr {:.2}%; ",
            curve.auc * 100.0,
            fpr95 * 100.0
        )
        .expect("string write cannot fail");
    }
    let report_path = args.out.join("ood_report.txt");
    write_text(&report_path, &doc)?;
    println!("{summary}report at {}", report_path.display());
    Ok(())
}

pub fn eval_gzsl(args: &EvalGzslArgs) -> CliResult<()> {
    let file = FileConfig::load_or_empty(args.config.as_deref())?;
    let gamma = runconfig::resolve_gamma(&file, args.gamma)?;
    let expert_spec = args
        .expert
        .clone()
        .or_else(|| file.get_raw("expert").map(str::to_string))
        .unwrap_or_else(|| "baseline".to_string());
    let (model, cfg) = checkpoint::load(&args.checkpoint)?;
    let bundle = load_eval_bundle(&args.data, &cfg)?;
    let mut test_idx: Vec<usize> = bundle
        .test_seen_idx
        .iter()
        .chain(bundle.test_unseen_idx.iter())
        .copied()
        .collect();
    test_idx.sort_unstable();
    let expert: Box<dyn UnseenExpert> = match expert_spec.as_str() {
        "baseline" => {
            let attrs = bundle.attribute_matrix(&bundle.unseen_classes)?;
            Box::new(NearestCenterExpert::from_attributes(
                &attrs.view(),
                &bundle.unseen_classes,
                &model,
            )?)
        }
        s => match s.strip_prefix("file:") {
            Some(path) => Box::new(FilePredictions::load(
                Path::new(path),
                &test_idx,
                &bundle.unseen_classes,
            )?),
            None => {
                return Err(CliError::Config(format!(
                    "--expert must be `baseline` or `file:<path>`, got `{s}`"
                )))
            }
        },
    };
    let set = boundary::build_from_bundle(&bundle, &model, gamma)?;
    let scores = metrics::evaluate_gzsl(&bundle, &model, &set, expert.as_ref())?;

    fs::create_dir_all(&args.out).map_err(spheregate_core::Error::from)?;
    let mut doc = report_header(
        "eval-gzsl",
        &[
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
        ],
        &cfg,
    );
    kv(&mut doc, "expert", &expert_spec);
    kv(&mut doc, "gamma", gamma);
    kv(&mut doc, "ts", format!("{:.4}", scores.ts * 100.0));
    kv(&mut doc, "tr", format!("{:.4}", scores.tr * 100.0));
    kv(&mut doc, "h", format!("{:.4}", scores.h * 100.0));
    write_text(&args.out.join("gzsl_report.txt"), &doc)?;

    let features = bundle.features_of(&test_idx);
    let routed = gzsl_predict_batch(&features.view(), &test_idx, &set, &model, expert.as_ref())?;
    let mut preds = String::from("test_index,predicted_class,route\n");
    for (&idx, p) in test_idx.iter().zip(&routed) {
        let route = match p.route {
            Route::Seen => "seen",
            Route::Unseen => "unseen",
        };
        writeln!(preds, "{idx},{},{route}", p.class_id).expect("string write cannot fail");
    }
    write_text(&args.out.join("predictions.csv"), &preds)?;
    println!(
        "ts {:.2}%, tr {:.2}%, H {:.2}% at gamma {gamma} with expert {expert_spec}; report at {}",
        scores.ts * 100.0,
        scores.tr * 100.0,
        scores.h * 100.0,
        args.out.join("gzsl_report.txt").display()
    );
    Ok(())
}

/// Loads the bundle and replays the training-time feature transform
/// recorded in the checkpoint, so evaluation sees the same inputs.
fn load_eval_bundle(dir: &Path, cfg: &TrainConfig) -> CliResult<DatasetBundle> {
    let mut bundle = data::load_bundle(dir)?;
    if cfg.standardize {
        bundle.standardize();
    }
    Ok(bundle)
}

/// Opens the append-only training log, adding the header only when the
/// file is new or empty.
fn open_log(path: &Path) -> CliResult<fs::File> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(spheregate_core::Error::from)?;
    let empty = f
        .metadata()
        .map(|m| m.len() == 0)
        .map_err(spheregate_core::Error::from)?;
    if empty {
        writeln!(f, "epoch,step,l_f_svae,l_a_svae,l_cr,l_cls,l_overall,seconds")
            .map_err(spheregate_core::Error::from)?;
    }
    Ok(f)
}

/// Common report prefix: the command, its input paths, and the resolved
/// configuration with its digest. Reports contain no timestamps, so a
/// rerun with identical inputs reproduces them byte for byte.
fn report_header(command: &str, inputs: &[(&str, String)], cfg: &TrainConfig) -> String {
    let mut doc = String::new();
    kv(&mut doc, "command", command);
    for (k, v) in inputs {
        kv(&mut doc, k, v);
    }
    kv(&mut doc, "config_digest", runconfig::digest(&cfg.to_kv()));
    doc.push_str(&cfg.to_kv());
    doc
}

fn kv(doc: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(doc, "{key} = {value}").expect("string write cannot fail");
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(spheregate_core::Error::from)?;
    Ok(())
}
