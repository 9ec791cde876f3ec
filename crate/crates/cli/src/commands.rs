use std::fs;
use std::path::{Path, PathBuf};

use harmonize_core::data::{load_dataset, make_desk_dataset, FloatImage, Sample};
use harmonize_core::metrics::MetricReport;
use harmonize_core::model::{decode_features, BackboneInput, BackboneKind, FeatureStore};
use harmonize_core::train::{
    baseline_report, evaluate, model_from_checkpoint, run_training, split_holdout, Checkpoint,
    EpochRecord, TrainConfig, Trainer,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, Flat};
use crate::error::{CliError, CliResult};
use crate::manifest::{artifact, artifacts_under, RunManifest, RUN_MANIFEST_FILE};
use crate::{EvalArgs, HarmonizeArgs, LossArg, Split, SynthArgs, TrainArgs};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::failure(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut run = RunManifest::new(
        "synth",
        Some(args.seed),
        json!({ "n": args.n, "size": args.size, "seed": args.seed }),
    );
    create_dir(&args.out)?;
    make_desk_dataset(args.n as usize, args.size as usize, args.seed, &args.out)
        .map_err(CliError::from_output)?;
    run.outputs = artifacts_under(&args.out, &[RUN_MANIFEST_FILE])?;
    run.write(&args.out.join(RUN_MANIFEST_FILE))?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

fn load_samples(root: &Path) -> CliResult<Vec<Sample>> {
    let (dataset, report) = load_dataset(root).map_err(CliError::from_data)?;
    for dir in &report.missing_dirs {
        eprintln!("warning: missing directory {dir}");
    }
    for s in &report.skipped {
        eprintln!("warning: skipped {}: {}", s.file.display(), s.reason);
    }
    if dataset.is_empty() {
        return Err(CliError::data(format!(
            "no samples found in {}",
            root.display()
        )));
    }
    dataset.load_all().map_err(CliError::from_data)
}

fn flag_overrides(args: &TrainArgs) -> Flat {
    let mut flat = Flat::new();
    let mut put = |k: &str, v: Value| {
        flat.insert(k.to_string(), v);
    };
    if let Some(v) = args.epochs {
        put("schedule.total_epochs", json!(v));
    }
    if let Some(v) = args.batch_size {
        put("batch_size", json!(v));
    }
    if let Some(v) = args.lr {
        put("schedule.base_lr", json!(v));
    }
    if let Some(v) = args.seed {
        put("seed", json!(v));
    }
    if let Some(v) = args.size {
        put("architecture.input_size", json!(v));
        put("augmentation.target_size", json!(v));
    }
    if let Some(v) = args.width {
        put("architecture.base_width", json!(v));
    }
    if let Some(v) = args.depth {
        put("architecture.depth", json!(v));
    }
    if let Some(v) = args.holdout {
        put("holdout_fraction", json!(v));
    }
    if let Some(v) = args.checkpoint_every {
        put("checkpoint_every", json!(v));
    }
    if let Some(dir) = &args.features {
        put("features_dir", json!(dir));
        put("architecture.backbone", json!("precomputed"));
    }
    if args.no_hflip {
        put("augmentation.hflip", json!(false));
    }
    if args.no_rrc {
        put("augmentation.rrc", json!(false));
    }
    if let Some(loss) = args.loss {
        let kind = match loss {
            LossArg::Mse => "mse",
            LossArg::FnMse => "fn_mse",
        };
        put("loss.kind", json!(kind));
    }
    if args.no_blend {
        put("architecture.blend_head", json!(false));
    }
    if args.blind_backbone {
        put("architecture.foreground_aware_backbone", json!(false));
    }
    flat
}

fn describe(r: &EpochRecord, total: usize) -> String {
    let mut line = format!(
        "epoch {}/{} lr {:.1e} loss {:.6}",
        r.epoch + 1,
        total,
        r.lr,
        r.train_loss
    );
    if let Some(e) = &r.eval {
        line += &format!(
            " | holdout mse {:.2} fmse {:.2} psnr {:.2} (composite {:.2})",
            e.mse, e.fmse, e.psnr, e.composite_psnr
        );
    }
    line
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let (trainer_config, checkpoint) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(CliError::from_checkpoint)?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => {
            let mut layers = Vec::new();
            if let Some(path) = &args.config {
                layers.push(config::read_config_file(path)?);
            }
            layers.push(args.set.iter().cloned().collect());
            layers.push(flag_overrides(args));
            (config::resolve(&layers)?, None)
        }
    };
    if !args.data.is_dir() {
        return Err(CliError::missing(format!(
            "dataset directory {} does not exist",
            args.data.display()
        )));
    }
    let samples = load_samples(&args.data)?;
    let mut run = RunManifest::new(
        "train",
        Some(trainer_config.seed),
        serde_json::to_value(&trainer_config).expect("config serializes"),
    );
    run.input("data", &args.data);
    if let Some(path) = &args.config {
        run.input("config", path);
    }
    if let Some(path) = &args.resume {
        run.input("resume", path);
    }
    if let Some(dir) = &trainer_config.features_dir {
        run.input("features", dir);
    }

    let trainer = match checkpoint {
        Some(ckpt) => Trainer::resume(ckpt, samples).map_err(CliError::from_checkpoint)?,
        None => Trainer::new(trainer_config.clone(), samples).map_err(CliError::from_data)?,
    };
    if !args.quiet {
        println!(
            "training on {} samples, holding out {}",
            trainer.train_samples().len(),
            trainer.eval_samples().len()
        );
    }
    let total = trainer_config.schedule.total_epochs;
    let quiet = args.quiet;
    let outcome = run_training(trainer, &args.out, |r| {
        if !quiet {
            println!("{}", describe(r, total));
        }
    })
    .map_err(CliError::from_data)?;
    run.outputs = artifacts_under(&args.out, &[RUN_MANIFEST_FILE])?;
    run.write(&args.out.join(RUN_MANIFEST_FILE))?;
    if !quiet {
        println!("final checkpoint {}", outcome.final_checkpoint.display());
    }
    Ok(())
}

fn feature_store(config: &TrainConfig, dir: Option<&PathBuf>) -> CliResult<Option<FeatureStore>> {
    if config.architecture.backbone != BackboneKind::Precomputed {
        return Ok(None);
    }
    let dir = dir
        .or(config.features_dir.as_ref())
        .ok_or_else(|| CliError::usage("this checkpoint needs --features"))?;
    Ok(Some(FeatureStore {
        dir: dir.clone(),
        channels: config.architecture.precomputed_channels,
    }))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    epoch: usize,
    split: &'static str,
    model: MetricReport,
    composite: MetricReport,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(CliError::from_checkpoint)?;
    let model = model_from_checkpoint(&ckpt).map_err(CliError::from_checkpoint)?;
    let config = &ckpt.config;
    if !args.data.is_dir() {
        return Err(CliError::missing(format!(
            "dataset directory {} does not exist",
            args.data.display()
        )));
    }
    let samples = load_samples(&args.data)?;
    let (train, holdout) =
        split_holdout(samples.clone(), config.holdout_fraction).map_err(CliError::from_data)?;
    let (name, set) = match args.split {
        Split::All => ("all", samples),
        Split::Train => ("train", train),
        Split::Holdout => ("holdout", holdout),
    };
    if set.is_empty() {
        return Err(CliError::data(format!("the {name} split is empty")));
    }
    let features = feature_store(config, args.features.as_ref())?;
    let norm = config.augmentation.normalization;
    let report = evaluate(&model, &set, &norm, features.as_ref()).map_err(CliError::from_data)?;
    let composite =
        baseline_report(&set, config.architecture.input_size).map_err(CliError::from_data)?;

    let mut run = RunManifest::new(
        "eval",
        Some(config.seed),
        serde_json::to_value(config).expect("config serializes"),
    );
    run.input("checkpoint", &args.checkpoint);
    run.input("data", &args.data);
    create_dir(&args.out)?;
    let text = format!(
        "harmonized ({name} split, {} samples)\n{}\ncomposite\n{}",
        set.len(),
        report.to_text_table(),
        composite.to_text_table()
    );
    let body = EvalReport {
        checkpoint: &args.checkpoint,
        epoch: ckpt.epoch,
        split: name,
        model: report,
        composite,
    };
    let json_path = args.out.join("report.json");
    let txt_path = args.out.join("report.txt");
    let mut json_text = serde_json::to_string_pretty(&body).expect("report serializes");
    json_text.push('\n');
    write_text(&json_path, &json_text)?;
    write_text(&txt_path, &text)?;
    run.outputs = vec![artifact(&json_path)?, artifact(&txt_path)?];
    run.write(&args.out.join(RUN_MANIFEST_FILE))?;
    print!("{text}");
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

pub fn harmonize(args: &HarmonizeArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(CliError::from_checkpoint)?;
    let model = model_from_checkpoint(&ckpt).map_err(CliError::from_checkpoint)?;
    require_file(&args.composite, "composite")?;
    require_file(&args.mask, "mask")?;
    let composite =
        FloatImage::read_rgb(&args.composite).map_err(|e| CliError::data(e.to_string()))?;
    let mask = FloatImage::read_mask(&args.mask).map_err(|e| CliError::data(e.to_string()))?;
    if composite.dims() != mask.dims() {
        return Err(CliError::data(format!(
            "composite is {:?} but mask is {:?}",
            composite.dims(),
            mask.dims()
        )));
    }
    let features = match (model.config().backbone, &args.features) {
        (BackboneKind::Precomputed, Some(path)) => {
            let bytes = fs::read(path)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            Some(
                decode_features(&bytes, &path.display().to_string())
                    .map_err(|e| CliError::data(e.to_string()))?,
            )
        }
        (BackboneKind::Precomputed, None) => {
            return Err(CliError::usage("this checkpoint needs --features"))
        }
        _ => None,
    };

    let (h, w) = composite.dims();
    let size = model.config().input_size;
    let norm = ckpt.config.augmentation.normalization;
    let small = composite.resize_bilinear(size, size);
    let small_mask = mask.resize_mask(size, size);
    let input = norm.normalize(&small.to_tensor());
    let backbone = match &features {
        Some(f) => BackboneInput::Features(f),
        None => BackboneInput::SameMask,
    };
    let (pred, attention) = model
        .predict(&input, &small_mask.to_tensor(), backbone)
        .map_err(|e| CliError::data(e.to_string()))?;
    let pred = FloatImage::from_tensor(&norm.denormalize(&pred), 0).map(|v| v.clamp(0.0, 1.0));

    // The model's correction is upsampled and applied to the original pixels
    // inside the mask; background pixels are passed through untouched.
    let delta = FloatImage::from_fn(3, size, size, |c, y, x| {
        pred.at(c, y, x) - small.at(c, y, x)
    })
    .resize_bilinear(h, w);
    let out = FloatImage::from_fn(3, h, w, |c, y, x| {
        (composite.at(c, y, x) + mask.at(0, y, x) * delta.at(c, y, x)).clamp(0.0, 1.0)
    });
    out.write_png(&args.out).map_err(CliError::from_output)?;

    let mut run = RunManifest::new(
        "harmonize",
        Some(ckpt.config.seed),
        serde_json::to_value(&ckpt.config).expect("config serializes"),
    );
    run.input("checkpoint", &args.checkpoint);
    run.input("composite", &args.composite);
    run.input("mask", &args.mask);
    run.outputs.push(artifact(&args.out)?);
    if let Some(path) = &args.attention {
        FloatImage::from_tensor(&attention, 0)
            .resize_bilinear(h, w)
            .write_png(path)
            .map_err(CliError::from_output)?;
        run.outputs.push(artifact(path)?);
    }
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| args.out.with_extension("run.json"));
    run.write(&manifest)?;
    Ok(())
}
