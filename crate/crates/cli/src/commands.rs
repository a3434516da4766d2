use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pconv_core::imageproc::{
    dilate, load_inpaint_pairs, load_label_pairs, read_gray, read_labels, read_manifest, read_mask,
    synthesize_blobs, synthesize_masks, synthesize_textures, write_gray, write_labels,
    write_manifest, write_mask, BinaryMask, CoverageRange, GrayImage, ManifestEntry, Region,
};
use pconv_core::losses::compose_comp;
use pconv_core::metrics::{
    dice, psnr, ssim, summarize, Metric, MetricRegion, MetricReport, SsimParams,
};
use pconv_core::model::{inpaint_forward, seg_forward, Model, ModelError, Variant};
use pconv_core::par;
use pconv_core::trainer::{Checkpoint, Dataset, StepRecord, TrainError, Trainer};

use crate::config::RunConfig;
use crate::{CliError, DataKind, EvalArgs, InpaintArgs, MakeDataArgs, SegmentArgs, TrainArgs};

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn model_error(e: ModelError) -> CliError {
    usage(e)
}

fn load_model(path: &Path, variant: Variant) -> Result<Model, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let model = ckpt.model().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if model.config().variant != variant {
        return Err(usage(format!(
            "{}: checkpoint holds a {} model, this command needs a {variant}",
            path.display(),
            model.config().variant
        )));
    }
    Ok(model)
}

pub fn make_data(args: &MakeDataArgs, seed: u64) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| usage(format!("{}: {e}", args.out.display())))?;
    let io = |e: pconv_core::imageproc::ImageError| usage(e);
    let mut entries = Vec::with_capacity(args.count);
    match args.kind {
        DataKind::Textures => {
            for (i, img) in synthesize_textures(seed, args.size, args.count).iter().enumerate() {
                let name = format!("texture_{i:04}.pgm");
                write_gray(args.out.join(&name), img).map_err(io)?;
                entries.push(ManifestEntry::single(name));
            }
        }
        DataKind::Blobs => {
            for (i, (img, labels)) in synthesize_blobs(seed, args.size, args.count)
                .map_err(io)?
                .iter()
                .enumerate()
            {
                let (name, label) = (format!("blob_{i:04}.pgm"), format!("blob_{i:04}_label.pgm"));
                write_gray(args.out.join(&name), img).map_err(io)?;
                write_labels(args.out.join(&label), labels).map_err(io)?;
                entries.push(ManifestEntry::pair(name, label));
            }
        }
        DataKind::Masks => {
            let coverage = CoverageRange::new(args.min_coverage, args.max_coverage).map_err(io)?;
            for (i, mask) in synthesize_masks(seed, args.size, args.size, args.count, coverage)
                .map_err(io)?
                .iter()
                .enumerate()
            {
                let name = format!("mask_{i:04}.pgm");
                write_mask(args.out.join(&name), mask).map_err(io)?;
                entries.push(ManifestEntry::single(name));
            }
        }
    }
    write_manifest(args.out.join("manifest.tsv"), &entries).map_err(io)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let manifest = cfg
        .train
        .dataset
        .as_ref()
        .ok_or_else(|| usage("config key `dataset` is required"))?;
    if !manifest.is_file() {
        return Err(usage(format!("dataset manifest {} does not exist", manifest.display())));
    }
    let data = match cfg.model.variant {
        Variant::PconvUnet => match &cfg.masks {
            Some(masks) => {
                let images = read_manifest(manifest)
                    .map_err(usage)?
                    .iter()
                    .map(|e| read_gray(&e.first))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(usage)?;
                let masks = read_manifest(masks)
                    .map_err(usage)?
                    .iter()
                    .map(|e| read_mask(&e.first))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(usage)?;
                Dataset::inpaint_pool(&images, &masks)
            }
            None => Dataset::inpaint(&load_inpaint_pairs(manifest).map_err(usage)?),
        },
        Variant::SegUnet => {
            let pairs = load_label_pairs(manifest, u8::MAX).map_err(usage)?;
            Dataset::segment(&pairs, cfg.foreground_label)
        }
    };
    data.map_err(usage)
}

fn train_error(e: TrainError) -> CliError {
    if e.is_numerical() {
        CliError::Numerical(e.to_string())
    } else {
        usage(e)
    }
}

pub fn train(args: &TrainArgs, cfg: RunConfig, verbose: bool) -> Result<(), CliError> {
    if let Some(v) = cfg.first_violation() {
        return Err(usage(format!("invalid config: {v}")));
    }
    let data = load_dataset(&cfg)?;
    if args.dry_run {
        eprintln!(
            "config ok: {} model, {} training samples, {} iterations",
            cfg.model.variant,
            data.len(),
            cfg.train.max_iters
        );
        return Ok(());
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.config.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let log_path = out.join("loss.tsv");
    let mut log = fs::File::create(&log_path).map_err(|e| usage(format!("{}: {e}", log_path.display())))?;
    writeln!(log, "{}", StepRecord::header(cfg.model.variant)).map_err(usage)?;

    let interval = cfg.train.checkpoint_interval;
    let mut trainer = Trainer::new(&cfg.model, cfg.train.clone(), data).map_err(train_error)?;
    let result = trainer.run(|t, rec| {
        writeln!(log, "{rec}").map_err(|e| TrainError::Data(format!("loss log: {e}")))?;
        if interval > 0 && rec.iter % interval == 0 {
            t.checkpoint().save(out.join(format!("checkpoint_{:06}.pcv", rec.iter)))?;
        }
        if verbose && (rec.iter % 10 == 0 || t.is_done()) {
            eprintln!("iter {} loss {:.6}", rec.iter, rec.loss.total());
        }
        Ok(())
    });
    log.flush().map_err(usage)?;
    result.map_err(train_error)?;
    trainer
        .checkpoint()
        .save(out.join("checkpoint.pcv"))
        .map_err(usage)?;
    Ok(())
}

fn check_same_extent(image: &GrayImage, mask: &BinaryMask) -> Result<(), CliError> {
    if (image.width(), image.height()) != (mask.width(), mask.height()) {
        return Err(usage(format!(
            "mask is {}x{} but the image is {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

pub fn inpaint(args: &InpaintArgs) -> Result<(), CliError> {
    let model = load_model(&args.checkpoint, Variant::PconvUnet)?;
    let image = read_gray(&args.image).map_err(usage)?;
    let mask = read_mask(&args.mask).map_err(usage)?;
    check_same_extent(&image, &mask)?;
    let x = image.to_tensor::<f32>();
    let m = mask.to_tensor::<f32>();
    let (out, _) = inpaint_forward(&model, &x, &m).map_err(model_error)?;
    let comp = compose_comp(&out, &x, &m).map_err(usage)?;
    let result = GrayImage::from_tensor(&comp, 0)
        .map_err(usage)?
        .with_maxval(image.maxval());
    write_gray(&args.out, &result).map_err(usage)?;
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(usage(format!("threshold {} is outside [0, 1]", args.threshold)));
    }
    let model = load_model(&args.checkpoint, Variant::SegUnet)?;
    let image = read_gray(&args.image).map_err(usage)?;
    let p = seg_forward(&model, &image.to_tensor()).map_err(model_error)?;
    let foreground: Vec<bool> = p.data().iter().map(|&v| f64::from(v) > args.threshold).collect();
    let mut mask = BinaryMask::from_holes(image.width(), image.height(), &foreground).map_err(usage)?;
    if args.dilate > 0 {
        mask = dilate(&mask, args.dilate, Region::Hole);
    }
    write_mask(&args.out, &mask).map_err(usage)?;
    Ok(())
}

/// One metric over one region; `Err` when it is undefined for the sample.
type Cell = (Metric, MetricRegion, Result<f64, String>);

fn sample_name(entry: &ManifestEntry) -> String {
    entry
        .first
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.first.display().to_string())
}

fn eval_sample(
    entry: &ManifestEntry,
    mask_path: Option<&PathBuf>,
    args: &EvalArgs,
) -> Result<Vec<Cell>, String> {
    let other = entry
        .second
        .as_ref()
        .ok_or_else(|| "manifest row needs two columns".to_string())?;
    let mask = mask_path.map(read_mask).transpose().map_err(|e| e.to_string())?;
    let mut gray = None;
    let mut labels = None;
    let mut out = Vec::new();
    for &metric in &args.metrics {
        for &region in &args.regions {
            let sel = region.select(mask.as_ref());
            let v = match metric {
                Metric::Psnr | Metric::Ssim => {
                    if gray.is_none() {
                        gray = Some((
                            read_gray(&entry.first).map_err(|e| e.to_string())?,
                            read_gray(other).map_err(|e| e.to_string())?,
                        ));
                    }
                    let (a, b) = gray.as_ref().expect("loaded");
                    if let Some(m) = &mask {
                        check_same_extent(a, m).map_err(|e| e.to_string())?;
                    }
                    if metric == Metric::Psnr {
                        psnr(a, b, args.peak, sel.as_deref())
                    } else {
                        let params = SsimParams {
                            peak: args.peak,
                            ..SsimParams::default()
                        };
                        ssim(a, b, &params, sel.as_deref())
                    }
                }
                Metric::Dice => {
                    if labels.is_none() {
                        labels = Some((
                            read_labels(&entry.first, u8::MAX).map_err(|e| e.to_string())?,
                            read_labels(other, u8::MAX).map_err(|e| e.to_string())?,
                        ));
                    }
                    let (a, b) = labels.as_ref().expect("loaded");
                    // pixels outside the selected region are excluded
                    let exclusion: Option<Vec<bool>> = sel.map(|s| s.iter().map(|v| !v).collect());
                    dice(a, b, args.label, exclusion.as_deref())
                }
            };
            out.push((metric, region, v.map_err(|e| e.to_string())));
        }
    }
    Ok(out)
}

/// Returns true when every sample evaluated.
pub fn eval(args: &EvalArgs) -> Result<bool, CliError> {
    let rows = read_manifest(&args.manifest).map_err(usage)?;
    let masks = match &args.masks {
        Some(p) => {
            let m = read_manifest(p).map_err(usage)?;
            if m.len() != rows.len() {
                return Err(usage(format!(
                    "mask manifest has {} rows, pair manifest has {}",
                    m.len(),
                    rows.len()
                )));
            }
            Some(m)
        }
        None => None,
    };
    if masks.is_none() && args.regions.iter().any(|r| *r != MetricRegion::Whole) {
        return Err(usage("hole and valid regions need --masks"));
    }
    let results = par::map_range(rows.len(), |i| {
        eval_sample(&rows[i], masks.as_ref().map(|m| &m[i].first), args)
    });
    let mut reports = Vec::new();
    let mut all_ok = true;
    for (entry, res) in rows.iter().zip(results) {
        let sample = sample_name(entry);
        match res {
            Ok(values) => {
                for (metric, region, v) in values {
                    if let Err(e) = &v {
                        all_ok = false;
                        eprintln!("{sample}: {metric} over {region}: {e}");
                    }
                    reports.push(MetricReport {
                        sample: sample.clone(),
                        metric,
                        region,
                        value: v.ok(),
                    });
                }
            }
            Err(e) => {
                all_ok = false;
                eprintln!("{sample}: {e}");
                for &metric in &args.metrics {
                    for &region in &args.regions {
                        reports.push(MetricReport {
                            sample: sample.clone(),
                            metric,
                            region,
                            value: None,
                        });
                    }
                }
            }
        }
    }
    let mut text = String::from("sample\tmetric\tregion\tvalue\n");
    for r in &reports {
        text.push_str(&format!("{r}\n"));
    }
    for s in summarize(&reports) {
        text.push_str(&format!("{s}\n"));
    }
    match &args.out {
        Some(p) => fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(all_ok)
}
