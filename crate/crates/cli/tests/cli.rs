use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pconv_core::imageproc::{dilate, read_gray, read_manifest, read_mask, write_mask, BinaryMask, Region};
use pconv_core::trainer::Checkpoint;
use tempfile::TempDir;

fn pconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pconv"))
        .args(args)
        .env_remove("PCONV_SEED")
        .output()
        .expect("spawn pconv")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make(kind: &str, count: usize, size: usize, out: &Path, seed: u64) {
    let o = pconv(&[
        "make-data", "--kind", kind, "--count", &count.to_string(), "--size", &size.to_string(),
        "--out", s(out), "--seed", &seed.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// Textures, masks and blobs at 16x16 plus two configs.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path();
        make("textures", 4, 16, &root.join("tex"), 1);
        make("masks", 4, 16, &root.join("masks"), 2);
        make("blobs", 4, 16, &root.join("blobs"), 3);
        fs::write(
            root.join("inpaint.toml"),
            "# toy inpainting run\nvariant = \"pconv_unet\"\ndepth = 2\nbase_channels = 4\n\
             dataset = \"tex/manifest.tsv\"\nmasks = \"masks/manifest.tsv\"\nbatch_size = 2\nmax_iters = 4\n\
             checkpoint_interval = 2\n",
        )
        .unwrap();
        fs::write(
            root.join("seg.toml"),
            "variant = \"seg_unet\"\ndepth = 2\nbase_channels = 4\ndataset = \"blobs/manifest.tsv\"\n\
             batch_size = 2\nmax_iters = 2\n",
        )
        .unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, config: &str, out: &str) -> PathBuf {
        let out = self.path(out);
        let o = pconv(&["train", "--config", s(&self.path(config)), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out.join("checkpoint.pcv")
    }
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in [None, Some("make-data"), Some("train"), Some("inpaint"), Some("segment"), Some("eval")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let o = pconv(&args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
    }
}

#[test]
fn bad_flag_is_usage_error() {
    assert_eq!(code(&pconv(&["make-data", "--kind", "clouds", "--count", "1", "--out", "x"])), 2);
}

#[test]
fn make_data_is_deterministic() {
    let d = TempDir::new().unwrap();
    for kind in ["textures", "masks", "blobs"] {
        let (a, b) = (d.path().join(format!("{kind}_a")), d.path().join(format!("{kind}_b")));
        make(kind, 3, 16, &a, 42);
        make(kind, 3, 16, &b, 42);
        assert_eq!(tree(&a), tree(&b), "{kind}");
    }
}

#[test]
fn make_data_seed_defaults_to_env() {
    let d = TempDir::new().unwrap();
    make("textures", 2, 16, &d.path().join("flag"), 17);
    let o = Command::new(env!("CARGO_BIN_EXE_pconv"))
        .args(["make-data", "--kind", "textures", "--count", "2", "--size", "16", "--out"])
        .arg(d.path().join("env"))
        .env("PCONV_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&d.path().join("flag")), tree(&d.path().join("env")));
}

#[test]
fn make_data_count_zero() {
    let d = TempDir::new().unwrap();
    make("textures", 0, 16, d.path(), 0);
    assert_eq!(fs::read(d.path().join("manifest.tsv")).unwrap(), b"");
}

#[test]
fn make_data_masks_honor_coverage() {
    let d = TempDir::new().unwrap();
    let o = pconv(&[
        "make-data", "--kind", "masks", "--count", "8", "--size", "32", "--out", s(d.path()), "--seed", "5",
        "--min-coverage", "0.2", "--max-coverage", "0.35",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_manifest(d.path().join("manifest.tsv")).unwrap();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let f = read_mask(&r.first).unwrap().hole_fraction();
        assert!((0.2..=0.35).contains(&f), "{}: {f}", r.first.display());
    }
}

#[test]
fn make_data_unwritable_path() {
    let d = TempDir::new().unwrap();
    let file = d.path().join("plain");
    fs::write(&file, "x").unwrap();
    let o = pconv(&["make-data", "--kind", "textures", "--count", "1", "--out", s(&file.join("sub"))]);
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn train_writes_log_and_loadable_checkpoints() {
    let f = Fixture::new();
    let ckpt = f.train("inpaint.toml", "run");
    let log = fs::read_to_string(f.path("run/loss.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter\tlr\ttotal\tmasked\tvalid\tperceptual\tstyle_out\tstyle_comp\ttv");
    assert_eq!(lines.len(), 5);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 9);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[2..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    let c = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.model().unwrap().config().depth, 2);
    assert!(f.path("run/checkpoint_000002.pcv").is_file());
    assert!(f.path("run/checkpoint_000004.pcv").is_file());
}

#[test]
fn train_is_deterministic() {
    let f = Fixture::new();
    let a = f.train("inpaint.toml", "a");
    let b = f.train("inpaint.toml", "b");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn train_dry_run_writes_nothing() {
    let f = Fixture::new();
    let o = pconv(&["train", "--config", s(&f.path("inpaint.toml")), "--out", s(&f.path("dry")), "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!f.path("dry").exists());
}

#[test]
fn train_config_errors_exit_two() {
    let f = Fixture::new();
    let cfg = f.path("inpaint.toml");
    let o = pconv(&["train", "--config", s(&cfg), "--set", "dataset=missing/manifest.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));

    let o = pconv(&["train", "--config", s(&cfg), "--set", "learning_rate=1", "--set", "zzz=2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`learning_rate`") || stderr(&o).contains("`zzz`"), "{}", stderr(&o));

    fs::write(f.path("broken.toml"), "depth = = 3\n").unwrap();
    assert_eq!(code(&pconv(&["train", "--config", s(&f.path("broken.toml"))])), 2);
    assert_eq!(code(&pconv(&["train", "--config", s(&f.path("absent.toml"))])), 2);
    assert_eq!(code(&pconv(&["train", "--config", s(&cfg), "--set", "batch_size=0", "--dry-run"])), 2);
}

#[test]
fn train_divergence_exits_three() {
    let f = Fixture::new();
    let o = pconv(&[
        "train", "--config", s(&f.path("inpaint.toml")), "--out", s(&f.path("nan")),
        "--set", "lr_initial=1e30", "--set", "lr_finetune=1e30",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

fn inpaint(f: &Fixture, ckpt: &Path, image: &Path, mask: &Path, out: &str) -> Output {
    pconv(&["inpaint", "--checkpoint", s(ckpt), "--image", s(image), "--mask", s(mask), "--out", s(&f.path(out))])
}

#[test]
fn inpaint_composites_and_is_deterministic() {
    let f = Fixture::new();
    let ckpt = f.train("inpaint.toml", "run");
    let image = f.path("tex/texture_0001.pgm");

    write_mask(f.path("ones.pgm"), &BinaryMask::all_valid(16, 16)).unwrap();
    assert_eq!(code(&inpaint(&f, &ckpt, &image, &f.path("ones.pgm"), "same.pgm")), 0);
    assert_eq!(fs::read(f.path("same.pgm")).unwrap(), fs::read(&image).unwrap());

    let mask_path = f.path("masks/mask_0000.pgm");
    let mask = read_mask(&mask_path).unwrap();
    assert_eq!(code(&inpaint(&f, &ckpt, &image, &mask_path, "a.pgm")), 0);
    assert_eq!(code(&inpaint(&f, &ckpt, &image, &mask_path, "b.pgm")), 0);
    assert_eq!(fs::read(f.path("a.pgm")).unwrap(), fs::read(f.path("b.pgm")).unwrap());

    let (src, out) = (read_gray(&image).unwrap(), read_gray(f.path("a.pgm")).unwrap());
    let mut differing = 0;
    for (i, &valid) in mask.valid().iter().enumerate() {
        if valid {
            assert_eq!(src.values()[i], out.values()[i]);
        } else if src.values()[i] != out.values()[i] {
            differing += 1;
        }
    }
    assert!(differing * 2 > mask.hole_count(), "{differing} of {}", mask.hole_count());
}

#[test]
fn inpaint_rejects_bad_inputs() {
    let f = Fixture::new();
    let ckpt = f.train("inpaint.toml", "run");
    let seg = f.train("seg.toml", "seg");
    let image = f.path("tex/texture_0000.pgm");
    let mask = f.path("masks/mask_0000.pgm");

    make("textures", 1, 18, &f.path("odd"), 0);
    write_mask(f.path("odd_mask.pgm"), &BinaryMask::all_valid(18, 18)).unwrap();
    let o = inpaint(&f, &ckpt, &f.path("odd/texture_0000.pgm"), &f.path("odd_mask.pgm"), "o.pgm");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pad"), "{}", stderr(&o));

    assert_eq!(code(&inpaint(&f, &ckpt, &image, &f.path("odd_mask.pgm"), "o.pgm")), 2);
    assert_eq!(code(&inpaint(&f, &seg, &image, &mask, "o.pgm")), 2);
    fs::write(f.path("junk.pcv"), b"not a checkpoint").unwrap();
    assert_eq!(code(&inpaint(&f, &f.path("junk.pcv"), &image, &mask, "o.pgm")), 2);
}

fn segment(ckpt: &Path, image: &Path, out: &Path, extra: &[&str]) -> BinaryMask {
    let mut args = vec!["segment", "--checkpoint", s(ckpt), "--image", s(image), "--out", s(out)];
    args.extend_from_slice(extra);
    let o = pconv(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    read_mask(out).unwrap()
}

#[test]
fn segment_thresholds_and_dilation() {
    let f = Fixture::new();
    let ckpt = f.train("seg.toml", "seg");
    let image = f.path("blobs/blob_0000.pgm");
    let out = f.path("m.pgm");

    assert_eq!(segment(&ckpt, &image, &out, &["--threshold", "0"]).hole_count(), 256);
    assert_eq!(segment(&ckpt, &image, &out, &["--threshold", "1"]).hole_count(), 0);

    // pick a threshold that leaves a partial foreground so dilation has work
    let p = pconv_core::model::seg_forward(
        &Checkpoint::load(&ckpt).unwrap().model().unwrap(),
        &read_gray(&image).unwrap().to_tensor(),
    )
    .unwrap();
    let mut probs: Vec<f32> = p.data().to_vec();
    probs.sort_by(f32::total_cmp);
    let t = format!("{}", probs[probs.len() * 9 / 10]);
    let plain = segment(&ckpt, &image, &out, &["--threshold", &t]);
    assert!(plain.hole_count() > 0 && plain.hole_count() < 64);
    let grown = segment(&ckpt, &image, &out, &["--threshold", &t, "--dilate", "3"]);
    assert_eq!(grown, dilate(&plain, 3, Region::Hole));
    assert!(grown.hole_count() > plain.hole_count());

    let o = pconv(&["segment", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&out), "--threshold", "2"]);
    assert_eq!(code(&o), 2);
}

fn eval(args: &[&str]) -> (i32, Vec<Vec<String>>) {
    let mut all = vec!["eval"];
    all.extend_from_slice(args);
    let o = pconv(&all);
    let rows = String::from_utf8(o.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    (code(&o), rows)
}

#[test]
fn eval_self_comparison() {
    let f = Fixture::new();
    fs::write(f.path("tex/self.tsv"), "texture_0000.pgm\ttexture_0000.pgm\n").unwrap();
    let (c, rows) = eval(&["--manifest", s(&f.path("tex/self.tsv"))]);
    assert_eq!(c, 0);
    assert_eq!(rows[0], ["sample", "metric", "region", "value"]);
    assert_eq!(rows[1], ["texture_0000.pgm", "psnr", "whole", "inf"]);
    assert_eq!(rows[2], ["texture_0000.pgm", "ssim", "whole", "1"]);

    fs::write(f.path("blobs/self.tsv"), "blob_0001_label.pgm\tblob_0001_label.pgm\n").unwrap();
    let (c, rows) = eval(&["--manifest", s(&f.path("blobs/self.tsv")), "--metrics", "dice"]);
    assert_eq!(c, 0);
    assert_eq!(rows[1], ["blob_0001_label.pgm", "dice", "whole", "1"]);
}

#[test]
fn eval_counts_and_summary_recompute() {
    let f = Fixture::new();
    fs::write(
        f.path("tex/pairs.tsv"),
        "texture_0000.pgm\ttexture_0001.pgm\ntexture_0002.pgm\ttexture_0001.pgm\ntexture_0003.pgm\ttexture_0000.pgm\n",
    )
    .unwrap();
    let (c, rows) = eval(&["--manifest", s(&f.path("tex/pairs.tsv")), "--metrics", "psnr,ssim"]);
    assert_eq!(c, 0);
    let reports: Vec<_> = rows[1..].iter().filter(|r| !r[0].starts_with('#')).collect();
    let summaries: Vec<_> = rows.iter().filter(|r| r[0] == "#summary").collect();
    assert_eq!(reports.len(), 3 * 2);
    assert_eq!(summaries.len(), 2);
    for sm in summaries {
        let vals: Vec<f64> = reports
            .iter()
            .filter(|r| r[1] == sm[1] && r[2] == sm[2])
            .map(|r| r[3].parse().unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        let (m, sd): (f64, f64) = (sm[3].parse().unwrap(), sm[4].parse().unwrap());
        // printed values carry six significant digits, so each input is off
        // by up to half a unit in the sixth digit
        let unit = 5e-6 * vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((m - mean).abs() <= 2.0 * unit + 5e-6 * mean.abs(), "{sm:?} vs {mean}");
        assert!((sd - std).abs() <= 2.0 * unit + 5e-6 * std, "{sm:?} vs {std}");
        assert_eq!(sm[5], "3");
    }
}

#[test]
fn eval_regions_use_mask_manifest() {
    let f = Fixture::new();
    fs::write(f.path("tex/one.tsv"), "texture_0000.pgm\ttexture_0001.pgm\n").unwrap();
    let (c, _) = eval(&["--manifest", s(&f.path("tex/one.tsv")), "--regions", "hole"]);
    assert_eq!(c, 2);
    let (c, rows) = eval(&[
        "--manifest", s(&f.path("tex/one.tsv")), "--metrics", "psnr", "--regions", "whole,hole,valid",
        "--masks", s(&f.path("masks/manifest.tsv")),
    ]);
    // four masks against one pair
    assert_eq!(c, 2, "{rows:?}");
    fs::write(f.path("masks/one.tsv"), "mask_0000.pgm\n").unwrap();
    let (c, rows) = eval(&[
        "--manifest", s(&f.path("tex/one.tsv")), "--metrics", "psnr", "--regions", "whole,hole,valid",
        "--masks", s(&f.path("masks/one.tsv")),
    ]);
    assert_eq!(c, 0);
    let a = read_gray(f.path("tex/texture_0000.pgm")).unwrap();
    let b = read_gray(f.path("tex/texture_0001.pgm")).unwrap();
    let mask = read_mask(f.path("masks/mask_0000.pgm")).unwrap();
    let hole = pconv_core::metrics::psnr(&a, &b, 1.0, Some(&mask.holes())).unwrap();
    assert_eq!(rows[2][2], "hole");
    assert_eq!(rows[2][3], pconv_core::metrics::format_g6(hole));
}

#[test]
fn eval_unreadable_sample_is_reported() {
    let f = Fixture::new();
    fs::write(
        f.path("tex/partial.tsv"),
        "texture_0000.pgm\ttexture_0000.pgm\nghost.pgm\ttexture_0000.pgm\ntexture_0001.pgm\ttexture_0001.pgm\n",
    )
    .unwrap();
    let (c, rows) = eval(&["--manifest", s(&f.path("tex/partial.tsv")), "--metrics", "psnr"]);
    assert_eq!(c, 1);
    let names: Vec<&str> = rows[1..4].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["texture_0000.pgm", "ghost.pgm", "texture_0001.pgm"]);
    assert_eq!(rows[2][3], "error");
    assert_eq!(rows[4], ["#summary", "psnr", "whole", "inf", "nan", "2"]);
}
