//! The `voxseg` command line: `synth`, `preprocess`, `train`, `predict`,
//! `eval` (plus `compare`), each taking `--config <path>` and `key=value`
//! overrides. Exit codes: 0 success, 1 usage error, 2 data error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{NormalizeMode, RunConfig};
use crate::data::{normalize_minmax, normalize_zscore, porosity, synth_generate};
use crate::error::{Error, Result};
use crate::inference::{binarize, plan_tiles, predict_volume};
use crate::metrics::{confusion_counts, iou_report};
use crate::preprocess::{bernsen_threshold, median3d, nlm_denoise, quantize_u16_to_u8};
use crate::train::{compare_variants, reference_table, render_variant_table, train_loop};
use crate::unet::VariantKind;
use crate::volume::{load_volume, save_volume, stack_slices, write_pgm, Dtype, Volume};

#[derive(Parser)]
#[command(name = "voxseg", version, about = "Volumetric segmentation of AM defects in XCT volumes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled volume (image + defect mask).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output base path; writes <out>_image.vhdr/.vol and <out>_mask.vhdr/.vol.
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for the `seed` config key.
        #[arg(long)]
        seed: Option<u64>,
        /// key=value config overrides.
        #[arg(trailing_var_arg = true)]
        overrides: Vec<String>,
    },
    /// Run the label-generation chain: quantize -> median -> nlm -> bernsen.
    Preprocess {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Volume (.vhdr/.vol) or a directory of PGM slices (stacked in
        /// lexicographic filename order).
        #[arg(long)]
        input: PathBuf,
        /// Output base path for the generated mask volume.
        #[arg(long)]
        output: PathBuf,
        /// Also write the filtered (pre-threshold) image volume here.
        #[arg(long)]
        filtered_out: Option<PathBuf>,
        #[arg(trailing_var_arg = true)]
        overrides: Vec<String>,
    },
    /// Train per the config; writes checkpoints and the CSV log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true)]
        overrides: Vec<String>,
    },
    /// Sliding-window inference: writes the probability volume and the mask.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output base path; writes <out>_prob (f32) and <out>_mask (u8).
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-slice 8-bit PGM exports of the probability map.
        #[arg(long)]
        export_slices: Option<PathBuf>,
        #[arg(trailing_var_arg = true)]
        overrides: Vec<String>,
    },
    /// Compare a predicted mask against a reference mask.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also print the published full-scale reference numbers.
        #[arg(long)]
        compare_paper: bool,
    },
    /// Train every variant on identical data and print the comparison table.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated variant names (default: all three).
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        compare_paper: bool,
        #[arg(trailing_var_arg = true)]
        overrides: Vec<String>,
    },
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn normalize_for(cfg: &RunConfig, v: &Volume) -> Volume {
    match cfg.data.normalize {
        NormalizeMode::Zscore => normalize_zscore(v),
        NormalizeMode::Minmax => normalize_minmax(v),
    }
}

fn load_input_volume(path: &Path, spacing: f64) -> Result<Volume> {
    if path.is_dir() {
        let mut slices: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
            .collect();
        slices.sort();
        stack_slices(&slices, spacing)
    } else {
        load_volume(path)
    }
}

fn cmd_synth(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>, overrides: Vec<String>) -> Result<()> {
    let mut cfg = load_config(&config, &overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = cfg.synth.to_spec(cfg.data.spacing, cfg.seed);
    let lv = synth_generate(&spec)?;
    let image_path = out.with_file_name(format!(
        "{}_image",
        out.file_name().and_then(|s| s.to_str()).unwrap_or("synth")
    ));
    let mask_path = out.with_file_name(format!(
        "{}_mask",
        out.file_name().and_then(|s| s.to_str()).unwrap_or("synth")
    ));
    save_volume(&image_path, &lv.image)?;
    save_volume(&mask_path, &lv.mask)?;
    println!(
        "synth: dims {:?} porosity {:.6} -> {} / {}",
        lv.image.dims,
        porosity(&lv.mask)?,
        image_path.display(),
        mask_path.display()
    );
    Ok(())
}

fn cmd_preprocess(
    config: Option<PathBuf>,
    input: PathBuf,
    output: PathBuf,
    filtered_out: Option<PathBuf>,
    overrides: Vec<String>,
) -> Result<()> {
    let cfg = load_config(&config, &overrides)?;
    let p = &cfg.preprocess;
    let raw = load_input_volume(&input, cfg.data.spacing)?;
    let v8 = match raw.dtype() {
        Dtype::U16 => quantize_u16_to_u8(&raw, p.quantize_lo, p.quantize_hi)?,
        Dtype::U8 => raw,
        Dtype::F32 => {
            return Err(Error::Data(
                "preprocess expects a u8 or u16 volume (XCT grayscale), got f32".into(),
            ))
        }
    };
    let filtered = nlm_denoise(
        &median3d(&v8, p.median_radius)?,
        p.nlm_h,
        p.nlm_patch_radius,
        p.nlm_search_radius,
    )?;
    let mask = bernsen_threshold(&filtered, &p.bernsen)?;
    save_volume(&output, &mask)?;
    if let Some(fp) = filtered_out {
        save_volume(&fp, &filtered)?;
    }
    println!(
        "preprocess: {} -> {} (porosity {:.6})",
        input.display(),
        output.display(),
        porosity(&mask)?
    );
    Ok(())
}

fn cmd_train(config: Option<PathBuf>, overrides: Vec<String>) -> Result<()> {
    let cfg = load_config(&config, &overrides)?;
    let (_, outcome) = train_loop(&cfg)?;
    let losses: Vec<f64> = outcome.log.records.iter().filter_map(|r| r.loss).collect();
    println!(
        "train: {} iterations in {:.1}s, final loss {:.6}, checkpoints {} / {}",
        losses.len(),
        outcome.wall_secs,
        losses.last().copied().unwrap_or(f64::NAN),
        outcome.final_checkpoint.display(),
        outcome.best_checkpoint.display()
    );
    if let Some(v) = outcome.final_val {
        println!(
            "validation: mean_iou {:.6} defect_iou {:.6} background_iou {:.6}",
            v.mean_iou, v.iou_defect, v.iou_background
        );
    }
    Ok(())
}

fn cmd_predict(
    config: Option<PathBuf>,
    checkpoint: PathBuf,
    input: PathBuf,
    out: PathBuf,
    export_slices: Option<PathBuf>,
    overrides: Vec<String>,
) -> Result<()> {
    let cfg = load_config(&config, &overrides)?;
    let (mut model, _) = load_checkpoint(&checkpoint)?;
    let raw = load_input_volume(&input, cfg.data.spacing)?;
    let normalized = normalize_for(&cfg, &raw);
    let plan = plan_tiles(raw.dims, cfg.inference.patch, cfg.inference.stride)?;
    let prob = predict_volume(&mut model, &normalized, &plan, cfg.inference.blend)?;
    let mask = binarize(&prob, cfg.inference.threshold)?;

    let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("pred");
    let prob_path = out.with_file_name(format!("{name}_prob"));
    let mask_path = out.with_file_name(format!("{name}_mask"));
    save_volume(&prob_path, &prob.to_volume())?;
    save_volume(&mask_path, &mask)?;

    if let Some(dir) = export_slices {
        std::fs::create_dir_all(&dir)?;
        let [d, h, w] = prob.dims;
        for k in 0..d {
            let plane = h * w;
            let bytes: Vec<u8> = prob.data[k * plane..(k + 1) * plane]
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            write_pgm(&dir.join(format!("slice_{k:04}.pgm")), w, h, &bytes)?;
        }
    }
    println!(
        "predict: {} tiles, porosity {:.6} -> {} / {}",
        plan.origins.len(),
        porosity(&mask)?,
        prob_path.display(),
        mask_path.display()
    );
    Ok(())
}

fn cmd_eval(pred: PathBuf, truth: PathBuf, compare_paper: bool) -> Result<()> {
    let p = load_volume(&pred)?;
    let t = load_volume(&truth)?;
    let c = confusion_counts(&p, &t)?;
    let r = iou_report(&c);
    println!("confusion: tp={} fp={} fn={} tn={}", c.tp, c.fp, c.fn_, c.tn);
    println!("iou_defect = {:.6}", r.iou_defect);
    println!("iou_background = {:.6}", r.iou_background);
    println!("mean_iou = {:.6}", r.mean_iou);
    println!("porosity_pred = {:.6}", porosity(&p)?);
    println!("porosity_truth = {:.6}", porosity(&t)?);
    if compare_paper {
        print!("{}", reference_table());
    }
    Ok(())
}

fn cmd_compare(
    config: Option<PathBuf>,
    variants: Option<String>,
    compare_paper: bool,
    overrides: Vec<String>,
) -> Result<()> {
    let cfg = load_config(&config, &overrides)?;
    let list: Vec<VariantKind> = match variants {
        None => VariantKind::ALL.to_vec(),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(VariantKind::parse)
            .collect::<Result<_>>()?,
    };
    let rows = compare_variants(&cfg, &list)?;
    print!("{}", render_variant_table(&rows, compare_paper));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out, seed, overrides } => cmd_synth(config, out, seed, overrides),
        Cmd::Preprocess { config, input, output, filtered_out, overrides } => {
            cmd_preprocess(config, input, output, filtered_out, overrides)
        }
        Cmd::Train { config, overrides } => cmd_train(config, overrides),
        Cmd::Predict { config, checkpoint, input, out, export_slices, overrides } => {
            cmd_predict(config, checkpoint, input, out, export_slices, overrides)
        }
        Cmd::Eval { pred, truth, compare_paper } => cmd_eval(pred, truth, compare_paper),
        Cmd::Compare { config, variants, compare_paper, overrides } => {
            cmd_compare(config, variants, compare_paper, overrides)
        }
    }
}

/// Runs the CLI on the given argv (including the program name).
/// Returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                match e {
                    Error::Config(_) => 1,
                    _ => 2,
                }
            }
        },
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            code
        }
    }
}
