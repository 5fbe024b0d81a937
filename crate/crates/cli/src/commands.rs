//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use distvar_core::degrade::{add_noise, DegradationModel};
use distvar_core::field::{resize_bilinear, upsample_bilinear, ScalarField};
use distvar_core::kernels::{fit_bank_to_analytic, FitConfig, KernelBank};
use distvar_core::metrics::evaluate;
use distvar_core::regularize::RegularizerParams;
use distvar_core::scenes::synthetic_suite;
use distvar_core::solver::{
    calibrate, restore_with_init, Initialization, RegularizationMode, SolverConfig, SolverTrace, TrainingPair,
};
use distvar_core::spectral::{cutoff_map, wiener_restore, SpectralProfile};

use crate::config::{RunConfig, Variant};
use crate::io::{read_depth, read_image, write_pfm, write_png16, write_text, Image};

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("config key `{key}` is required for this command"))
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create output directory {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

/// Depth on the high-resolution grid, bilinearly resized if needed.
fn depth_on(depth: ScalarField, dims: (usize, usize), pitch: f64) -> ScalarField {
    if depth.dims() == dims {
        depth
    } else {
        resize_bilinear(&depth, dims.0, dims.1).with_pitch(pitch)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Synthesizes the low-resolution observation of every channel. Channel `c`
/// draws its noise from seed `rng_seed + c`.
pub fn synthesize(cfg: &RunConfig, hr: &Image, depth: &ScalarField, seed: u64) -> Result<(Image, DegradationModel)> {
    let model = DegradationModel::build(&cfg.atmosphere, depth, cfg.num_bins, cfg.scale)?;
    let channels = hr
        .channels
        .iter()
        .enumerate()
        .map(|(c, u)| {
            let clean = model.apply(u, depth)?;
            Ok(add_noise(&clean, cfg.atmosphere.noise_sigma, seed.wrapping_add(c as u64))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Image { channels }, model))
}

pub fn manifest(cfg: &RunConfig, hr: &Path, depth: &Path) -> String {
    let a = &cfg.atmosphere;
    let mut out = String::from("# distvar degrade manifest; valid as a degrade config\n");
    let _ = writeln!(out, "hr_image = {}", absolute(hr).display());
    let _ = writeln!(out, "depth_map = {}", absolute(depth).display());
    let _ = writeln!(out, "depth_scale = {}", cfg.depth_scale);
    let _ = writeln!(out, "pixel_pitch = {}", cfg.pixel_pitch);
    let _ = writeln!(out, "seed = {}", a.rng_seed);
    let _ = writeln!(out, "scale = {}", cfg.scale);
    let _ = writeln!(out, "num_bins = {}", cfg.num_bins);
    let _ = writeln!(out, "aperture_scale = {}", a.aperture_scale);
    let _ = writeln!(out, "beta0 = {}", a.beta0);
    let _ = writeln!(out, "wavelength = {}", a.wavelength);
    let _ = writeln!(out, "refractive_index = {}", a.refractive_index);
    let _ = writeln!(out, "particle_density = {}", a.particle_density);
    let _ = writeln!(out, "noise_sigma = {}", a.noise_sigma);
    out
}

pub fn degrade(cfg: &RunConfig) -> Result<()> {
    let hr_path = required(&cfg.hr_image, "hr_image")?;
    let depth_path = required(&cfg.depth_map, "depth_map")?;
    let hr = read_image(hr_path, cfg.pixel_pitch)?;
    let depth = depth_on(read_depth(depth_path, cfg.depth_scale, cfg.pixel_pitch)?, hr.dims(), cfg.pixel_pitch);
    let (lr, _) = synthesize(cfg, &hr, &depth, cfg.atmosphere.rng_seed)?;
    let out = prepare_out(cfg)?;
    write_png16(&out.join("lr.png"), &lr)?;
    write_text(&out.join("manifest.txt"), &manifest(cfg, hr_path, depth_path))?;
    Ok(())
}

fn linearized_bank(cfg: &RunConfig, depth: &ScalarField) -> Result<KernelBank> {
    let anchors = KernelBank::uniform_anchors(depth.min_value(), depth.max_value(), cfg.bank_anchors);
    Ok(KernelBank::linearized(
        &cfg.regularizer,
        anchors,
        cfg.bank_kernel_size / 2,
        cfg.bank_lipschitz,
    )?)
}

/// Loads the configured bank, or fits one to the analytic gradient on the
/// given sample images.
fn obtain_bank(cfg: &RunConfig, depth: &ScalarField, samples: &[ScalarField]) -> Result<KernelBank> {
    if let Some(path) = &cfg.kernel_bank {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read kernel bank {}", path.display()))?;
        return Ok(KernelBank::from_bytes(&bytes)?);
    }
    let bank = linearized_bank(cfg, depth)?;
    if cfg.bank_fit_iterations == 0 {
        return Ok(bank);
    }
    let pairs: Vec<(ScalarField, ScalarField)> = samples.iter().map(|u| (u.clone(), depth.clone())).collect();
    let fit = FitConfig {
        iterations: cfg.bank_fit_iterations,
        ..Default::default()
    };
    Ok(fit_bank_to_analytic(&bank, &pairs, &cfg.regularizer, &fit)?.0)
}

fn initial_iterate(
    cfg: &RunConfig,
    init: Initialization,
    lr: &ScalarField,
    model: &DegradationModel,
    depth: &ScalarField,
) -> Result<ScalarField> {
    Ok(match init {
        Initialization::Bilinear => upsample_bilinear(lr, model.scale()).with_pitch(model.pixel_pitch()),
        Initialization::Wiener => wiener_restore(lr, model, depth, &cfg.spectral())?,
    })
}

/// Restores every channel; returns the clamped image and per-channel traces.
#[allow(clippy::too_many_arguments)]
fn restore_image(
    cfg: &RunConfig,
    lr: &Image,
    model: &DegradationModel,
    depth: &ScalarField,
    params: &RegularizerParams,
    solver: &SolverConfig,
    bank: Option<&KernelBank>,
) -> Result<(Image, Vec<SolverTrace>)> {
    let mut channels = Vec::with_capacity(lr.channels.len());
    let mut traces = Vec::with_capacity(lr.channels.len());
    for u0 in &lr.channels {
        let init = initial_iterate(cfg, solver.init, u0, model, depth)?;
        let (u, trace) = restore_with_init(u0, init, depth, model, params, solver, bank)?;
        channels.push(u.clamp(0.0, 1.0));
        traces.push(trace);
    }
    Ok((Image { channels }, traces))
}

pub fn restore(cfg: &RunConfig) -> Result<()> {
    let lr_path = required(&cfg.lr_image, "lr_image")?;
    let depth_path = required(&cfg.depth_map, "depth_map")?;
    let lr_pitch = cfg.pixel_pitch * cfg.scale as f64;
    let lr = read_image(lr_path, lr_pitch)?;
    let (lw, lh) = lr.dims();
    let hr_dims = (lw * cfg.scale, lh * cfg.scale);
    let raw_depth = read_depth(depth_path, cfg.depth_scale, cfg.pixel_pitch)?;
    if raw_depth.dims() != hr_dims && raw_depth.dims() != (lw, lh) {
        bail!(
            "depth map is {:?}; expected the HR size {hr_dims:?} or the LR size {:?}",
            raw_depth.dims(),
            (lw, lh)
        );
    }
    let depth = depth_on(raw_depth, hr_dims, cfg.pixel_pitch);
    let model = DegradationModel::build(&cfg.atmosphere, &depth, cfg.num_bins, cfg.scale)?;
    let bank = if cfg.solver.mode == RegularizationMode::Bank {
        let samples = lr
            .channels
            .iter()
            .map(|u| initial_iterate(cfg, cfg.solver.init, u, &model, &depth))
            .collect::<Result<Vec<_>>>()?;
        Some(obtain_bank(cfg, &depth, &samples)?)
    } else {
        None
    };
    let (sr, traces) = restore_image(cfg, &lr, &model, &depth, &cfg.regularizer, &cfg.solver, bank.as_ref())?;
    let out = prepare_out(cfg)?;
    write_png16(&out.join("sr.png"), &sr)?;
    if traces.len() == 1 {
        write_text(&out.join("trace.csv"), &traces[0].to_csv())?;
    } else {
        for (trace, tag) in traces.iter().zip(["r", "g", "b"]) {
            write_text(&out.join(format!("trace_{tag}.csv")), &trace.to_csv())?;
        }
    }
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let depth_path = required(&cfg.depth_map, "depth_map")?;
    let depth = read_depth(depth_path, cfg.depth_scale, cfg.pixel_pitch)?;
    let spectral = cfg.spectral();
    let model = DegradationModel::build(&cfg.atmosphere, &depth, cfg.num_bins, 1)?;
    let profile = SpectralProfile::compute(&model, &spectral)?;
    let map = cutoff_map(&depth, &cfg.atmosphere, &spectral)?;
    let peak = map.max_value();
    let normalized = map.map(|v| if peak > 0.0 { v / peak } else { 0.0 });
    let out = prepare_out(cfg)?;
    write_png16(&out.join("cutoff.png"), &Image::gray(normalized))?;
    write_pfm(&out.join("cutoff.pfm"), &map)?;
    let mut csv = String::from("depth,rank,cutoff\n");
    for b in &profile.bins {
        let _ = writeln!(csv, "{},{},{}", b.depth, b.rank, b.cutoff);
    }
    write_text(&out.join("rank.csv"), &csv)?;
    println!("cutoff map scale: 1.0 = {peak} cycles per meter");
    Ok(())
}

/// One benchmark or calibration item.
pub struct Item {
    pub name: String,
    pub hr: Image,
    pub depth: ScalarField,
    pub lr: Option<Image>,
}

fn find_with_ext(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Synthetic suite, or `<name>.png|pgm` + `<name>_depth.png|pfm` (+ optional
/// `<name>_lr.png`) triples from a directory, sorted by name.
pub fn load_items(cfg: &RunConfig, synthetic: bool) -> Result<Vec<Item>> {
    if synthetic || cfg.synthetic {
        return Ok(synthetic_suite(cfg.synthetic_count, cfg.synthetic_size, cfg.atmosphere.rng_seed)
            .into_iter()
            .map(|s| Item {
                name: s.name,
                hr: Image::gray(s.hr.with_pitch(cfg.pixel_pitch)),
                depth: s.depth.with_pitch(cfg.pixel_pitch),
                lr: None,
            })
            .collect());
    }
    let dir = required(&cfg.dataset_dir, "dataset_dir")?;
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let file = e.file_name().to_string_lossy().into_owned();
            let stem = file.rsplit_once('.').map(|(s, _)| s.to_string())?;
            stem.strip_suffix("_depth").map(String::from)
        })
        .collect();
    names.sort();
    names.dedup();
    let items = names
        .into_iter()
        .map(|name| {
            let hr_path = find_with_ext(dir, &name, &["png", "pgm"])
                .with_context(|| format!("no HR image for `{name}` in {}", dir.display()))?;
            let depth_path = find_with_ext(dir, &format!("{name}_depth"), &["pfm", "png", "pgm"]).expect("listed");
            let hr = read_image(&hr_path, cfg.pixel_pitch)?;
            let depth = depth_on(read_depth(&depth_path, cfg.depth_scale, cfg.pixel_pitch)?, hr.dims(), cfg.pixel_pitch);
            let lr = find_with_ext(dir, &format!("{name}_lr"), &["png", "pgm"])
                .map(|p| read_image(&p, cfg.pixel_pitch * cfg.scale as f64))
                .transpose()?;
            Ok(Item { name, hr, depth, lr })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        bail!("dataset {} is empty (expected <name>.png with <name>_depth.png|pfm)", dir.display());
    }
    Ok(items)
}

pub struct BenchRow {
    pub name: String,
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
    pub runtime_ms: f64,
}

fn run_variant(
    cfg: &RunConfig,
    variant: Variant,
    lr: &Image,
    model: &DegradationModel,
    depth: &ScalarField,
) -> Result<Image> {
    let per_channel = |f: &dyn Fn(&ScalarField) -> Result<ScalarField>| -> Result<Image> {
        let channels = lr
            .channels
            .iter()
            .map(|u| Ok(f(u)?.clamp(0.0, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Image { channels })
    };
    let solver = SolverConfig {
        mode: RegularizationMode::Analytic,
        init: Initialization::Bilinear,
        ..cfg.solver.clone()
    };
    match variant {
        Variant::Bilinear => per_channel(&|u| Ok(upsample_bilinear(u, model.scale()))),
        Variant::Wiener => per_channel(&|u| Ok(wiener_restore(u, model, depth, &cfg.spectral())?)),
        Variant::NoFlow => {
            let s = SolverConfig { iterations: 0, ..solver };
            Ok(restore_image(cfg, lr, model, depth, &cfg.regularizer, &s, None)?.0)
        }
        Variant::Full => Ok(restore_image(cfg, lr, model, depth, &cfg.regularizer, &solver, None)?.0),
        Variant::ConstantG => {
            let params = cfg.regularizer.constant_g(depth.mean());
            Ok(restore_image(cfg, lr, model, depth, &params, &solver, None)?.0)
        }
        Variant::Bank => {
            let samples = lr
                .channels
                .iter()
                .map(|u| initial_iterate(cfg, Initialization::Bilinear, u, model, depth))
                .collect::<Result<Vec<_>>>()?;
            let bank = obtain_bank(cfg, depth, &samples)?;
            let s = SolverConfig {
                mode: RegularizationMode::Bank,
                ..solver
            };
            Ok(restore_image(cfg, lr, model, depth, &cfg.regularizer, &s, Some(&bank))?.0)
        }
        Variant::Spectral => {
            let s = SolverConfig {
                init: Initialization::Wiener,
                ..solver
            };
            Ok(restore_image(cfg, lr, model, depth, &cfg.regularizer, &s, None)?.0)
        }
    }
}

pub fn bench_rows(cfg: &RunConfig, items: &[Item]) -> Result<Vec<BenchRow>> {
    let per_item: Vec<Vec<BenchRow>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let seed = cfg.atmosphere.rng_seed.wrapping_add(1000 * i as u64);
            let (lr, model) = match &item.lr {
                Some(lr) => (
                    lr.clone(),
                    DegradationModel::build(&cfg.atmosphere, &item.depth, cfg.num_bins, cfg.scale)?,
                ),
                None => synthesize(cfg, &item.hr, &item.depth, seed)?,
            };
            let reference = item.hr.luma()?;
            cfg.variants
                .iter()
                .map(|&variant| {
                    let start = Instant::now();
                    let sr = run_variant(cfg, variant, &lr, &model, &item.depth)?;
                    let runtime_ms = (start.elapsed().as_secs_f64() * 1e3).max(1e-3);
                    let report = evaluate(&sr.luma()?, &reference, cfg.shave)?;
                    Ok(BenchRow {
                        name: item.name.clone(),
                        variant,
                        psnr: report.psnr,
                        ssim: report.ssim,
                        runtime_ms,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

pub fn bench_csv(cfg: &RunConfig, rows: &[BenchRow]) -> String {
    let mut csv = String::from("name,scale,variant,psnr,ssim,runtime_ms\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.3}",
            r.name,
            cfg.scale,
            r.variant.name(),
            r.psnr,
            r.ssim,
            r.runtime_ms
        );
    }
    for &variant in &cfg.variants {
        let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == variant).collect();
        let n = sel.len().max(1) as f64;
        let mean = |f: &dyn Fn(&BenchRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            csv,
            "mean,{},{},{:.6},{:.6},{:.3}",
            cfg.scale,
            variant.name(),
            mean(&|r| r.psnr),
            mean(&|r| r.ssim),
            mean(&|r| r.runtime_ms)
        );
    }
    csv
}

pub fn bench(cfg: &RunConfig, synthetic: bool) -> Result<()> {
    let items = load_items(cfg, synthetic)?;
    let rows = bench_rows(cfg, &items)?;
    let csv = bench_csv(cfg, &rows);
    let out = prepare_out(cfg)?;
    write_text(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn calibrate_cmd(cfg: &RunConfig, synthetic: bool) -> Result<()> {
    let items = load_items(cfg, synthetic)?;
    let pairs = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let hr = Image::gray(item.hr.luma()?);
            let lr = match &item.lr {
                Some(lr) => Image::gray(lr.luma()?),
                None => synthesize(cfg, &hr, &item.depth, cfg.atmosphere.rng_seed.wrapping_add(1000 * i as u64))?.0,
            };
            Ok(TrainingPair::new(
                hr.channels[0].clone(),
                lr.channels[0].clone(),
                item.depth.clone(),
                &cfg.atmosphere,
                cfg.num_bins,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = calibrate(&cfg.regularizer, &pairs, &cfg.calibration)?;
    let p = &report.params;
    let mut conf = String::from("# calibrated regularizer parameters\n");
    for (k, v) in [
        ("lambda", p.lambda),
        ("mu", p.mu),
        ("d0", p.d0),
        ("gamma0", p.gamma0),
        ("gamma1", p.gamma1),
        ("d1", p.d1),
        ("sigma_r0", p.sigma_r0),
        ("d_sigma", p.d_sigma),
        ("h_mid", p.h_mid),
        ("h_width", p.h_width),
    ] {
        let _ = writeln!(conf, "{k} = {v}");
    }
    let mut trace = String::from("step,objective\n");
    for (i, v) in report.objective_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v:e}");
    }
    let out = prepare_out(cfg)?;
    write_text(&out.join("calibrated.conf"), &conf)?;
    write_text(&out.join("calibration.csv"), &trace)?;
    print!("{conf}");
    Ok(())
}
