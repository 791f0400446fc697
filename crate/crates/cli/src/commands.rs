use std::fs;
use std::path::{Path, PathBuf};

use photon_da_core::depth::BinIndexMap;
use photon_da_core::depth::{DepthMap, SPEED_OF_LIGHT};
use photon_da_core::gradcheck::run_suite;
use photon_da_core::inference::{tile_and_stitch, TilePlan};
use photon_da_core::io::{
    read_checkpoint, read_cube, read_depth, write_atomic, write_checkpoint, write_cube, write_depth, write_pgm16,
    Checkpoint,
};
use photon_da_core::metrics::EvalReport;
use photon_da_core::numerics::Tensor;
use photon_da_core::params::ParamStore;
use photon_da_core::simulator::{
    default_support_bins, derive_seed, quantize_depth, rate_cube_with_noise, sample_histogram, synth_scene,
    HistogramCube, NoiseProfile, PulseWaveform, Sbr, SimConfig,
};
use photon_da_core::stin::{Stin, StinConfig};
use photon_da_core::trainer::{self, adapt_csv, dann_adapt, pretrain_csv, DomainBatch, StinTask, TrainError};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_sbrs, RunConfig};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Resolved configuration plus the output directory every artifact goes to.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    /// Loads the config, applies command-line overrides and records the resolved copy.
    pub fn open(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o;
        }
        let out = cfg.out.clone();
        fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        write_atomic(&out.join("resolved_config.toml"), cfg.to_toml().as_bytes()).map_err(runtime)?;
        Ok(Self { cfg, out })
    }

    fn data_dir(&self, split: &str) -> PathBuf {
        self.out.join("data").join(split)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| runtime(format!("{}: {e}", d.display())))?;
        Ok(d)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.out.join(name);
        write_atomic(&p, text.as_bytes()).map_err(runtime)?;
        Ok(p)
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

/// Files with extension `ext` in `dir`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let rd = fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// A single file, or every `ext` file of a directory.
fn file_or_dir(path: &Path, ext: &str, what: &str) -> Result<Vec<PathBuf>, CliError> {
    require(path, what)?;
    let files = if path.is_dir() { list_files(path, ext)? } else { vec![path.to_path_buf()] };
    if files.is_empty() {
        return Err(invalid(format!("{what} {} holds no .{ext} files", path.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_checkpoint(path: &Path) -> Result<(Stin, ParamStore<f32>), CliError> {
    require(path, "checkpoint")?;
    let ck = read_checkpoint(path).map_err(invalid)?;
    let net = Stin::new(ck.config).map_err(invalid)?;
    net.check_predictor_params(&ck.params).map_err(invalid)?;
    Ok((net, ck.params))
}

#[derive(Serialize)]
struct ManifestEntry {
    split: &'static str,
    index: usize,
    cube: String,
    depth: Option<String>,
    scene: String,
    sbr: String,
    scene_seed: u64,
    photon_seed: u64,
    total_counts: u64,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    bins: usize,
    delta_ps: f64,
    source_count: usize,
    target_count: usize,
    test_count: usize,
    samples: Vec<ManifestEntry>,
}

/// Share of signal mass outside the histogram worth a warning; pulse tails alone stay far below.
const CLIP_WARN: f64 = 0.01;

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let s = &cfg.sim;
    let pulse = match &s.pulse_file {
        Some(p) => {
            require(p, "pulse file")?;
            PulseWaveform::load(p, s.delta_ps).map_err(invalid)?
        }
        None => PulseWaveform::gaussian(s.fwhm_ps, s.delta_ps, default_support_bins(s.fwhm_ps, s.delta_ps))
            .map_err(invalid)?,
    };
    let noise = match &s.noise_profile {
        Some(p) => {
            require(p, "noise profile")?;
            NoiseProfile::load(p).map_err(invalid)?
        }
        None => NoiseProfile::Uniform,
    };
    let d = &cfg.dataset;
    let splits: [(&'static str, usize, Vec<Sbr>, bool); 3] = [
        ("source", d.source_count, parse_sbrs(&d.source_sbr, "dataset.source_sbr")?, true),
        ("target", d.target_count, parse_sbrs(&d.target_sbr, "dataset.target_sbr")?, false),
        ("test", d.test_count, parse_sbrs(&d.test_sbr, "dataset.test_sbr")?, true),
    ];
    let mut samples = Vec::new();
    for (split, count, sbrs, labeled) in &splits {
        let dir = ctx.data_dir(split);
        fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let entries: Vec<ManifestEntry> = (0..*count)
            .into_par_iter()
            .map(|i| {
                let kind = s.scene_kinds[i % s.scene_kinds.len()];
                let sbr = sbrs[i % sbrs.len()];
                let scene_seed = derive_seed(cfg.seed, &format!("{split}/scene"), i as u64);
                let photon_seed = derive_seed(cfg.seed, &format!("{split}/photons"), i as u64);
                let scene = synth_scene(
                    kind,
                    (s.scene_size[0], s.scene_size[1]),
                    (s.depth_range[0], s.depth_range[1]),
                    scene_seed,
                )
                .map_err(invalid)?;
                let sim = SimConfig {
                    n_illum: s.n_illum,
                    eta: s.eta,
                    ..SimConfig::new(s.bins, s.delta_ps, sbr, photon_seed)
                };
                let rates = rate_cube_with_noise(&scene, &pulse, &sim, &noise).map_err(invalid)?;
                if rates.clipped_fraction > CLIP_WARN {
                    log::warn!(
                        "{split} {i}: {:.3}% of signal falls outside the histogram",
                        100.0 * rates.clipped_fraction
                    );
                }
                let cube = sample_histogram(&rates, sim, photon_seed).map_err(runtime)?;
                let name = format!("{i:04}");
                let cube_path = dir.join(format!("{name}.cube"));
                write_cube(&cube, &cube_path, s.count_dtype).map_err(runtime)?;
                let depth = if *labeled {
                    let p = dir.join(format!("{name}.depth"));
                    write_depth(&scene.depth, &p).map_err(runtime)?;
                    Some(format!("{split}/{name}.depth"))
                } else {
                    None
                };
                Ok(ManifestEntry {
                    split,
                    index: i,
                    cube: format!("{split}/{name}.cube"),
                    depth,
                    scene: format!("{kind:?}").to_lowercase(),
                    sbr: sbr.to_string(),
                    scene_seed,
                    photon_seed,
                    total_counts: cube.total_counts(),
                })
            })
            .collect::<Result<_, CliError>>()?;
        log::info!("{split}: {} cubes in {}", entries.len(), dir.display());
        samples.extend(entries);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        bins: s.bins,
        delta_ps: s.delta_ps,
        source_count: d.source_count,
        target_count: d.target_count,
        test_count: d.test_count,
        samples,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    write_atomic(&ctx.out.join("data").join("manifest.json"), json.as_bytes()).map_err(runtime)?;
    Ok(())
}

/// Cubes of a directory, all at the same bin width.
fn read_cubes(files: &[PathBuf], net: &StinConfig) -> Result<(Vec<HistogramCube>, f64), CliError> {
    let cubes: Vec<HistogramCube> = files
        .iter()
        .map(|f| read_cube(f).map_err(|e| invalid(format!("{}: {e}", f.display()))))
        .collect::<Result<_, _>>()?;
    let delta = cubes[0].meta.delta_ps;
    for (c, f) in cubes.iter().zip(files) {
        if c.bins != net.bins {
            return Err(invalid(format!("{}: {} bins, network expects {}", f.display(), c.bins, net.bins)));
        }
        if c.meta.delta_ps != delta {
            return Err(invalid(format!(
                "{}: bin width {} ps differs from {} ps",
                f.display(),
                c.meta.delta_ps,
                delta
            )));
        }
    }
    Ok((cubes, delta))
}

fn tiles(cube: &HistogramCube, patch: (usize, usize), name: &Path) -> Result<Vec<(usize, usize)>, CliError> {
    if !cube.nx.is_multiple_of(patch.0) || !cube.ny.is_multiple_of(patch.1) {
        return Err(invalid(format!(
            "{}: scene {}x{} is not a multiple of the {}x{} training patch",
            name.display(),
            cube.nx,
            cube.ny,
            patch.0,
            patch.1
        )));
    }
    Ok(TilePlan::new((cube.nx, cube.ny), patch).map_err(invalid)?.origins)
}

type LabeledPatches = Vec<(Tensor<f32>, BinIndexMap)>;

/// Labeled training patches from `*.cube` files with `*.depth` siblings.
fn labeled_patches(dir: &Path, net: &StinConfig) -> Result<(LabeledPatches, f64), CliError> {
    require(dir, "source directory")?;
    let files = list_files(dir, "cube")?;
    if files.is_empty() {
        return Err(invalid(format!("source directory {} holds no cubes", dir.display())));
    }
    let (cubes, delta) = read_cubes(&files, net)?;
    let (h, w) = net.patch;
    let mut out = Vec::new();
    for (cube, f) in cubes.iter().zip(&files) {
        let dpath = f.with_extension("depth");
        require(&dpath, "ground-truth depth")?;
        let depth = read_depth(&dpath).map_err(|e| invalid(format!("{}: {e}", dpath.display())))?;
        if depth.dims() != (cube.nx, cube.ny) {
            return Err(invalid(format!("{}: depth {:?} does not match cube", dpath.display(), depth.dims())));
        }
        let bins = quantize_depth(&depth, delta, SPEED_OF_LIGHT, cube.bins).map_err(invalid)?;
        for (i, j) in tiles(cube, net.patch, f)? {
            out.push((cube.patch(i, j, h, w).to_tensor::<f32>(), bins.crop(i, j, h, w)));
        }
    }
    Ok((out, delta))
}

pub fn pretrain(ctx: &Context) -> Result<(), CliError> {
    let net_cfg = ctx.cfg.stin_config()?;
    let train = ctx.cfg.train_config();
    let source_dir = ctx.cfg.paths.source.clone().unwrap_or_else(|| ctx.data_dir("source"));
    let (source, delta_ps) = labeled_patches(&source_dir, &net_cfg)?;
    log::info!("pretraining on {} patches from {}", source.len(), source_dir.display());
    let net = Stin::new(net_cfg.clone()).map_err(invalid)?;
    let task = StinTask { net: net.clone(), delta_ps };
    let init = net.init_params::<f32>(train.seed);
    let batches = source.len().div_ceil(train.batch_size) as u64;
    let ckpt_dir = if train.checkpoint_every > 0 { Some(ctx.subdir("checkpoints")?) } else { None };
    let outcome = trainer::pretrain(&task, &init, &source, &train, |rec, params, rng| {
        if let Some(dir) = &ckpt_dir {
            if rec.epoch % train.checkpoint_every == 0 {
                let ck = Checkpoint {
                    config: net_cfg.clone(),
                    rng: Some(rng.clone()),
                    step: rec.epoch as u64 * batches,
                    params: params.clone(),
                };
                write_checkpoint(&ck, &dir.join(format!("pretrain_epoch_{:04}.ckpt", rec.epoch)))
                    .map_err(|e| TrainError::Config(e.to_string()))?;
            }
        }
        Ok(())
    })
    .map_err(runtime)?;
    ctx.write_text("pretrain_loss.csv", &pretrain_csv(&outcome.trace))?;
    let ck = Checkpoint { config: net_cfg, rng: Some(outcome.rng), step: outcome.adam.step, params: outcome.params };
    let path = ctx.out.join("pretrained.ckpt");
    write_checkpoint(&ck, &path).map_err(runtime)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn adapt(ctx: &Context) -> Result<(), CliError> {
    let paths = &ctx.cfg.paths;
    let ck_path = paths.checkpoint.clone().unwrap_or_else(|| ctx.out.join("pretrained.ckpt"));
    let (net, pretrained) = load_checkpoint(&ck_path)?;
    let net_cfg = net.config().clone();

    let target_dir = paths.target.clone().unwrap_or_else(|| ctx.data_dir("target"));
    require(&target_dir, "target directory")?;
    let labels = list_files(&target_dir, "depth")?;
    if !labels.is_empty() {
        return Err(invalid(format!(
            "target directory {} contains {} ground-truth depth files; adaptation data must be unlabeled",
            target_dir.display(),
            labels.len()
        )));
    }
    let target_files = list_files(&target_dir, "cube")?;
    if target_files.is_empty() {
        return Err(invalid(format!("target directory {} holds no cubes", target_dir.display())));
    }
    let (target_cubes, target_delta) = read_cubes(&target_files, &net_cfg)?;
    let (h, w) = net_cfg.patch;
    let mut target = Vec::new();
    for (cube, f) in target_cubes.iter().zip(&target_files) {
        for (i, j) in tiles(cube, net_cfg.patch, f)? {
            target.push(cube.patch(i, j, h, w).to_tensor::<f32>());
        }
    }

    let source_dir = paths.source.clone().unwrap_or_else(|| ctx.data_dir("source"));
    let (source, delta_ps) = labeled_patches(&source_dir, &net_cfg)?;
    if target_delta != delta_ps {
        return Err(invalid(format!("target bin width {target_delta} ps differs from source {delta_ps} ps")));
    }
    log::info!("adapting with {} source and {} target patches", source.len(), target.len());
    let task = StinTask { net, delta_ps };
    let train = ctx.cfg.train_config();
    let batch = DomainBatch { source, target };
    match dann_adapt(&task, &pretrained, &batch, &train, |r| {
        log::debug!(
            "iteration {}: total {:.4} adv {:.4} d_src {:.3} d_tgt {:.3}",
            r.iteration,
            r.total,
            r.adv,
            r.d_src,
            r.d_tgt
        )
    }) {
        Ok(outcome) => {
            ctx.write_text("adapt_trace.csv", &adapt_csv(&outcome.trace))?;
            let ck =
                Checkpoint { config: net_cfg, rng: None, step: outcome.trace.len() as u64, params: outcome.params };
            let path = ctx.out.join("adapted.ckpt");
            write_checkpoint(&ck, &path).map_err(runtime)?;
            log::info!("wrote {}", path.display());
            Ok(())
        }
        Err(TrainError::Diverged { iteration, window, trace }) => {
            ctx.write_text("adapt_trace.csv", &adapt_csv(&trace))?;
            Err(runtime(format!("adaptation diverged at iteration {iteration} ({window} steps above threshold)")))
        }
        Err(e) => Err(runtime(e)),
    }
}

pub fn predict(ctx: &Context) -> Result<(), CliError> {
    let paths = &ctx.cfg.paths;
    let ck_path = match &paths.checkpoint {
        Some(p) => p.clone(),
        None => {
            let adapted = ctx.out.join("adapted.ckpt");
            if adapted.exists() {
                adapted
            } else {
                ctx.out.join("pretrained.ckpt")
            }
        }
    };
    let (net, params) = load_checkpoint(&ck_path)?;
    log::info!("predicting with {}", ck_path.display());
    let input = paths.input.clone().unwrap_or_else(|| ctx.data_dir("test"));
    let files = file_or_dir(&input, "cube", "input")?;
    let (cubes, _) = read_cubes(&files, net.config())?;
    let pred_dir = ctx.subdir("pred")?;
    for (cube, f) in cubes.iter().zip(&files) {
        let plan = TilePlan::new((cube.nx, cube.ny), net.config().patch).map_err(invalid)?;
        let depth = tile_and_stitch(cube, &net, &params, &plan).map_err(runtime)?;
        let name = stem(f);
        write_depth(&depth, &pred_dir.join(format!("{name}.depth"))).map_err(runtime)?;
        write_pgm16(&depth, &pred_dir.join(format!("{name}.pgm"))).map_err(runtime)?;
    }
    log::info!("wrote {} depth maps to {}", files.len(), pred_dir.display());
    Ok(())
}

fn concat(maps: &[DepthMap]) -> DepthMap {
    let data: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    DepthMap::new(1, data.len(), data).expect("one row")
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let paths = &ctx.cfg.paths;
    let pred_path = paths.prediction.clone().unwrap_or_else(|| ctx.out.join("pred"));
    let truth_path = paths.truth.clone().unwrap_or_else(|| ctx.data_dir("test"));
    let truth_files = file_or_dir(&truth_path, "depth", "ground truth")?;
    require(&pred_path, "prediction")?;
    let pred_files: Vec<PathBuf> = if pred_path.is_dir() {
        truth_files.iter().map(|t| pred_path.join(t.file_name().expect("listed file"))).collect()
    } else {
        if truth_files.len() != 1 {
            return Err(invalid("a single prediction file needs a single ground-truth file"));
        }
        vec![pred_path.clone()]
    };
    let deltas = &ctx.cfg.eval.deltas;
    let read = |p: &Path, what: &str| -> Result<DepthMap, CliError> {
        require(p, what)?;
        read_depth(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
    };
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    let mut rows = Vec::new();
    for (t, p) in truth_files.iter().zip(&pred_files) {
        let z = read(t, "ground truth")?;
        let z_hat = read(p, "prediction")?;
        let report = EvalReport::evaluate(&z, &z_hat, deltas).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        rows.push((stem(t), report));
        truths.push(z);
        preds.push(z_hat);
    }
    let pooled = EvalReport::evaluate(&concat(&truths), &concat(&preds), deltas).map_err(invalid)?;
    let mut csv = format!("file,{}\n", pooled.csv_header());
    for (name, r) in &rows {
        csv.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    csv.push_str(&format!("all,{}\n", pooled.csv_row()));
    ctx.write_text("eval.csv", &csv)?;
    println!("{pooled}");
    Ok(())
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    let report = run_suite(ctx.cfg.gradcheck.instances, ctx.cfg.seed).map_err(runtime)?;
    ctx.write_text("gradcheck.csv", &report.to_csv())?;
    print!("{report}");
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}
