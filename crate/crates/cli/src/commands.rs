use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use lact_core::analytic::{fbp_reconstruct, synthesize_aux_sinogram, AuxMethod};
use lact_core::geometry::{make_mask, AngularMask, ScanGeometry};
use lact_core::io::{self, read_image, read_sinogram, write_image, write_preview, write_sinogram};
use lact_core::metadata::{load_records_ablated, parse_categories};
use lact_core::metrics::{psnr, ssim, MetricReport, SSIM_WINDOW};
use lact_core::optim::{admm_tv_reconstruct, ConsistencyProblem};
use lact_core::phantoms::{build_dataset, generate_phantom, load_dataset_manifest, DatasetOptions};
use lact_core::pipeline::run_diffusion;
use lact_core::prior_net::{embed_metadata, toy_prior, TokenMatrix};
use lact_core::projector::{forward_project, mask_sinogram, simulate_measurement, NoiseSpec, Projector};
use lact_core::sampler::{trace_table, StageOutput};
use lact_core::{Error, Image, Sinogram};

use crate::config::RunConfig;
use crate::manifest::{write_header, RunManifest, RunSection};
use crate::{
    AuxArgs, Cli, CliError, CliResult, Command, DatasetArgs, MaskArgs, Method, MetricsArgs, PhantomArgs, ProjectArgs,
    ReconArgs, TraceArgs,
};

struct Context {
    cfg: RunConfig,
    seed: u64,
    jobs: usize,
    out: PathBuf,
    command: Command,
}

impl Context {
    fn finish(&self, stem: &str, outputs: Vec<PathBuf>, data_range: BTreeMap<String, f64>) -> CliResult<()> {
        let manifest = RunManifest {
            run: RunSection {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                seed: self.seed,
                jobs: self.jobs,
                out: self.out.clone(),
                command: self.command.clone(),
                outputs,
                data_range,
            },
            config: self.cfg.clone(),
        };
        manifest.save(&RunManifest::path(&self.out, stem))?;
        Ok(())
    }

    fn path(&self, file: impl AsRef<Path>) -> PathBuf {
        self.out.join(file)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let (cfg, seed, jobs, out, command) = match cli.command {
        Command::Replay(args) => {
            let manifest = RunManifest::load(&absolute(&args.manifest)?)?;
            manifest.config.validate()?;
            let out = match cli.global.out {
                Some(o) => absolute(&o)?,
                None => manifest.run.out,
            };
            (manifest.config, manifest.run.seed, manifest.run.jobs, out, manifest.run.command)
        }
        command => {
            let cfg = RunConfig::load(cli.global.config.as_deref())?;
            let jobs = match cli.global.jobs {
                Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
                Some(j) => j,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            let out = absolute(cli.global.out.as_deref().unwrap_or(Path::new(".")))?;
            (cfg, cli.global.seed, jobs, out, absolutize(command)?)
        }
    };
    // Ignored if a pool already exists; results do not depend on the thread count.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let ctx = Context {
        cfg,
        seed,
        jobs,
        out,
        command: command.clone(),
    };
    match command {
        Command::Phantom(a) => phantom(&ctx, &a),
        Command::Dataset(a) => dataset(&ctx, &a),
        Command::Project(a) => project(&ctx, &a),
        Command::Mask(a) => mask(&ctx, &a),
        Command::AuxSino(a) => aux_sino(&ctx, &a),
        Command::Recon(a) => recon(&ctx, &a),
        Command::Metrics(a) => metrics(&ctx, &a),
        Command::Trace(a) => trace(&ctx, &a),
        Command::Replay(_) => Err(CliError::Usage("a run manifest cannot contain a replay".into())),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    Ok(std::path::absolute(path).map_err(|e| io_error(path, e))?)
}

/// Makes every path argument absolute so the manifest replays from anywhere.
fn absolutize(mut command: Command) -> CliResult<Command> {
    fn fix(p: &mut PathBuf) -> CliResult<()> {
        *p = absolute(p)?;
        Ok(())
    }
    fn fix_opt(p: &mut Option<PathBuf>) -> CliResult<()> {
        p.as_mut().map_or(Ok(()), fix)
    }
    match &mut command {
        Command::Phantom(_) | Command::Dataset(_) | Command::Replay(_) => {}
        Command::Project(a) => {
            fix(&mut a.image)?;
            fix_opt(&mut a.geometry)?;
            fix_opt(&mut a.mask)?;
        }
        Command::Mask(a) => fix_opt(&mut a.geometry)?,
        Command::AuxSino(a) => {
            fix(&mut a.sino)?;
            fix(&mut a.mask)?;
            fix_opt(&mut a.geometry)?;
        }
        Command::Recon(a) => {
            fix_opt(&mut a.sino)?;
            fix_opt(&mut a.mask)?;
            fix_opt(&mut a.geometry)?;
            fix_opt(&mut a.dataset)?;
            fix_opt(&mut a.metadata)?;
        }
        Command::Metrics(a) => {
            fix(&mut a.test)?;
            fix_opt(&mut a.reference)?;
            fix_opt(&mut a.dataset)?;
        }
        Command::Trace(a) => {
            fix(&mut a.a)?;
            fix(&mut a.b)?;
            fix(&mut a.reference)?;
        }
    }
    Ok(command)
}

fn read_text(path: &Path) -> CliResult<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| io_error(path, e))?)
}

fn load_geometry(path: Option<&Path>, cfg: &RunConfig) -> CliResult<ScanGeometry> {
    Ok(match path {
        Some(p) => ScanGeometry::from_toml(&read_text(p)?)?,
        None => cfg.geometry.build()?,
    })
}

fn load_mask(path: &Path, geometry: &ScanGeometry) -> CliResult<AngularMask> {
    let mask = AngularMask::from_toml(&read_text(path)?)?;
    mask.check_geometry(geometry)?;
    Ok(mask)
}

fn check_sinogram(sino: &Sinogram, geometry: &ScanGeometry) -> CliResult<()> {
    let expected = (geometry.num_views, geometry.num_bins);
    if sino.shape() != expected {
        return Err(Error::Shape(format!(
            "sinogram is {:?} but the geometry expects {expected:?} (views, bins)",
            sino.shape()
        ))
        .into());
    }
    Ok(())
}

fn ensure_finite(image: &Image, what: &str) -> CliResult<()> {
    if !image.all_finite() {
        return Err(Error::Numeric(format!("{what} produced non-finite pixels")).into());
    }
    Ok(())
}

/// Writes an image grid, its header and (if enabled) a PGM preview.
fn save_image(
    ctx: &Context,
    path: &Path,
    image: &Image,
    geometry: Option<&ScanGeometry>,
    outputs: &mut Vec<PathBuf>,
) -> CliResult<()> {
    write_image(path, image)?;
    write_header(path, "image", &producer(ctx), geometry, None)?;
    outputs.push(path.to_path_buf());
    if ctx.cfg.io.previews {
        let preview = path.with_extension("pgm");
        write_preview(&preview, image)?;
        outputs.push(preview);
    }
    Ok(())
}

fn save_sinogram(
    ctx: &Context,
    path: &Path,
    sino: &Sinogram,
    geometry: &ScanGeometry,
    mask: Option<&AngularMask>,
    outputs: &mut Vec<PathBuf>,
) -> CliResult<()> {
    write_sinogram(path, sino)?;
    write_header(path, "sinogram", &producer(ctx), Some(geometry), mask)?;
    outputs.push(path.to_path_buf());
    Ok(())
}

fn producer(ctx: &Context) -> String {
    let name = match &ctx.command {
        Command::Phantom(_) => "phantom",
        Command::Dataset(_) => "dataset",
        Command::Project(_) => "project",
        Command::Mask(_) => "mask",
        Command::AuxSino(_) => "aux-sino",
        Command::Recon(_) => "recon",
        Command::Metrics(_) => "metrics",
        Command::Trace(_) => "trace",
        Command::Replay(_) => "replay",
    };
    format!("lact {name} (seed {})", ctx.seed)
}

fn phantom(ctx: &Context, args: &PhantomArgs) -> CliResult<()> {
    let kind = args.kind.map_or(ctx.cfg.phantom.kind, Into::into);
    let image = generate_phantom(&ctx.cfg.phantom_spec(kind, ctx.seed))?;
    let mut outputs = Vec::new();
    save_image(ctx, &ctx.path(format!("{}.grid", args.name)), &image, None, &mut outputs)?;
    ctx.finish(&args.name, outputs, BTreeMap::new())
}

fn dataset(ctx: &Context, args: &DatasetArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let geometry = cfg.geometry.build()?;
    let count = args.count.unwrap_or(cfg.dataset.num_phantoms);
    if count > 0 && cfg.dataset.kinds.is_empty() {
        return Err(Error::Config("dataset.kinds is empty".into()).into());
    }
    let specs: Vec<_> = (0..count)
        .map(|i| cfg.phantom_spec(cfg.dataset.kinds[i % cfg.dataset.kinds.len()], ctx.seed.wrapping_add(i as u64)))
        .collect();
    let options = DatasetOptions {
        ranges_deg: cfg.dataset.ranges_deg.clone(),
        start_deg: cfg.mask.start_deg,
        noise_sigma: cfg.noise.sigma,
        seed: ctx.seed,
    };
    let manifest = build_dataset(&specs, &geometry, &options, &ctx.out)?;
    let producer = producer(ctx);
    let mut headed = BTreeSet::new();
    for entry in &manifest.entries {
        let mask = make_mask(&geometry, entry.range_deg, entry.start_deg)?;
        if headed.insert(entry.image.clone()) {
            write_header(&ctx.path(&entry.image), "image", &producer, Some(&geometry), None)?;
            write_header(&ctx.path(&entry.full_sinogram), "sinogram", &producer, Some(&geometry), None)?;
        }
        write_header(&ctx.path(&entry.sinogram), "sinogram", &producer, Some(&geometry), Some(&mask))?;
    }
    println!("{} entries written to {}", manifest.entries.len(), ctx.out.display());
    ctx.finish("dataset", vec![ctx.path(lact_core::phantoms::DATASET_MANIFEST)], BTreeMap::new())
}

fn project(ctx: &Context, args: &ProjectArgs) -> CliResult<()> {
    let geometry = load_geometry(args.geometry.as_deref(), &ctx.cfg)?;
    let image = read_image(&args.image)?;
    let mask = args.mask.as_deref().map(|p| load_mask(p, &geometry)).transpose()?;
    let mut sino = forward_project(&image, &geometry)?;
    if ctx.cfg.noise.sigma > 0.0 {
        sino = simulate_measurement(
            &sino,
            &NoiseSpec {
                sigma: ctx.cfg.noise.sigma,
                seed: ctx.seed,
            },
        )?;
    }
    if let Some(m) = &mask {
        sino = mask_sinogram(&sino, m)?;
    }
    let mut outputs = Vec::new();
    let path = ctx.path(format!("{}.grid", args.name));
    save_sinogram(ctx, &path, &sino, &geometry, mask.as_ref(), &mut outputs)?;
    let geometry_path = ctx.path(format!("{}_geometry.toml", args.name));
    io::atomic_write(&geometry_path, geometry.to_toml().as_bytes())?;
    outputs.push(geometry_path);
    ctx.finish(&args.name, outputs, BTreeMap::new())
}

fn mask(ctx: &Context, args: &MaskArgs) -> CliResult<()> {
    let geometry = load_geometry(args.geometry.as_deref(), &ctx.cfg)?;
    let mut spec = ctx.cfg.mask.clone();
    spec.angular_range_deg = args.range.unwrap_or(spec.angular_range_deg);
    spec.start_deg = args.start.unwrap_or(spec.start_deg);
    let mask = spec.build(&geometry)?;
    let path = ctx.path(format!("{}.toml", args.name));
    io::atomic_write(&path, mask.to_toml().as_bytes())?;
    println!("{} of {} views kept", mask.kept_count(), geometry.num_views);
    ctx.finish(&args.name, vec![path], BTreeMap::new())
}

fn aux_sino(ctx: &Context, args: &AuxArgs) -> CliResult<()> {
    let geometry = load_geometry(args.geometry.as_deref(), &ctx.cfg)?;
    let sino = read_sinogram(&args.sino)?;
    check_sinogram(&sino, &geometry)?;
    let mask = load_mask(&args.mask, &geometry)?;
    let method = args
        .method
        .map(Into::into)
        .or(ctx.cfg.consistency.aux_method)
        .unwrap_or_else(|| AuxMethod::default_for(&geometry));
    let aux = synthesize_aux_sinogram(&sino, &mask, &geometry, method)?;
    let mut outputs = Vec::new();
    save_sinogram(ctx, &ctx.path(format!("{}.grid", args.name)), &aux, &geometry, None, &mut outputs)?;
    ctx.finish(&args.name, outputs, BTreeMap::new())
}

struct ReconInputs {
    sino: Sinogram,
    mask: AngularMask,
    geometry: ScanGeometry,
    metadata: Option<PathBuf>,
    record: usize,
    name: String,
}

fn recon_inputs(ctx: &Context, args: &ReconArgs) -> CliResult<ReconInputs> {
    if let (Some(dir), Some(id)) = (&args.dataset, &args.entry) {
        let manifest = load_dataset_manifest(dir)?;
        let Some(entry) = manifest.entries.iter().find(|e| &e.id == id) else {
            let ids: Vec<_> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
            return Err(CliError::Usage(format!(
                "dataset has no entry `{id}` (available: {})",
                ids.join(", ")
            )));
        };
        let geometry = ScanGeometry::from_toml(&read_text(&dir.join(&manifest.geometry))?)?;
        return Ok(ReconInputs {
            sino: read_sinogram(&dir.join(&entry.sinogram))?,
            mask: load_mask(&dir.join(&entry.mask), &geometry)?,
            geometry,
            metadata: Some(dir.join(&manifest.metadata)),
            record: args.record.unwrap_or(entry.metadata_index),
            name: args.name.clone().unwrap_or_else(|| entry.id.clone()),
        });
    }
    let Some(sino_path) = &args.sino else {
        return Err(CliError::Usage("recon needs --sino or --dataset with --entry".into()));
    };
    let geometry = load_geometry(args.geometry.as_deref(), &ctx.cfg)?;
    let mask = match &args.mask {
        Some(p) => load_mask(p, &geometry)?,
        None => AngularMask::full(geometry.num_views, geometry.angular_span_deg),
    };
    Ok(ReconInputs {
        sino: read_sinogram(sino_path)?,
        mask,
        geometry,
        metadata: args.metadata.clone().or_else(|| ctx.cfg.metadata.path.clone()),
        record: args.record.unwrap_or(ctx.cfg.metadata.record),
        name: args.name.clone().unwrap_or_else(|| "recon".into()),
    })
}

fn metadata_tokens(ctx: &Context, args: &ReconArgs, inputs: &ReconInputs) -> CliResult<TokenMatrix> {
    let prior = &ctx.cfg.prior;
    let Some(path) = &inputs.metadata else {
        return Ok(TokenMatrix::empty(prior.channels));
    };
    let ablate = match &args.ablate {
        Some(list) => parse_categories(list)?,
        None => ctx.cfg.metadata.ablate.clone(),
    };
    let records = load_records_ablated(path, &ablate)?;
    let record = records.get(inputs.record).ok_or_else(|| Error::Validation {
        field: "metadata.record".into(),
        reason: format!("index {} out of range ({} records)", inputs.record, records.len()),
    })?;
    Ok(embed_metadata(record, prior.channels, prior.num_tokens, ctx.cfg.metadata.embed_seed, true)?)
}

fn save_stage(dir: &Path, stage: usize, output: &StageOutput, outputs: &mut Vec<PathBuf>) -> CliResult<()> {
    for (i, snap) in output.snapshots.iter().enumerate() {
        let path = dir.join(format!("stage{stage}_{i:03}.grid"));
        write_image(&path, snap)?;
        outputs.push(path);
    }
    let table = dir.join(format!("stage{stage}_trace.csv"));
    io::atomic_write(&table, trace_table(&output.per_step_trace).as_bytes())?;
    outputs.push(table);
    Ok(())
}

fn recon(ctx: &Context, args: &ReconArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let inputs = recon_inputs(ctx, args)?;
    check_sinogram(&inputs.sino, &inputs.geometry)?;
    let (sino, mask, geometry) = (&inputs.sino, &inputs.mask, &inputs.geometry);
    let mut outputs = Vec::new();
    let image = match args.method {
        Method::Fbp => fbp_reconstruct(sino, geometry, Some(mask), &cfg.fbp)?,
        Method::AdmmTv => {
            let init = fbp_reconstruct(sino, geometry, Some(mask), &cfg.fbp)?;
            let operator = Projector::new(geometry)?;
            let problem = ConsistencyProblem {
                operator: &operator,
                measured: sino,
                y_aux: None,
                mask,
            };
            admm_tv_reconstruct(&problem, &cfg.consistency.admm_tv, cfg.consistency.admm_tv_iters, &init)?.image
        }
        Method::Diffusion => {
            let prior = toy_prior(&cfg.prior, ctx.seed)?;
            let tokens = metadata_tokens(ctx, args, &inputs)?;
            let run = run_diffusion(
                prior.as_ref(),
                &tokens,
                sino,
                mask,
                geometry,
                &cfg.diffusion(),
                ctx.seed,
                args.snapshots,
            )?;
            if args.snapshots {
                let dir = ctx.path(format!("{}_snapshots", inputs.name));
                save_stage(&dir, 1, &run.stage1, &mut outputs)?;
                save_stage(&dir, 2, &run.stage2, &mut outputs)?;
                let coarse = dir.join("coarse.grid");
                write_image(&coarse, &run.coarse)?;
                outputs.push(coarse);
            }
            run.image
        }
    };
    ensure_finite(&image, "reconstruction")?;
    save_image(ctx, &ctx.path(format!("{}.grid", inputs.name)), &image, Some(geometry), &mut outputs)?;
    ctx.finish(&inputs.name, outputs, BTreeMap::new())
}

fn grid_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_error(dir, e))? {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "grid") {
            files.insert(stem(&path), path);
        }
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn test_files(path: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    if path.is_dir() {
        grid_files(path)
    } else {
        Ok(BTreeMap::from([(stem(path), path.to_path_buf())]))
    }
}

/// Pairs `(slice_id, test, reference)` aligned by slice id.
fn metric_pairs(args: &MetricsArgs) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let tests = test_files(&args.test)?;
    let references: BTreeMap<String, PathBuf> = match (&args.dataset, &args.reference) {
        (Some(dir), _) => {
            let manifest = load_dataset_manifest(dir)?;
            manifest.entries.iter().map(|e| (e.id.clone(), dir.join(&e.image))).collect()
        }
        (None, Some(r)) if r.is_dir() => grid_files(r)?,
        (None, Some(r)) if !args.test.is_dir() => {
            return Ok(vec![(stem(&args.test), args.test.clone(), r.clone())]);
        }
        (None, Some(_)) => {
            return Err(CliError::Usage("--test is a directory but --reference is a file".into()));
        }
        (None, None) => return Err(CliError::Usage("metrics needs --reference or --dataset".into())),
    };
    let mut unmatched: Vec<String> = tests
        .keys()
        .filter(|id| !references.contains_key(*id))
        .map(|id| format!("{id} (no reference)"))
        .collect();
    if args.dataset.is_none() {
        unmatched.extend(
            references
                .keys()
                .filter(|id| !tests.contains_key(*id))
                .map(|id| format!("{id} (no reconstruction)")),
        );
    }
    if !unmatched.is_empty() {
        return Err(CliError::Usage(format!("unmatched slice ids: {}", unmatched.join(", "))));
    }
    if tests.is_empty() {
        return Err(CliError::Usage(format!("no .grid files in {}", args.test.display())));
    }
    Ok(tests.into_iter().map(|(id, t)| (id.clone(), t, references[&id].clone())).collect())
}

fn metrics_row(id: &str, r: &MetricReport) -> String {
    format!(
        "{id},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
        r.ssim, r.nrmse, r.psnr_db, r.nmi, r.pcc
    )
}

fn metrics(ctx: &Context, args: &MetricsArgs) -> CliResult<()> {
    let pairs = metric_pairs(args)?;
    let reports: Vec<MetricReport> = pairs
        .par_iter()
        .map(|(_, t, r)| -> CliResult<_> {
            Ok(MetricReport::compute(&read_image(t)?, &read_image(r)?, &ctx.cfg.metrics)?)
        })
        .collect::<CliResult<_>>()?;
    // The RMSE column holds nRMSE, ‖test − ref‖ / ‖ref‖.
    let mut table = String::from("slice_id,ssim,rmse,psnr,nmi,pcc\n");
    let mut data_range = BTreeMap::new();
    for ((id, _, _), r) in pairs.iter().zip(&reports) {
        table.push_str(&metrics_row(id, r));
        data_range.insert(id.clone(), r.data_range);
    }
    if let Some(mean) = MetricReport::mean(&reports) {
        table.push_str(&metrics_row("mean", &mean));
    }
    let path = ctx.path(format!("{}.csv", args.name));
    io::atomic_write(&path, table.as_bytes())?;
    print!("{table}");
    ctx.finish(&args.name, vec![path], data_range)
}

fn stage_snapshots(dir: &Path, stage: usize) -> CliResult<Vec<PathBuf>> {
    let prefix = format!("stage{stage}_");
    Ok(grid_files(dir)?
        .into_iter()
        .filter(|(s, _)| s.strip_prefix(&prefix).is_some_and(|n| n.chars().all(|c| c.is_ascii_digit())))
        .map(|(_, p)| p)
        .collect())
}

/// Reference at the snapshot resolution (mean-pooled when coarser).
fn reference_at(reference: &Image, shape: (usize, usize)) -> CliResult<Image> {
    let (h, w) = reference.shape();
    if (h, w) == shape {
        return Ok(reference.clone());
    }
    if shape.0 > 0 && h % shape.0 == 0 && w % shape.1 == 0 && h / shape.0 == w / shape.1 {
        return Ok(reference.downsample_mean(h / shape.0)?);
    }
    Err(Error::Shape(format!("reference {h}x{w} cannot be matched to snapshots {shape:?}")).into())
}

#[derive(Serialize)]
struct StageSummary {
    stage: usize,
    steps: usize,
    differing_steps: usize,
    first_difference: Option<usize>,
    max_abs_delta_psnr: f64,
    max_abs_delta_ssim: f64,
    final_psnr_a: f64,
    final_psnr_b: f64,
}

#[derive(Serialize)]
struct TraceSummary {
    stages: Vec<StageSummary>,
}

/// SSIM, or NaN when the image is smaller than the SSIM window (coarse stages).
fn ssim_or_nan(x: &Image, reference: &Image, range: f64) -> CliResult<f64> {
    if x.height().min(x.width()) < SSIM_WINDOW {
        return Ok(f64::NAN);
    }
    Ok(ssim(x, reference, range)?)
}

fn delta(a: f64, b: f64) -> f64 {
    if a == b || (a.is_nan() && b.is_nan()) {
        0.0
    } else {
        a - b
    }
}

fn trace(ctx: &Context, args: &TraceArgs) -> CliResult<()> {
    let reference = read_image(&args.reference)?;
    let mut table = String::from("stage,step,psnr_a,ssim_a,psnr_b,ssim_b,delta_psnr,delta_ssim\n");
    let mut stages = Vec::new();
    for stage in [1, 2] {
        let a = stage_snapshots(&args.a, stage)?;
        let b = stage_snapshots(&args.b, stage)?;
        if a.len() != b.len() {
            return Err(CliError::Usage(format!(
                "stage {stage}: run a has {} steps but run b has {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            continue;
        }
        let curves: Vec<[f64; 4]> = a
            .par_iter()
            .zip(&b)
            .map(|(pa, pb)| -> CliResult<_> {
                let (xa, xb) = (read_image(pa)?, read_image(pb)?);
                let r = reference_at(&reference, xa.shape())?;
                let range = ctx.cfg.metrics.data_range.unwrap_or(r.max_value() - r.min_value());
                Ok([
                    psnr(&xa, &r, range)?,
                    ssim_or_nan(&xa, &r, range)?,
                    psnr(&xb, &r, range)?,
                    ssim_or_nan(&xb, &r, range)?,
                ])
            })
            .collect::<CliResult<_>>()?;
        let mut summary = StageSummary {
            stage,
            steps: curves.len(),
            differing_steps: 0,
            first_difference: None,
            max_abs_delta_psnr: 0.0,
            max_abs_delta_ssim: 0.0,
            final_psnr_a: curves[curves.len() - 1][0],
            final_psnr_b: curves[curves.len() - 1][2],
        };
        for (step, c) in curves.iter().enumerate() {
            let (dp, ds) = (delta(c[0], c[2]), delta(c[1], c[3]));
            writeln!(table, "{stage},{step},{:.8},{:.8},{:.8},{:.8},{dp:.8e},{ds:.8e}", c[0], c[1], c[2], c[3])
                .expect("write to string");
            if dp != 0.0 || ds != 0.0 {
                summary.differing_steps += 1;
                summary.first_difference.get_or_insert(step);
            }
            summary.max_abs_delta_psnr = summary.max_abs_delta_psnr.max(dp.abs());
            summary.max_abs_delta_ssim = summary.max_abs_delta_ssim.max(ds.abs());
        }
        println!(
            "stage {stage}: {} steps, {} differ (first at {}), max |dPSNR| {:.4e} dB",
            summary.steps,
            summary.differing_steps,
            summary.first_difference.map_or("-".into(), |s| s.to_string()),
            summary.max_abs_delta_psnr
        );
        stages.push(summary);
    }
    if stages.is_empty() {
        return Err(CliError::Usage(format!(
            "no stage snapshots found in {} (run recon with --snapshots)",
            args.a.display()
        )));
    }
    let table_path = ctx.path(format!("{}.csv", args.name));
    io::atomic_write(&table_path, table.as_bytes())?;
    let summary_path = ctx.path(format!("{}_summary.toml", args.name));
    io::write_toml(&summary_path, &TraceSummary { stages })?;
    ctx.finish(&args.name, vec![table_path, summary_path], BTreeMap::new())
}
