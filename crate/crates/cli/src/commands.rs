use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use svfreg::diffeo::{integrate_direction, Direction, DisplacementField};
use svfreg::engine::{self, AdaptConfig, Pair, TrainConfig};
use svfreg::eval::{evaluate, evaluate_registration, BinaryMask, MetricsReport};
use svfreg::grid::ScalarVolume;
use svfreg::io::{self, RunManifest};
use svfreg::objective::LossSettings;
use svfreg::phantom::{make_phantom_pair, Deformation};
use svfreg::predictor::{self, Architecture, PredictorParams};
use svfreg::rng::derive_seed;

use crate::PairArgs;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<svfreg::Error> for CliError {
    fn from(e: svfreg::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, svfreg::Error::InvalidArgument(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Create `dir`, refusing to reuse a non-empty one without `force`.
fn prepare_dir(dir: &Path, force: bool) -> CliResult {
    if dir.is_file() {
        return usage(format!("{} is a file", dir.display()));
    }
    if dir.is_dir() && fs::read_dir(dir)?.next().is_some() && !force {
        return usage(format!("{} is not empty; pass --force to overwrite", dir.display()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn guard_file(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return usage(format!("{} exists; pass --force to overwrite", path.display()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_direction(s: &str) -> CliResult<Direction> {
    s.parse().map_err(|e: svfreg::Error| CliError::Usage(e.to_string()))
}

fn read_mask(path: &str) -> CliResult<BinaryMask> {
    Ok(BinaryMask::threshold(&io::read_scalar(path)?, 0.5))
}

#[allow(clippy::too_many_arguments)]
pub fn phantom(
    argv: &[String],
    count: usize,
    dims: usize,
    scale: f64,
    scale_max: Option<f64>,
    amplitude: f64,
    seed: u64,
    out: &str,
    force: bool,
) -> CliResult {
    if count == 0 {
        return usage("--count must be >= 1");
    }
    if let Some(hi) = scale_max {
        if hi < scale {
            return usage("--scale-max must be >= --scale");
        }
    }
    let out = Path::new(out);
    prepare_dir(out, force)?;
    let start = Instant::now();
    let mut manifest = RunManifest::new("phantom", argv.to_vec());
    manifest.seeds.insert("root".into(), seed);
    let mut per_case = Vec::with_capacity(count);
    for i in 0..count {
        let t = Instant::now();
        let case_seed = seed.wrapping_add(i as u64);
        let radial_scale = match scale_max {
            // uniform in [scale, hi] from a seed-derived fraction
            Some(hi) => scale + (hi - scale) * (derive_seed(seed, i as u64) >> 11) as f64 / (1u64 << 53) as f64,
            None => scale,
        };
        let deformation = Deformation {
            radial_scale,
            random_amplitude: amplitude,
            ..Deformation::default()
        };
        let case = make_phantom_pair([dims; 3], deformation, case_seed)?;
        let dir = out.join(format!("case_{i:03}"));
        fs::create_dir_all(&dir)?;
        io::write_scalar(dir.join("fixed.dvol"), &case.fixed)?;
        io::write_scalar(dir.join("moving.dvol"), &case.moving)?;
        io::write_scalar(dir.join("fixed_mask.dvol"), case.fixed_mask.volume())?;
        io::write_scalar(dir.join("moving_mask.dvol"), case.moving_mask.volume())?;
        io::write_field(dir.join("v_gt.dvol"), &case.v_gt)?;
        io::write_json(
            dir.join("case.json"),
            &json!({
                "case_id": format!("case_{i:03}"),
                "seed": case.seed,
                "deformation": case.deformation,
                "delta_v_analog": case.delta_v_analog,
                "used_amplitude": case.used_amplitude,
                "attempts": case.attempts,
            }),
        )?;
        manifest.seeds.insert(format!("case_{i:03}"), case_seed);
        per_case.push(t.elapsed().as_secs_f64());
        log::info!("case_{i:03}: scale {radial_scale:.3}, delta {:.3}", case.delta_v_analog);
    }
    manifest.outputs.insert("dir".into(), out.display().to_string());
    io::write_json(out.join("manifest.json"), &manifest)?;
    io::write_json(
        out.join("timings.json"),
        &json!({ "total_seconds": start.elapsed().as_secs_f64(), "case_seconds": per_case }),
    )?;
    Ok(())
}

/// Case directories under `data` that hold a fixed/moving pair, sorted.
fn case_dirs(data: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("fixed.dvol").is_file() && p.join("moving.dvol").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    argv: &[String],
    data: &str,
    epochs: usize,
    lr: f64,
    lambda: f64,
    dropout: f64,
    squaring: u32,
    seed: u64,
    out: &str,
    force: bool,
) -> CliResult {
    let out = Path::new(out);
    guard_file(out, force)?;
    let start = Instant::now();
    let dirs = case_dirs(Path::new(data))?;
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no cases under {data}")));
    }
    let mut dataset: Vec<Pair> = Vec::with_capacity(dirs.len());
    for d in &dirs {
        dataset.push((io::read_scalar(d.join("fixed.dvol"))?, io::read_scalar(d.join("moving.dvol"))?));
    }
    let load_seconds = start.elapsed().as_secs_f64();
    let params = PredictorParams::init(Architecture::default(), dropout, seed)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        loss: LossSettings {
            lambda,
            steps: squaring,
            ..LossSettings::default()
        },
        seed,
    };
    let t = Instant::now();
    let (trained, report) = engine::pretrain_with(&params, &dataset, &cfg, |e, loss| {
        log::info!("epoch {e}: loss {loss:.6}");
    })?;
    if !trained.is_finite() || report.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numerical("training diverged".into()));
    }
    io::write_checkpoint(out, &trained)?;
    io::write_json(sibling(out, ".train.json"), &json!({ "config": cfg, "report": report }))?;

    let mut manifest = RunManifest::new("train", argv.to_vec());
    manifest.seeds.insert("init".into(), seed);
    manifest.seeds.insert("train".into(), seed);
    manifest.inputs.insert("data".into(), data.into());
    manifest.outputs.insert("ckpt".into(), out.display().to_string());
    io::write_json(sibling(out, ".manifest.json"), &manifest)?;
    io::write_json(
        sibling(out, ".timings.json"),
        &json!({ "load_seconds": load_seconds, "train_seconds": t.elapsed().as_secs_f64() }),
    )?;
    Ok(())
}

struct Loaded {
    params: PredictorParams,
    fixed: ScalarVolume,
    moving: ScalarVolume,
    direction: Direction,
    masks: Option<(BinaryMask, BinaryMask)>,
    case_id: String,
}

fn load_pair(pair: &PairArgs) -> CliResult<Loaded> {
    let direction = parse_direction(&pair.direction)?;
    let masks = match (&pair.fixed_mask, &pair.moving_mask) {
        (Some(f), Some(m)) => Some((read_mask(f)?, read_mask(m)?)),
        (None, None) => None,
        _ => return usage("--fixed-mask and --moving-mask go together"),
    };
    let case_id = pair.case_id.clone().unwrap_or_else(|| {
        Path::new(&pair.fixed)
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .unwrap_or("case")
            .to_owned()
    });
    Ok(Loaded {
        params: io::read_checkpoint(&pair.ckpt)?,
        fixed: io::read_scalar(&pair.fixed)?,
        moving: io::read_scalar(&pair.moving)?,
        direction,
        masks,
        case_id,
    })
}

fn pair_manifest(command: &str, argv: &[String], pair: &PairArgs) -> RunManifest {
    let mut m = RunManifest::new(command, argv.to_vec());
    m.inputs.insert("ckpt".into(), pair.ckpt.clone());
    m.inputs.insert("fixed".into(), pair.fixed.clone());
    m.inputs.insert("moving".into(), pair.moving.clone());
    if let (Some(f), Some(mv)) = (&pair.fixed_mask, &pair.moving_mask) {
        m.inputs.insert("fixed_mask".into(), f.clone());
        m.inputs.insert("moving_mask".into(), mv.clone());
    }
    m
}

/// Run inference and write displacement, warped image and (with masks)
/// the warped mask and metrics. Returns the written file names.
fn infer_and_write(loaded: &Loaded, params: &PredictorParams, squaring: u32, out: &Path) -> CliResult<BTreeMap<String, String>> {
    let (u, warped) = engine::register(params, &loaded.fixed, &loaded.moving, loaded.direction, squaring)?;
    if !u.field().is_finite() {
        return Err(CliError::Numerical("non-finite displacement".into()));
    }
    let mut files = BTreeMap::new();
    io::write_field(out.join("disp.dvol"), u.field())?;
    io::write_scalar(out.join("warped.dvol"), &warped)?;
    files.insert("disp".into(), "disp.dvol".into());
    files.insert("warped".into(), "warped.dvol".into());
    if let Some((fm, mm)) = &loaded.masks {
        let (v, _) = predictor::forward(params, &loaded.fixed, &loaded.moving, None)?;
        let other = match loaded.direction {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        };
        let (u_back, _) = integrate_direction(&v, squaring, other)?;
        let report = evaluate_registration(&loaded.case_id, fm, mm, &u, Some(&u_back))?;
        let source = match loaded.direction {
            Direction::Forward => mm,
            Direction::Inverse => fm,
        };
        let warped_mask = svfreg::eval::warp_mask(source, &u)?;
        io::write_scalar(out.join("warped_mask.dvol"), warped_mask.volume())?;
        io::write_json(out.join("metrics.json"), &report)?;
        files.insert("warped_mask".into(), "warped_mask.dvol".into());
        files.insert("metrics".into(), "metrics.json".into());
    }
    Ok(files)
}

pub fn register(argv: &[String], pair: &PairArgs) -> CliResult {
    let out = Path::new(&pair.out);
    prepare_dir(out, pair.force)?;
    let start = Instant::now();
    let loaded = load_pair(pair)?;
    let files = infer_and_write(&loaded, &loaded.params, pair.squaring, out)?;
    let mut manifest = pair_manifest("register", argv, pair);
    manifest.outputs = files;
    io::write_json(out.join("manifest.json"), &manifest)?;
    io::write_json(out.join("timings.json"), &json!({ "total_seconds": start.elapsed().as_secs_f64() }))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn adapt_config(
    pair: &PairArgs,
    steps: usize,
    mc_samples: usize,
    lr: f64,
    lambda: f64,
    dropout: f64,
    epsilon: f64,
    regularize: &str,
    aggregation: &str,
    refresh_uncertainty: Option<usize>,
    seed: u64,
) -> CliResult<AdaptConfig> {
    let cfg = AdaptConfig {
        lambda,
        steps: pair.squaring,
        mc_samples,
        adapt_steps: steps,
        lr,
        dropout,
        epsilon,
        direction: parse_direction(&pair.direction)?,
        seed,
        regularize: regularize.parse().map_err(|e: svfreg::Error| CliError::Usage(e.to_string()))?,
        aggregation: aggregation.parse().map_err(|e: svfreg::Error| CliError::Usage(e.to_string()))?,
        refresh_uncertainty,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn adapt(argv: &[String], pair: &PairArgs, cfg: AdaptConfig) -> CliResult {
    let out = Path::new(&pair.out);
    prepare_dir(out, pair.force)?;
    let start = Instant::now();
    let loaded = load_pair(pair)?;
    let (adapted, report) = engine::adapt(&loaded.params, &loaded.fixed, &loaded.moving, &cfg)?;
    if report.trajectory.iter().chain(&report.final_loss).any(|l| !l.is_finite()) {
        return Err(CliError::Numerical("NaN loss during adaptation".into()));
    }
    let mut files = infer_and_write(&loaded, &adapted, cfg.steps, out)?;
    io::write_checkpoint(out.join("adapted.ckpt"), &adapted)?;
    io::write_json(out.join("report.json"), &report)?;
    files.insert("ckpt".into(), "adapted.ckpt".into());
    files.insert("report".into(), "report.json".into());

    let mut manifest = pair_manifest("adapt", argv, pair);
    manifest.seeds.insert("adapt".into(), cfg.seed);
    manifest.config = Some(cfg);
    manifest.outputs = files;
    io::write_json(out.join("manifest.json"), &manifest)?;
    io::write_json(
        out.join("timings.json"),
        &json!({
            "total_seconds": start.elapsed().as_secs_f64(),
            "uncertainty_seconds": report.uncertainty_seconds,
            "step_seconds": report.step_seconds,
        }),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    argv: &[String],
    fixed_mask: &str,
    warped_mask: &str,
    disp: &str,
    direction: &str,
    case_id: &str,
    out: &str,
    force: bool,
) -> CliResult {
    let out = Path::new(out);
    guard_file(out, force)?;
    let direction = parse_direction(direction)?;
    let target = read_mask(fixed_mask)?;
    let warped = read_mask(warped_mask)?;
    let u = DisplacementField::new(io::read_field(disp)?, direction, 0)?;
    let report = evaluate(case_id, &target, &warped, &u, None)?;
    io::write_json(out, &report)?;
    let mut manifest = RunManifest::new("eval", argv.to_vec());
    manifest.inputs.insert("fixed_mask".into(), fixed_mask.into());
    manifest.inputs.insert("warped_mask".into(), warped_mask.into());
    manifest.inputs.insert("disp".into(), disp.into());
    manifest.outputs.insert("report".into(), out.display().to_string());
    io::write_json(sibling(out, ".manifest.json"), &manifest)?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn report(argv: &[String], input: &str, csv: &str, force: bool) -> CliResult {
    let root = Path::new(input);
    if !root.is_dir() {
        return Err(CliError::Data(format!("{input} is not a directory")));
    }
    let csv_path = Path::new(csv);
    guard_file(csv_path, force)?;
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        // manifests, timings and case files are not metrics; skip them
        if let Ok(r) = io::read_json::<MetricsReport>(path) {
            let source = path
                .parent()
                .and_then(|p| p.strip_prefix(root).ok())
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            rows.push((source, r));
        }
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("no metrics files under {input}")));
    }
    rows.sort_by(|a, b| {
        (&a.1.case_id, a.1.direction.as_str(), &a.0).cmp(&(&b.1.case_id, b.1.direction.as_str(), &b.0))
    });
    let mut text = format!("source,{}\n", MetricsReport::CSV_HEADER);
    for (source, r) in &rows {
        text.push_str(&format!("{source},{}\n", r.csv_row()));
    }
    for dir in [Direction::Forward, Direction::Inverse] {
        let sel: Vec<&MetricsReport> = rows.iter().map(|(_, r)| r).filter(|r| r.direction == dir).collect();
        if sel.is_empty() {
            continue;
        }
        let col = |f: fn(&MetricsReport) -> f64| median(sel.iter().map(|r| f(r)).collect());
        text.push_str(&format!(
            "summary,median,{dir},{:.6},{:.6},{:.6},\n",
            col(|r| r.dsc),
            col(|r| r.assd_mm),
            col(|r| r.folding_pct)
        ));
    }
    fs::write(csv_path, text)?;
    let mut manifest = RunManifest::new("report", argv.to_vec());
    manifest.inputs.insert("dir".into(), input.into());
    manifest.outputs.insert("csv".into(), csv.into());
    io::write_json(sibling(csv_path, ".manifest.json"), &manifest)?;
    Ok(())
}

/// Argument vector that replays `manifest` with its output moved to `out`.
pub fn rerun_argv(program: &str, manifest: &str, out: &str, force: bool) -> CliResult<Vec<String>> {
    let m: RunManifest = io::read_json(manifest)?;
    if m.command == "rerun" {
        return usage("cannot replay a rerun manifest");
    }
    let flag = match m.command.as_str() {
        "report" => "--csv",
        _ => "--out",
    };
    let mut argv = vec![program.to_owned()];
    let mut replaced = false;
    let mut it = m.argv.iter();
    while let Some(a) = it.next() {
        if a == flag {
            it.next();
            argv.push(flag.into());
            argv.push(out.into());
            replaced = true;
        } else if a.starts_with(&format!("{flag}=")) {
            argv.push(format!("{flag}={out}"));
            replaced = true;
        } else if a != "--force" {
            argv.push(a.clone());
        }
    }
    if !replaced {
        return Err(CliError::Data(format!("manifest argv has no {flag}")));
    }
    if force {
        argv.push("--force".into());
    }
    Ok(argv)
}
