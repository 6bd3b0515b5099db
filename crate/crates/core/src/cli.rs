//! The `persp3d` command line: dataset generation, box fitting, evaluation
//! and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{evaluate, Detection, EvalReport, GroundTruth, DEFAULT_IOU_THRESHOLD};
use crate::fitting::{fit_box, initial_estimate, FitConfig, FitResult, FitTrace};
use crate::losses::gradcheck::{run_suite, Faults, GradCheckReport, DEFAULT_TOLERANCE};
use crate::synth::{generate_scene, read_dataset, to_json, write_dataset, Scene, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const FAILURES_FILE: &str = "failures.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Check(String),
    Config(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "persp3d", version, about = "Perspective-point 3D box toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Fit a box to every observed object of a dataset.
    Fit(FitArgs),
    /// Score detections against a dataset's ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Synthesis config (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Fit config (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recorded in the manifest; fitting itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep every n-th iteration of each trace.
    #[arg(long, default_value_t = 10)]
    pub trace_every: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections JSON written by `fit`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random configurations per loss.
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Optional output directory for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negative control: corrupt one analytic gradient.
    #[arg(long, hide = true)]
    pub inject_sign_bug: bool,
}

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// SHA-256 of the compact JSON form of `config`.
    pub config_hash: String,
    pub inputs: Vec<String>,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new<C: Serialize>(command: &str, seed: u64, config: &C, inputs: Vec<String>, outputs: Vec<String>) -> Self {
        let config = serde_json::to_value(config).expect("configs serialise");
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash: hash_hex(config.to_string().as_bytes()),
            config,
            inputs,
            outputs,
        }
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a TOML config, or JSON when the extension is `.json`.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(config_err)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_manifest(dir: &Path, m: &RunManifest) -> CliResult<()> {
    write_file(&dir.join(MANIFEST_FILE), &to_json(m))
}

fn lossy(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<RunManifest> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    let scenes: Vec<Scene> = pool(args.common.jobs)?
        .install(|| {
            (0..cfg.num_scenes as u64)
                .into_par_iter()
                .map(|i| generate_scene(&cfg, i))
                .collect::<crate::error::Result<_>>()
        })
        .map_err(data_err)?;
    let outputs = write_dataset(&args.common.out, &scenes).map_err(data_err)?;
    let inputs = args.config.iter().map(|p| lossy(p)).collect();
    let m = RunManifest::new("gen", cfg.seed, &cfg, inputs, outputs);
    write_manifest(&args.common.out, &m)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub image_id: String,
    pub object: usize,
    pub error: String,
}

fn fit_object(scene: &Scene, k: usize, cfg: &FitConfig) -> crate::error::Result<FitResult> {
    let o = &scene.objects[k];
    let init = initial_estimate(&o.observed, &scene.camera, &o.roi, cfg)?;
    fit_box(&o.observed, &init, &scene.camera, &o.roi, cfg)
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<RunManifest> {
    let cfg: FitConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => FitConfig::default(),
    };
    cfg.validate().map_err(config_err)?;
    let scenes = read_dataset(&args.data).map_err(data_err)?;
    let jobs: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (0..sc.objects.len()).map(move |k| (s, k)))
        .collect();
    let results: Vec<crate::error::Result<FitResult>> =
        pool(args.common.jobs)?.install(|| jobs.par_iter().map(|&(s, k)| fit_object(&scenes[s], k, &cfg)).collect());

    let mut detections = Vec::new();
    let mut failures = Vec::new();
    let mut traces = format!("image_id,object,{}\n", FitTrace::CSV_HEADER);
    for (&(s, k), r) in jobs.iter().zip(results) {
        let scene = &scenes[s];
        match r {
            Ok(fit) => {
                traces.push_str(&fit.trace.to_csv_rows(&format!("{},{k},", scene.id), args.trace_every));
                detections.push(Detection {
                    image_id: scene.id.clone(),
                    class: scene.objects[k].class,
                    score: (-fit.loss.total).exp(),
                    bbox: fit.bbox,
                });
            }
            Err(e) => failures.push(FitFailure {
                image_id: scene.id.clone(),
                object: k,
                error: e.to_string(),
            }),
        }
    }
    let out = &args.common.out;
    write_file(&out.join(DETECTIONS_FILE), &to_json(&detections))?;
    write_file(&out.join(TRACES_FILE), &traces)?;
    write_file(&out.join(FAILURES_FILE), &to_json(&failures))?;
    let outputs = [DETECTIONS_FILE, TRACES_FILE, FAILURES_FILE].map(String::from).to_vec();
    let mut inputs = vec![lossy(&args.data)];
    inputs.extend(args.config.iter().map(|p| lossy(p)));
    let m = RunManifest::new("fit", args.seed, &cfg, inputs, outputs);
    write_manifest(out, &m)?;
    Ok(m)
}

/// Ground truth of every object in the dataset.
pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GroundTruth {
                image_id: s.id.clone(),
                class: o.class,
                bbox: o.bbox,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EvalConfig {
    iou_threshold: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<(RunManifest, EvalReport)> {
    if !(args.iou_threshold > 0.0 && args.iou_threshold <= 1.0) {
        return Err(config_err("invalid iou_threshold: must lie in (0, 1]"));
    }
    let text =
        fs::read_to_string(&args.detections).map_err(|e| data_err(format!("{}: {e}", args.detections.display())))?;
    let dets: Vec<Detection> =
        serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", args.detections.display())))?;
    let scenes = read_dataset(&args.data).map_err(data_err)?;
    let ids: std::collections::BTreeSet<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
    if let Some(d) = dets.iter().find(|d| !ids.contains(d.image_id.as_str())) {
        return Err(data_err(format!("detection for unknown image id {:?}", d.image_id)));
    }
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(data_err(format!("non-finite score for image {:?}", d.image_id)));
    }
    let gts = ground_truth(&scenes);
    let report = evaluate(&dets, &gts, args.iou_threshold).map_err(data_err)?;

    let out = &args.common.out;
    let mut outputs = vec![METRICS_FILE.to_string()];
    write_file(&out.join(METRICS_FILE), &to_json(&report))?;
    for c in &report.classes {
        let Some(pr) = &c.pr else { continue };
        let mut csv = String::from("recall,precision\n");
        for (r, p) in pr.recall.iter().zip(&pr.precision) {
            let _ = writeln!(csv, "{r},{p}");
        }
        let name = format!("pr_class{}.csv", c.class);
        write_file(&out.join(&name), &csv)?;
        outputs.push(name);
    }
    write_file(&out.join("pr.svg"), &pr_svg(&report))?;
    outputs.push("pr.svg".into());
    let inputs = vec![lossy(&args.detections), lossy(&args.data)];
    let cfg = EvalConfig {
        iou_threshold: args.iou_threshold,
    };
    let m = RunManifest::new("eval", 0, &cfg, inputs, outputs);
    write_manifest(out, &m)?;
    Ok((m, report))
}

/// Minimal SVG with one precision/recall polyline per class.
pub fn pr_svg(report: &EvalReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    let sx = |r: f64| PAD + r * (W - 2.0 * PAD);
    let sy = |p: f64| H - PAD - p * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#,
        x0 = sx(0.0),
        x1 = sx(1.0),
        y0 = sy(0.0),
        y1 = sy(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">recall</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, c) in report.classes.iter().enumerate() {
        let Some(pr) = &c.pr else { continue };
        let hue = (i * 360 / report.classes.len().max(1)) % 360;
        let mut pts = format!("{:.2},{:.2}", sx(0.0), sy(pr.precision.first().copied().unwrap_or(0.0)));
        for (r, p) in pr.recall.iter().zip(&pr.precision) {
            let _ = write!(pts, " {:.2},{:.2}", sx(*r), sy(*p));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{pts}" fill="none" stroke="hsl({hue},70%,40%)"><title>class {} AP {:.4}</title></polyline>"#,
            c.class, pr.ap
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="12" text-anchor="end">mAP@{} = {:.4}</text>"#,
        W - PAD,
        report.iou_threshold,
        report.map
    );
    s.push_str("</svg>\n");
    s
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<GradCheckReport> {
    if !(args.tolerance > 0.0) || args.configs == 0 {
        return Err(config_err("invalid tolerance/configs: must be positive"));
    }
    let faults = Faults {
        flip_proj_distance: args.inject_sign_bug,
    };
    let report = run_suite(args.seed, args.configs, args.tolerance, faults).map_err(data_err)?;
    for e in &report.entries {
        println!(
            "{:<18} max_rel_err={:.3e} {}",
            e.loss,
            e.max_rel_err,
            if e.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        write_file(&out.join(GRADCHECK_FILE), &to_json(&report))?;
        let cfg = serde_json::json!({
            "configs": args.configs,
            "tolerance": args.tolerance,
            "inject_sign_bug": args.inject_sign_bug,
        });
        let m = RunManifest::new("gradcheck", args.seed, &cfg, vec![], vec![GRADCHECK_FILE.into()]);
        write_manifest(out, &m)?;
    }
    if !report.passed() {
        return Err(CliError::Check("gradient check exceeded tolerance".into()));
    }
    Ok(report)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => {
            let m = cmd_gen(a)?;
            println!("wrote {} files to {}", m.outputs.len(), a.common.out.display());
        }
        Command::Fit(a) => {
            cmd_fit(a)?;
            println!("wrote fits to {}", a.common.out.display());
        }
        Command::Eval(a) => {
            let (_, r) = cmd_eval(a)?;
            for c in &r.classes {
                match &c.pr {
                    Some(pr) => println!(
                        "class {:>2}  gt {:>4}  det {:>4}  AP {:.4}",
                        c.class, c.num_gt, c.num_det, pr.ap
                    ),
                    None => println!("class {:>2}  gt    0  det {:>4}  (excluded)", c.class, c.num_det),
                }
            }
            println!("mAP@{} = {:.4}", r.iou_threshold, r.map);
        }
        Command::Gradcheck(a) => {
            cmd_gradcheck(a)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("persp3d: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hash_tracks_config() {
        let a = RunManifest::new("gen", 1, &SynthConfig::default(), vec![], vec![]);
        let b = RunManifest::new("gen", 1, &SynthConfig::default(), vec![], vec![]);
        assert_eq!(a, b);
        let other = SynthConfig {
            num_scenes: 3,
            ..SynthConfig::default()
        };
        assert_ne!(
            a.config_hash,
            RunManifest::new("gen", 1, &other, vec![], vec![]).config_hash
        );
        assert_eq!(a.config_hash.len(), 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Check(String::new()).exit_code(), 1);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(run(["persp3d", "nope"]), 2);
        assert_eq!(run(["persp3d", "--version"]), 0);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let report = EvalReport {
            iou_threshold: 0.15,
            classes: vec![],
            map: 0.0,
        };
        let s = pr_svg(&report);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}
