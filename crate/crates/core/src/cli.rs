//! Command-line front end: `bench`, `vp` and `scene`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::axes::{AxisPolicy, MeanShiftConfig};
use crate::ba::{Information, LMConfig};
use crate::error::Error;
use crate::geometry::{CameraIntrinsics, Pose, Segment2D, Vec3};
use crate::synth::{
    format_table, generate_scene, run_benchmark, run_cell, summarize, write_csv, BenchResult,
    BenchRow, BenchSettings, Parameterization, Scenario, Scene, SceneConfig,
};
use crate::vanish::{estimate_frame, LabeledSegment, SegmentClass, VPResult, VpTolerances, PROPOSAL_COUNT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchPlan {
    pub seeds: usize,
    pub params: Vec<Parameterization>,
    pub scenarios: Vec<Scenario>,
    pub threads: Option<usize>,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            seeds: 10,
            params: Parameterization::ALL.to_vec(),
            scenarios: Scenario::ALL.to_vec(),
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub csv: String,
    pub summary: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            dir: PathBuf::from("results"),
            csv: "bench.csv".into(),
            summary: "summary.json".into(),
        }
    }
}

/// Everything a run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub lm: LMConfig,
    pub information: Information,
    /// Hold the first-to-last camera distance at its true value.
    pub scale_gauge: bool,
    pub timing_repeats: usize,
    pub axis_policy: AxisPolicy,
    pub mean_shift: MeanShiftConfig,
    pub vp: VpTolerances,
    pub bench: BenchPlan,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchSettings::default();
        RunConfig {
            scene: SceneConfig::default(),
            lm: bench.lm,
            information: bench.information,
            scale_gauge: bench.scale_gauge,
            timing_repeats: bench.timing_repeats,
            axis_policy: AxisPolicy::default(),
            mean_shift: MeanShiftConfig::default(),
            vp: VpTolerances::default(),
            bench: BenchPlan::default(),
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn settings(&self) -> BenchSettings {
        BenchSettings {
            lm: self.lm,
            information: self.information,
            scale_gauge: self.scale_gauge,
            timing_repeats: self.timing_repeats,
            threads: self.bench.threads,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.scene.validate()?;
        self.settings().validate()?;
        self.axis_policy.validate()?;
        self.mean_shift.validate()?;
        self.vp.validate()?;
        if self.bench.seeds == 0 || self.bench.params.is_empty() || self.bench.scenarios.is_empty() {
            return Err(Error::InvalidConfig(
                "bench: seeds, params and scenarios must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Input problem reported with exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn read(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, InputError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, InputError> {
    let cfg = match path {
        Some(p) => parse_json(p)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(|e| InputError(e.to_string()))?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), InputError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| InputError(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "axisline", version, about = "Axis-anchored structural line bundle adjustment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the parameterization benchmark.
    Bench(BenchArgs),
    /// Estimate vanishing points for one frame of segments.
    Vp(VpArgs),
    /// Write a synthetic scene to JSON.
    Scene(SceneArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to these parameterizations (2p, 4p, 3p).
    #[arg(long = "param")]
    pub params: Vec<Parameterization>,
    /// Restrict to these scenarios (fixed, small, large).
    #[arg(long = "scenario")]
    pub scenarios: Vec<Scenario>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Exit 1 when any cell diverged.
    #[arg(long)]
    pub strict: bool,
    /// Solve a saved scene instead of generating scenes.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VpArgs {
    /// JSON array of `{id, s: [u, v], e: [u, v]}`.
    #[arg(long)]
    pub segments: PathBuf,
    /// World vertical direction, `x,y,z`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0, 1.0])]
    pub dv: Vec<f64>,
    /// JSON pose (`T_cw`); identity when omitted.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// `fx,fy,cx,cy`; the config's scene intrinsics when omitted.
    #[arg(long, value_delimiter = ',')]
    pub intrinsics: Option<Vec<f64>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "small")]
    pub scenario: Scenario,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct BenchSummary<'a> {
    config: &'a RunConfig,
    cells: &'a [BenchResult],
    diverged_runs: Vec<&'a BenchRow>,
}

/// Output of `bench`: rows and their per-cell means.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub cells: Vec<BenchResult>,
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchOutcome, InputError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.seeds {
        cfg.bench.seeds = n;
    }
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    if !args.params.is_empty() {
        cfg.bench.params = args.params.clone();
    }
    if !args.scenarios.is_empty() {
        cfg.bench.scenarios = args.scenarios.clone();
    }
    if args.threads.is_some() {
        cfg.bench.threads = args.threads;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate().map_err(|e| InputError(e.to_string()))?;
    let settings = cfg.settings();
    let rows = match &args.scene {
        Some(path) => {
            let scene: Scene = parse_json(path)?;
            cfg.bench
                .params
                .iter()
                .map(|p| run_cell(&scene, *p, &settings))
                .collect::<crate::Result<Vec<_>>>()
        }
        None => run_benchmark(
            &cfg.scene,
            &cfg.bench.params,
            &cfg.bench.scenarios,
            cfg.bench.seeds,
            &settings,
        ),
    }
    .map_err(|e| InputError(e.to_string()))?;
    let cells = summarize(&rows);

    let mut csv = Vec::new();
    write_csv(&rows, &mut csv).map_err(|e| InputError(e.to_string()))?;
    let dir = &cfg.output.dir;
    write_file(&dir.join(&cfg.output.csv), &String::from_utf8_lossy(&csv))?;
    let summary = BenchSummary {
        config: &cfg,
        cells: &cells,
        diverged_runs: rows.iter().filter(|r| r.diverged).collect(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| InputError(e.to_string()))?;
    write_file(&dir.join(&cfg.output.summary), &json)?;
    print!("{}", format_table(&cells));
    Ok(BenchOutcome { rows, cells })
}

#[derive(Debug, Serialize)]
struct VpJson {
    vps: Vec<[f64; 3]>,
    /// Class of each stored point, same order as `vps`.
    vp_classes: Vec<SegmentClass>,
    classes: BTreeMap<u64, SegmentClass>,
    residuals: Vec<f64>,
    best_proposal: Option<u32>,
}

impl From<&VPResult> for VpJson {
    fn from(r: &VPResult) -> Self {
        let labelled = r.vps.labelled();
        VpJson {
            vps: labelled.iter().map(|(_, p)| [p.x, p.y, p.z]).collect(),
            vp_classes: labelled.iter().map(|(c, _)| *c).collect(),
            classes: r.classes.clone(),
            residuals: r.residuals.iter().map(|(_, x)| *x).collect(),
            best_proposal: r.best_proposal,
        }
    }
}

pub fn cmd_vp(args: &VpArgs) -> Result<VPResult, InputError> {
    let cfg = load_config(args.config.as_deref())?;
    let labelled: Vec<LabeledSegment> = parse_json(&args.segments)?;
    let segments: Vec<(u64, Segment2D)> = labelled
        .iter()
        .map(|l| {
            l.segment()
                .map(|s| (l.id, s))
                .map_err(|e| InputError(format!("{}: segment {}: {e}", args.segments.display(), l.id)))
        })
        .collect::<Result<_, _>>()?;
    let pose: Pose = match &args.pose {
        Some(p) => parse_json(p)?,
        None => Pose::identity(),
    };
    let k = match &args.intrinsics {
        Some(v) if v.len() != 4 => return Err(InputError("--intrinsics takes fx,fy,cx,cy".into())),
        Some(v) => CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| InputError(e.to_string()))?,
        None => cfg.scene.intrinsics,
    };
    if args.dv.len() != 3 {
        return Err(InputError("--dv takes x,y,z".into()));
    }
    let dv = Vec3::new(args.dv[0], args.dv[1], args.dv[2])
        .try_normalize(0.0)
        .ok_or_else(|| InputError("--dv must be non-zero".into()))?;
    let result = estimate_frame(&segments, &dv, &pose, &k, &cfg.vp).map_err(|e| InputError(e.to_string()))?;
    println!("proposals: {PROPOSAL_COUNT}");
    for (class, r) in &result.residuals {
        println!("{}: residual {r:e}", class.label());
    }
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&VpJson::from(&result)).map_err(|e| InputError(e.to_string()))?;
        write_file(out, &json)?;
    }
    Ok(result)
}

pub fn cmd_scene(args: &SceneArgs) -> Result<Scene, InputError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    let scene = generate_scene(&cfg.scene, args.scenario).map_err(|e| InputError(e.to_string()))?;
    write_file(&args.out, &scene_json(&scene)?)?;
    Ok(scene)
}

/// Canonical text form of a scene.
pub fn scene_json(scene: &Scene) -> Result<String, InputError> {
    serde_json::to_string_pretty(scene).map_err(|e| InputError(e.to_string()))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Bench(a) => cmd_bench(a).map(|o| {
            if a.strict && o.rows.iter().any(|r| r.diverged) {
                eprintln!("diverged cells present");
                EXIT_DIVERGED
            } else {
                EXIT_OK
            }
        }),
        Command::Vp(a) => cmd_vp(a).map(|_| EXIT_OK),
        Command::Scene(a) => cmd_scene(a).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

/// Parses `args` (program name first) and runs; usage errors exit 2.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}
