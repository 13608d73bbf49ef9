//! Command implementations behind the `cacmotion` binary.
//!
//! Every command builds a JSON-serializable config (defaults, then `--config`
//! file, then flags), validates it and reads all inputs before writing
//! anything. Relative output paths are placed under `$CACMOTION_OUTPUT_ROOT`
//! when that variable is set.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    checkpoint, BridgeSchedule, CnnConfig, Denoiser, IdentityDenoiser, SampleMode, TinyDenoiser,
    TrainConfig, TrainState,
};
use crate::error::{Error, Result};
use crate::grid::{denormalize, normalize, RoiParams, VoxelGrid};
use crate::pipeline::{correct_volume, crop_windows, fit, VolumePair};
use crate::preview;
use crate::rng::{derive_seed, rng_for};
use crate::score::{agatston, evaluate_cases, score_case, EvalReport, ScoreReport};
use crate::simulate::{
    build_dataset, make_phantom, read_manifest, simulate_motion_full, trajectory_in_voxels,
    write_manifest, DatasetConfig, ManifestEntry, PhantomSpec, SimConfig, Split,
};
use crate::tomo::{AngleSet, ALLOWED_ANGLE_COUNTS};
use crate::volume_io::{read_mask, read_volume, write_mask, write_values, write_volume, Unit};

pub const OUTPUT_ROOT_ENV: &str = "CACMOTION_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "cacmotion",
    version,
    about = "Coronary calcium motion artifacts: simulate, correct, score"
)]
pub struct Cli {
    /// Worker threads; 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cardiac phantom and its calcium mask.
    Phantom(PhantomArgs),
    /// Simulate motion artifacts for one volume, or build a paired dataset with --cases.
    Simulate(SimulateArgs),
    /// Train the tiny bridge denoiser on a dataset manifest.
    Train(TrainArgs),
    /// Correct a volume (or every volume of a manifest split).
    Correct(CorrectArgs),
    /// Agatston and volume score of one volume.
    Score(ScoreArgs),
    /// Compare predictions with ground truth and write the metric report.
    Eval(EvalArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize) -> std::result::Result<Vec<T>, String> {
    let v: Vec<T> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse {p:?}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    if n > 0 && v.len() != n {
        return Err(format!(
            "expected {n} comma-separated values, got {}",
            v.len()
        ));
    }
    Ok(v)
}

fn usize3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list::<usize>(s, 3).map(|v| [v[0], v[1], v[2]])
}

fn f64x3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_list::<f64>(s, 3).map(|v| [v[0], v[1], v[2]])
}

fn usize2(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_list::<usize>(s, 2).map(|v| [v[0], v[1]])
}

fn f64x2(s: &str) -> std::result::Result<[f64; 2], String> {
    parse_list::<f64>(s, 2).map(|v| [v[0], v[1]])
}

// Aliases keep clap from treating these as multi-occurrence arguments.
type UsizeList = Vec<usize>;
type StringList = Vec<String>;

fn usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    parse_list::<usize>(s, 0)
}

fn string_list(s: &str) -> std::result::Result<Vec<String>, String> {
    Ok(s.split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect())
}

/// Resolves an output path against the output-root override.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))
        }
        _ => Ok(()),
    }
}

macro_rules! set {
    ($cfg:ident . $field:ident <- $flag:expr) => {
        if let Some(v) = $flag {
            $cfg.$field = v.into();
        }
    };
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid(format!(
            "unknown split {other:?} (train, test)"
        ))),
    }
}

fn split_matches(filter: &Option<String>, split: &Split) -> Result<bool> {
    Ok(match filter.as_deref() {
        None | Some("all") => true,
        Some(s) => parse_split(s)? == *split,
    })
}

fn clip_hu(v: &VoxelGrid) -> VoxelGrid {
    denormalize(&normalize(v))
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (clean.raw, mask.raw and sidecars).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// nx,ny,nz
    #[arg(long, value_parser = usize3)]
    pub dims: Option<[usize; 3]>,
    /// sx,sy,sz in mm
    #[arg(long, value_parser = f64x3)]
    pub spacing: Option<[f64; 3]>,
    /// min,max lesion count
    #[arg(long, value_parser = usize2)]
    pub lesions: Option<[usize; 2]>,
    /// min,max lesion peak HU
    #[arg(long, value_parser = f64x2)]
    pub peak_hu: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl PhantomConfig {
    pub fn resolve(a: &PhantomArgs) -> Result<Self> {
        let mut c: Self = load_config(a.config.as_deref())?;
        if c.out.as_os_str().is_empty() {
            c.out = "phantom".into();
        }
        set!(c.out <- a.out.clone());
        set!(c.seed <- a.seed);
        let p = &mut c.phantom;
        set!(p.dims <- a.dims);
        set!(p.spacing <- a.spacing);
        set!(p.lesion_count <- a.lesions);
        set!(p.peak_hu <- a.peak_hu);
        c.phantom.validate()?;
        Ok(c)
    }
}

fn print_score(label: &str, r: &ScoreReport) {
    println!(
        "{label}agatston {:.2}  volume {:.2} mm3  grade {}  lesions {}",
        r.agatston,
        r.volume_mm3,
        r.grade.label(),
        r.lesions.len()
    );
}

pub fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let cfg = PhantomConfig::resolve(a)?;
    let (v, m) = make_phantom(&cfg.phantom, cfg.seed)?;
    let report = agatston(&v)?;
    let out = output_path(&cfg.out);
    write_volume(&out.join("clean.raw"), &v, Unit::Hu)?;
    write_mask(&out.join("mask.raw"), &m, v.spacing())?;
    write_json(&out.join("phantom_config.json"), &cfg)?;
    print_score("", &report);
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clean HU volume (single-volume mode).
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Calcium mask matching --volume.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Motion preset name (single-volume mode).
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of projection angles N.
    #[arg(long)]
    pub angles: Option<usize>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the sampled motion amplitude (pixels); 0 disables motion.
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Reconstruct the clean volume through the same projector.
    #[arg(long)]
    pub reconstruct_clean: bool,
    /// Hann-windowed ramp filter instead of plain Ram-Lak.
    #[arg(long)]
    pub hann: bool,
    /// Also write the per-slice sinograms.
    #[arg(long)]
    pub sinogram: bool,
    /// Write mid-slice PNG previews.
    #[arg(long)]
    pub preview: bool,
    /// Dataset mode: number of phantom cases to generate.
    #[arg(long)]
    pub cases: Option<usize>,
    /// Dataset mode: comma-separated presets (default: whole catalog).
    #[arg(long, value_parser = string_list)]
    pub presets: Option<StringList>,
    /// Dataset mode: fraction of cases in the train split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub volume: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: PathBuf,
    pub preset: String,
    /// `None` in dataset mode draws N per pair from the allowed set.
    pub n_angles: Option<usize>,
    pub seed: u64,
    pub amplitude: Option<f64>,
    pub reconstruct_clean: bool,
    pub hann_window: bool,
    pub sinogram: bool,
    pub preview: bool,
    pub cases: Option<usize>,
    pub presets: Vec<String>,
    pub train_fraction: f64,
    pub phantom: PhantomSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            volume: None,
            mask: None,
            out: "sim".into(),
            preset: "oscillation-xy-moderate".into(),
            n_angles: None,
            seed: 0,
            amplitude: None,
            reconstruct_clean: false,
            hann_window: false,
            sinogram: false,
            preview: false,
            cases: None,
            presets: Vec::new(),
            train_fraction: 0.8,
            phantom: PhantomSpec::default(),
        }
    }
}

impl SimulateConfig {
    pub fn resolve(a: &SimulateArgs) -> Result<Self> {
        let mut c: Self = load_config(a.config.as_deref())?;
        set!(c.out <- a.out.clone());
        set!(c.preset <- a.preset.clone());
        set!(c.seed <- a.seed);
        set!(c.presets <- a.presets.clone());
        set!(c.train_fraction <- a.train_fraction);
        if a.volume.is_some() {
            c.volume = a.volume.clone();
        }
        if a.mask.is_some() {
            c.mask = a.mask.clone();
        }
        if a.angles.is_some() {
            c.n_angles = a.angles;
        }
        if a.amplitude.is_some() {
            c.amplitude = a.amplitude;
        }
        if a.cases.is_some() {
            c.cases = a.cases;
        }
        c.reconstruct_clean |= a.reconstruct_clean;
        c.hann_window |= a.hann;
        c.sinogram |= a.sinogram;
        c.preview |= a.preview;
        if c.cases.is_none() && c.volume.is_none() {
            return Err(Error::invalid(
                "give --volume and --mask, or --cases for dataset mode",
            ));
        }
        if c.volume.is_some() && c.mask.is_none() {
            return Err(Error::invalid("--mask is required with --volume"));
        }
        if let Some(n) = c.n_angles {
            if !ALLOWED_ANGLE_COUNTS.contains(&n) {
                return Err(Error::invalid(format!(
                    "N = {n} is not one of {ALLOWED_ANGLE_COUNTS:?}"
                )));
            }
        }
        Ok(c)
    }

    fn sim_config(&self) -> SimConfig {
        let mut s = SimConfig::preset(&self.preset, self.n_angles.unwrap_or(360), self.seed);
        s.amplitude_override = self.amplitude;
        s.reconstruct_clean = self.reconstruct_clean;
        s.hann_window = self.hann_window;
        s
    }

    fn dataset_config(&self, n_cases: usize) -> DatasetConfig {
        DatasetConfig {
            n_cases,
            phantom: self.phantom.clone(),
            presets: self.presets.clone(),
            n_angles: self.n_angles,
            seed: self.seed,
            train_fraction: self.train_fraction,
            reconstruct_clean: self.reconstruct_clean,
        }
    }
}

#[derive(Serialize)]
struct TrajectoryFile<'a> {
    preset: &'a str,
    seed: u64,
    n_angles: usize,
    spec: &'a crate::motion::MotionProfileSpec,
    angles_deg: &'a [f64],
    /// In-plane pixel units as generated.
    displacements_px: &'a [[f64; 3]],
    /// Converted to voxel units of the volume.
    displacements_vox: Vec<[f64; 3]>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = SimulateConfig::resolve(a)?;
    let out = output_path(&cfg.out);
    if let Some(n) = cfg.cases {
        let ds = cfg.dataset_config(n);
        ds.validate()?;
        let entries = build_dataset(&ds, &out)?;
        write_manifest(&out.join("manifest.json"), &entries)?;
        write_json(&out.join("simulate_config.json"), &cfg)?;
        println!(
            "wrote {} pairs to {}",
            entries.len(),
            out.join("manifest.json").display()
        );
        return Ok(());
    }
    let sim = cfg.sim_config();
    sim.validate()?;
    let vpath = cfg.volume.as_ref().expect("checked in resolve");
    let mpath = cfg.mask.as_ref().expect("checked in resolve");
    let (x0, _) = read_volume(vpath)?;
    let (m, _) = read_mask(mpath)?;
    if m.dims() != x0.dims() {
        return Err(Error::invalid(format!(
            "mask dims {:?} differ from volume dims {:?}",
            m.dims(),
            x0.dims()
        )));
    }
    let (pair, sinos) = simulate_motion_full(&x0, &m, &sim)?;
    let angles = AngleSet::uniform(sim.n_angles)?;

    write_volume(&out.join("corrupt.raw"), &pair.y, Unit::Hu)?;
    if cfg.reconstruct_clean {
        write_volume(&out.join("clean_recon.raw"), &pair.x0, Unit::Hu)?;
    }
    write_json(
        &out.join("trajectory.json"),
        &TrajectoryFile {
            preset: &cfg.preset,
            seed: cfg.seed,
            n_angles: sim.n_angles,
            spec: &pair.spec,
            angles_deg: angles.degrees(),
            displacements_px: &pair.trajectory.displacements,
            displacements_vox: trajectory_in_voxels(&pair.trajectory, x0.spacing()),
        },
    )?;
    if cfg.sinogram {
        let s0 = &sinos[0];
        let data: Vec<f64> = sinos.iter().flat_map(|s| s.data.iter().copied()).collect();
        write_values(
            &out.join("sinogram.raw"),
            [s0.bins, s0.n_angles, sinos.len()],
            [s0.bin_spacing, 180.0 / s0.n_angles as f64, x0.spacing()[2]],
            &data,
            Unit::LineIntegral,
            Some(angles.degrees().to_vec()),
        )?;
        if cfg.preview {
            preview::write_sinogram(&out.join("sinogram_mid.png"), &sinos[sinos.len() / 2])?;
        }
    }
    if cfg.preview {
        preview::write_panels(
            &out.join("clean_vs_corrupt.png"),
            &[&pair.x0, &pair.y],
            x0.dims()[2] / 2,
        )?;
    }
    write_json(&out.join("simulate_config.json"), &cfg)?;
    print_score("clean:   ", &agatston(&pair.x0)?);
    print_score("corrupt: ", &agatston(&pair.y)?);
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest written by `simulate --cases`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory (checkpoint, loss log, metrics).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Windows per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the calcium consistency term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sigmoid temperature (HU) of the soft calcium mask.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Diffusion steps T.
    #[arg(long = "t-max")]
    pub t_max: Option<usize>,
    /// Sampling stride over the diffusion steps.
    #[arg(long)]
    pub interval: Option<usize>,
    /// Training window H,W,k.
    #[arg(long, value_parser = usize3)]
    pub window: Option<[usize; 3]>,
    /// Network width (channels).
    #[arg(long)]
    pub width: Option<usize>,
    /// Residual-layer dilations, e.g. 1,2,4.
    #[arg(long, value_parser = usize_list)]
    pub dilations: Option<UsizeList>,
    /// Sampler used for the held-out metrics.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub train: TrainConfig,
    /// `(H, W, k)`.
    pub window: [usize; 3],
    pub width: usize,
    pub dilations: Vec<usize>,
    pub mode: String,
    /// Maximum in-plane jitter of calcium-centered training crops.
    pub jitter: usize,
    pub background_blocks: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let net = CnnConfig::default();
        Self {
            manifest: "dataset/manifest.json".into(),
            out: "train".into(),
            seed: 0,
            steps: 2000,
            train: TrainConfig::default(),
            window: [64, 64, net.k],
            width: net.width,
            dilations: net.dilations,
            mode: "posterior".into(),
            jitter: 8,
            background_blocks: 1,
        }
    }
}

impl TrainRunConfig {
    pub fn resolve(a: &TrainArgs) -> Result<Self> {
        let mut c: Self = load_config(a.config.as_deref())?;
        set!(c.manifest <- a.manifest.clone());
        set!(c.out <- a.out.clone());
        set!(c.seed <- a.seed);
        set!(c.steps <- a.steps);
        set!(c.window <- a.window);
        set!(c.width <- a.width);
        set!(c.dilations <- a.dilations.clone());
        set!(c.mode <- a.mode.clone());
        let t = &mut c.train;
        set!(t.batch_size <- a.batch_size);
        set!(t.lambda <- a.lambda);
        set!(t.tau <- a.tau);
        set!(t.t_max <- a.t_max);
        set!(t.interval <- a.interval);
        if let Some(lr) = a.lr {
            t.adam.lr = lr;
        }
        c.train.validate()?;
        c.net_config().validate()?;
        SampleMode::parse(&c.mode, c.seed)?;
        if c.window[0] == 0 || c.window[1] == 0 {
            return Err(Error::invalid("window H and W must be >= 1"));
        }
        Ok(c)
    }

    pub fn net_config(&self) -> CnnConfig {
        CnnConfig {
            k: self.window[2],
            width: self.width,
            dilations: self.dilations.clone(),
            t_max: self.train.t_max,
            seed: derive_seed(self.seed, 0x6e6574),
            ..CnnConfig::default()
        }
    }
}

struct LoadedEntry {
    entry: ManifestEntry,
    pair: VolumePair,
}

fn load_entries(
    manifest: &Path,
    filter: impl Fn(&ManifestEntry) -> bool,
) -> Result<Vec<LoadedEntry>> {
    let root = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    read_manifest(manifest)?
        .into_iter()
        .filter(|e| filter(e))
        .map(|e| {
            let (clean, _) = read_volume(&root.join(&e.clean_path))?;
            let (corrupt, _) = read_volume(&root.join(&e.corrupt_path))?;
            let (mask, _) = read_mask(&root.join(&e.mask_path))?;
            Ok(LoadedEntry {
                pair: VolumePair::new(clean, corrupt, mask)?,
                entry: e,
            })
        })
        .collect()
}

/// Metrics of the corrected and the uncorrected test volumes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub corrected: EvalReport,
    pub no_correction: EvalReport,
}

pub fn held_out_metrics(
    test: &[VolumePair],
    denoiser: &dyn Denoiser,
    sched: &BridgeSchedule,
    mode: SampleMode,
    k: usize,
    tile: [usize; 2],
) -> Result<HeldOutMetrics> {
    let mut corrected = Vec::with_capacity(test.len());
    let mut none = Vec::with_capacity(test.len());
    for p in test {
        let truth = clip_hu(&p.clean);
        let fixed = correct_volume(&p.corrupt, denoiser, sched, mode, k, tile)?;
        corrected.push(score_case(&fixed, &truth, None)?);
        none.push(score_case(&clip_hu(&p.corrupt), &truth, None)?);
    }
    Ok(HeldOutMetrics {
        corrected: evaluate_cases(corrected)?,
        no_correction: evaluate_cases(none)?,
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainRunConfig::resolve(a)?;
    let entries = load_entries(&cfg.manifest, |_| true)?;
    let (train, test): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|e| e.entry.split == Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("manifest has no train-split entries"));
    }
    let [h, w, k] = cfg.window;
    let nz = train[0].pair.clean.dims()[2];
    for e in train.iter().chain(&test) {
        let d = e.pair.clean.dims();
        if d[0] < w || d[1] < h || d[2] != nz {
            return Err(Error::invalid(format!(
                "volume {:?} of {} does not fit window ({h}, {w}) with {nz} slices",
                d, e.entry.case_id
            )));
        }
    }
    let params = RoiParams {
        block: [w, h, nz],
        jitter: cfg.jitter,
        background_blocks: cfg.background_blocks,
    };
    let mut rng = rng_for(cfg.seed, 0x726f69);
    let mut examples = Vec::new();
    for e in &train {
        for c in e.pair.crops(&params, &mut rng)? {
            examples.extend(crop_windows(&c, k)?);
        }
    }
    let mode = SampleMode::parse(&cfg.mode, cfg.seed)?;

    let out = output_path(&cfg.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("train_config.json"), &cfg)?;
    let log_path = out.join("loss.csv");
    let mut log =
        csv::Writer::from_path(&log_path).map_err(|e| Error::format(&log_path, e.to_string()))?;
    log.write_record(["step", "mse", "calc", "total"])
        .map_err(|e| Error::format(&log_path, e.to_string()))?;

    eprintln!(
        "training on {} windows from {} pairs",
        examples.len(),
        train.len()
    );
    let net = TinyDenoiser::new(cfg.net_config())?;
    let mut state = TrainState::new(net, cfg.train.clone())?;
    fit(&mut state, &examples, cfg.steps, cfg.seed, |step, l| {
        log.serialize((step, l.mse, l.calc, l.total))
            .map_err(|e| Error::format(&log_path, e.to_string()))?;
        if step % 100 == 0 || step == cfg.steps {
            eprintln!(
                "step {step}: mse {:.6} calc {:.6} total {:.6}",
                l.mse, l.calc, l.total
            );
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(
        &out.join("model.bin"),
        &state.denoiser,
        state.step,
        &cfg.train,
        cfg.window,
    )?;

    if test.len() >= 2 {
        let pairs: Vec<VolumePair> = test.into_iter().map(|e| e.pair).collect();
        let m = held_out_metrics(&pairs, &state.denoiser, &state.sched, mode, k, [w, h])?;
        write_json(&out.join("metrics.json"), &m)?;
        println!(
            "held-out ({} pairs)      MAE     acc%   dice   pearson",
            pairs.len()
        );
        for (name, r) in [
            ("no correction", &m.no_correction),
            ("corrected", &m.corrected),
        ] {
            println!(
                "  {name:<14} {:>8.3} {:>7.2} {:>6.3} {:>8}",
                r.agatston_mae,
                r.grade_accuracy_pct,
                r.mean_dice_loss,
                r.pearson.map_or("null".into(), |p| format!("{p:.4}"))
            );
        }
    } else {
        eprintln!("fewer than 2 held-out pairs; skipping metrics");
    }
    Ok(())
}

// ---------------------------------------------------------------- correct

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Volume to correct (single-volume mode).
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Correct every corrupted volume of a manifest split instead.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest split: train, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Output `.raw` file (single mode) or directory (manifest mode).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// identity or checkpoint.
    #[arg(long)]
    pub denoiser: Option<String>,
    /// model.bin written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// direct, posterior or stochastic.
    #[arg(long)]
    pub mode: Option<String>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// In-plane tile H,W (defaults to the checkpoint window).
    #[arg(long, value_parser = usize2)]
    pub tile: Option<[usize; 2]>,
    /// Window depth k for the identity denoiser.
    #[arg(long)]
    pub k: Option<usize>,
    /// Diffusion steps T.
    #[arg(long = "t-max")]
    pub t_max: Option<usize>,
    /// Sampling stride over the diffusion steps.
    #[arg(long)]
    pub interval: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectConfig {
    pub volume: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
    pub out: PathBuf,
    pub denoiser: String,
    pub checkpoint: Option<PathBuf>,
    pub mode: String,
    pub seed: u64,
    pub tile: Option<[usize; 2]>,
    pub k: usize,
    pub t_max: usize,
    pub interval: usize,
}

impl Default for CorrectConfig {
    fn default() -> Self {
        Self {
            volume: None,
            manifest: None,
            split: Some("test".into()),
            out: "corrected.raw".into(),
            denoiser: "checkpoint".into(),
            checkpoint: None,
            mode: "posterior".into(),
            seed: 0,
            tile: None,
            k: 3,
            t_max: 1000,
            interval: 100,
        }
    }
}

impl CorrectConfig {
    pub fn resolve(a: &CorrectArgs) -> Result<Self> {
        let mut c: Self = load_config(a.config.as_deref())?;
        if a.volume.is_some() {
            c.volume = a.volume.clone();
        }
        if a.manifest.is_some() {
            c.manifest = a.manifest.clone();
        }
        if a.split.is_some() {
            c.split = a.split.clone();
        }
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        if a.tile.is_some() {
            c.tile = a.tile;
        }
        set!(c.out <- a.out.clone());
        set!(c.denoiser <- a.denoiser.clone());
        set!(c.mode <- a.mode.clone());
        set!(c.seed <- a.seed);
        set!(c.k <- a.k);
        set!(c.t_max <- a.t_max);
        set!(c.interval <- a.interval);
        if c.volume.is_some() == c.manifest.is_some() {
            return Err(Error::invalid(
                "give exactly one of --volume and --manifest",
            ));
        }
        match c.denoiser.as_str() {
            "identity" => {}
            "checkpoint" if c.checkpoint.is_none() => {
                return Err(Error::invalid(
                    "--checkpoint is required with --denoiser checkpoint",
                ))
            }
            "checkpoint" => {}
            other => {
                return Err(Error::invalid(format!(
                    "unknown denoiser {other:?} (identity, checkpoint)"
                )))
            }
        }
        SampleMode::parse(&c.mode, c.seed)?;
        split_matches(&c.split, &Split::Test)?;
        Ok(c)
    }
}

/// A loaded denoiser with the geometry it expects.
pub struct CorrectionSetup {
    pub denoiser: Box<dyn Denoiser>,
    pub sched: BridgeSchedule,
    pub k: usize,
    pub tile: Option<[usize; 2]>,
}

fn correction_setup(c: &CorrectConfig) -> Result<CorrectionSetup> {
    if c.denoiser == "identity" {
        return Ok(CorrectionSetup {
            denoiser: Box::new(IdentityDenoiser),
            sched: BridgeSchedule::new(c.t_max, c.interval)?,
            k: c.k,
            tile: c.tile,
        });
    }
    let path = c.checkpoint.as_ref().expect("checked in resolve");
    let (net, header) = checkpoint::load(path)?;
    let [h, w, k] = header.window;
    let hp = &header.hyperparameters;
    Ok(CorrectionSetup {
        denoiser: Box::new(net),
        sched: BridgeSchedule::new(hp.t_max, hp.interval)?,
        k,
        tile: Some(c.tile.unwrap_or([h, w])),
    })
}

fn tile_for(v: &VoxelGrid, tile: Option<[usize; 2]>) -> Result<[usize; 2]> {
    let [nx, ny, _] = v.dims();
    let [h, w] = tile.unwrap_or([ny, nx]);
    if h > ny || w > nx {
        return Err(Error::invalid(format!(
            "window ({h}, {w}) is larger than the volume plane ({ny}, {nx})"
        )));
    }
    Ok([w, h])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub case_id: String,
    pub preset: String,
    pub path: PathBuf,
}

pub fn cmd_correct(a: &CorrectArgs) -> Result<()> {
    let cfg = CorrectConfig::resolve(a)?;
    let setup = correction_setup(&cfg)?;
    let mode = SampleMode::parse(&cfg.mode, cfg.seed)?;
    let steps = setup.sched.n_sampling_steps();
    let out = output_path(&cfg.out);

    if let Some(vpath) = &cfg.volume {
        let (v, _) = read_volume(vpath)?;
        let tile = tile_for(&v, setup.tile)?;
        let fixed = correct_volume(
            &v,
            setup.denoiser.as_ref(),
            &setup.sched,
            mode,
            setup.k,
            tile,
        )?;
        write_volume(&out, &fixed, Unit::Hu)?;
        let png = out.with_file_name(format!(
            "{}_before_after.png",
            out.file_stem()
                .map_or("corrected".into(), |s| s.to_string_lossy())
        ));
        preview::write_panels(&png, &[&v, &fixed], v.dims()[2] / 2)?;
        eprintln!(
            "{} sampler, {} windows, trace length {steps} steps (T={}, interval={})",
            cfg.mode,
            v.dims()[2],
            setup.sched.t_max(),
            setup.sched.interval()
        );
        print_score("before: ", &agatston(&v)?);
        print_score("after:  ", &agatston(&fixed)?);
        return Ok(());
    }

    let manifest = cfg.manifest.as_ref().expect("checked in resolve");
    let root = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut jobs = Vec::new();
    for e in read_manifest(manifest)? {
        if split_matches(&cfg.split, &e.split)? {
            let (v, _) = read_volume(&root.join(&e.corrupt_path))?;
            tile_for(&v, setup.tile)?;
            jobs.push((e, v));
        }
    }
    let mut preds = Vec::with_capacity(jobs.len());
    for (e, v) in &jobs {
        let tile = tile_for(v, setup.tile)?;
        let fixed = correct_volume(
            v,
            setup.denoiser.as_ref(),
            &setup.sched,
            mode,
            setup.k,
            tile,
        )?;
        let rel = PathBuf::from(format!("{}_{}.raw", e.case_id, e.preset));
        write_volume(&out.join(&rel), &fixed, Unit::Hu)?;
        preds.push(PredictionEntry {
            case_id: e.case_id.clone(),
            preset: e.preset.clone(),
            path: rel,
        });
    }
    write_json(&out.join("predictions.json"), &preds)?;
    eprintln!(
        "corrected {} volumes with the {} sampler, trace length {steps} steps",
        preds.len(),
        cfg.mode
    );
    Ok(())
}

// ---------------------------------------------------------------- score

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// HU volume to score.
    #[arg(long)]
    pub volume: PathBuf,
    /// Also write the full report (with lesions) as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let (v, unit) = read_volume(&a.volume)?;
    if unit != Unit::Hu {
        return Err(Error::invalid(format!(
            "expected an HU volume, got {unit:?}"
        )));
    }
    let r = agatston(&v)?;
    if let Some(p) = &a.json {
        write_json(&output_path(p), &r)?;
    }
    print_score("", &r);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest holding the ground truth.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// predictions.json from `correct --manifest`; omit to score the
    /// uncorrected volumes.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// train, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Report JSON path; the text table and confusion heatmap go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub truth: PathBuf,
    pub pred: Option<PathBuf>,
    pub split: Option<String>,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            truth: "dataset/manifest.json".into(),
            pred: None,
            split: Some("test".into()),
            out: "eval_report.json".into(),
        }
    }
}

impl EvalConfig {
    pub fn resolve(a: &EvalArgs) -> Result<Self> {
        let mut c: Self = load_config(a.config.as_deref())?;
        set!(c.truth <- a.truth.clone());
        set!(c.out <- a.out.clone());
        if a.pred.is_some() {
            c.pred = a.pred.clone();
        }
        if a.split.is_some() {
            c.split = a.split.clone();
        }
        split_matches(&c.split, &Split::Test)?;
        Ok(c)
    }
}

/// Loads aligned (prediction, truth) volumes. Prediction and truth sets must
/// cover exactly the same (case, preset) pairs.
pub fn aligned_pairs(cfg: &EvalConfig) -> Result<Vec<(VoxelGrid, VoxelGrid)>> {
    let root = cfg.truth.parent().unwrap_or(Path::new("")).to_path_buf();
    let truth: Vec<ManifestEntry> = read_manifest(&cfg.truth)?
        .into_iter()
        .filter(|e| split_matches(&cfg.split, &e.split).unwrap_or(false))
        .collect();
    let preds: Option<BTreeMap<(String, String), PathBuf>> = match &cfg.pred {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let list: Vec<PredictionEntry> =
                serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
            let proot = p.parent().unwrap_or(Path::new(""));
            let n = list.len();
            let map: BTreeMap<_, _> = list
                .into_iter()
                .map(|e| ((e.case_id, e.preset), proot.join(e.path)))
                .collect();
            if map.len() != n {
                return Err(Error::format(p, "duplicate (case_id, preset) entries"));
            }
            if map.len() != truth.len() {
                return Err(Error::invalid(format!(
                    "{} predictions for {} truth entries",
                    map.len(),
                    truth.len()
                )));
            }
            Some(map)
        }
    };
    truth
        .iter()
        .map(|e| {
            let pred_path = match &preds {
                None => root.join(&e.corrupt_path),
                Some(m) => m
                    .get(&(e.case_id.clone(), e.preset.clone()))
                    .cloned()
                    .ok_or_else(|| {
                        Error::invalid(format!("no prediction for {} / {}", e.case_id, e.preset))
                    })?,
            };
            let (pred, _) = read_volume(&pred_path)?;
            let (clean, _) = read_volume(&root.join(&e.clean_path))?;
            if !pred.same_geometry(&clean) {
                return Err(Error::invalid(format!(
                    "prediction for {} / {} differs in geometry from the truth",
                    e.case_id, e.preset
                )));
            }
            Ok((clip_hu(&pred), clip_hu(&clean)))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = EvalConfig::resolve(a)?;
    let pairs = aligned_pairs(&cfg)?;
    let report = crate::score::evaluate(&pairs)?;
    let out = output_path(&cfg.out);
    ensure_parent(&out)?;
    fs::write(&out, report.to_json() + "\n").map_err(|e| Error::io(&out, e))?;
    let table = report.to_text_table();
    let tpath = out.with_extension("txt");
    fs::write(&tpath, &table).map_err(|e| Error::io(&tpath, e))?;
    let stem = out
        .file_stem()
        .map_or("eval_report".into(), |s| s.to_string_lossy().into_owned());
    preview::write_confusion(
        &out.with_file_name(format!("{stem}_confusion.png")),
        &report.confusion_pct,
        24,
    )?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(table.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

// ---------------------------------------------------------------- entry

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("cannot configure thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
