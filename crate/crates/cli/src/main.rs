use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gssd::data::{
    generate_phantom, load_dataset, read_labels, read_manifest, read_volume, slice_ground_truths, window_hu, write_labels,
    write_manifest, write_volume, ManifestEntry, PhantomSpec, WeakLabel, MANIFEST_FILE, PORTAL_PHASE,
};
use gssd::eval::{benchmark, cross_validate, detect, read_detections, write_detections, Detection};
use gssd::priors::BoundingBox;
use gssd::run::{differing_keys, is_architecture_key, resolve_seed, RunConfig, SEED_ENV};
use gssd::train::{train, Checkpoint, TrainOptions, CHECKPOINT_FILE};

/// Grouped SSD lesion detection on multi-phase volumes.
#[derive(Parser)]
#[command(name = "gssd", version)]
struct Cli {
    /// Worker threads for detection. 1 keeps every command fully deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-phase volumes with weak labels.
    PhantomGen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on every volume of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// K-fold cross-validation with periodic validation AP.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write detections for every slice of a volume.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        conf: f64,
        /// Scanner offset of the volume; defaults to its manifest entry, else 0.
        #[arg(long)]
        vendor_bias: Option<f32>,
        /// Run configuration the checkpoint must agree with.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render portal-phase slices with ground truth and detections as PPM.
    Overlay {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label file; defaults to the volume's manifest entry.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        vendor_bias: Option<f32>,
    },
    /// Time full-volume detection.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        vendor_bias: Option<f32>,
    },
}

/// Failures split by exit code.
enum Failure {
    /// Bad arguments, configuration or input files: exit 2.
    Invalid(anyhow::Error),
    /// Anything that goes wrong while running: exit 1.
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self, what: impl FnOnce() -> String) -> Outcome<T>;
    fn runtime(self, what: impl FnOnce() -> String) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self, what: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| Failure::Invalid(e.into().context(what())))
    }
    fn runtime(self, what: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into().context(what())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    if cli.threads == 0 {
        return Err(Failure::Invalid(anyhow!("--threads must be at least 1")));
    }
    match cli.command {
        Command::PhantomGen { spec, out, count, seed } => phantom_gen(&spec, &out, count, seed),
        Command::Train { config, data, out, seed, resume } => train_cmd(&config, &data, &out, seed, resume),
        Command::Cv { config, data, out, seed } => cv_cmd(&config, &data, &out, seed),
        Command::Detect { checkpoint, volume, out, conf, vendor_bias, config } => {
            detect_cmd(&checkpoint, &volume, &out, conf, vendor_bias, config.as_deref(), cli.threads)
        }
        Command::Overlay { volume, detections, out, labels, vendor_bias } => {
            overlay_cmd(&volume, &detections, &out, labels.as_deref(), vendor_bias)
        }
        Command::Benchmark { checkpoint, volume, runs, vendor_bias } => bench_cmd(&checkpoint, &volume, runs, vendor_bias, cli.threads),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).invalid(|| format!("cannot read {}", path.display()))
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Outcome<RunConfig> {
    let text = read_text(path)?;
    RunConfig::parse(&text, seed, env_seed().as_deref()).invalid(|| format!("{}", path.display()))
}

fn phantom_gen(spec_path: &Path, out: &Path, count: usize, seed: Option<u64>) -> Outcome<()> {
    let spec = PhantomSpec::parse(&read_text(spec_path)?).invalid(|| format!("{}", spec_path.display()))?;
    let base = resolve_seed(seed, env_seed().as_deref(), spec.seed).invalid(|| "phantom seed".into())?;
    fs::create_dir_all(out).runtime(|| format!("cannot create {}", out.display()))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = base.wrapping_add(i as u64);
        let ph = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(s)).runtime(|| format!("phantom {i}"))?;
        let entry = ManifestEntry { volume: format!("vol_{i:03}.vol"), labels: format!("vol_{i:03}.labels"), seed: s, vendor_bias: spec.vendor_bias as f32 };
        write_volume(&out.join(&entry.volume), &ph.volume).runtime(|| "writing volume".into())?;
        write_labels(&out.join(&entry.labels), &ph.labels).runtime(|| "writing labels".into())?;
        entries.push(entry);
    }
    write_manifest(out, &entries).runtime(|| "writing manifest".into())?;
    println!("wrote {count} volumes to {}", out.display());
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path, seed: Option<u64>, resume: bool) -> Outcome<()> {
    let cfg = load_run_config(config, seed)?;
    let text = cfg.to_text();
    let volumes = load_dataset(data).invalid(|| format!("dataset {}", data.display()))?;
    let resume_state = if resume {
        let path = out.join(CHECKPOINT_FILE);
        let ck = Checkpoint::load(&path).invalid(|| "resume checkpoint".into())?;
        let diff = differing_keys(&ck.config_text, &text).invalid(|| format!("{}: __config__", path.display()))?;
        if !diff.is_empty() {
            return Err(Failure::Invalid(anyhow!("{}: configuration differs in {}", path.display(), diff.join(", "))));
        }
        Some(ck.to_state(cfg.model()).invalid(|| format!("{}", path.display()))?)
    } else {
        None
    };
    fs::create_dir_all(out).runtime(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("config.txt"), &text).runtime(|| "writing config echo".into())?;
    let all: Vec<usize> = (0..volumes.len()).collect();
    let opts = TrainOptions { out_dir: Some(out), config_text: &text, resume: resume_state, stop_at: None };
    let outcome = train(&cfg.train, &volumes, &all, opts, |_, _| Ok(())).runtime(|| "training".into())?;
    if let Some(last) = outcome.log.last() {
        println!("iteration {}: loss {:.5} (conf {:.5}, loc {:.5})", last.iter + 1, last.total, last.conf, last.loc);
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cv_cmd(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Outcome<()> {
    let cfg = load_run_config(config, seed)?;
    let volumes = load_dataset(data).invalid(|| format!("dataset {}", data.display()))?;
    if volumes.len() < cfg.cv.folds {
        return Err(Failure::Invalid(anyhow!("{} volumes cannot make {} folds", volumes.len(), cfg.cv.folds)));
    }
    fs::create_dir_all(out).runtime(|| format!("cannot create {}", out.display()))?;
    let text = cfg.to_text();
    fs::write(out.join("config.txt"), &text).runtime(|| "writing config echo".into())?;
    let report = cross_validate(&cfg.train, &cfg.cv, &volumes, Some(out), &text).runtime(|| "cross-validation".into())?;
    for f in &report.folds {
        println!("fold {}: best AP {:.4} at iteration {}", f.fold, f.best_ap, f.best_iter);
    }
    for (fold, msg) in &report.failures {
        eprintln!("fold {fold} failed: {msg}");
    }
    match report.mean_ap() {
        Some(m) => println!("mean AP {m:.4} over {} folds", report.folds.len()),
        None => println!("no fold completed"),
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{} of {} folds failed", report.failures.len(), cfg.cv.folds)))
    }
}

/// The manifest row for `volume`, if its directory has one.
fn manifest_entry(volume: &Path) -> Option<ManifestEntry> {
    let dir = volume.parent()?;
    if !dir.join(MANIFEST_FILE).exists() {
        return None;
    }
    let name = volume.file_name()?.to_str()?;
    read_manifest(dir).ok()?.into_iter().find(|e| e.volume == name)
}

fn load_volume(path: &Path, bias: Option<f32>) -> Outcome<gssd::data::PhaseVolume> {
    let bias = bias.or_else(|| manifest_entry(path).map(|e| e.vendor_bias)).unwrap_or(0.0);
    read_volume(path, bias).invalid(|| "volume".into())
}

fn load_checkpoint(path: &Path) -> Outcome<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path).invalid(|| "checkpoint".into())?;
    let cfg = RunConfig::parse(&ck.config_text, None, None).invalid(|| format!("{}: __config__", path.display()))?;
    Ok((ck, cfg))
}

fn detect_cmd(ckpt: &Path, volume: &Path, out: &Path, conf: f64, bias: Option<f32>, config: Option<&Path>, threads: usize) -> Outcome<()> {
    let (ck, run_cfg) = load_checkpoint(ckpt)?;
    if let Some(c) = config {
        let mine = load_run_config(c, Some(run_cfg.train.seed))?;
        let diff: Vec<String> = differing_keys(&ck.config_text, &mine.to_text())
            .invalid(|| format!("{}", c.display()))?
            .into_iter()
            .filter(|k| is_architecture_key(k))
            .collect();
        if !diff.is_empty() {
            return Err(Failure::Invalid(anyhow!(
                "{} and {} disagree on {}",
                c.display(),
                ckpt.display(),
                diff.join(", ")
            )));
        }
    }
    let state = ck.to_state(run_cfg.model()).invalid(|| format!("{}", ckpt.display()))?;
    let pv = load_volume(volume, bias)?;
    let mut eval = *run_cfg.eval();
    eval.conf_threshold = conf;
    eval.threads = threads;
    let dets = detect(&state.model, &pv, &run_cfg.train.input_spec(), &eval).invalid(|| "detection".into())?;
    write_detections(out, &dets).runtime(|| "writing detections".into())?;
    println!("{} detections on {} slices", dets.len(), pv.depth());
    Ok(())
}

const GT_COLOR: [u8; 3] = [0, 255, 0];
const PRED_COLOR: [u8; 3] = [255, 0, 0];

fn draw_rect(img: &mut [u8], w: usize, h: usize, b: &BoundingBox, color: [u8; 3]) {
    let px = |v: f64, n: usize| ((v * n as f64).round() as isize).clamp(0, n as isize - 1) as usize;
    let (x0, x1, y0, y1) = (px(b.x_min, w), px(b.x_max, w), px(b.y_min, h), px(b.y_max, h));
    let mut put = |x: usize, y: usize| img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn overlay_cmd(volume: &Path, detections: &Path, out: &Path, labels: Option<&Path>, bias: Option<f32>) -> Outcome<()> {
    let pv = load_volume(volume, bias)?;
    let dets: Vec<Detection> = read_detections(detections).invalid(|| "detections".into())?;
    let label_path = match labels {
        Some(p) => Some(p.to_path_buf()),
        None => manifest_entry(volume).and_then(|e| volume.parent().map(|d| d.join(e.labels))),
    };
    let labels: Vec<WeakLabel> = match label_path {
        Some(p) => read_labels(&p).invalid(|| "labels".into())?,
        None => Vec::new(),
    };
    let phase = PORTAL_PHASE.min(pv.phases() - 1);
    let (w, h) = (pv.width(), pv.height());
    fs::create_dir_all(out).runtime(|| format!("cannot create {}", out.display()))?;
    for z in 0..pv.depth() {
        let mut img = Vec::with_capacity(w * h * 3);
        for &v in pv.slice(phase, z) {
            let g = (window_hu(v - pv.vendor_bias).invalid(|| format!("slice {z}"))? * 255.0).round() as u8;
            img.extend_from_slice(&[g, g, g]);
        }
        for gt in slice_ground_truths(&labels, z) {
            draw_rect(&mut img, w, h, &gt.bbox, GT_COLOR);
        }
        for d in dets.iter().filter(|d| d.slice_z == z) {
            draw_rect(&mut img, w, h, &d.bbox, PRED_COLOR);
        }
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&img);
        let p = out.join(format!("slice_{z:03}.ppm"));
        fs::write(&p, bytes).runtime(|| format!("writing {}", p.display()))?;
    }
    println!("wrote {} images to {}", pv.depth(), out.display());
    Ok(())
}

fn bench_cmd(ckpt: &Path, volume: &Path, runs: usize, bias: Option<f32>, threads: usize) -> Outcome<()> {
    let (ck, run_cfg) = load_checkpoint(ckpt)?;
    let state = ck.to_state(run_cfg.model()).invalid(|| format!("{}", ckpt.display()))?;
    let pv = load_volume(volume, bias)?;
    let mut eval = *run_cfg.eval();
    eval.threads = threads;
    let r = benchmark(&state.model, &pv, &run_cfg.train.input_spec(), &eval, runs).invalid(|| "benchmark".into())?;
    let runs: Vec<String> = r.run_seconds.iter().map(|s| format!("{s:.3}")).collect();
    println!("runs (s): {}", runs.join(" "));
    println!("slices/second: {:.2}", r.slices_per_second);
    println!("seconds/volume ({} slices): {:.3}", r.slices, r.seconds_per_volume);
    println!("identical detections across runs: {}", r.identical);
    Ok(())
}
