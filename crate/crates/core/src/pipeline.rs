//! The command suite: each command reads the artifacts of the previous ones
//! from the output directory, stages its own outputs, and commits them only
//! if that would not silently replace a differing file.
//!
//! ```text
//! out/
//!   data/          phantom volumes, labels, manifest.csv, extents.csv
//!   preprocessed/  normalized, downsampled volumes and manifest.csv
//!   vae/           vae.ckpt, loss.csv
//!   ldm/           ldm.ckpt, loss.csv
//!   extend/        chest-cropped held-out inputs, their extensions, records.json
//!   eval/          sweep.csv, slices.csv, organs.csv, coverage.csv, ...
//!   report/        summary.txt, montage PGMs
//!   runs/          one JSON line per command invocation
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::diffusion::{cosine_schedule, init_denoiser, prepare_latents, train_ldm, LatentDiffusion, LatentStats, LdmTrainConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{coverage_profile, eval_extension, ssim, CoverageProfile, ImputedSlices, IntensitySegmenter, Psnr, SliceMetric, SsimParams, SubjectFov, Summary};
use crate::phantom::{build_datasets, crop_grid, read_extents, write_extents, DatasetTag, FovWindow, Manifest, ManifestEntry, OrganExtent};
use crate::preprocess::{preprocess_volume, NormalizedVolume};
use crate::repaint::{extend_fov, Direction, ExtensionPlan, ExtensionRecord};
use crate::rng::{field, keyed};
use crate::vae::{init_vae, train_vae, SliceDataset, VaeModel, VaeTrainConfig};
use crate::volume_io::{atomic_write, preview_image, read_checkpoint, read_float_volume, write_checkpoint, write_volume, Gray8, Plane};

/// Environment variable read by the `scope` binary for the worker count.
pub const THREADS_ENV: &str = "SCOPE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Preprocess,
    TrainVae,
    TrainLdm,
    Extend,
    Eval,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [Command::GenData, Command::Preprocess, Command::TrainVae, Command::TrainLdm, Command::Extend, Command::Eval, Command::Report];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Preprocess => "preprocess",
            Command::TrainVae => "train-vae",
            Command::TrainLdm => "train-ldm",
            Command::Extend => "extend",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(".scope.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(out.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Scratch directory whose files are moved into the output tree on commit.
struct Stage {
    dir: PathBuf,
    dest: PathBuf,
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, base, out)?;
        } else {
            out.push(p.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

impl Stage {
    fn new(out: &Path, command: Command) -> Result<Self> {
        let dir = out.join(format!(".staging-{}", command.name()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, dest: out.to_path_buf() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Moves every staged file into place. Fails before moving anything if
    /// some destination exists with different content and `force` is off.
    fn commit(self, force: bool) -> Result<Vec<String>> {
        let mut files = Vec::new();
        walk(&self.dir, &self.dir, &mut files)?;
        files.sort();
        if !force {
            for rel in &files {
                let dst = self.dest.join(rel);
                if dst.exists() {
                    let a = fs::read(self.dir.join(rel)).map_err(|e| Error::io(self.dir.join(rel), e))?;
                    let b = fs::read(&dst).map_err(|e| Error::io(&dst, e))?;
                    if a != b {
                        return Err(Error::WouldOverwrite(dst));
                    }
                }
            }
        }
        for rel in &files {
            let dst = self.dest.join(rel);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::rename(self.dir.join(rel), &dst).map_err(|e| Error::io(&dst, e))?;
        }
        fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        Ok(files.iter().map(|p| p.to_string_lossy().into_owned()).collect())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub elapsed_ms: u128,
    pub outputs: Vec<String>,
}

fn require(out: &Path, rel: &str, command: Command) -> Result<PathBuf> {
    let p = out.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Prerequisite { path: p, command: command.name().into() })
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Data(format!("json: {e}")))?;
    s.push(b'\n');
    Ok(s)
}

/// Runs one command against `out`, taking the directory lock for its
/// duration. `progress` receives occasional human-readable status lines.
pub fn run(command: Command, cfg: &RunConfig, out: &Path, force: bool, progress: &mut dyn FnMut(&str)) -> Result<RunRecord> {
    let _lock = OutputLock::acquire(out)?;
    let started = Instant::now();
    let stage = Stage::new(out, command)?;
    match command {
        Command::GenData => gen_data(cfg, &stage)?,
        Command::Preprocess => preprocess(cfg, out, &stage)?,
        Command::TrainVae => train_vae_cmd(cfg, out, &stage, progress)?,
        Command::TrainLdm => train_ldm_cmd(cfg, out, &stage, progress)?,
        Command::Extend => extend_cmd(cfg, out, &stage, progress)?,
        Command::Eval => eval_cmd(cfg, out, &stage, progress)?,
        Command::Report => report_cmd(cfg, out, &stage)?,
    }
    let outputs = stage.commit(force)?;
    let record = RunRecord {
        command: command.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.data.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        elapsed_ms: started.elapsed().as_millis(),
        outputs,
    };
    let runs = out.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let log = runs.join(format!("{}.jsonl", command.name()));
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&log).map_err(|e| Error::io(&log, e))?;
    let line = serde_json::to_string(&record).map_err(|e| Error::Data(format!("json: {e}")))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&log, e))?;
    Ok(record)
}

/// Every command in order.
pub fn run_all(cfg: &RunConfig, out: &Path, force: bool, progress: &mut dyn FnMut(&str)) -> Result<Vec<RunRecord>> {
    Command::ALL.iter().map(|&c| run(c, cfg, out, force, progress)).collect()
}

// ------------------------------------------------------------- commands

fn gen_data(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let dir = stage.path("data");
    let (manifest, extents) = build_datasets(&cfg.phantom_config(), &cfg.dataset_plan()?, &dir)?;
    manifest.write(&dir.join("manifest.csv"))?;
    write_extents(&extents, &dir.join("extents.csv"))
}

fn preprocess(cfg: &RunConfig, out: &Path, stage: &Stage) -> Result<()> {
    let src = require(out, "data/manifest.csv", Command::GenData)?;
    let manifest = Manifest::read(&src)?;
    let dir = stage.path("preprocessed");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    manifest
        .entries
        .par_iter()
        .map(|e| -> Result<()> {
            let vol = read_float_volume(&out.join("data").join(&e.path))?;
            let norm = preprocess_volume(&vol, cfg.preprocess.sigma)?;
            write_volume(norm.grid(), &dir.join(&e.path))
        })
        .collect::<Result<Vec<()>>>()?;
    manifest.write(&dir.join("manifest.csv"))
}

fn load_normalized(out: &Path, e: &ManifestEntry) -> Result<NormalizedVolume> {
    NormalizedVolume::new(read_float_volume(&out.join("preprocessed").join(&e.path))?)
}

fn training_volumes(out: &Path) -> Result<Vec<NormalizedVolume>> {
    let manifest = Manifest::read(&require(out, "preprocessed/manifest.csv", Command::Preprocess)?)?;
    let train = manifest.filter(&[DatasetTag::Chest, DatasetTag::Abdomen]);
    if train.entries.is_empty() {
        return Err(Error::Data("manifest has no chest or abdomen subjects".into()));
    }
    train.entries.iter().map(|e| load_normalized(out, e)).collect()
}

fn train_vae_cmd(cfg: &RunConfig, out: &Path, stage: &Stage, progress: &mut dyn FnMut(&str)) -> Result<()> {
    let data = SliceDataset::new(training_volumes(out)?)?;
    let mut model = init_vae(cfg.vae_config(), cfg.data.seed)?;
    let tc = VaeTrainConfig { steps: cfg.vae.steps, batch: cfg.vae.batch, adam: cfg.vae_adam() };
    let every = (cfg.vae.steps / 10).max(1);
    let log = train_vae(&mut model, &data, &tc, cfg.data.seed, |_, r| {
        if (r.step + 1) % every == 0 {
            progress(&format!("train-vae step {}/{}: recon {:.4} kl {:.2}", r.step + 1, tc.steps, r.recon_l1, r.kl));
        }
        Ok(())
    })?;
    write_checkpoint(&model.to_checkpoint(true, &cfg.render_semantic(), cfg.data.seed), &stage.path("vae/vae.ckpt"))?;
    write_bytes(&stage.path("vae/loss.csv"), &crate::phantom::to_csv(&log)?)
}

pub fn load_vae(cfg: &RunConfig, out: &Path) -> Result<VaeModel<f32>> {
    let ckpt = read_checkpoint(&require(out, "vae/vae.ckpt", Command::TrainVae)?)?;
    let mut model = init_vae(cfg.vae_config(), cfg.data.seed)?;
    model.load_checkpoint(&ckpt)?;
    Ok(model)
}

pub fn load_ldm(cfg: &RunConfig, out: &Path) -> Result<LatentDiffusion> {
    let ckpt = read_checkpoint(&require(out, "ldm/ldm.ckpt", Command::TrainLdm)?)?;
    let mut ldm = LatentDiffusion {
        denoiser: init_denoiser(cfg.denoiser_config(), cfg.data.seed)?,
        schedule: cosine_schedule(cfg.ldm.diffusion_steps)?,
        stats: LatentStats::identity(cfg.vae.latent_dim),
        sigma_mode: cfg.ldm.sigma_mode,
    };
    ldm.load_checkpoint(&ckpt)?;
    Ok(ldm)
}

fn train_ldm_cmd(cfg: &RunConfig, out: &Path, stage: &Stage, progress: &mut dyn FnMut(&str)) -> Result<()> {
    let vae = load_vae(cfg, out)?;
    let volumes = training_volumes(out)?;
    let (latents, stats) = prepare_latents(&vae, &volumes, cfg.vae.latent_dim)?;
    let schedule = cosine_schedule(cfg.ldm.diffusion_steps)?;
    let mut denoiser = init_denoiser(cfg.denoiser_config(), cfg.data.seed)?;
    let tc = LdmTrainConfig { steps: cfg.ldm.steps, batch: cfg.ldm.batch, adam: cfg.ldm_adam() };
    let every = (cfg.ldm.steps / 10).max(1);
    let log = train_ldm(&mut denoiser, &latents, &schedule, &tc, cfg.data.seed, |_, recs| {
        let step = recs[0].step;
        if (step + 1) % every == 0 {
            let mean = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len() as f64;
            progress(&format!("train-ldm step {}/{}: loss {mean:.4}", step + 1, tc.steps));
        }
        Ok(())
    })?;
    let ldm = LatentDiffusion { denoiser, schedule, stats, sigma_mode: cfg.ldm.sigma_mode };
    write_checkpoint(&ldm.to_checkpoint(true, &cfg.render_semantic(), cfg.data.seed), &stage.path("ldm/ldm.ckpt"))?;
    write_bytes(&stage.path("ldm/loss.csv"), &crate::phantom::to_csv(&log)?)
}

fn heldout(out: &Path) -> Result<Vec<ManifestEntry>> {
    let manifest = Manifest::read(&require(out, "preprocessed/manifest.csv", Command::Preprocess)?)?;
    let entries = manifest.filter(&[DatasetTag::Heldout]).entries;
    if entries.is_empty() {
        return Err(Error::Data("manifest has no held-out subjects; set data.n_heldout".into()));
    }
    Ok(entries)
}

#[derive(Clone, Debug, Serialize)]
struct ExtendedSubject {
    subject_index: u64,
    input: String,
    extended: String,
    record: ExtensionRecord,
}

fn extend_cmd(cfg: &RunConfig, out: &Path, stage: &Stage, progress: &mut dyn FnMut(&str)) -> Result<()> {
    let vae = load_vae(cfg, out)?;
    let ldm = load_ldm(cfg, out)?;
    let entries = heldout(out)?;
    let window = FovWindow::new(cfg.data.chest_window[0], cfg.data.chest_window[1])?;
    let plan = cfg.extension_plan();
    let results = entries
        .par_iter()
        .map(|e| -> Result<ExtendedSubject> {
            let full = load_normalized(out, e)?;
            let input = NormalizedVolume::new(crop_grid(full.grid(), &window)?)?;
            let mut rng = keyed(cfg.data.seed, e.subject_index, field::EXTEND);
            let ext = extend_fov(&input, &plan, &vae, &ldm, &mut rng)?;
            let stem = format!("heldout_{:03}", e.subject_index);
            let (inp, exd) = (format!("{stem}_input.mhd"), format!("{stem}_extended.mhd"));
            write_volume(input.grid(), &stage.path("extend").join(&inp))?;
            write_volume(ext.volume.grid(), &stage.path("extend").join(&exd))?;
            Ok(ExtendedSubject { subject_index: e.subject_index, input: inp, extended: exd, record: ext.record })
        })
        .collect::<Result<Vec<_>>>()?;
    progress(&format!("extend: {} held-out volumes extended by {} slices", results.len(), plan.n_new));
    // Run records carry timings; keep them out of the guarded outputs.
    let timed = json(&results)?;
    let untimed: Vec<ExtendedSubject> = results
        .into_iter()
        .map(|mut r| {
            r.record.elapsed_ms = 0;
            r
        })
        .collect();
    write_bytes(&stage.path("extend/records.json"), &json(&untimed)?)?;
    let runs = out.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    write_bytes(&runs.join("extend-timing.json"), &timed)
}

#[derive(Clone, Debug, Serialize)]
struct SweepRow {
    imputed: usize,
    n_slices: usize,
    ssim_mean: f64,
    ssim_std: f64,
    psnr_db: String,
    baseline_ssim_mean: f64,
    baseline_ssim_std: f64,
    baseline_psnr_db: String,
}

#[derive(Clone, Debug, Serialize)]
struct SliceRow {
    imputed: usize,
    subject_index: u64,
    cut: usize,
    repeat: usize,
    slice_index: usize,
    ssim: f64,
    psnr_db: String,
    baseline_ssim: f64,
    baseline_psnr_db: String,
}

#[derive(Clone, Debug, Serialize)]
struct OrganRow {
    imputed: usize,
    subject_index: u64,
    cut: usize,
    repeat: usize,
    organ_id: i32,
    v_acq_mm3: f64,
    v_syn_mm3: f64,
    disagreement_pct: String,
}

#[derive(Clone, Debug, Serialize)]
struct ReconRow {
    subject_index: u64,
    ssim_mean: f64,
    ssim_min: f64,
}

#[derive(Clone, Debug, Serialize)]
struct CoverageRow {
    stage: String,
    organ_id: i32,
    covered: usize,
    subjects: usize,
    fraction: f64,
}

fn coverage_rows(stage: &str, p: &CoverageProfile) -> Vec<CoverageRow> {
    p.organs.iter().map(|o| CoverageRow { stage: stage.into(), organ_id: o.organ_id, covered: o.covered, subjects: o.subjects, fraction: o.fraction }).collect()
}

fn fov_of(subject_index: u64, g: &Grid<f32>) -> SubjectFov {
    let (z_lo, z_hi) = g.z_extent();
    SubjectFov { subject_index, z_lo, z_hi }
}

/// Masked-block imputation of one held-out volume truncated after `cut`
/// slices, imputing `k` slices.
#[allow(clippy::too_many_arguments)]
fn impute_block(
    gt: &NormalizedVolume,
    cut: usize,
    k: usize,
    plan: &ExtensionPlan,
    vae: &VaeModel<f32>,
    ldm: &LatentDiffusion,
    seg: &IntensitySegmenter,
    organs: &[i32],
    seed: u64,
    key: u64,
) -> Result<crate::metrics::MetricsReport> {
    let truth = NormalizedVolume::new(gt.sub_slices(0, cut + k)?)?;
    let input = NormalizedVolume::new(gt.sub_slices(0, cut)?)?;
    let plan = ExtensionPlan { direction: Direction::Inferior, n_new: k, ..plan.clone() };
    let mut rng = keyed(seed, key, field::EVAL);
    let ext = extend_fov(&input, &plan, vae, ldm, &mut rng)?;
    let imputed = ImputedSlices { indices: (cut..cut + k).collect(), baseline_source: cut - 1 };
    eval_extension(&truth, &ext.volume, &seg.segment(&truth), &seg.segment(&ext.volume), &imputed, organs, &SsimParams::default())
}

fn psnr_text(p: Psnr) -> String {
    p.to_string()
}

fn eval_cmd(cfg: &RunConfig, out: &Path, stage: &Stage, progress: &mut dyn FnMut(&str)) -> Result<()> {
    let vae = load_vae(cfg, out)?;
    let ldm = load_ldm(cfg, out)?;
    let records_path = require(out, "extend/records.json", Command::Extend)?;
    let extents: Vec<OrganExtent> = read_extents(&require(out, "data/extents.csv", Command::GenData)?)?;
    let entries = heldout(out)?;
    let gts = entries.iter().map(|e| load_normalized(out, e)).collect::<Result<Vec<_>>>()?;
    let phantom = cfg.phantom_config();
    let seg = IntensitySegmenter::from_organs(&phantom.organs, phantom.air_hu, phantom.body_hu);
    let organs: Vec<i32> = phantom.organs.iter().map(|o| o.id).collect();
    let params = SsimParams::default();
    let side = cfg.vae_config().slice_size;

    // VAE reconstruction quality on held-out slices.
    let recon: Vec<ReconRow> = entries
        .iter()
        .zip(&gts)
        .map(|(e, gt)| -> Result<ReconRow> {
            let rec = vae.reconstruct_volume(gt)?;
            let s = (0..gt.n_slices()).map(|k| ssim(gt.slice(k), rec.slice(k), side, side, &params)).collect::<Result<Vec<_>>>()?;
            Ok(ReconRow { subject_index: e.subject_index, ssim_mean: Summary::of(&s).mean, ssim_min: s.iter().copied().fold(f64::INFINITY, f64::min) })
        })
        .collect::<Result<_>>()?;

    // Masked-block sweep.
    let plan = cfg.extension_plan();
    let mut jobs = Vec::new();
    for &k in &cfg.eval.sweep {
        for (si, e) in entries.iter().enumerate() {
            for &cut in &cfg.eval.cuts {
                for r in 0..cfg.eval.repeats {
                    jobs.push((k, si, e.subject_index, cut, r));
                }
            }
        }
    }
    progress(&format!("eval: {} imputation runs", jobs.len()));
    let reports = jobs
        .par_iter()
        .map(|&(k, si, subject, cut, r)| {
            let key = ((subject * 1024 + cut as u64) * 1024 + k as u64) * 1024 + r as u64;
            impute_block(&gts[si], cut, k, &plan, &vae, &ldm, &seg, &organs, cfg.data.seed, key)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sweep = Vec::new();
    let mut slice_rows = Vec::new();
    let mut organ_rows = Vec::new();
    for &k in &cfg.eval.sweep {
        let mut all: Vec<SliceMetric> = Vec::new();
        for (job, rep) in jobs.iter().zip(&reports).filter(|(j, _)| j.0 == k) {
            let (_, _, subject, cut, r) = *job;
            for s in &rep.slices {
                slice_rows.push(SliceRow {
                    imputed: k,
                    subject_index: subject,
                    cut,
                    repeat: r,
                    slice_index: s.slice_index,
                    ssim: s.ssim,
                    psnr_db: psnr_text(s.psnr),
                    baseline_ssim: s.baseline_ssim,
                    baseline_psnr_db: psnr_text(s.baseline_psnr),
                });
            }
            for o in &rep.organs {
                organ_rows.push(OrganRow {
                    imputed: k,
                    subject_index: subject,
                    cut,
                    repeat: r,
                    organ_id: o.organ_id,
                    v_acq_mm3: o.v_acq_mm3,
                    v_syn_mm3: o.v_syn_mm3,
                    disagreement_pct: o.disagreement_pct.map_or("absent".into(), |v| format!("{v:.4}")),
                });
            }
            all.extend(rep.slices.iter().copied());
        }
        let ss = Summary::of(&all.iter().map(|s| s.ssim).collect::<Vec<_>>());
        let bs = Summary::of(&all.iter().map(|s| s.baseline_ssim).collect::<Vec<_>>());
        let mean_db = |f: fn(&SliceMetric) -> Psnr| -> Psnr {
            let v: Vec<f64> = all.iter().filter_map(|s| f(s).db()).collect();
            if v.is_empty() {
                Psnr::Identical
            } else {
                Psnr::Db(Summary::of(&v).mean)
            }
        };
        sweep.push(SweepRow {
            imputed: k,
            n_slices: all.len(),
            ssim_mean: ss.mean,
            ssim_std: ss.std,
            psnr_db: psnr_text(mean_db(|s| s.psnr)),
            baseline_ssim_mean: bs.mean,
            baseline_ssim_std: bs.std,
            baseline_psnr_db: psnr_text(mean_db(|s| s.baseline_psnr)),
        });
    }

    // Coverage: training datasets, held-out inputs before and after extension.
    let manifest = Manifest::read(&out.join("preprocessed/manifest.csv"))?;
    let train: Vec<SubjectFov> =
        manifest.filter(&[DatasetTag::Chest, DatasetTag::Abdomen]).entries.iter().map(|e| SubjectFov { subject_index: e.subject_index, z_lo: e.z_lo, z_hi: e.z_hi }).collect();
    let records: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(&records_path).map_err(|e| Error::io(&records_path, e))?).map_err(|e| Error::Data(format!("records.json: {e}")))?;
    let mut before = Vec::new();
    let mut after = Vec::new();
    for r in &records {
        let subject = r["subject_index"].as_u64().ok_or_else(|| Error::Data("records.json: missing subject_index".into()))?;
        let name = |k: &str| r[k].as_str().map(str::to_string).ok_or_else(|| Error::Data(format!("records.json: missing {k}")));
        before.push(fov_of(subject, &read_float_volume(&out.join("extend").join(name("input")?))?));
        after.push(fov_of(subject, &read_float_volume(&out.join("extend").join(name("extended")?))?));
    }
    let bin = cfg.eval.bin_mm;
    let mut coverage = coverage_rows("train", &coverage_profile(&train, &extents, bin)?);
    coverage.extend(coverage_rows("heldout_input", &coverage_profile(&before, &extents, bin)?));
    coverage.extend(coverage_rows("heldout_extended", &coverage_profile(&after, &extents, bin)?));
    let hist = coverage_profile(&train, &extents, bin)?;

    let e = |p: &str| stage.path(&format!("eval/{p}"));
    write_bytes(&e("sweep.csv"), &crate::phantom::to_csv(&sweep)?)?;
    write_bytes(&e("slices.csv"), &crate::phantom::to_csv(&slice_rows)?)?;
    write_bytes(&e("organs.csv"), &crate::phantom::to_csv(&organ_rows)?)?;
    write_bytes(&e("vae_recon.csv"), &crate::phantom::to_csv(&recon)?)?;
    write_bytes(&e("coverage.csv"), &crate::phantom::to_csv(&coverage)?)?;
    write_bytes(&e("fov_histogram.csv"), &hist.histogram_csv()?)
}

fn report_cmd(cfg: &RunConfig, out: &Path, stage: &Stage) -> Result<()> {
    let sweep_path = require(out, "eval/sweep.csv", Command::Eval)?;
    let read = |p: &Path| -> Result<Vec<csv::StringRecord>> {
        let mut r = csv::Reader::from_path(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        r.records().map(|x| x.map_err(|e| Error::Data(format!("{}: {e}", p.display())))).collect()
    };
    let mut s = String::new();
    s.push_str(&format!("config hash {}  seed {}\n\n", cfg.hash(), cfg.data.seed));
    s.push_str("Masked-block imputation (held-out subjects)\n");
    s.push_str("imputed  slices  SSIM %            PSNR dB   copy-last SSIM %   copy-last PSNR dB\n");
    for r in read(&sweep_path)? {
        let f = |i: usize| r.get(i).unwrap_or("").to_string();
        let pct = |i: usize| f(i).parse::<f64>().map_or(f(i), |v| format!("{:.2}", 100.0 * v));
        s.push_str(&format!("{:>7}  {:>6}  {:>6} ± {:<6}  {:>8}   {:>6} ± {:<6}   {:>8}\n", f(0), f(1), pct(2), pct(3), f(4), pct(5), pct(6), f(7)));
    }
    s.push_str("reference (real CT, 10/20/30% imputed): SSIM 81.23 / 77.13 / 74.14 %\n\n");
    let recon = read(&out.join("eval/vae_recon.csv"))?;
    let means: Vec<f64> = recon.iter().filter_map(|r| r.get(1)?.parse().ok()).collect();
    s.push_str(&format!("VAE held-out slice SSIM: {:.4}\n\n", Summary::of(&means).mean));
    s.push_str("Organ coverage (fraction of subjects whose FOV contains the organ)\n");
    for r in read(&out.join("eval/coverage.csv"))? {
        s.push_str(&format!(
            "  {:<18} organ {}  {}/{}  {}\n",
            r.get(0).unwrap_or(""),
            r.get(1).unwrap_or(""),
            r.get(2).unwrap_or(""),
            r.get(3).unwrap_or(""),
            r.get(4).unwrap_or("")
        ));
    }
    let organs = read(&out.join("eval/organs.csv"))?;
    let liver: Vec<f64> = organs.iter().filter(|r| r.get(4) == Some("3")).filter_map(|r| r.get(7)?.parse().ok()).collect();
    if !liver.is_empty() {
        let l = Summary::of(&liver);
        s.push_str(&format!("\nLiver volume disagreement: {:.2}% ± {:.2} (reference on real CT: 1.58% ± 0.92)\n", l.mean, l.std));
    }
    write_bytes(&stage.path("report/summary.txt"), s.as_bytes())?;

    // Coronal montages: input | extended | ground truth.
    let records_path = require(out, "extend/records.json", Command::Extend)?;
    let records: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(&records_path).map_err(|e| Error::io(&records_path, e))?).map_err(|e| Error::Data(format!("records.json: {e}")))?;
    let entries = heldout(out)?;
    let window = (crate::preprocess::hu_to_normalized(-160.0), crate::preprocess::hu_to_normalized(240.0));
    for r in records {
        let subject = r["subject_index"].as_u64().unwrap_or(0);
        let (Some(inp), Some(ext)) = (r["input"].as_str(), r["extended"].as_str()) else { continue };
        let input = read_float_volume(&out.join("extend").join(inp))?;
        let extended = read_float_volume(&out.join("extend").join(ext))?;
        let Some(entry) = entries.iter().find(|e| e.subject_index == subject) else { continue };
        let truth = read_float_volume(&out.join("preprocessed").join(&entry.path))?;
        let y = input.dims()[1] / 2;
        let tiles: Vec<Gray8> = [&input, &extended, &truth].iter().map(|v| preview_image(v, Plane::Coronal, y, window)).collect::<Result<_>>()?;
        write_bytes(&stage.path(&format!("report/montage_{subject:03}.pgm")), &Gray8::hstack(&tiles, 2).to_pgm())?;
    }
    Ok(())
}
