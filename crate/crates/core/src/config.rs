//! Run configuration: flat INI sections of `key = value` lines.
//!
//! ```text
//! # comment
//! [vae]
//! latent_dim = 64
//! steps = 3000
//! ```
//!
//! Every key has a default; unknown sections or keys are rejected with the
//! key and line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffcore::AdamConfig;
use crate::diffusion::{DenoiserConfig, SigmaMode, LEVELS};
use crate::error::{Error, Result};
use crate::phantom::{DatasetPlan, FovWindow, PhantomConfig};
use crate::repaint::{Direction, ExtensionPlan, InpaintOptions};
use crate::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub grid_xy: usize,
    pub grid_s: usize,
    pub pixel_spacing: f64,
    pub slice_thickness: f64,
    pub n_chest: usize,
    pub n_abdomen: usize,
    pub n_heldout: usize,
    pub chest_window: [f64; 2],
    pub abdomen_window: [f64; 2],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSection {
    pub sigma: f64,
    pub n_s: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeSection {
    pub latent_dim: usize,
    pub channels: [usize; 3],
    pub groups: usize,
    pub kl_weight: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmSection {
    pub diffusion_steps: usize,
    pub schedule: String,
    pub channels: [usize; LEVELS],
    pub groups: usize,
    pub time_dim: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub sigma_mode: SigmaMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtendSection {
    pub n_new: usize,
    pub direction: Direction,
    pub min_context: usize,
    pub per_window: usize,
    pub resample_repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// Imputed-slice counts of the masked-block sweep.
    pub sweep: Vec<usize>,
    /// Slice counts at which held-out volumes are truncated before imputing.
    pub cuts: Vec<usize>,
    /// Independent samples per (subject, cut, count).
    pub repeats: usize,
    pub bin_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoSection {
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub vae: VaeSection,
    pub ldm: LdmSection,
    pub extend: ExtendSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                grid_xy: 64,
                grid_s: 64,
                pixel_spacing: 6.0,
                slice_thickness: 3.0,
                n_chest: 10,
                n_abdomen: 10,
                n_heldout: 4,
                chest_window: [0.0, 112.0],
                abdomen_window: [80.0, 192.0],
                seed: 0,
            },
            preprocess: PreprocessSection { sigma: 1.0, n_s: 16 },
            vae: VaeSection { latent_dim: 64, channels: [16, 32, 32], groups: 4, kl_weight: 1e-6, lr: 1e-3, steps: 3000, batch: 16 },
            ldm: LdmSection {
                diffusion_steps: 100,
                schedule: "cosine".into(),
                channels: [32, 32, 64, 64],
                groups: 8,
                time_dim: 32,
                lr: 3e-4,
                steps: 4000,
                batch: 8,
                sigma_mode: SigmaMode::Posterior,
            },
            extend: ExtendSection { n_new: 30, direction: Direction::Inferior, min_context: 8, per_window: 8, resample_repeats: 0 },
            eval: EvalSection { sweep: vec![2, 4, 6], cuts: vec![20, 28, 36, 44], repeats: 1, bin_mm: 16.0 },
            io: IoSection { out: PathBuf::from("runs/desk") },
        }
    }
}

/// A raw `value` with the line it came from.
struct Entry {
    value: String,
    line: usize,
}

fn key_err(key: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigKey { key: key.to_string(), line, msg: msg.into() }
}

fn scalar<T: FromStr>(key: &str, e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse::<T>().map_err(|err| key_err(key, e.line, format!("cannot parse `{}`: {err}", e.value)))
}

fn list<T: FromStr>(key: &str, e: &Entry) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    e.value.split(',').map(|s| s.trim().parse::<T>().map_err(|err| key_err(key, e.line, format!("cannot parse list item `{}`: {err}", s.trim())))).collect()
}

fn array<T: FromStr + Copy + Default, const N: usize>(key: &str, e: &Entry) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let v: Vec<T> = list(key, e)?;
    if v.len() != N {
        return Err(key_err(key, e.line, format!("expected {N} comma-separated values, got {}", v.len())));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&v);
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| key_err(s, line, "unterminated section header"))?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(key_err(name, line, format!("unknown section; expected one of {SECTIONS:?}")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| key_err(s, line, "expected `key = value`"))?;
            let sec = section.as_deref().ok_or_else(|| key_err(k.trim(), line, "key outside of any section"))?;
            let full = format!("{sec}.{}", k.trim());
            if !KEYS.contains(&full.as_str()) {
                return Err(key_err(&full, line, "unknown key"));
            }
            if let Some(prev) = entries.insert(full.clone(), Entry { value: v.trim().to_string(), line }) {
                return Err(key_err(&full, line, format!("duplicate key (first set on line {})", prev.line)));
            }
        }
        let mut c = RunConfig::default();
        for (key, e) in &entries {
            c.apply(key, e)?;
        }
        c.validate_keys(&entries)?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, e: &Entry) -> Result<()> {
        match key {
            "data.grid_xy" => self.data.grid_xy = scalar(key, e)?,
            "data.grid_s" => self.data.grid_s = scalar(key, e)?,
            "data.pixel_spacing" => self.data.pixel_spacing = scalar(key, e)?,
            "data.slice_thickness" => self.data.slice_thickness = scalar(key, e)?,
            "data.n_chest" => self.data.n_chest = scalar(key, e)?,
            "data.n_abdomen" => self.data.n_abdomen = scalar(key, e)?,
            "data.n_heldout" => self.data.n_heldout = scalar(key, e)?,
            "data.chest_window" => self.data.chest_window = array(key, e)?,
            "data.abdomen_window" => self.data.abdomen_window = array(key, e)?,
            "data.seed" => self.data.seed = scalar(key, e)?,
            "preprocess.sigma" => self.preprocess.sigma = scalar(key, e)?,
            "preprocess.n_s" => self.preprocess.n_s = scalar(key, e)?,
            "vae.latent_dim" => self.vae.latent_dim = scalar(key, e)?,
            "vae.channels" => self.vae.channels = array(key, e)?,
            "vae.groups" => self.vae.groups = scalar(key, e)?,
            "vae.kl_weight" => self.vae.kl_weight = scalar(key, e)?,
            "vae.lr" => self.vae.lr = scalar(key, e)?,
            "vae.steps" => self.vae.steps = scalar(key, e)?,
            "vae.batch" => self.vae.batch = scalar(key, e)?,
            "ldm.diffusion_steps" => self.ldm.diffusion_steps = scalar(key, e)?,
            "ldm.schedule" => self.ldm.schedule = e.value.clone(),
            "ldm.channels" => self.ldm.channels = array(key, e)?,
            "ldm.groups" => self.ldm.groups = scalar(key, e)?,
            "ldm.time_dim" => self.ldm.time_dim = scalar(key, e)?,
            "ldm.lr" => self.ldm.lr = scalar(key, e)?,
            "ldm.steps" => self.ldm.steps = scalar(key, e)?,
            "ldm.batch" => self.ldm.batch = scalar(key, e)?,
            "ldm.sigma_mode" => {
                self.ldm.sigma_mode = SigmaMode::parse(&e.value).ok_or_else(|| key_err(key, e.line, "expected posterior, beta or zero"))?;
            }
            "extend.n_new" => self.extend.n_new = scalar(key, e)?,
            "extend.direction" => {
                self.extend.direction = Direction::parse(&e.value).ok_or_else(|| key_err(key, e.line, "expected inferior or superior"))?;
            }
            "extend.min_context" => self.extend.min_context = scalar(key, e)?,
            "extend.per_window" => self.extend.per_window = scalar(key, e)?,
            "extend.resample_repeats" => self.extend.resample_repeats = scalar(key, e)?,
            "eval.sweep" => self.eval.sweep = list(key, e)?,
            "eval.cuts" => self.eval.cuts = list(key, e)?,
            "eval.repeats" => self.eval.repeats = scalar(key, e)?,
            "eval.bin_mm" => self.eval.bin_mm = scalar(key, e)?,
            "io.out" => self.io.out = PathBuf::from(&e.value),
            _ => unreachable!("key table and apply() disagree on `{key}`"),
        }
        Ok(())
    }

    /// Range checks, reported against the line that set the offending key
    /// (line 0 when the default is at fault).
    fn validate_keys(&self, entries: &BTreeMap<String, Entry>) -> Result<()> {
        let at = |key: &str| entries.get(key).map_or(0, |e| e.line);
        let fail = |key: &str, msg: String| Err(key_err(key, at(key), msg));
        if self.data.grid_xy < 16 || self.data.grid_xy % 16 != 0 {
            return fail("data.grid_xy", format!("must be a positive multiple of 16, got {}", self.data.grid_xy));
        }
        if self.data.grid_s < self.preprocess.n_s {
            return fail("data.grid_s", format!("must be at least n_s = {}", self.preprocess.n_s));
        }
        for (k, v) in [
            ("data.pixel_spacing", self.data.pixel_spacing),
            ("data.slice_thickness", self.data.slice_thickness),
            ("preprocess.sigma", self.preprocess.sigma),
            ("eval.bin_mm", self.eval.bin_mm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(k, format!("must be positive, got {v}"));
            }
        }
        for (k, w) in [("data.chest_window", self.data.chest_window), ("data.abdomen_window", self.data.abdomen_window)] {
            if !(w[0] < w[1]) {
                return fail(k, format!("needs lo < hi, got {w:?}"));
            }
        }
        if self.data.n_chest + self.data.n_abdomen == 0 {
            return fail("data.n_chest", "chest and abdomen counts cannot both be zero".into());
        }
        let m = 1 << LEVELS;
        if self.preprocess.n_s == 0 || self.preprocess.n_s % m != 0 {
            return fail("preprocess.n_s", format!("must be a positive multiple of {m}, got {}", self.preprocess.n_s));
        }
        if self.vae.latent_dim == 0 || self.vae.latent_dim % m != 0 {
            return fail("vae.latent_dim", format!("must be a positive multiple of {m}, got {}", self.vae.latent_dim));
        }
        if let Err(Error::Config(msg)) = self.vae_config().validate() {
            return fail("vae.channels", msg);
        }
        if !(self.vae.lr > 0.0) || !(self.ldm.lr > 0.0) {
            return fail(if self.vae.lr > 0.0 { "ldm.lr" } else { "vae.lr" }, "learning rate must be positive".into());
        }
        if self.vae.batch == 0 || self.ldm.batch == 0 {
            return fail(if self.vae.batch == 0 { "vae.batch" } else { "ldm.batch" }, "batch must be positive".into());
        }
        if self.ldm.diffusion_steps < 2 {
            return fail("ldm.diffusion_steps", format!("must be at least 2, got {}", self.ldm.diffusion_steps));
        }
        if self.ldm.schedule != "cosine" {
            return fail("ldm.schedule", format!("only `cosine` is supported, got `{}`", self.ldm.schedule));
        }
        if let Err(Error::Config(msg)) = self.denoiser_config().validate() {
            return fail("ldm.channels", msg);
        }
        if let Err(Error::Config(msg)) = self.extension_plan().validate(self.preprocess.n_s) {
            return fail("extend.per_window", msg);
        }
        if self.eval.sweep.is_empty() || self.eval.sweep.contains(&0) {
            return fail("eval.sweep", "needs at least one positive slice count".into());
        }
        let slices = self.data.grid_s;
        if let Some(&c) = self.eval.cuts.iter().find(|&&c| c < self.extend.min_context || c + self.eval.sweep.iter().max().copied().unwrap_or(0) > slices) {
            return fail("eval.cuts", format!("cut {c} leaves too little context or runs past the {slices} slices"));
        }
        if self.eval.repeats == 0 {
            return fail("eval.repeats", "must be positive".into());
        }
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            grid_xy: self.data.grid_xy,
            grid_s: self.data.grid_s,
            pixel_spacing: self.data.pixel_spacing,
            slice_thickness: self.data.slice_thickness,
            seed: self.data.seed,
            ..PhantomConfig::default()
        }
    }

    pub fn dataset_plan(&self) -> Result<DatasetPlan> {
        Ok(DatasetPlan {
            n_chest: self.data.n_chest,
            n_abdomen: self.data.n_abdomen,
            n_heldout: self.data.n_heldout,
            chest_window: FovWindow::new(self.data.chest_window[0], self.data.chest_window[1])?,
            abdomen_window: FovWindow::new(self.data.abdomen_window[0], self.data.abdomen_window[1])?,
            n_s: self.preprocess.n_s,
        })
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig { slice_size: self.data.grid_xy / 2, latent_dim: self.vae.latent_dim, channels: self.vae.channels, groups: self.vae.groups, kl_weight: self.vae.kl_weight }
    }

    pub fn vae_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.vae.lr, ..AdamConfig::default() }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig { n_s: self.preprocess.n_s, latent_dim: self.vae.latent_dim, channels: self.ldm.channels, groups: self.ldm.groups, time_dim: self.ldm.time_dim }
    }

    pub fn ldm_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.ldm.lr, ..AdamConfig::default() }
    }

    pub fn extension_plan(&self) -> ExtensionPlan {
        ExtensionPlan {
            direction: self.extend.direction,
            n_new: self.extend.n_new,
            min_context: self.extend.min_context,
            per_window: self.extend.per_window,
            inpaint: InpaintOptions { sigma_mode: self.ldm.sigma_mode, resample_repeats: self.extend.resample_repeats },
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let fjoin = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let d = &self.data;
        let _ = writeln!(s, "[data]\ngrid_xy = {}\ngrid_s = {}\npixel_spacing = {}\nslice_thickness = {}", d.grid_xy, d.grid_s, d.pixel_spacing, d.slice_thickness);
        let _ = writeln!(s, "n_chest = {}\nn_abdomen = {}\nn_heldout = {}", d.n_chest, d.n_abdomen, d.n_heldout);
        let _ = writeln!(s, "chest_window = {}\nabdomen_window = {}\nseed = {}", fjoin(&d.chest_window), fjoin(&d.abdomen_window), d.seed);
        let _ = writeln!(s, "\n[preprocess]\nsigma = {}\nn_s = {}", self.preprocess.sigma, self.preprocess.n_s);
        let v = &self.vae;
        let _ = writeln!(s, "\n[vae]\nlatent_dim = {}\nchannels = {}\ngroups = {}\nkl_weight = {:e}", v.latent_dim, join(&v.channels), v.groups, v.kl_weight);
        let _ = writeln!(s, "lr = {:e}\nsteps = {}\nbatch = {}", v.lr, v.steps, v.batch);
        let l = &self.ldm;
        let sigma = match l.sigma_mode {
            SigmaMode::Posterior => "posterior",
            SigmaMode::Beta => "beta",
            SigmaMode::Zero => "zero",
        };
        let _ = writeln!(s, "\n[ldm]\ndiffusion_steps = {}\nschedule = {}\nchannels = {}\ngroups = {}", l.diffusion_steps, l.schedule, join(&l.channels), l.groups);
        let _ = writeln!(s, "time_dim = {}\nlr = {:e}\nsteps = {}\nbatch = {}\nsigma_mode = {sigma}", l.time_dim, l.lr, l.steps, l.batch);
        let e = &self.extend;
        let dir = match e.direction {
            Direction::Inferior => "inferior",
            Direction::Superior => "superior",
        };
        let _ = writeln!(
            s,
            "\n[extend]\nn_new = {}\ndirection = {dir}\nmin_context = {}\nper_window = {}\nresample_repeats = {}",
            e.n_new, e.min_context, e.per_window, e.resample_repeats
        );
        let ev = &self.eval;
        let _ = writeln!(s, "\n[eval]\nsweep = {}\ncuts = {}\nrepeats = {}\nbin_mm = {}", join(&ev.sweep), join(&ev.cuts), ev.repeats, ev.bin_mm);
        let _ = writeln!(s, "\n[io]\nout = {}", self.io.out.display());
        s
    }

    /// Canonical text without the `[io]` section, so runs that differ only
    /// in where they write compare equal.
    pub fn render_semantic(&self) -> String {
        let full = self.render();
        full.split("\n[io]").next().unwrap_or(&full).to_string()
    }

    /// FNV-1a of [`render_semantic`](Self::render_semantic), as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.render_semantic().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

const SECTIONS: [&str; 7] = ["data", "preprocess", "vae", "ldm", "extend", "eval", "io"];

const KEYS: [&str; 38] = [
    "data.grid_xy",
    "data.grid_s",
    "data.pixel_spacing",
    "data.slice_thickness",
    "data.n_chest",
    "data.n_abdomen",
    "data.n_heldout",
    "data.chest_window",
    "data.abdomen_window",
    "data.seed",
    "preprocess.sigma",
    "preprocess.n_s",
    "vae.latent_dim",
    "vae.channels",
    "vae.groups",
    "vae.kl_weight",
    "vae.lr",
    "vae.steps",
    "vae.batch",
    "ldm.diffusion_steps",
    "ldm.schedule",
    "ldm.channels",
    "ldm.groups",
    "ldm.time_dim",
    "ldm.lr",
    "ldm.steps",
    "ldm.batch",
    "ldm.sigma_mode",
    "extend.n_new",
    "extend.direction",
    "extend.min_context",
    "extend.per_window",
    "extend.resample_repeats",
    "eval.sweep",
    "eval.cuts",
    "eval.repeats",
    "eval.bin_mm",
    "io.out",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("[vae]\nlatent_dim = 64\nlatnet = 3\n").unwrap_err();
        match err {
            Error::ConfigKey { key, line, .. } => {
                assert_eq!(key, "vae.latnet");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_value_names_key() {
        let err = RunConfig::parse("[ldm]\n\ndiffusion_steps = many\n").unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, line: 3, .. } if key == "ldm.diffusion_steps"));
    }

    #[test]
    fn range_check_reports_line() {
        let err = RunConfig::parse("[preprocess]\nn_s = 12\n").unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, line: 2, .. } if key == "preprocess.n_s"));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.vae.steps += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }
}
