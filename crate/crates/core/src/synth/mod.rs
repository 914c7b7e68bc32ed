//! Synthetic confounded cell images.
//!
//! Each sample follows the causal structure S → M, S → X, M → X:
//!
//! * the confounder S is drawn first (uniform over batches, or uniform on
//!   `[0, 1]` when continuous);
//! * the informative label M is drawn from a mixture that copies S with
//!   probability ρ and is uniform otherwise;
//! * the image is rendered from M (nucleus size and shape in channel R, a
//!   halo in G, a texture in B) and then scaled by a gain that depends on S.
//!
//! Every sample has its own random substream derived from `(seed, index)`,
//! so rendering runs in parallel without affecting the output.

mod dataset;
pub mod detect;

pub use dataset::{Confounder, ConfounderKind, LabeledImageSet, DATASET_MAGIC, DATASET_VERSION};
pub use detect::{
    crop_patches, dog_detect, extract_cells, gaussian_blur, render_blob, DetectParams, NucleusDetection, Patches,
};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub n_batches: usize,
    /// ρ: probability that M copies the confounder.
    pub confound_strength: f64,
    pub batch_gain_spread: f64,
    pub noise_sigma: f64,
    pub samples: usize,
    pub seed: u64,
    pub confounder_kind: ConfounderKind,
    /// Samples per treatment group within one (M, S) cell.
    pub group_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_classes: 4,
            n_batches: 3,
            confound_strength: 0.6,
            batch_gain_spread: 0.5,
            noise_sigma: 0.03,
            samples: 2400,
            seed: 0,
            confounder_kind: ConfounderKind::Categorical,
            group_size: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.samples == 0 {
            return bad("samples must be positive");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.n_classes < 2 || self.n_batches < 2 {
            return bad("n_classes and n_batches must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return bad("confound_strength must lie in [0, 1]");
        }
        if !(self.batch_gain_spread >= 0.0 && self.batch_gain_spread < 1.0) {
            return bad("batch_gain_spread must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be non-negative");
        }
        if self.group_size == 0 {
            return bad("group_size must be positive");
        }
        Ok(())
    }

    /// Informative label implied by a confounder value when the mixture
    /// copies it.
    fn copied_label(&self, s: f64) -> usize {
        match self.confounder_kind {
            ConfounderKind::Categorical => (s as usize) % self.n_classes,
            ConfounderKind::Continuous => ((s * self.n_classes as f64) as usize).min(self.n_classes - 1),
        }
    }
}

/// Everything that determines one rendered cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellParams {
    pub m: usize,
    pub gain: f64,
    /// Nucleus centre offset from the image centre, in pixels.
    pub offset: (f64, f64),
    pub orientation: f64,
    pub texture_angle: f64,
    pub texture_phase: f64,
    pub brightness: f64,
}

impl CellParams {
    fn draw<R: Rng + ?Sized>(m: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            m,
            gain,
            offset: (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
            orientation: rng.random_range(0.0..PI),
            texture_angle: rng.random_range(0.0..PI),
            texture_phase: rng.random_range(0.0..2.0 * PI),
            brightness: rng.random_range(0.85..1.0),
        }
    }
}

/// Nucleus radius in pixels for label `m` on an image of side `size`.
pub fn nucleus_radius(m: usize, size: usize) -> f64 {
    size as f64 * (0.09 + 0.03 * m as f64)
}

/// Renders one noise-free cell into a `[3, size, size]` buffer before
/// gain and clamping.
pub fn render_cell(p: &CellParams, size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    let r = nucleus_radius(p.m, size);
    let aspect = 1.0 + 0.2 * p.m as f64;
    let (sa, sb) = (r * aspect.sqrt(), r / aspect.sqrt());
    let (co, so) = (p.orientation.cos(), p.orientation.sin());
    let freq = 0.08 + 0.05 * p.m as f64;
    let (ct, st) = (p.texture_angle.cos(), p.texture_angle.sin());
    let c = (size as f64 - 1.0) / 2.0;
    let (cy, cx) = (c + p.offset.0, c + p.offset.1);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * co + dy * so;
            let v = -dx * so + dy * co;
            let nucleus = (-0.5 * ((u / sa).powi(2) + (v / sb).powi(2))).exp();
            let d = (dx * dx + dy * dy).sqrt();
            let halo_w = 0.35 * r + 0.8;
            let halo = (-0.5 * ((d - 1.9 * r) / halo_w).powi(2)).exp();
            let envelope = (-0.5 * (d / (2.6 * r)).powi(2)).exp();
            let wave = 0.5 + 0.5 * (2.0 * PI * freq * (dx * ct + dy * st) + p.texture_phase).cos();
            let i = y * size + x;
            out[i] = 0.9 * p.brightness * nucleus;
            out[plane + i] = 0.6 * p.brightness * halo;
            out[2 * plane + i] = 0.55 * p.brightness * envelope * wave;
        }
    }
    out
}

/// Per-batch gains, stratified over `[1 − spread, 1 + spread]` so batches
/// are always distinguishable when `spread > 0`.
pub fn batch_gains(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = substream(cfg.seed, "data/gains", 0);
    let n = cfg.n_batches;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|stratum| {
            let jitter: f64 = rng.random_range(0.25..0.75);
            let u = 2.0 * (stratum as f64 + jitter) / n as f64 - 1.0;
            1.0 + cfg.batch_gain_spread * u
        })
        .collect()
}

struct Sample {
    m: usize,
    s: f64,
    pixels: Vec<f32>,
}

fn draw_sample(cfg: &SynthConfig, gains: &[f64], index: usize) -> Sample {
    let mut rng = substream(cfg.seed, "data/sample", index as u64);
    let (s, gain) = match cfg.confounder_kind {
        ConfounderKind::Categorical => {
            let s = rng.random_range(0..cfg.n_batches);
            (s as f64, gains[s])
        }
        ConfounderKind::Continuous => {
            let s: f64 = rng.random_range(0.0..1.0);
            (s, 1.0 + cfg.batch_gain_spread * (2.0 * s - 1.0))
        }
    };
    let m = if rng.random_bool(cfg.confound_strength) {
        cfg.copied_label(s)
    } else {
        rng.random_range(0..cfg.n_classes)
    };
    let params = CellParams::draw(m, gain, &mut rng);
    let clean = render_cell(&params, cfg.image_size);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("validated sigma");
    let pixels = clean
        .into_iter()
        .map(|v| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v * gain + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Sample { m, s, pixels }
}

/// Treatment groups: samples sharing a (M, S-bin) cell are chunked, in
/// index order, into blocks of `group_size`. Ids are dense and ascend with
/// (M, S-bin, block).
fn assign_groups(cfg: &SynthConfig, m: &[u32], s_bin: &[u32]) -> Vec<u32> {
    let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..m.len() {
        cells.entry((m[i], s_bin[i])).or_default().push(i);
    }
    let mut groups = vec![0u32; m.len()];
    let mut next = 0u32;
    for members in cells.values() {
        for block in members.chunks(cfg.group_size) {
            for &i in block {
                groups[i] = next;
            }
            next += 1;
        }
    }
    groups
}

pub fn generate(cfg: &SynthConfig) -> Result<LabeledImageSet> {
    cfg.validate()?;
    let gains = batch_gains(cfg);
    let samples: Vec<Sample> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| draw_sample(cfg, &gains, i))
        .collect();

    let size = cfg.image_size;
    let mut pixels = Vec::with_capacity(cfg.samples * 3 * size * size);
    for s in &samples {
        pixels.extend_from_slice(&s.pixels);
    }
    let m_labels: Vec<u32> = samples.iter().map(|s| s.m as u32).collect();
    let (s_values, s_bin): (Confounder, Vec<u32>) = match cfg.confounder_kind {
        ConfounderKind::Categorical => {
            let v: Vec<u32> = samples.iter().map(|s| s.s as u32).collect();
            (Confounder::Categorical { values: v.clone(), levels: cfg.n_batches }, v)
        }
        ConfounderKind::Continuous => {
            let v: Vec<f32> = samples.iter().map(|s| s.s as f32).collect();
            let bins = samples
                .iter()
                .map(|s| ((s.s * cfg.n_batches as f64) as u32).min(cfg.n_batches as u32 - 1))
                .collect();
            (Confounder::Continuous(v), bins)
        }
    };
    let group_ids = assign_groups(cfg, &m_labels, &s_bin);
    Ok(LabeledImageSet {
        images: Tensor::new(&[cfg.samples, 3, size, size], pixels)?,
        m_labels,
        s_values,
        group_ids,
        n_classes: cfg.n_classes,
        generator: Some(serde_json::to_value(cfg)?),
    })
}
