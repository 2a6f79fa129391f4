//! Procedural face-proxy images.
//!
//! Each image is a flat "skin" field whose brightness follows a complexion
//! parameter, with two eyes drawn either open (bright sclera ellipse with a dark
//! pupil) or closed (a dark horizontal bar). Eye contrast shrinks with the
//! skin brightness, and faces darker than [`SHIFT_BELOW`] carry their eyes
//! [`EYE_DROP`] of the height lower, so a model fitted mostly on light faces
//! looks in the wrong place for dark ones.
//!
//! The training split is drawn with a skewed complexion mix; validation and
//! pool splits are uniform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageRecord, Label};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const BASE_INTENSITY: f64 = 0.15;
pub const COMPLEXION_SPAN: f64 = 0.7;
pub const SCLERA_INTENSITY: f64 = 0.95;
pub const DARK_INTENSITY: f64 = 0.05;
pub const LIGHT_BAND: (f64, f64) = (0.7, 1.0);
pub const DARK_BAND: (f64, f64) = (0.0, 0.3);
/// Faces with complexion below this carry their eyes lower.
pub const SHIFT_BELOW: f64 = 0.4;
/// Eye drop as a fraction of image height.
pub const EYE_DROP: f64 = 0.2;
/// How much eye contrast shrinks with the skin: intensities inside the eyes
/// are scaled by `1 - CONTRAST_GAIN * (1 - base / 0.85)`.
pub const CONTRAST_GAIN: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeState {
    Open,
    Closed,
}

impl EyeState {
    pub fn label(self) -> Label {
        match self {
            EyeState::Open => Label::Awake,
            EyeState::Closed => Label::Drowsy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceParams {
    /// 0 is the darkest base intensity, 1 the lightest.
    pub complexion: f64,
    pub eye_state: EyeState,
    pub jitter_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_pool: usize,
    /// Probability that a training complexion comes from the light band.
    pub train_complexion_mix: f64,
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 1000,
            n_val: 400,
            n_pool: 2000,
            train_complexion_mix: 0.95,
            noise_sigma: 0.1,
            master_seed: 0,
            height: 64,
            width: 64,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_pool == 0 {
            return Err(Error::InvalidParameter("corpus counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train_complexion_mix) {
            return Err(Error::InvalidParameter(format!(
                "train_complexion_mix {} outside [0, 1]",
                self.train_complexion_mix
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidParameter(format!(
                "image size {}x{} below 16x16",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Train, validation and augmentation-pool splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Dataset,
    pub pool: Dataset,
}

/// Renders one face. Deterministic in `(params, h, w, noise_sigma)`.
pub fn render_face(params: &FaceParams, h: usize, w: usize, noise_sigma: f64) -> Result<Vec<f64>> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidParameter(format!(
            "image size {h}x{w} below 16x16"
        )));
    }
    let (hf, wf) = (h as f64, w as f64);
    let base = BASE_INTENSITY + COMPLEXION_SPAN * params.complexion;
    let scale = 1.0 - CONTRAST_GAIN * (1.0 - base / 0.85);
    let mut px = vec![base; h * w];

    let drop = if params.complexion < SHIFT_BELOW {
        EYE_DROP
    } else {
        0.0
    };
    let eye_y = (0.35 + drop) * hf;
    let eyes_x = [0.3 * wf, 0.7 * wf];
    let (sclera_ry, sclera_rx) = (hf / 10.0, wf / 8.0);
    let pupil_r = hf / 20.0;
    let (bar_half_h, bar_half_w) = (hf / 48.0, wf / 12.0);

    for r in 0..h {
        let y = r as f64 + 0.5;
        for c in 0..w {
            let x = c as f64 + 0.5;
            for &ex in &eyes_x {
                let (dy, dx) = (y - eye_y, x - ex);
                match params.eye_state {
                    EyeState::Open => {
                        if dy * dy + dx * dx <= pupil_r * pupil_r {
                            px[r * w + c] = DARK_INTENSITY * scale;
                        } else if (dy / sclera_ry).powi(2) + (dx / sclera_rx).powi(2) <= 1.0 {
                            px[r * w + c] = SCLERA_INTENSITY * scale;
                        }
                    }
                    EyeState::Closed => {
                        if dy.abs() <= bar_half_h && dx.abs() <= bar_half_w {
                            px[r * w + c] = DARK_INTENSITY * scale;
                        }
                    }
                }
            }
        }
    }

    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidParameter(format!("noise_sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.jitter_seed);
        for v in px.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(px)
}

/// Evaluation-only group tag for a complexion value.
pub fn group_for(complexion: f64) -> &'static str {
    if complexion < 0.5 {
        "dark"
    } else {
        "light"
    }
}

#[derive(Clone, Copy)]
enum ComplexionDraw {
    Uniform,
    Skewed(f64),
}

fn generate_split(
    spec: &CorpusSpec,
    split: &str,
    n: usize,
    draw: ComplexionDraw,
) -> Result<Dataset> {
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(spec.master_seed, &format!("{split}/{i}"));
        let complexion = match draw {
            ComplexionDraw::Uniform => rng.random::<f64>(),
            ComplexionDraw::Skewed(mix) => {
                let (lo, hi) = if rng.random::<f64>() < mix {
                    LIGHT_BAND
                } else {
                    DARK_BAND
                };
                lo + (hi - lo) * rng.random::<f64>()
            }
        };
        let eye_state = if i % 2 == 0 {
            EyeState::Open
        } else {
            EyeState::Closed
        };
        let params = FaceParams {
            complexion,
            eye_state,
            jitter_seed: rng.next_u64(),
        };
        records.push(ImageRecord {
            id: format!("{split}-{i:05}"),
            pixels: render_face(&params, spec.height, spec.width, spec.noise_sigma)?,
            label: eye_state.label(),
            group: Some(group_for(complexion).to_owned()),
        });
    }
    Dataset::new(spec.height, spec.width, records)
}

/// Generates the three splits. Every record is seeded independently from
/// `master_seed` and its split/index, so output does not depend on order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    Ok(Corpus {
        train: generate_split(
            spec,
            "train",
            spec.n_train,
            ComplexionDraw::Skewed(spec.train_complexion_mix),
        )?,
        val: generate_split(spec, "val", spec.n_val, ComplexionDraw::Uniform)?,
        pool: generate_split(spec, "pool", spec.n_pool, ComplexionDraw::Uniform)?,
    })
}

/// A uniform-complexion split under its own name, e.g. a held-out test set.
pub fn generate_uniform_split(spec: &CorpusSpec, split: &str, n: usize) -> Result<Dataset> {
    spec.validate()?;
    generate_split(spec, split, n, ComplexionDraw::Uniform)
}
