//! Physics-based synthetic dataset generation.
//!
//! True temperature fields are structured blob scenes (background level plus
//! isotropic Gaussian hot spots), observations are the forward operator plus
//! white Gaussian noise, and optional noisy references model labeled data.
//! Everything is reproducible bit-exactly from a 64-bit seed via disjoint
//! per-(purpose, split, index) RNG sub-streams.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{op_apply, Field, ForwardOperator};
use crate::rng::{from_seed, substream, Purpose};

/// Scene description for blob-structured true fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range for the number of Gaussian blobs per scene.
    pub n_blobs: (usize, usize),
    pub blob_amplitude: (f64, f64),
    /// Blob width range in pixels.
    pub blob_sigma: (f64, f64),
    /// Constant background (prior mean) level.
    pub background: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.width == 0 || self.height == 0 {
            problems.push("scene dimensions must be positive".to_string());
        }
        if self.n_blobs.0 > self.n_blobs.1 {
            problems.push("n_blobs range must satisfy min <= max".to_string());
        }
        if self.blob_amplitude.0 > self.blob_amplitude.1 || self.blob_amplitude.0 < 0.0 {
            problems.push("blob_amplitude range must be non-negative with min <= max".to_string());
        }
        if self.blob_sigma.0 > self.blob_sigma.1 || self.blob_sigma.0 <= 0.0 {
            problems.push("blob_sigma range must be positive with min <= max".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            n_blobs: (1, 4),
            blob_amplitude: (0.5, 1.0),
            blob_sigma: (1.5, 3.5),
            background: 0.1,
        }
    }
}

/// A generated dataset split: observations with optional references.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// (g_T, optional f_T) pairs; supervised datasets carry f_T everywhere.
    pub pairs: Vec<(Field, Option<Field>)>,
    /// Ground-truth fields the pairs were generated from. Kept for
    /// evaluation; training in unsupervised mode never reads them.
    pub truths: Vec<Field>,
    pub v_eps: f64,
    pub v_f: Option<f64>,
    pub operator: ForwardOperator,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_supervised(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|(_, f)| f.is_some())
    }

    /// The same dataset with all references removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            pairs: self.pairs.iter().map(|(g, _)| (g.clone(), None)).collect(),
            truths: self.truths.clone(),
            v_eps: self.v_eps,
            v_f: None,
            operator: self.operator.clone(),
            seed: self.seed,
        }
    }
}

fn sample_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Field {
    let (w, h) = (spec.width, spec.height);
    let n_blobs = if spec.n_blobs.0 == spec.n_blobs.1 {
        spec.n_blobs.0
    } else {
        rng.gen_range(spec.n_blobs.0..=spec.n_blobs.1)
    };
    let mut values = vec![spec.background; w * h];
    for _ in 0..n_blobs {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let amp = sample_range(rng, spec.blob_amplitude);
        let sigma = sample_range(rng, spec.blob_sigma);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                values[y * w + x] += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    Field::new(w, h, values).expect("scene values are finite by construction")
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn add_noise(f: &Field, variance: f64, rng: &mut ChaCha8Rng) -> Field {
    if variance == 0.0 {
        return f.clone();
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance checked non-negative");
    let mut out = f.clone();
    for v in out.values_mut() {
        *v += normal.sample(rng);
    }
    out
}

/// A structured blob scene: background plus random Gaussian hot spots,
/// clamped at zero. Deterministic for a fixed seed.
pub fn sample_true_field(spec: &SceneSpec, rng_seed: u64) -> Result<Field> {
    spec.validate()?;
    Ok(sample_scene(spec, &mut from_seed(rng_seed)))
}

/// `op_apply(A, f)` plus white Gaussian noise of variance `v_eps`.
pub fn gen_observation(f: &Field, a: &ForwardOperator, v_eps: f64, rng_seed: u64) -> Result<Field> {
    if v_eps < 0.0 {
        return Err(Error::Contract("v_eps must be non-negative".into()));
    }
    let clean = op_apply(a, f)?;
    Ok(add_noise(&clean, v_eps, &mut from_seed(rng_seed)))
}

/// Noisy ground-truth reference: `f` plus white Gaussian noise of variance
/// `v_f`.
pub fn gen_reference(f: &Field, v_f: f64, rng_seed: u64) -> Result<Field> {
    if v_f < 0.0 {
        return Err(Error::Contract("v_f must be non-negative".into()));
    }
    Ok(add_noise(f, v_f, &mut from_seed(rng_seed)))
}

/// Generate disjoint train/val/test splits. Supervised iff `v_f` is present.
/// Each sample draws from sub-streams keyed by (seed, purpose, split, index),
/// so split contents are independent of the other splits' sizes.
pub fn make_dataset(
    spec: &SceneSpec,
    a: &ForwardOperator,
    counts: (usize, usize, usize),
    v_eps: f64,
    v_f: Option<f64>,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if (spec.width, spec.height) != a.input_shape() {
        return Err(Error::Shape(
            "scene shape does not match operator input shape".into(),
        ));
    }
    if v_eps < 0.0 {
        return Err(Error::Contract("v_eps must be non-negative".into()));
    }
    if let Some(v) = v_f {
        if v < 0.0 {
            return Err(Error::Contract("v_f must be non-negative".into()));
        }
    }
    let make_split = |split: u64, n: usize| -> Result<Dataset> {
        let mut pairs = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for i in 0..n {
            let f = sample_scene(spec, &mut substream(seed, Purpose::Scene, split, i as u64));
            let clean = op_apply(a, &f)?;
            let g = add_noise(
                &clean,
                v_eps,
                &mut substream(seed, Purpose::ObsNoise, split, i as u64),
            );
            let f_t = v_f.map(|v| {
                add_noise(&f, v, &mut substream(seed, Purpose::RefNoise, split, i as u64))
            });
            pairs.push((g, f_t));
            truths.push(f);
        }
        Ok(Dataset {
            pairs,
            truths,
            v_eps,
            v_f,
            operator: a.clone(),
            seed,
        })
    };
    Ok((
        make_split(0, counts.0)?,
        make_split(1, counts.1)?,
        make_split(2, counts.2)?,
    ))
}
