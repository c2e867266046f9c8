//! Real-valued 2-D fields and the matrix-free physics operators: PSF
//! convolution `H`, block-average downsampling `D`, pointwise emissivity
//! `Phi`, their adjoints/Jacobians, and compositions into the restoration
//! (`g = H Phi f`) and super-resolution (`g = H D Phi f`) forward models.
//!
//! Convolution uses circular (periodic) boundaries, so the adjoint is exactly
//! convolution with the 180-degree-flipped kernel and dense-matrix
//! equivalence holds to rounding. Kernels are small; direct summation is used
//! rather than a spectral transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real-valued 2-D grid stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("field dimensions must be positive".into()));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "field needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("field contains non-finite values".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn constant(width: usize, height: usize, v: f64) -> Self {
        Self { width, height, values: vec![v; width * height] }
    }

    /// Canonical basis field: 1 at flat index `i`, 0 elsewhere.
    pub fn basis(width: usize, height: usize, i: usize) -> Self {
        let mut f = Self::zeros(width, height);
        f.values[i] = 1.0;
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Field) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.zip(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Field) -> Field {
        self.zip(other, |a, b| a * b)
    }

    pub fn zip(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.shape(), other.shape());
        Field {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// axpy-style in-place update: `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field) {
        debug_assert_eq!(self.shape(), other.shape());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }
}

/// A normalized, odd-sized square PSF kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsfKernel {
    size: usize,
    weights: Vec<f64>,
    sigma: Option<f64>,
}

impl PsfKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Shape(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::Shape(format!(
                "kernel needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "kernel weights must sum to 1 within 1e-12, got {sum}"
            )));
        }
        Ok(Self { size, weights, sigma: None })
    }

    /// Identity (delta) kernel of size 1.
    pub fn delta() -> Self {
        Self { size: 1, weights: vec![1.0], sigma: None }
    }

    /// Normalized isotropic Gaussian with the given width.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Shape(format!("kernel size must be odd, got {size}")));
        }
        if sigma <= 0.0 {
            return Err(Error::Contract("gaussian sigma must be positive".into()));
        }
        let c = (size / 2) as isize;
        let mut weights = Vec::with_capacity(size * size);
        for y in 0..size as isize {
            for x in 0..size as isize {
                let dx = (x - c) as f64;
                let dy = (y - c) as f64;
                weights.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self { size, weights, sigma: Some(sigma) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    /// Kernel rotated 180 degrees; convolving with it is the adjoint of
    /// convolving with `self` under periodic boundaries.
    pub fn flipped(&self) -> Self {
        let mut w = self.weights.clone();
        w.reverse();
        Self { size: self.size, weights: w, sigma: self.sigma }
    }
}

/// Pointwise emissivity map `phi` and its derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissivityMap {
    Identity,
    Scale { a: f64 },
    /// `a * x / sqrt(1 + x^2/c^2)`: monotone, saturating at `a*c`.
    SmoothSaturate { a: f64, c: f64 },
}

impl EmissivityMap {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EmissivityMap::Identity => Ok(()),
            EmissivityMap::Scale { a } => {
                if a > 0.0 && a <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("emissivity scale a={a} must be in (0,1]")))
                }
            }
            EmissivityMap::SmoothSaturate { a, c } => {
                if a > 0.0 && c > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "smooth-saturate parameters a={a}, c={c} must be positive"
                    )))
                }
            }
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            EmissivityMap::Identity => x,
            EmissivityMap::Scale { a } => a * x,
            EmissivityMap::SmoothSaturate { a, c } => a * x / (1.0 + x * x / (c * c)).sqrt(),
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            EmissivityMap::Identity => 1.0,
            EmissivityMap::Scale { a } => a,
            EmissivityMap::SmoothSaturate { a, c } => {
                a * (1.0 + x * x / (c * c)).powf(-1.5)
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, EmissivityMap::Identity)
    }
}

/// One stage of a composed forward operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Conv(PsfKernel),
    Down { factor: usize },
    Emiss(EmissivityMap),
}

/// A composable matrix-free forward operator: an ordered list of stages with
/// validated shape propagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardOperator {
    stages: Vec<Stage>,
    input_shape: (usize, usize),
    output_shape: (usize, usize),
}

impl ForwardOperator {
    pub fn new(input_shape: (usize, usize), stages: Vec<Stage>) -> Result<Self> {
        let (mut w, mut h) = input_shape;
        if w == 0 || h == 0 {
            return Err(Error::Shape("operator input shape must be positive".into()));
        }
        for stage in &stages {
            match stage {
                Stage::Conv(k) => {
                    if k.size() > w.min(h) {
                        return Err(Error::Shape(format!(
                            "kernel size {} exceeds field size {}x{}",
                            k.size(),
                            w,
                            h
                        )));
                    }
                }
                Stage::Down { factor } => {
                    if *factor == 0 {
                        return Err(Error::Shape("downsampling factor must be positive".into()));
                    }
                    if w % factor != 0 || h % factor != 0 {
                        return Err(Error::Shape(format!(
                            "shape {w}x{h} not divisible by downsampling factor {factor}"
                        )));
                    }
                    w /= factor;
                    h /= factor;
                }
                Stage::Emiss(m) => m.validate()?,
            }
        }
        Ok(Self { stages, input_shape, output_shape: (w, h) })
    }

    /// Restoration model `g = H Phi f` (stages applied Phi first, then Conv).
    pub fn restoration(shape: (usize, usize), psf: PsfKernel, emiss: EmissivityMap) -> Result<Self> {
        Self::new(shape, vec![Stage::Emiss(emiss), Stage::Conv(psf)])
    }

    /// Super-resolution model `g = H D Phi f` on a high-resolution grid.
    pub fn super_resolution(
        hr_shape: (usize, usize),
        psf: PsfKernel,
        emiss: EmissivityMap,
        factor: usize,
    ) -> Result<Self> {
        Self::new(
            hr_shape,
            vec![Stage::Emiss(emiss), Stage::Down { factor }, Stage::Conv(psf)],
        )
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }

    /// True when every emissivity stage is the identity, i.e. the operator is
    /// linear and has a well-defined adjoint.
    pub fn is_linear(&self) -> bool {
        self.stages.iter().all(|s| match s {
            Stage::Emiss(m) => m.is_identity(),
            _ => true,
        })
    }
}

/// Circular (periodic) 2-D convolution of `f` with `h`.
pub fn conv_apply(f: &Field, h: &PsfKernel) -> Result<Field> {
    let k = h.size();
    if k > f.width().min(f.height()) {
        return Err(Error::Shape(format!(
            "kernel size {} exceeds field size {}x{}",
            k,
            f.width(),
            f.height()
        )));
    }
    let (w, ht) = f.shape();
    let c = (k / 2) as isize;
    let mut out = Field::zeros(w, ht);
    for y in 0..ht as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for a in 0..k as isize {
                for b in 0..k as isize {
                    let sy = (y - (a - c)).rem_euclid(ht as isize) as usize;
                    let sx = (x - (b - c)).rem_euclid(w as isize) as usize;
                    acc += h.weights()[(a * k as isize + b) as usize] * f.at(sx, sy);
                }
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    Ok(out)
}

/// Adjoint of `conv_apply`: circular convolution with the flipped kernel.
pub fn conv_adjoint(g: &Field, h: &PsfKernel) -> Result<Field> {
    conv_apply(g, &h.flipped())
}

/// Block-average downsampling: each output pixel is the mean of its
/// `s x s` block.
pub fn down_apply(f: &Field, s: usize) -> Result<Field> {
    if s == 0 {
        return Err(Error::Shape("downsampling factor must be positive".into()));
    }
    let (w, h) = f.shape();
    if w % s != 0 || h % s != 0 {
        return Err(Error::Shape(format!(
            "shape {w}x{h} not divisible by downsampling factor {s}"
        )));
    }
    let (ow, oh) = (w / s, h / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = Field::zeros(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for dy in 0..s {
                for dx in 0..s {
                    acc += f.at(ox * s + dx, oy * s + dy);
                }
            }
            out.set(ox, oy, acc * inv);
        }
    }
    Ok(out)
}

/// Adjoint of `down_apply`: replicates each pixel into an `s x s` block
/// scaled by `1/s^2`.
pub fn down_adjoint(g: &Field, s: usize) -> Result<Field> {
    if s == 0 {
        return Err(Error::Shape("downsampling factor must be positive".into()));
    }
    let (w, h) = g.shape();
    let inv = 1.0 / (s * s) as f64;
    let mut out = Field::zeros(w * s, h * s);
    for y in 0..h {
        for x in 0..w {
            let v = g.at(x, y) * inv;
            for dy in 0..s {
                for dx in 0..s {
                    out.set(x * s + dx, y * s + dy, v);
                }
            }
        }
    }
    Ok(out)
}

/// Pointwise emissivity application.
pub fn emiss_apply(f: &Field, phi: &EmissivityMap) -> Field {
    f.map(|v| phi.eval(v))
}

/// Pointwise derivative `phi'(f)`, the diagonal of the emissivity Jacobian.
pub fn emiss_jacobian_diag(f: &Field, phi: &EmissivityMap) -> Field {
    f.map(|v| phi.deriv(v))
}

/// Apply a composed operator, stages in declared order.
pub fn op_apply(a: &ForwardOperator, f: &Field) -> Result<Field> {
    if f.shape() != a.input_shape() {
        return Err(Error::Shape(format!(
            "field shape {:?} does not match operator input {:?}",
            f.shape(),
            a.input_shape()
        )));
    }
    let mut cur = f.clone();
    for stage in a.stages() {
        cur = match stage {
            Stage::Conv(k) => conv_apply(&cur, k)?,
            Stage::Down { factor } => down_apply(&cur, *factor)?,
            Stage::Emiss(m) => emiss_apply(&cur, m),
        };
    }
    Ok(cur)
}

/// Adjoint of a linear composed operator: stage adjoints in reverse order.
/// Errors if any emissivity stage is nonlinear; linearize such operators via
/// [`emiss_jacobian_diag`] (see [`op_vjp`]).
pub fn op_adjoint_linear(a: &ForwardOperator, g: &Field) -> Result<Field> {
    if !a.is_linear() {
        return Err(Error::Contract(
            "adjoint requested for an operator with nonlinear emissivity; \
             linearize via emiss_jacobian_diag"
                .into(),
        ));
    }
    if g.shape() != a.output_shape() {
        return Err(Error::Shape(format!(
            "field shape {:?} does not match operator output {:?}",
            g.shape(),
            a.output_shape()
        )));
    }
    let mut cur = g.clone();
    for stage in a.stages().iter().rev() {
        cur = match stage {
            Stage::Conv(k) => conv_adjoint(&cur, k)?,
            Stage::Down { factor } => down_adjoint(&cur, *factor)?,
            Stage::Emiss(_) => cur, // identity only, checked above
        };
    }
    Ok(cur)
}

/// Vector-Jacobian product of `op_apply` at the point `f`: pulls a cotangent
/// in data space back to image space, linearizing emissivity stages at their
/// actual stage inputs. For linear operators this equals `op_adjoint_linear`.
pub fn op_vjp(a: &ForwardOperator, f: &Field, cotangent: &Field) -> Result<Field> {
    if f.shape() != a.input_shape() {
        return Err(Error::Shape("vjp point does not match operator input".into()));
    }
    if cotangent.shape() != a.output_shape() {
        return Err(Error::Shape("vjp cotangent does not match operator output".into()));
    }
    // Forward sweep recording each stage's input.
    let mut stage_inputs = Vec::with_capacity(a.stages().len());
    let mut cur = f.clone();
    for stage in a.stages() {
        stage_inputs.push(cur.clone());
        cur = match stage {
            Stage::Conv(k) => conv_apply(&cur, k)?,
            Stage::Down { factor } => down_apply(&cur, *factor)?,
            Stage::Emiss(m) => emiss_apply(&cur, m),
        };
    }
    // Reverse sweep.
    let mut cot = cotangent.clone();
    for (stage, input) in a.stages().iter().zip(stage_inputs.iter()).rev() {
        cot = match stage {
            Stage::Conv(k) => conv_adjoint(&cot, k)?,
            Stage::Down { factor } => down_adjoint(&cot, *factor)?,
            Stage::Emiss(m) => cot.hadamard(&emiss_jacobian_diag(input, m)),
        };
    }
    Ok(cot)
}
