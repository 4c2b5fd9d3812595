//! Geometric and radiometric image transforms used to build the
//! transform-augmented training sets.
//!
//! Geometric ops are exact index permutations. Radiometric ops clip their
//! output back into `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::Rng;

/// A `C×H×W` image with values in `[0, 1]`, stored row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || values.len() != channels * height * width {
            return Err(Error::ValueCount {
                shape: vec![channels, height, width],
                expected: channels * height * width,
                actual: values.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// Single-channel image from rows; handy for small literal examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::new(1, rows.len(), width, rows.concat())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.values[(c * self.height + r) * self.width + col]
    }

    fn clip(mut self) -> Self {
        self.values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Builds an `out_h×out_w` image where each output position reads the
    /// source position returned by `src`.
    fn remap(&self, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.channels {
            for r in 0..out_h {
                for col in 0..out_w {
                    let (sr, sc) = src(r, col);
                    values.push(self.get(c, sr, sc));
                }
            }
        }
        Self {
            channels: self.channels,
            height: out_h,
            width: out_w,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
    /// Main-diagonal transpose.
    Diagonal45,
    /// Anti-diagonal transpose.
    Diagonal135,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Enhancement {
    Laplacian { lambda: f64 },
    Gamma(f64),
    HistEq,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Gaussian { sigma: f64 },
    Poisson { scale: f64 },
    SaltPepper { density: f64 },
}

/// One member of the transform vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformOp {
    Flip(FlipAxis),
    Rotate(u8),
    Enhance(Enhancement),
    Noise(Noise),
}

impl TransformOp {
    pub fn validate(&self) -> Result<()> {
        let bad = match *self {
            TransformOp::Rotate(q) => !(1..=3).contains(&q),
            TransformOp::Enhance(Enhancement::Gamma(g)) => !(g > 0.0 && g.is_finite()),
            TransformOp::Enhance(Enhancement::Laplacian { lambda }) => !lambda.is_finite(),
            TransformOp::Noise(Noise::Gaussian { sigma }) => !(sigma >= 0.0 && sigma.is_finite()),
            TransformOp::Noise(Noise::Poisson { scale }) => !(scale > 0.0 && scale.is_finite()),
            TransformOp::Noise(Noise::SaltPepper { density }) => !(0.0..=1.0).contains(&density),
            _ => false,
        };
        if bad {
            return Err(Error::Config(alloc::format!("invalid transform parameters: {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        self.validate()?;
        match *self {
            TransformOp::Flip(axis) => flip(img, axis),
            TransformOp::Rotate(q) => Ok(rotate(img, q)),
            TransformOp::Enhance(kind) => enhance(img, kind),
            TransformOp::Noise(kind) => add_noise(img, kind, rng),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformOp::Flip(FlipAxis::Horizontal) => "flip_h",
            TransformOp::Flip(FlipAxis::Vertical) => "flip_v",
            TransformOp::Flip(FlipAxis::Diagonal45) => "flip_d45",
            TransformOp::Flip(FlipAxis::Diagonal135) => "flip_d135",
            TransformOp::Rotate(1) => "rot90",
            TransformOp::Rotate(2) => "rot180",
            TransformOp::Rotate(_) => "rot270",
            TransformOp::Enhance(Enhancement::Laplacian { .. }) => "laplacian",
            TransformOp::Enhance(Enhancement::Gamma(_)) => "gamma",
            TransformOp::Enhance(Enhancement::HistEq) => "histeq",
            TransformOp::Noise(Noise::Gaussian { .. }) => "gauss_noise",
            TransformOp::Noise(Noise::Poisson { .. }) => "poisson_noise",
            TransformOp::Noise(Noise::SaltPepper { .. }) => "salt_pepper",
        }
    }
}

/// Named groups of transforms, one per family compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpSet {
    Flip,
    Rotation,
    FlipRotation,
    Enhancement,
    Noise,
}

impl OpSet {
    pub fn ops(self) -> Vec<TransformOp> {
        let flips = [
            FlipAxis::Horizontal,
            FlipAxis::Vertical,
            FlipAxis::Diagonal45,
            FlipAxis::Diagonal135,
        ]
        .map(TransformOp::Flip);
        let rotations = [1, 2, 3].map(TransformOp::Rotate);
        match self {
            OpSet::Flip => flips.to_vec(),
            OpSet::Rotation => rotations.to_vec(),
            OpSet::FlipRotation => flips.iter().chain(&rotations).copied().collect(),
            OpSet::Enhancement => vec![
                TransformOp::Enhance(Enhancement::Laplacian { lambda: 1.0 }),
                TransformOp::Enhance(Enhancement::Gamma(0.5)),
                TransformOp::Enhance(Enhancement::Gamma(2.0)),
                TransformOp::Enhance(Enhancement::HistEq),
            ],
            OpSet::Noise => vec![
                TransformOp::Noise(Noise::Gaussian { sigma: 0.05 }),
                TransformOp::Noise(Noise::Poisson { scale: 255.0 }),
                TransformOp::Noise(Noise::SaltPepper { density: 0.02 }),
            ],
        }
    }

    /// How many derived images each source image yields.
    pub fn expansion(self) -> usize {
        self.ops().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpSet::Flip => "flip",
            OpSet::Rotation => "rotation",
            OpSet::FlipRotation => "flip-rotation",
            OpSet::Enhancement => "enhancement",
            OpSet::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            OpSet::Flip,
            OpSet::Rotation,
            OpSet::FlipRotation,
            OpSet::Enhancement,
            OpSet::Noise,
        ]
        .into_iter()
        .find(|o| o.name() == s)
    }
}

pub fn flip(img: &Image, axis: FlipAxis) -> Result<Image> {
    let (h, w) = (img.height, img.width);
    if matches!(axis, FlipAxis::Diagonal45 | FlipAxis::Diagonal135) && h != w {
        return Err(Error::NotSquare {
            op: "diagonal flip",
            height: h,
            width: w,
        });
    }
    Ok(match axis {
        FlipAxis::Horizontal => img.remap(h, w, |r, c| (r, w - 1 - c)),
        FlipAxis::Vertical => img.remap(h, w, |r, c| (h - 1 - r, c)),
        FlipAxis::Diagonal45 => img.remap(h, w, |r, c| (c, r)),
        FlipAxis::Diagonal135 => img.remap(h, w, |r, c| (w - 1 - c, h - 1 - r)),
    })
}

/// Clockwise rotation by `quarter_turns · 90°`; one turn sends `(r, c)` to
/// `(c, H−1−r)`. Any turn count is taken modulo 4.
pub fn rotate(img: &Image, quarter_turns: u8) -> Image {
    let (h, w) = (img.height, img.width);
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => img.remap(w, h, |r, c| (h - 1 - c, r)),
        2 => img.remap(h, w, |r, c| (h - 1 - r, w - 1 - c)),
        _ => img.remap(w, h, |r, c| (c, w - 1 - r)),
    }
}

pub fn enhance(img: &Image, kind: Enhancement) -> Result<Image> {
    match kind {
        Enhancement::Gamma(g) => {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(alloc::format!("gamma must be positive, got {g}")));
            }
            if g == 1.0 {
                return Ok(img.clone());
            }
            let mut out = img.clone();
            out.values.iter_mut().for_each(|v| *v = libm::pow(*v, g));
            Ok(out.clip())
        }
        Enhancement::Laplacian { lambda } => Ok(laplacian_sharpen(img, lambda)),
        Enhancement::HistEq => Ok(histogram_equalize(img)),
    }
}

/// `v + λ·(4v − Σ 4-neighbours)` with edge replication, then clipped.
fn laplacian_sharpen(img: &Image, lambda: f64) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for c in 0..img.channels {
        for r in 0..h {
            for col in 0..w {
                let v = img.get(c, r, col);
                let up = img.get(c, r.saturating_sub(1), col);
                let down = img.get(c, (r + 1).min(h - 1), col);
                let left = img.get(c, r, col.saturating_sub(1));
                let right = img.get(c, r, (col + 1).min(w - 1));
                let response = 4.0 * v - (up + down + left + right);
                out.values[(c * h + r) * w + col] = v + lambda * response;
            }
        }
    }
    out.clip()
}

pub const HISTEQ_BINS: usize = 256;

fn bin_of(v: f64) -> usize {
    (libm::floor(v.clamp(0.0, 1.0) * HISTEQ_BINS as f64) as usize).min(HISTEQ_BINS - 1)
}

/// Per-channel `v → (cdf(v) − cdf_min)/(N − cdf_min)` over 256 bins.
/// Constant channels pass through unchanged.
fn histogram_equalize(img: &Image) -> Image {
    let plane = img.height * img.width;
    let mut out = img.clone();
    for c in 0..img.channels {
        let chan = &img.values[c * plane..(c + 1) * plane];
        let mut hist = [0usize; HISTEQ_BINS];
        chan.iter().for_each(|&v| hist[bin_of(v)] += 1);
        let mut cdf = [0usize; HISTEQ_BINS];
        let mut running = 0;
        for (b, count) in hist.iter().enumerate() {
            running += count;
            cdf[b] = running;
        }
        let cdf_min = cdf[bin_of(chan.iter().copied().fold(f64::INFINITY, f64::min))];
        if plane == cdf_min {
            continue;
        }
        let denom = (plane - cdf_min) as f64;
        for (o, &v) in out.values[c * plane..(c + 1) * plane].iter_mut().zip(chan) {
            *o = (cdf[bin_of(v)] - cdf_min) as f64 / denom;
        }
    }
    out
}

pub fn add_noise(img: &Image, kind: Noise, rng: &mut Rng) -> Result<Image> {
    TransformOp::Noise(kind).validate()?;
    let mut out = img.clone();
    match kind {
        Noise::Gaussian { sigma } => {
            if sigma == 0.0 {
                return Ok(out);
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(alloc::format!("{e}")))?;
            out.values.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        Noise::Poisson { scale } => {
            for v in out.values.iter_mut() {
                let rate = *v * scale;
                *v = if rate > 0.0 {
                    let draw: f64 = Poisson::new(rate)
                        .map_err(|e| Error::Config(alloc::format!("{e}")))?
                        .sample(rng);
                    draw / scale
                } else {
                    0.0
                };
            }
        }
        Noise::SaltPepper { density } => {
            if density == 0.0 {
                return Ok(out);
            }
            let plane = img.height * img.width;
            for i in 0..plane {
                if rng.random::<f64>() < density {
                    let value = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    for c in 0..img.channels {
                        out.values[c * plane + i] = value;
                    }
                }
            }
        }
    }
    Ok(out.clip())
}

/// The full information-preserving geometric vocabulary: four flips then
/// three rotations, in that order.
pub fn expand_geometric(img: &Image) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(7);
    for axis in [
        FlipAxis::Horizontal,
        FlipAxis::Vertical,
        FlipAxis::Diagonal45,
        FlipAxis::Diagonal135,
    ] {
        out.push(flip(img, axis)?);
    }
    for q in 1..=3 {
        out.push(rotate(img, q));
    }
    Ok(out)
}
