//! Small strided convolutional image encoder.
//!
//! Images are `(H·W)×C` tensors: one row per pixel in row-major pixel order,
//! one column per channel.

use rand::Rng;

use crate::diffcore::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::layers::{GroupNormLayer, Linear, GROUP_NORM_EPS};
use super::params::{Bound, ParamStore};

/// How the last convolution stage is reduced to a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Average over pixels.
    Mean,
    /// Keep every pixel's features (`H'·W'·C` values).
    Flatten,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "flatten" => Ok(Pooling::Flatten),
            _ => Err(Error::Config(format!("unknown pooling '{s}' (expected mean or flatten)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Square input resolution.
    pub resolution: usize,
    pub in_channels: usize,
    /// Output channels of the stride-2 3×3 convolution stages.
    pub widths: Vec<usize>,
    /// Channels per normalization group in every stage.
    pub group_size: usize,
    pub pooling: Pooling,
    pub features: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.in_channels == 0 || self.widths.is_empty() {
            return Err(Error::Config("encoder needs input channels, stages and a feature length".into()));
        }
        let stride = 1usize << self.widths.len();
        if self.resolution == 0 || self.resolution % stride != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by total stride {stride}",
                self.resolution
            )));
        }
        for &w in &self.widths {
            if self.group_size == 0 || w % self.group_size != 0 {
                return Err(Error::Config(format!("stage width {w} not divisible by group size {}", self.group_size)));
            }
        }
        Ok(())
    }

    pub fn output_resolution(&self) -> usize {
        self.resolution >> self.widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    conv: Linear,
    norm: GroupNormLayer,
    in_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<ConvStage>,
    head: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut channels = config.in_channels;
        let mut size = config.resolution;
        for (i, &w) in config.widths.iter().enumerate() {
            let conv = Linear::new(store, &format!("{name}.conv{i}"), 9 * channels, w, 2.0, rng);
            let norm = GroupNormLayer::new(store, &format!("{name}.norm{i}"), w, w / config.group_size);
            stages.push(ConvStage { conv, norm, in_size: size });
            channels = w;
            size /= 2;
        }
        let pooled = match config.pooling {
            Pooling::Mean => channels,
            Pooling::Flatten => channels * size * size,
        };
        let head = Linear::new(store, &format!("{name}.head"), pooled, config.features, 1.0, rng);
        Ok(Encoder { config, stages, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes an `(H·W)×C` image into a `1×k` feature row.
    pub fn forward(&self, tape: &Tape, p: &Bound, image: Var) -> Result<Var> {
        let shape = tape.shape(image);
        let r = self.config.resolution;
        if shape != [r * r, self.config.in_channels] {
            return Err(Error::shape(
                "encode_image",
                format!("expected {}×{} image with {} channels, got {shape:?}", r, r, self.config.in_channels),
            ));
        }
        let mut x = image;
        for st in &self.stages {
            let cols = tape.im2col3x3(x, st.in_size, st.in_size)?;
            let y = st.conv.forward(tape, p, cols)?;
            let n = &st.norm;
            x = tape.relu(tape.image_group_norm(y, n.groups, GROUP_NORM_EPS, p.var(n.gamma), p.var(n.beta))?);
        }
        let pooled = match self.config.pooling {
            Pooling::Mean => tape.mean_over_rows(x)?,
            Pooling::Flatten => {
                let n = tape.value(x).len();
                tape.reshape(x, &[1, n])?
            }
        };
        self.head.forward(tape, p, pooled)
    }
}

/// Gather map of a stride-2, pad-1, 3×3 convolution: entry `o·9 + tap`
/// holds the source pixel or `None` for padding.
fn gather_map(h: usize, w: usize) -> Vec<Option<usize>> {
    let (ho, wo) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(ho * wo * 9);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                    map.push(inside.then(|| iy as usize * w + ix as usize));
                }
            }
        }
    }
    map
}

struct Im2Col {
    map: Vec<Option<usize>>,
}

impl Backward for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let c = x.cols();
        let mut d = vec![0.0; x.len()];
        let g = grad.data();
        for (slot, src) in self.map.iter().enumerate() {
            if let Some(src) = src {
                let from = &g[slot * c..(slot + 1) * c];
                for (acc, v) in d[src * c..(src + 1) * c].iter_mut().zip(from) {
                    *acc += v;
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

impl Tape {
    /// Patch matrix of a stride-2, zero-padded 3×3 convolution over an
    /// `(h·w)×C` image: `(h/2·w/2)×(9·C)`, columns ordered (ky, kx, channel).
    pub fn im2col3x3(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (out, map) = {
            let t = self.value(x);
            if t.shape().len() != 2 || t.rows() != h * w || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape("im2col", format!("{h}×{w} image vs tensor {:?}", t.shape())));
            }
            let c = t.cols();
            let map = gather_map(h, w);
            let mut d = vec![0.0; map.len() * c];
            for (slot, src) in map.iter().enumerate() {
                if let Some(src) = src {
                    d[slot * c..(slot + 1) * c].copy_from_slice(t.row(*src));
                }
            }
            (Tensor::new([h / 2 * (w / 2), 9 * c], d)?, map)
        };
        Ok(self.push(out, &[x], Im2Col { map }))
    }
}

struct ImageGroupNorm {
    groups: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for ImageGroupNorm {
    fn name(&self) -> &'static str {
        "image_group_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (rows, c) = (x.rows(), x.cols());
        let gsize = c / self.groups;
        let count = (rows * gsize) as f64;
        let (g, xh, gam) = (grad.data(), &self.normalized, gamma.data());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..rows * c {
            dgamma[i % c] += g[i] * xh[i];
            dbeta[i % c] += g[i];
        }
        // Per group: mean of dx̂ and of dx̂·x̂ over every pixel and channel in it.
        let mut mean_d = vec![0.0; self.groups];
        let mut mean_dx = vec![0.0; self.groups];
        for ch in 0..c {
            mean_d[ch / gsize] += gam[ch] * dbeta[ch] / count;
            mean_dx[ch / gsize] += gam[ch] * dgamma[ch] / count;
        }
        let dx: Vec<f64> = (0..rows * c)
            .map(|i| {
                let (ch, k) = (i % c, i % c / gsize);
                self.inv_std[k] * (g[i] * gam[ch] - mean_d[k] - xh[i] * mean_dx[k])
            })
            .collect();
        vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
            needs[1].then(|| Tensor::new(gamma.shape().to_vec(), dgamma).unwrap()),
            needs[2].then(|| Tensor::new(inputs[2].shape().to_vec(), dbeta).unwrap()),
        ]
    }
}

impl Tape {
    /// Group normalization of an `(H·W)×C` image: each channel group is
    /// standardized over all pixels together, then a per-channel affine map.
    pub fn image_group_norm(&self, x: Var, groups: usize, eps: f64, gamma: Var, beta: Var) -> Result<Var> {
        let (out, op) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let (rows, c) = (tx.rows(), tx.cols());
            if groups == 0 || c % groups != 0 || tg.len() != c || tb.len() != c || !(eps > 0.0) {
                return Err(Error::shape("image_group_norm", format!("{c} channels, {groups} groups, affine {}", tg.len())));
            }
            let gsize = c / groups;
            let count = (rows * gsize) as f64;
            let d = tx.data();
            let mut mean = vec![0.0; groups];
            for (i, v) in d.iter().enumerate() {
                mean[i % c / gsize] += v / count;
            }
            let mut var = vec![0.0; groups];
            for (i, v) in d.iter().enumerate() {
                let k = i % c / gsize;
                var[k] += (v - mean[k]) * (v - mean[k]) / count;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let normalized: Vec<f64> = d.iter().enumerate().map(|(i, v)| (v - mean[i % c / gsize]) * inv_std[i % c / gsize]).collect();
            let y = normalized.iter().enumerate().map(|(i, v)| tg.data()[i % c] * v + tb.data()[i % c]).collect();
            (Tensor::new(tx.shape().to_vec(), y)?, ImageGroupNorm { groups, normalized, inv_std })
        };
        Ok(self.push(out, &[x, gamma, beta], op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            resolution: 8,
            in_channels: 2,
            widths: vec![4, 8],
            group_size: 4,
            pooling: Pooling::Flatten,
            features: 5,
        }
    }

    #[test]
    fn image_group_norm_standardizes_each_group_over_pixels() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
        let x = tape.constant(Tensor::new([6, 4], data).unwrap());
        let ones = tape.constant(Tensor::full([1, 4], 1.0));
        let zeros = tape.constant(Tensor::zeros([1, 4]));
        let y = tape.image_group_norm(x, 2, 1e-12, ones, zeros).unwrap();
        let t = tape.value(y);
        for g in 0..2 {
            let vals: Vec<f64> = (0..6).flat_map(|r| [t.get2(r, 2 * g), t.get2(r, 2 * g + 1)]).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        // Per-pixel structure survives: rows are not individually standardized.
        assert!((t.get2(0, 0) + t.get2(0, 1)).abs() > 1e-3);
        assert!(tape.image_group_norm(x, 3, 1e-5, ones, zeros).is_err());
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        // 4×4 single-channel image, kernel summing its 3×3 window.
        let tape = Tape::new();
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new([16, 1], img.clone()).unwrap());
        let cols = tape.im2col3x3(x, 4, 4).unwrap();
        let t = tape.value(cols);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut direct = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (y, x) = (2 * oy as i32 + dy, 2 * ox as i32 + dx);
                        if (0..4).contains(&y) && (0..4).contains(&x) {
                            direct += img[(y * 4 + x) as usize];
                        }
                    }
                }
                let row_sum: f64 = t.row(oy * 2 + ox).iter().sum();
                assert_eq!(row_sum, direct);
            }
        }
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", toy_config(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let img = tape.constant(Tensor::zeros([64, 2]));
        let f = enc.forward(&tape, &p, img).unwrap();
        assert_eq!(tape.shape(f), vec![1, 5]);
        assert!(tape.value(f).is_finite());
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", toy_config(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let img = tape.constant(Tensor::zeros([16 * 16, 2]));
        assert!(enc.forward(&tape, &p, img).is_err());
        let mut bad = toy_config();
        bad.resolution = 6;
        assert!(bad.validate().is_err());
    }
}
