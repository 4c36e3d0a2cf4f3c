//! Ground-truth sampling, sample records and dataset generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bodymodel::{BodyParams, MiniBodyModel, Pose};
use crate::container::{Container, Payload};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{project_points, regress_joints, CameraParams, Keypoints2D};

use super::raster::{rasterize, Shading};

/// Axis-angle uniformly distributed in the ball of the given radius.
fn sample_ball(rng: &mut impl Rng, radius: f64) -> Vector3<f64> {
    if radius <= 0.0 {
        return Vector3::zeros();
    }
    let dir = loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            break v / n;
        }
    };
    let u: f64 = rng.random();
    dir * (radius * u.cbrt())
}

/// Ranges of the ground-truth generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRanges {
    /// Radius of the axis-angle ball for non-root joints.
    pub pose: f64,
    /// Radius for the root orientation.
    pub root: f64,
    /// Shape coefficients are uniform in `[−shape, shape]`.
    pub shape: f64,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges { pose: 0.6, root: std::f64::consts::PI, shape: 2.0 }
    }
}

/// Random pose (axis-angle, angles in `[0, π]`) and shape.
pub fn sample_params(rng: &mut impl Rng, ranges: &SamplingRanges, joints: usize, betas: usize) -> BodyParams {
    let pose = (0..joints)
        .map(|j| sample_ball(rng, if j == 0 { ranges.root.min(std::f64::consts::PI) } else { ranges.pose }))
        .collect();
    let beta = (0..betas)
        .map(|_| if ranges.shape > 0.0 { rng.random_range(-ranges.shape..=ranges.shape) } else { 0.0 })
        .collect();
    BodyParams { pose: Pose::AxisAngle(pose), beta }
}

/// Camera with `s ∈ [0.6, 1.2]` and `t ∈ [−0.2, 0.2]²`.
pub fn sample_camera(rng: &mut impl Rng) -> CameraParams {
    let s = rng.random_range(0.6..=1.2);
    let t = [rng.random_range(-0.2..=0.2), rng.random_range(-0.2..=0.2)];
    CameraParams::new(s, t).expect("positive scale")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Silhouette,
    Parts,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Silhouette => "silhouette",
            InputMode::Parts => "parts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silhouette" => Ok(InputMode::Silhouette),
            "parts" => Ok(InputMode::Parts),
            _ => Err(Error::Config(format!("unknown input mode '{s}' (expected silhouette or parts)"))),
        }
    }

    pub fn channels(self, joints: usize) -> usize {
        match self {
            InputMode::Silhouette => 1,
            InputMode::Parts => joints,
        }
    }
}

/// One rendered example with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `(H·W)×C`, values in `{0, 1}`.
    pub image: Tensor,
    /// Absent for weakly supervised samples.
    pub gt_vertices: Option<Vec<f64>>,
    pub gt_params: Option<BodyParams>,
    pub gt_keypoints: Keypoints2D,
    pub gt_camera: CameraParams,
}

impl TrainingSample {
    pub fn is_weak(&self) -> bool {
        self.gt_vertices.is_none()
    }

    pub fn to_container(&self, resolution: usize) -> Container {
        let mut c = Container::new();
        let image: Vec<f32> = self.image.data().iter().map(|&v| v as f32).collect();
        c.insert("image", vec![resolution, resolution, self.image.cols()], Payload::F32(image)).unwrap();
        c.put_tensor("keypoints", &self.gt_keypoints.to_tensor());
        let vis = self.gt_keypoints.visible.iter().map(|&v| i64::from(v)).collect();
        c.put_i64("visible", vec![self.gt_keypoints.len()], vis).unwrap();
        c.put_tensor("camera", &self.gt_camera.to_tensor());
        if let Some(v) = &self.gt_vertices {
            c.put_f64("vertices", vec![v.len() / 3, 3], v.clone()).unwrap();
        }
        if let Some(p) = &self.gt_params {
            c.put_tensor("pose", &p.rotation_rows());
            c.put_f64("beta", vec![1, p.beta.len()], p.beta.clone()).unwrap();
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let img = c.get("image")?;
        let (pixels, channels) = match img.shape.as_slice() {
            [h, w, ch] => (h * w, *ch),
            s => return Err(Error::Dataset(format!("image must be H×W×C, got {s:?}"))),
        };
        let image = c.tensor("image")?.reshaped([pixels, channels])?;
        let kp = c.tensor("keypoints")?;
        let points = kp.data().chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let visible = c.i64s("visible")?.1.into_iter().map(|v| v != 0).collect();
        let gt_camera = CameraParams::from_slice(c.tensor("camera")?.data())?;
        let gt_vertices = if c.contains("vertices") { Some(c.tensor("vertices")?.into_data()) } else { None };
        let gt_params = if c.contains("pose") {
            let beta = c.tensor("beta")?.into_data();
            Some(BodyParams::from_rotation_rows(&c.tensor("pose")?, beta)?)
        } else {
            None
        };
        Ok(TrainingSample {
            image,
            gt_vertices,
            gt_params,
            gt_keypoints: Keypoints2D { points, visible },
            gt_camera,
        })
    }
}

/// Renders one fully supervised sample from explicit parameters and camera.
pub fn render_sample(
    model: &MiniBodyModel,
    params: &BodyParams,
    camera: CameraParams,
    mode: InputMode,
    resolution: usize,
) -> Result<TrainingSample> {
    let vertices = model.lbs_forward(params)?;
    let joints = regress_joints(model.joint_regressor(), &vertices)?;
    let keypoints = Keypoints2D::from_points(project_points(&joints, &camera));
    let labels = model.part_labels();
    let shading = match mode {
        InputMode::Silhouette => Shading::Silhouette,
        InputMode::Parts => Shading::Parts(&labels, model.num_joints()),
    };
    let image = rasterize(&vertices, model.template().faces(), shading, &camera, resolution);
    Ok(TrainingSample {
        image,
        gt_vertices: Some(vertices),
        gt_params: Some(params.to_matrix_form()),
        gt_keypoints: keypoints,
        gt_camera: camera,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split '{s}' (expected train or val)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub n: usize,
    pub seed: u64,
    pub weak_fraction: f64,
    pub val_fraction: f64,
    pub resolution: usize,
    pub mode: InputMode,
    pub ranges: SamplingRanges,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n: 640,
            seed: 0,
            weak_fraction: 0.0,
            val_fraction: 0.2,
            resolution: 64,
            mode: InputMode::Parts,
            ranges: SamplingRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub weak: bool,
    pub path: String,
    pub digest: String,
}

/// Index of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub samples: usize,
    pub weak_fraction: f64,
    pub val_fraction: f64,
    pub resolution: usize,
    pub mode: InputMode,
    pub ranges: SamplingRanges,
    pub model_path: String,
    pub model_digest: String,
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 over every other line of the manifest.
    pub digest: String,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MODEL_FILE: &str = "model.cmrk";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    fn body(&self) -> String {
        let mut s = format!(
            "seed={}\nsamples={}\nweak_fraction={}\nval_fraction={}\nresolution={}\ninput={}\npose_range={}\nroot_range={}\nshape_range={}\nmodel={}\nmodel_digest={}\n",
            self.seed,
            self.samples,
            self.weak_fraction,
            self.val_fraction,
            self.resolution,
            self.mode.as_str(),
            self.ranges.pose,
            self.ranges.root,
            self.ranges.shape,
            self.model_path,
            self.model_digest,
        );
        for e in &self.entries {
            s += &format!(
                "{} {} {} {} {}\n",
                e.index,
                e.split.as_str(),
                if e.weak { "weak" } else { "strong" },
                e.path,
                e.digest
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let body = self.body();
        format!("digest={}\n{body}", sha256_hex(body.as_bytes()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let digest = lines
            .next()
            .and_then(|l| l.strip_prefix("digest="))
            .ok_or_else(|| Error::Dataset("manifest must start with digest=".into()))?
            .to_string();
        let body_start = text.find('\n').map_or(text.len(), |i| i + 1);
        if sha256_hex(text[body_start..].as_bytes()) != digest {
            return Err(Error::Dataset("manifest digest does not match its contents".into()));
        }
        let mut kv = std::collections::HashMap::new();
        let mut entries = Vec::new();
        for line in lines {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::Dataset(format!("malformed manifest line '{line}'")));
            }
            entries.push(ManifestEntry {
                index: f[0].parse().map_err(|_| Error::Dataset(format!("bad index in '{line}'")))?,
                split: Split::parse(f[1])?,
                weak: match f[2] {
                    "weak" => true,
                    "strong" => false,
                    other => return Err(Error::Dataset(format!("bad supervision flag '{other}'"))),
                },
                path: f[3].to_string(),
                digest: f[4].to_string(),
            });
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Dataset(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Dataset(format!("manifest {k} is not a number")))
        };
        Ok(DatasetManifest {
            seed: num("seed")? as u64,
            samples: num("samples")? as usize,
            weak_fraction: num("weak_fraction")?,
            val_fraction: num("val_fraction")?,
            resolution: num("resolution")? as usize,
            mode: InputMode::parse(&get("input")?)?,
            ranges: SamplingRanges { pose: num("pose_range")?, root: num("root_range")?, shape: num("shape_range")? },
            model_path: get("model")?,
            model_digest: get("model_digest")?,
            entries,
            digest,
        })
    }
}

/// Samples, model copy and manifest written into `out_dir`.
pub fn generate_dataset(model: &MiniBodyModel, opts: &GenerateOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    for (name, v) in [("weak_fraction", opts.weak_fraction), ("val_fraction", opts.val_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    fs::create_dir_all(out_dir.join("samples"))?;
    let model_bytes = model.to_container().to_bytes();
    fs::write(out_dir.join(MODEL_FILE), &model_bytes)?;

    // Supervision and split follow a seeded shuffle: the first ⌈w·n⌉ shuffled
    // samples are weak, the last round(v·n) form the validation split.
    let mut order: Vec<usize> = (0..opts.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_weak = (opts.weak_fraction * opts.n as f64).ceil() as usize;
    let n_val = (opts.val_fraction * opts.n as f64).round() as usize;
    let mut weak = vec![false; opts.n];
    let mut split = vec![Split::Train; opts.n];
    for (pos, &i) in order.iter().enumerate() {
        weak[i] = pos < n_weak;
        if pos >= opts.n - n_val {
            split[i] = Split::Val;
        }
    }

    let entries: Vec<Result<ManifestEntry>> = (0..opts.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            let params = sample_params(&mut rng, &opts.ranges, model.num_joints(), model.num_betas());
            let camera = sample_camera(&mut rng);
            let mut sample = render_sample(model, &params, camera, opts.mode, opts.resolution)?;
            if weak[i] {
                sample.gt_vertices = None;
                sample.gt_params = None;
            }
            let bytes = sample.to_container(opts.resolution).to_bytes();
            let path = format!("samples/{i:06}.cmrk");
            fs::write(out_dir.join(&path), &bytes)?;
            Ok(ManifestEntry { index: i, split: split[i], weak: weak[i], path, digest: sha256_hex(&bytes) })
        })
        .collect();
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest {
        seed: opts.seed,
        samples: opts.n,
        weak_fraction: opts.weak_fraction,
        val_fraction: opts.val_fraction,
        resolution: opts.resolution,
        mode: opts.mode,
        ranges: opts.ranges,
        model_path: MODEL_FILE.into(),
        model_digest: sha256_hex(&model_bytes),
        entries,
        digest: String::new(),
    };
    let text = manifest.to_text();
    manifest.digest = text.lines().next().unwrap()["digest=".len()..].to_string();
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// A loaded dataset: manifest, body model and every sample in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub model: Arc<MiniBodyModel>,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    /// Loads and verifies every file digest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let manifest = DatasetManifest::parse(&text)?;
        let model_bytes = fs::read(dir.join(&manifest.model_path))?;
        if sha256_hex(&model_bytes) != manifest.model_digest {
            return Err(Error::Dataset("model file digest does not match the manifest".into()));
        }
        let model = Arc::new(MiniBodyModel::from_container(&Container::from_bytes(&model_bytes)?)?);
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let bytes = fs::read(dir.join(&e.path))?;
                if sha256_hex(&bytes) != e.digest {
                    return Err(Error::Dataset(format!("digest mismatch for {}", e.path)));
                }
                TrainingSample::from_container(&Container::from_bytes(&bytes)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { dir, manifest, model, samples })
    }

    /// Sample indices of a split in index order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.entries.iter().filter(|e| e.split == split).map(|e| e.index).collect()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.image.cols())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pose_range_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ranges = SamplingRanges { pose: 0.0, root: 0.0, shape: 0.0 };
        let p = sample_params(&mut rng, &ranges, 6, 3);
        assert!(p.axis_angles().iter().all(|a| a.norm() == 0.0));
        assert!(p.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn pose_norms_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ranges = SamplingRanges::default();
        for _ in 0..200 {
            let p = sample_params(&mut rng, &ranges, 8, 4);
            let aa = p.axis_angles();
            assert!(aa[0].norm() <= std::f64::consts::PI);
            assert!(aa[1..].iter().all(|a| a.norm() <= 0.6));
            assert!(p.beta.iter().all(|b| b.abs() <= 2.0));
        }
    }

    #[test]
    fn same_seed_same_params() {
        let r = SamplingRanges::default();
        let a = sample_params(&mut ChaCha8Rng::seed_from_u64(9), &r, 8, 4);
        let b = sample_params(&mut ChaCha8Rng::seed_from_u64(9), &r, 8, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_detects_tampering() {
        let m = DatasetManifest {
            seed: 1,
            samples: 1,
            weak_fraction: 0.0,
            val_fraction: 0.0,
            resolution: 8,
            mode: InputMode::Silhouette,
            ranges: SamplingRanges::default(),
            model_path: MODEL_FILE.into(),
            model_digest: "00".into(),
            entries: vec![ManifestEntry {
                index: 0,
                split: Split::Train,
                weak: false,
                path: "samples/000000.cmrk".into(),
                digest: "ab".into(),
            }],
            digest: String::new(),
        };
        let text = m.to_text();
        let parsed = DatasetManifest::parse(&text).unwrap();
        assert_eq!(parsed.entries, m.entries);
        assert_eq!(parsed.ranges, m.ranges);
        assert!(DatasetManifest::parse(&text.replace("seed=1", "seed=2")).is_err());
    }
}
