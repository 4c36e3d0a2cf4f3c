//! Training state, the two training stages and evaluation.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bodymodel::{MiniBodyModel, ParamMlpConfig, ParamRegressorMlp};
use crate::container::Container;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{
    keypoint_error, project_points, regress_joints, smpl_stage_loss, total_loss, CameraParams, LossWeights,
    MetricsReport, ParamTarget, SampleErrors,
};
use crate::regressor::{MeshRegressor, MeshTopology};
use crate::synth::{Dataset, Split, TrainingSample};

use super::adam::{AdamConfig, AdamState};
use super::config::TrainConfig;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub resolution: usize,
    pub channels: usize,
    pub body: Arc<MiniBodyModel>,
    pub topology: Arc<MeshTopology>,
    pub regressor: MeshRegressor,
    pub adam1: AdamState,
    pub mlp: ParamRegressorMlp,
    pub adam2: AdamState,
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    /// Stage 1: shape term. Stage 2: mesh term of the parametric model.
    pub shape: f64,
    pub joints: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6}", self.step, self.loss, self.shape, self.joints)
    }
}

const CHECKPOINT_VERSION: i64 = 1;

impl Checkpoint {
    /// Fresh models for a dataset.
    pub fn new(config: TrainConfig, body: Arc<MiniBodyModel>, resolution: usize, channels: usize) -> Result<Self> {
        config.validate()?;
        let topology = Arc::new(MeshTopology::new(body.template().clone(), config.coarsen_factor)?);
        let regressor = MeshRegressor::new(config.regressor_config(resolution, channels), topology.clone(), config.seed)?;
        let mlp = ParamRegressorMlp::new(
            ParamMlpConfig {
                coarse_vertices: topology.num_coarse(),
                hidden: config.mlp_hidden.clone(),
                joints: body.num_joints(),
                betas: body.num_betas(),
            },
            config.seed.wrapping_add(1),
        )?;
        Ok(Checkpoint {
            adam1: AdamState::new(regressor.params()),
            adam2: AdamState::new(mlp.params()),
            config,
            resolution,
            channels,
            body,
            topology,
            regressor,
            mlp,
        })
    }

    pub fn for_dataset(config: TrainConfig, data: &Dataset) -> Result<Self> {
        Self::new(config, data.model.clone(), data.manifest.resolution, data.channels())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_i64("meta/version", vec![1], vec![CHECKPOINT_VERSION]).unwrap();
        c.put_text("meta/config", &self.config.to_text());
        c.put_i64("meta/image", vec![2], vec![self.resolution as i64, self.channels as i64]).unwrap();
        c.merge_prefixed("body/", &self.body.to_container());
        self.topology.write_to(&mut c, "topology/");
        self.regressor.params().write_to(&mut c, "stage1/");
        self.adam1.write_to(&mut c, "adam1/", self.regressor.params());
        self.mlp.params().write_to(&mut c, "stage2/");
        self.adam2.write_to(&mut c, "adam2/", self.mlp.params());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let version = c.i64s("meta/version")?.1;
        if version != [CHECKPOINT_VERSION] {
            return Err(Error::Format(format!("unsupported checkpoint version {version:?}")));
        }
        let config = TrainConfig::parse(&c.text("meta/config")?)?;
        let image = c.usizes("meta/image")?;
        let [resolution, channels] = image[..] else {
            return Err(Error::Format("meta/image must hold resolution and channels".into()));
        };
        let body = Arc::new(MiniBodyModel::from_container(&c.sub("body/"))?);
        let topology = Arc::new(MeshTopology::read_from(c, "topology/")?);
        if topology.num_vertices() != body.num_vertices() {
            return Err(Error::IncompatibleTemplate {
                expected: body.num_vertices(),
                actual: topology.num_vertices(),
            });
        }
        let mut regressor =
            MeshRegressor::new(config.regressor_config(resolution, channels), topology.clone(), config.seed)?;
        regressor.params_mut().read_from(c, "stage1/")?;
        let adam1 = AdamState::read_from(c, "adam1/", regressor.params())?;
        let mut mlp = ParamRegressorMlp::new(
            ParamMlpConfig {
                coarse_vertices: topology.num_coarse(),
                hidden: config.mlp_hidden.clone(),
                joints: body.num_joints(),
                betas: body.num_betas(),
            },
            config.seed.wrapping_add(1),
        )?;
        mlp.params_mut().read_from(c, "stage2/")?;
        let adam2 = AdamState::read_from(c, "adam2/", mlp.params())?;
        Ok(Checkpoint { config, resolution, channels, body, topology, regressor, adam1, mlp, adam2 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.config.lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            clip: self.config.grad_clip,
        }
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.model.num_vertices() != self.topology.num_vertices() {
            return Err(Error::IncompatibleTemplate {
                expected: self.topology.num_vertices(),
                actual: data.model.num_vertices(),
            });
        }
        if data.manifest.resolution != self.resolution || data.channels() != self.channels {
            return Err(Error::Dataset(format!(
                "images are {}px × {} channels, the model expects {}px × {}",
                data.manifest.resolution,
                data.channels(),
                self.resolution,
                self.channels
            )));
        }
        Ok(())
    }

    /// Runs `steps` mesh-regression steps, calling `on_step` after each one.
    pub fn train_stage1(&mut self, data: &Dataset, steps: usize, on_step: &mut dyn FnMut(&Self, &StepLog) -> Result<()>) -> Result<()> {
        self.check_dataset(data)?;
        let pool = data.indices(Split::Train);
        if pool.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let adam = self.adam_config();
        let weak_only = self.config.weak_only;
        let reg = self.body.joint_regressor().clone();
        for _ in 0..steps {
            let batch = batch_indices(&pool, self.config.seed, self.config.batch_size, self.adam1.step);
            let model = &self.regressor;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    let tape = Tape::new();
                    let p = model.params().bind(&tape, true);
                    let img = tape.constant(s.image.clone());
                    let out = model.forward(&tape, &p, img)?;
                    let gt = s.gt_vertices.as_ref().map(|v| Tensor::new([v.len() / 3, 3], v.clone())).transpose()?;
                    let terms = total_loss(&tape, &reg, out.mesh, out.camera, gt.as_ref(), &s.gt_keypoints, weak_only || s.is_weak())?;
                    let grads = tape.backward(terms.total);
                    let shape = terms.shape.map_or(0.0, |v| tape.value(v).item());
                    let losses = [tape.value(terms.total).item(), shape, tape.value(terms.joints).item()];
                    Ok((p.gradients(&tape, &grads), losses))
                })
                .collect::<Result<Vec<_>>>()?;
            let (grads, losses) = reduce(results);
            if !losses[0].is_finite() {
                return Err(Error::NonFinite(format!("stage-1 loss at step {}", self.adam1.step + 1)));
            }
            let grad_norm = self.adam1.update(self.regressor.params_mut(), &grads, &adam)?;
            let log = StepLog { step: self.adam1.step, loss: losses[0], shape: losses[1], joints: losses[2], grad_norm };
            on_step(self, &log)?;
        }
        Ok(())
    }

    /// Coarse mesh and camera predicted by the (frozen) mesh regressor.
    pub fn stage1_outputs(&self, samples: &[&TrainingSample]) -> Result<Vec<(Vec<f64>, CameraParams)>> {
        samples
            .par_iter()
            .map(|s| self.regressor.predict(&s.image).map(|p| (p.coarse, p.camera)))
            .collect()
    }

    /// Runs `steps` parameter-regression steps on strongly supervised samples.
    pub fn train_stage2(&mut self, data: &Dataset, steps: usize, on_step: &mut dyn FnMut(&Self, &StepLog) -> Result<()>) -> Result<()> {
        self.check_dataset(data)?;
        let pool: Vec<usize> = data.indices(Split::Train).into_iter().filter(|&i| !data.samples[i].is_weak()).collect();
        if pool.is_empty() {
            return Err(Error::Dataset("no strongly supervised training samples".into()));
        }
        let inputs = self.stage1_outputs(&pool.iter().map(|&i| &data.samples[i]).collect::<Vec<_>>())?;
        let targets = pool
            .iter()
            .map(|&i| {
                let s = &data.samples[i];
                let v = s.gt_vertices.as_ref().unwrap();
                let params = s.gt_params.clone().ok_or_else(|| Error::MissingLabel(format!("sample {i} has no parameters")))?;
                Ok((params, Tensor::new([v.len() / 3, 3], v.clone())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let slots: Vec<usize> = (0..pool.len()).collect();
        let adam = self.adam_config();
        let weights = LossWeights::new(self.config.lambda_beta)?;
        for _ in 0..steps {
            let batch = batch_indices(&slots, self.config.seed.wrapping_add(1), self.config.batch_size, self.adam2.step);
            let (mlp, body) = (&self.mlp, &self.body);
            let results = batch
                .par_iter()
                .map(|&k| {
                    let (coarse, cam) = &inputs[k];
                    let (params, mesh) = &targets[k];
                    let tape = Tape::new();
                    let p = mlp.params().bind(&tape, true);
                    let x = tape.constant(Tensor::new([coarse.len() / 3, 3], coarse.clone())?);
                    let out = mlp.forward(&tape, &p, x)?;
                    let cam = tape.constant(cam.to_tensor());
                    let target = ParamTarget { params, mesh, keypoints: &data.samples[pool[k]].gt_keypoints };
                    let terms = smpl_stage_loss(&tape, body, out.params, cam, &target, weights)?;
                    let grads = tape.backward(terms.total);
                    let losses = [tape.value(terms.total).item(), tape.value(terms.shape).item(), tape.value(terms.joints).item()];
                    Ok((p.gradients(&tape, &grads), losses))
                })
                .collect::<Result<Vec<_>>>()?;
            let (grads, losses) = reduce(results);
            if !losses[0].is_finite() {
                return Err(Error::NonFinite(format!("stage-2 loss at step {}", self.adam2.step + 1)));
            }
            let grad_norm = self.adam2.update(self.mlp.params_mut(), &grads, &adam)?;
            let log = StepLog { step: self.adam2.step, loss: losses[0], shape: losses[1], joints: losses[2], grad_norm };
            on_step(self, &log)?;
        }
        Ok(())
    }

    /// Metrics over one split. Parametric errors need a trained second stage.
    pub fn evaluate(&self, data: &Dataset, split: Split, parametric: bool) -> Result<MetricsReport> {
        self.check_dataset(data)?;
        let indices = data.indices(split);
        let reg = self.body.joint_regressor();
        let per_sample = indices
            .par_iter()
            .map(|&i| {
                let s = &data.samples[i];
                let pred = self.regressor.predict(&s.image)?;
                let joints = regress_joints(reg, &pred.mesh)?;
                let kp = keypoint_error(&project_points(&joints, &pred.camera), &s.gt_keypoints);
                let Some(gt) = &s.gt_vertices else { return Ok((kp, None, None)) };
                let mesh = SampleErrors::of_mesh(reg, &pred.mesh, gt)?;
                let param = if parametric {
                    let params = self.mlp.predict(&pred.coarse)?;
                    Some(SampleErrors::of_mesh(reg, &self.body.lbs_forward(&params)?, gt)?)
                } else {
                    None
                };
                Ok((kp, Some(mesh), param))
            })
            .collect::<Result<Vec<_>>>()?;
        let keypoints: Vec<f64> = per_sample.iter().map(|r| r.0).collect();
        let mesh: Vec<SampleErrors> = per_sample.iter().filter_map(|r| r.1).collect();
        let param: Vec<SampleErrors> = per_sample.iter().filter_map(|r| r.2).collect();
        Ok(MetricsReport::from_samples(&mesh, &keypoints, parametric.then_some(&param[..])))
    }
}

/// Sample indices of the batch taken at optimizer step `step`.
///
/// Samples are consumed in a seeded order that is reshuffled every epoch,
/// and a batch may straddle two epochs. The order depends only on the seed
/// and the step, so resumed runs see the same batches.
pub fn batch_indices(pool: &[usize], seed: u64, batch: usize, step: u64) -> Vec<usize> {
    let n = pool.len() as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let k = step * batch as u64 + j;
            let epoch = k / n;
            if cached.as_ref().is_none_or(|c| c.0 != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch + 1);
                let mut order = pool.to_vec();
                order.shuffle(&mut rng);
                cached = Some((epoch, order));
            }
            cached.as_ref().unwrap().1[(k % n) as usize]
        })
        .collect()
}

/// Sums per-sample gradients in batch order and averages them with the losses.
fn reduce(results: Vec<(Vec<Tensor>, [f64; 3])>) -> (Vec<Tensor>, [f64; 3]) {
    let n = results.len() as f64;
    let mut iter = results.into_iter();
    let (mut grads, mut losses) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b);
        }
        for (a, b) in losses.iter_mut().zip(l) {
            *a += b;
        }
    }
    for g in &mut grads {
        g.scale(1.0 / n);
    }
    (grads, losses.map(|l| l / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let pool: Vec<usize> = (10..17).collect();
        let mut seen: Vec<usize> = (0..7).flat_map(|s| batch_indices(&pool, 3, 2, s)).collect();
        let first: Vec<usize> = seen.drain(..7).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, pool);
        let mut second: Vec<usize> = seen.drain(..7).collect();
        assert_ne!(second, first);
        second.sort();
        assert_eq!(second, pool);
    }

    #[test]
    fn reduce_averages_in_order() {
        let t = |v: f64| vec![Tensor::new([1, 1], vec![v]).unwrap()];
        let (g, l) = reduce(vec![(t(1.0), [1.0, 2.0, 3.0]), (t(3.0), [3.0, 2.0, 1.0])]);
        assert_eq!(g[0].data(), &[2.0]);
        assert_eq!(l, [2.0, 2.0, 2.0]);
    }
}
