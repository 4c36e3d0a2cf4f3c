//! Finite-difference checks of every differentiable operation and of the
//! composite models on small inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bodymodel::{make_mini_model, MiniBodyModel, ParamMlpConfig, ParamRegressorMlp};
use crate::diffcore::{grad_check_scaled, GradCheckReport, Tape, Tensor, Var, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::meshgraph::primitives::icosphere;
use crate::meshgraph::{build_adjacency, SparseMatrix};
use crate::metrics::{smpl_stage_loss, total_loss, Keypoints2D, LossWeights, ParamTarget, ParamVars};
use crate::regressor::{
    Architecture, Bound, Encoder, EncoderConfig, GraphConvLayer, GraphResidualBlock, MeshRegressor, MeshTopology,
    ParamStore, Pooling, RegressorConfig, GROUP_NORM_EPS,
};

/// Tolerance on the relative error of single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance on the relative error of composite models.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Composite checks measure coordinates with vanishing gradient against this
/// fraction of the largest gradient; their central differences are pure
/// roundoff otherwise.
pub const MODEL_FLOOR_FRACTION: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Model,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!("scope must be ops, model or all, got '{s}'"))),
        }
    }
}

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: std::result::Result<GradCheckReport, String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.max_rel_error < self.tolerance)
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        match &self.report {
            Ok(r) => format!(
                "{status} {:<22} max_rel_error={:.3e} tol={:.0e} coords={}",
                self.name, r.max_rel_error, self.tolerance, r.coordinates
            ),
            Err(e) => format!("{status} {:<22} error: {e}", self.name),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), d).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries pushed at least `margin` away from zero so kinks stay out of reach.
fn away_from_zero(mut t: Tensor, margin: f64) -> Tensor {
    for x in t.data_mut() {
        if x.abs() < margin {
            *x = if *x < 0.0 { -margin } else { margin };
        }
    }
    t
}

/// Reduces any output to a scalar through a fixed random linear functional.
fn project(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.dot_const(out, &normal(&mut rng, &shape, 1.0))
}

struct Check {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Box<dyn Fn(&Tape, &[Var]) -> Result<Var> + Sync + Send>,
}

fn check(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&Tape, &[Var]) -> Result<Var> + Sync + Send + 'static,
) -> Check {
    Check { name, inputs, f: Box::new(f) }
}

fn toy_body() -> Arc<MiniBodyModel> {
    Arc::new(make_mini_model(3, 12, 4, 2).expect("toy body model"))
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let adj = Arc::new(build_adjacency(&icosphere(0)).into_matrix());
    let body = toy_body();
    let reg = body.joint_regressor().clone();
    let mut v = Vec::new();

    v.push(check("matmul", vec![normal(rng, &[4, 3], 1.0), normal(rng, &[3, 5], 1.0)], |t, x| {
        project(t, t.matmul(x[0], x[1])?, 1)
    }));
    let a = adj.clone();
    v.push(check("sparse_matmul", vec![normal(rng, &[12, 3], 1.0)], move |t, x| {
        project(t, t.sparse_matmul(&a, x[0])?, 2)
    }));
    v.push(check("add", vec![normal(rng, &[3, 4], 1.0), normal(rng, &[3, 4], 1.0)], |t, x| {
        project(t, t.add(x[0], x[1])?, 3)
    }));
    v.push(check("sub", vec![normal(rng, &[3, 4], 1.0), normal(rng, &[3, 4], 1.0)], |t, x| {
        project(t, t.sub(x[0], x[1])?, 4)
    }));
    v.push(check("mul", vec![normal(rng, &[3, 4], 1.0), normal(rng, &[3, 4], 1.0)], |t, x| {
        project(t, t.mul(x[0], x[1])?, 5)
    }));
    v.push(check("add_row", vec![normal(rng, &[5, 3], 1.0), normal(rng, &[1, 3], 1.0)], |t, x| {
        project(t, t.add_row(x[0], x[1])?, 6)
    }));
    v.push(check("scale", vec![normal(rng, &[2, 3], 1.0)], |t, x| project(t, t.scale(x[0], -1.7), 7)));
    v.push(check("relu", vec![away_from_zero(normal(rng, &[4, 4], 1.0), 0.05)], |t, x| {
        project(t, t.relu(x[0]), 8)
    }));
    v.push(check(
        "group_norm",
        vec![normal(rng, &[3, 8], 1.0), normal(rng, &[1, 8], 1.0), normal(rng, &[1, 8], 1.0)],
        |t, x| project(t, t.group_norm(x[0], 2, GROUP_NORM_EPS, x[1], x[2])?, 9),
    ));
    let target = normal(rng, &[4, 3], 1.0);
    let base = target.clone();
    let offset = away_from_zero(normal(rng, &[4, 3], 1.0), 0.05);
    let mut p = base.clone();
    p.add_assign(&offset);
    let tl1 = target.clone();
    v.push(check("l1_loss", vec![p.clone()], move |t, x| t.l1_loss(x[0], &tl1)));
    let tl1m = target.clone();
    v.push(check("l1_loss_masked", vec![p], move |t, x| {
        t.l1_loss_masked(x[0], &tl1m, Some(&[true, false, true, true]))
    }));
    v.push(check("l2_loss", vec![normal(rng, &[4, 3], 1.0)], move |t, x| t.l2_loss(x[0], &target)));
    v.push(check("concat", vec![normal(rng, &[2, 3], 1.0), normal(rng, &[2, 2], 1.0), normal(rng, &[1, 5], 1.0)], |t, x| {
        let c = t.concat(&[x[0], x[1]], 1)?;
        project(t, t.concat(&[c, x[2]], 0)?, 10)
    }));
    v.push(check("slice_cols", vec![normal(rng, &[3, 6], 1.0)], |t, x| project(t, t.slice_cols(x[0], 1, 4)?, 11)));
    v.push(check("split_cols", vec![normal(rng, &[3, 6], 1.0)], |t, x| {
        let p = t.split_cols(x[0], &[2, 4])?;
        let a = project(t, p[0], 12)?;
        let b = project(t, p[1], 13)?;
        t.add(a, b)
    }));
    v.push(check("mean_over_rows", vec![normal(rng, &[5, 3], 1.0)], |t, x| project(t, t.mean_over_rows(x[0])?, 14)));
    v.push(check("reshape", vec![normal(rng, &[4, 3], 1.0)], |t, x| project(t, t.reshape(x[0], &[2, 6])?, 15)));
    v.push(check("sum", vec![normal(rng, &[3, 3], 1.0)], |t, x| {
        let y = t.mul(x[0], x[0])?;
        Ok(t.sum(y))
    }));
    v.push(check("dot_const", vec![normal(rng, &[3, 3], 1.0)], |t, x| {
        let y = t.mul(x[0], x[0])?;
        project(t, y, 16)
    }));
    let r = reg.clone();
    v.push(check("regress_joints", vec![normal(rng, &[12, 3], 1.0)], move |t, x| {
        project(t, t.regress_joints(&r, x[0])?, 17)
    }));
    let cam = Tensor::new([1, 3], vec![0.8, 0.1, -0.2]).unwrap();
    v.push(check("project", vec![normal(rng, &[5, 3], 1.0), cam], |t, x| project(t, t.project(x[0], x[1])?, 18)));
    v.push(check("im2col3x3", vec![normal(rng, &[16, 2], 1.0)], |t, x| project(t, t.im2col3x3(x[0], 4, 4)?, 19)));
    v.push(check(
        "image_group_norm",
        vec![normal(rng, &[6, 8], 1.0), normal(rng, &[1, 8], 1.0), normal(rng, &[1, 8], 1.0)],
        |t, x| project(t, t.image_group_norm(x[0], 2, GROUP_NORM_EPS, x[1], x[2])?, 24),
    ));
    v.push(check("attach_features", vec![normal(rng, &[1, 4], 1.0), normal(rng, &[5, 3], 1.0)], |t, x| {
        project(t, t.attach_features(x[0], x[1])?, 20)
    }));
    v.push(check("camera_activation", vec![normal(rng, &[1, 3], 1.0)], |t, x| {
        project(t, t.camera_activation(x[0])?, 21)
    }));
    v.push(check("so3_project", vec![normal(rng, &[3, 9], 1.0)], |t, x| project(t, t.so3_project_rows(x[0])?.0, 22)));
    let b = body.clone();
    let rotations = {
        let mut rows = Vec::new();
        for _ in 0..4 {
            let m = crate::bodymodel::rodrigues(&nalgebra::Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            ));
            rows.extend(m.transpose().iter().copied());
        }
        Tensor::new([4, 9], rows).unwrap()
    };
    v.push(check("lbs", vec![rotations, normal(rng, &[1, 2], 1.0)], move |t, x| {
        project(t, t.lbs(&b, x[0], x[1])?, 23)
    }));
    v
}

/// Adds Gaussian noise to every parameter so zero-initialized layers carry gradient.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for t in store.values_mut() {
        for x in t.data_mut() {
            *x += std * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
}

fn param_check<M: Send + Sync + 'static>(
    name: &'static str,
    store: &ParamStore,
    extra: Vec<Tensor>,
    model: M,
    f: impl Fn(&M, &Tape, &Bound, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Check {
    let n = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend(extra);
    check(name, inputs, move |t, x| {
        let bound = Bound::from_vars(x[..n].to_vec());
        f(&model, t, &bound, &x[n..])
    })
}

fn toy_regressor(arch: Architecture, body: &MiniBodyModel, seed: u64) -> Result<MeshRegressor> {
    let topology = Arc::new(MeshTopology::new(body.template().clone(), 2.0)?);
    let config = RegressorConfig {
        architecture: arch,
        channels: 16,
        blocks: 1,
        groups: 4,
        fc_hidden: None,
        encoder: EncoderConfig {
            resolution: 8,
            in_channels: 2,
            widths: vec![4, 8],
            group_size: 2,
            pooling: Pooling::Flatten,
            features: 8,
        },
    };
    MeshRegressor::new(config, topology, seed)
}

fn model_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut v = Vec::new();
    let adj: Arc<SparseMatrix> = Arc::new(build_adjacency(&icosphere(0)).into_matrix());

    let mut store = ParamStore::new();
    let layer = GraphConvLayer::new(&mut store, "gc", 5, 4, rng);
    jitter(&mut store, rng, 0.1);
    let a = adj.clone();
    v.push(param_check("graph_conv_layer", &store, vec![normal(rng, &[12, 5], 1.0)], layer, move |l, t, p, x| {
        project(t, l.forward(t, p, &a, x[0])?, 30)
    }));

    let mut store = ParamStore::new();
    let block = GraphResidualBlock::new(&mut store, "blk", 16, 1, rng);
    jitter(&mut store, rng, 0.1);
    let a = adj.clone();
    v.push(param_check("residual_block", &store, vec![normal(rng, &[12, 16], 1.0)], block, move |b, t, p, x| {
        project(t, b.forward(t, p, &a, x[0])?, 31)
    }));

    let mut store = ParamStore::new();
    let enc_config = EncoderConfig {
        resolution: 8,
        in_channels: 2,
        widths: vec![4, 8],
        group_size: 2,
        pooling: Pooling::Mean,
        features: 6,
    };
    let enc = Encoder::new(&mut store, "enc", enc_config, rng)?;
    jitter(&mut store, rng, 0.1);
    v.push(param_check("encoder", &store, vec![uniform(rng, &[64, 2], 0.0, 1.0)], enc, |e, t, p, x| {
        project(t, e.forward(t, p, x[0])?, 32)
    }));

    let body = toy_body();
    let image = uniform(rng, &[64, 2], 0.0, 1.0);
    let gt = normal(rng, &[12, 3], 0.5);
    let points: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]).collect();
    let mut keypoints = Keypoints2D::from_points(points);
    keypoints.visible[1] = false;
    for (name, arch) in [("regressor_graph_loss", Architecture::Graph), ("regressor_fc_loss", Architecture::Fc)] {
        let mut model = toy_regressor(arch, &body, rng.random())?;
        jitter(model.params_mut(), rng, 0.05);
        let store = model.params().clone();
        let (b, gt, kp) = (body.clone(), gt.clone(), keypoints.clone());
        v.push(param_check(name, &store, vec![image.clone()], model, move |m, t, p, x| {
            let out = m.forward(t, p, x[0])?;
            Ok(total_loss(t, b.joint_regressor(), out.mesh, out.camera, Some(&gt), &kp, false)?.total)
        }));
    }

    let mlp_config = ParamMlpConfig { coarse_vertices: 6, hidden: vec![10], joints: 4, betas: 2 };
    let mut mlp = ParamRegressorMlp::new(mlp_config, rng.random())?;
    jitter(mlp.params_mut(), rng, 0.05);
    let store = mlp.params().clone();
    let params = crate::synth::sample_params(rng, &Default::default(), 4, 2).to_matrix_form();
    let target_mesh = Tensor::new([12, 3], body.lbs_forward(&params)?)?;
    let cam = Tensor::new([1, 3], vec![0.9, 0.05, -0.1])?;
    let b = body.clone();
    v.push(param_check("param_mlp_loss", &store, vec![normal(rng, &[6, 3], 0.5)], mlp, move |m, t, p, x| {
        let out = m.forward(t, p, x[0])?;
        let cam = t.constant(cam.clone());
        let target = ParamTarget { params: &params, mesh: &target_mesh, keypoints: &keypoints };
        let vars = ParamVars { rotations: out.params.rotations, beta: out.params.beta };
        Ok(smpl_stage_loss(t, &b, vars, cam, &target, LossWeights::default())?.total)
    }));
    Ok(v)
}

/// Runs the checks of a scope in a fixed order.
pub fn run_suite(scope: Scope, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<(Check, f64, f64)> = Vec::new();
    let mut outcomes = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        checks.extend(op_checks(&mut rng).into_iter().map(|c| (c, OP_TOLERANCE, 0.0)));
    }
    if matches!(scope, Scope::Model | Scope::All) {
        match model_checks(&mut rng) {
            Ok(c) => checks.extend(c.into_iter().map(|c| (c, MODEL_TOLERANCE, MODEL_FLOOR_FRACTION))),
            Err(e) => outcomes.push(CheckOutcome { name: "model_setup", tolerance: MODEL_TOLERANCE, report: Err(e.to_string()) }),
        }
    }
    for (c, tolerance, floor) in checks {
        let report = grad_check_scaled(&c.f, &c.inputs, DEFAULT_STEP, floor).map_err(|e| e.to_string());
        outcomes.push(CheckOutcome { name: c.name, tolerance, report });
    }
    outcomes
}
