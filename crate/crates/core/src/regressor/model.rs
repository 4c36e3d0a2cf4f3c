//! The mesh regressor: image encoder, graph CNN on the coarse template and
//! camera head, plus the fully connected baseline sharing the same encoder.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::meshgraph::{build_adjacency, coarsen, CoarseningPair, SparseMatrix, TemplateMesh};
use crate::metrics::CameraParams;

use super::encoder::{Encoder, EncoderConfig};
use super::layers::{camera_raw_scale, GraphResidualBlock, GroupNormLayer, Linear};
use super::params::{Bound, ParamStore};

/// Template, its coarsening and the coarse graph the regressor runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    template: TemplateMesh,
    coarse_mesh: TemplateMesh,
    down: Arc<SparseMatrix>,
    up: Arc<SparseMatrix>,
    coarse_adjacency: Arc<SparseMatrix>,
}

impl MeshTopology {
    pub fn new(template: TemplateMesh, factor: f64) -> Result<Self> {
        let pair = coarsen(&template, factor)?;
        Ok(Self::from_pair(template, pair))
    }

    pub fn from_pair(template: TemplateMesh, pair: CoarseningPair) -> Self {
        let adj = build_adjacency(&pair.coarse_mesh).into_matrix();
        MeshTopology {
            template,
            coarse_mesh: pair.coarse_mesh,
            down: Arc::new(pair.down),
            up: Arc::new(pair.up),
            coarse_adjacency: Arc::new(adj),
        }
    }

    pub fn template(&self) -> &TemplateMesh {
        &self.template
    }

    pub fn coarse_mesh(&self) -> &TemplateMesh {
        &self.coarse_mesh
    }

    pub fn down(&self) -> &Arc<SparseMatrix> {
        &self.down
    }

    pub fn up(&self) -> &Arc<SparseMatrix> {
        &self.up
    }

    pub fn coarse_adjacency(&self) -> &Arc<SparseMatrix> {
        &self.coarse_adjacency
    }

    pub fn num_vertices(&self) -> usize {
        self.template.num_vertices()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_mesh.num_vertices()
    }

    /// Coarse template coordinates as an `N_c×3` tensor.
    pub fn coarse_template(&self) -> Tensor {
        Tensor::new([self.num_coarse(), 3], self.coarse_mesh.flat_vertices()).unwrap()
    }

    /// Selects coarse vertices of a flat `N×3` mesh with `D`.
    pub fn downsample(&self, vertices: &[f64]) -> Result<Vec<f64>> {
        crate::meshgraph::sparse_dense_multiply(&self.down, vertices, self.num_vertices(), 3)
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        let put_mesh = |c: &mut Container, name: &str, m: &TemplateMesh| {
            c.put_f64(format!("{prefix}{name}/vertices"), vec![m.num_vertices(), 3], m.flat_vertices()).unwrap();
            let f: Vec<i64> = m.faces().iter().flatten().map(|&i| i as i64).collect();
            c.put_i64(format!("{prefix}{name}/faces"), vec![m.num_faces(), 3], f).unwrap();
        };
        put_mesh(c, "template", &self.template);
        put_mesh(c, "coarse", &self.coarse_mesh);
        c.put_sparse(&format!("{prefix}down"), &self.down);
        c.put_sparse(&format!("{prefix}up"), &self.up);
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let get_mesh = |name: &str| -> Result<TemplateMesh> {
            let v = c.tensor(&format!("{prefix}{name}/vertices"))?;
            let f = c.usizes(&format!("{prefix}{name}/faces"))?;
            TemplateMesh::new(
                v.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
                f.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect(),
            )
        };
        let template = get_mesh("template")?;
        let coarse_mesh = get_mesh("coarse")?;
        let down = c.sparse(&format!("{prefix}down"))?;
        let up = c.sparse(&format!("{prefix}up"))?;
        let kept = (0..down.rows()).map(|r| down.row(r).0[0]).collect();
        Ok(Self::from_pair(template, CoarseningPair { down, up, coarse_mesh, kept }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Graph,
    Fc,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Graph => "graph",
            Architecture::Fc => "fc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Architecture::Graph),
            "fc" => Ok(Architecture::Fc),
            _ => Err(Error::Config(format!("unknown architecture '{s}' (expected graph or fc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    pub architecture: Architecture,
    pub channels: usize,
    pub blocks: usize,
    /// Normalization groups at full width; the bottleneck keeps the same
    /// number of channels per group.
    pub groups: usize,
    /// Hidden width of the fully connected baseline; `None` matches the
    /// graph head's parameter count.
    pub fc_hidden: Option<usize>,
    pub encoder: EncoderConfig,
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!("channels {} must be a positive multiple of 4", self.channels)));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!("channels {} not divisible by {} groups", self.channels, self.groups)));
        }
        let per_group = self.channels / self.groups;
        if (self.channels / 4) % per_group != 0 {
            return Err(Error::Config(format!(
                "bottleneck width {} not divisible by group size {per_group}",
                self.channels / 4
            )));
        }
        if self.fc_hidden == Some(0) {
            return Err(Error::Config("fc hidden width must be positive".into()));
        }
        Ok(())
    }

    fn inner_groups(&self) -> usize {
        (self.channels / 4) / (self.channels / self.groups)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Graph { input: Linear, blocks: Vec<GraphResidualBlock>, norm: GroupNormLayer, output: Linear, camera: Linear },
    Fc { hidden1: Linear, hidden2: Linear, output: Linear, camera: Linear },
}

/// Tape variables produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RegressorOutput {
    /// Full-resolution mesh, `N×3`.
    pub mesh: Var,
    /// Coarse mesh before upsampling, `N_c×3`.
    pub coarse: Var,
    /// `1×3` `[s, tx, ty]` with `s > 0`.
    pub camera: Var,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mesh: Vec<f64>,
    pub coarse: Vec<f64>,
    pub camera: CameraParams,
}

/// Prefix of every encoder parameter name.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone, PartialEq)]
pub struct MeshRegressor {
    config: RegressorConfig,
    topology: Arc<MeshTopology>,
    store: ParamStore,
    encoder: Encoder,
    head: Head,
}

impl MeshRegressor {
    pub fn new(config: RegressorConfig, topology: Arc<MeshTopology>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", config.encoder.clone(), &mut rng)?;
        let nc = topology.num_coarse();
        let k = config.encoder.features;
        let head = match config.architecture {
            Architecture::Graph => {
                let c = config.channels;
                let input = Linear::new(&mut store, "graph.input", 3 + k, c, 1.0, &mut rng);
                let blocks = (0..config.blocks)
                    .map(|i| GraphResidualBlock::new(&mut store, &format!("graph.block{i}"), c, config.inner_groups(), &mut rng))
                    .collect();
                let norm = GroupNormLayer::new(&mut store, "graph.norm", c, config.groups);
                let output = Linear::new(&mut store, "graph.output", c, 3, 0.1, &mut rng);
                let camera = camera_head(&mut store, "graph.camera", c, &mut rng);
                Head::Graph { input, blocks, norm, output, camera }
            }
            Architecture::Fc => {
                let h = match config.fc_hidden {
                    Some(h) => h,
                    None => matched_fc_hidden(&config, &topology)?,
                };
                let hidden1 = Linear::new(&mut store, "fc.hidden1", k, h, 2.0, &mut rng);
                let hidden2 = Linear::new(&mut store, "fc.hidden2", h, h, 2.0, &mut rng);
                let output = Linear::new(&mut store, "fc.output", h, 3 * nc, 1.0, &mut rng);
                // Start from the coarse template, the same prior the graph
                // model receives through its input coordinates.
                *store.get_mut(output.b) = topology.coarse_template().reshaped([1, 3 * nc])?;
                let camera = camera_head(&mut store, "fc.camera", h, &mut rng);
                Head::Fc { hidden1, hidden2, output, camera }
            }
        };
        Ok(MeshRegressor { config, topology, store, encoder, head })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        &self.topology
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters outside the shared image encoder.
    pub fn head_parameter_count(&self) -> usize {
        self.store.num_scalars() - self.store.num_scalars_with_prefix(ENCODER_PREFIX)
    }

    pub fn encode(&self, tape: &Tape, p: &Bound, image: Var) -> Result<Var> {
        self.encoder.forward(tape, p, image)
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, image: Var) -> Result<RegressorOutput> {
        let f = self.encoder.forward(tape, p, image)?;
        let topo = &self.topology;
        let (coarse, cam_raw) = match &self.head {
            Head::Graph { input, blocks, norm, output, camera } => {
                let coords = tape.constant(topo.coarse_template());
                let x = tape.attach_features(f, coords)?;
                let mut x = input.forward(tape, p, x)?;
                for b in blocks {
                    x = b.forward(tape, p, topo.coarse_adjacency(), x)?;
                }
                let x = tape.relu(norm.forward(tape, p, x)?);
                let coarse = output.forward(tape, p, x)?;
                let pooled = tape.mean_over_rows(x)?;
                (coarse, camera.forward(tape, p, pooled)?)
            }
            Head::Fc { hidden1, hidden2, output, camera } => {
                let h = tape.relu(hidden1.forward(tape, p, f)?);
                let h = tape.relu(hidden2.forward(tape, p, h)?);
                let flat = output.forward(tape, p, h)?;
                let coarse = tape.reshape(flat, &[topo.num_coarse(), 3])?;
                (coarse, camera.forward(tape, p, h)?)
            }
        };
        let mesh = tape.sparse_matmul(topo.up(), coarse)?;
        let camera = tape.camera_activation(cam_raw)?;
        Ok(RegressorOutput { mesh, coarse, camera })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let img = tape.constant(image.clone());
        let out = self.forward(&tape, &p, img)?;
        let mesh = tape.value(out.mesh).data().to_vec();
        let coarse = tape.value(out.coarse).data().to_vec();
        let camera = CameraParams::from_slice(tape.value(out.camera).data())?;
        Ok(Prediction { mesh, coarse, camera })
    }
}

fn camera_head(store: &mut ParamStore, name: &str, inputs: usize, rng: &mut ChaCha8Rng) -> Linear {
    let lin = Linear::new(store, name, inputs, 3, 0.1, rng);
    // Start near the middle of the sampled camera scales.
    store.get_mut(lin.b).data_mut()[0] = camera_raw_scale(0.9);
    lin
}

/// Hidden width whose fully connected head has the parameter count closest
/// to the graph head's.
fn matched_fc_hidden(config: &RegressorConfig, topology: &Arc<MeshTopology>) -> Result<usize> {
    let graph = RegressorConfig { architecture: Architecture::Graph, ..config.clone() };
    let target = MeshRegressor::new(graph, Arc::clone(topology), 0)?.head_parameter_count();
    let k = config.encoder.features;
    let out = 3 * topology.num_coarse();
    let count = |h: usize| (k + 1) * h + (h + 1) * h + (h + 1) * out + (h + 1) * 3;
    let best = (1..=4096)
        .min_by_key(|&h| (count(h) as i64 - target as i64).unsigned_abs())
        .unwrap();
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgraph::primitives::icosphere;
    use crate::regressor::Pooling;

    fn toy(architecture: Architecture) -> MeshRegressor {
        let topo = Arc::new(MeshTopology::new(icosphere(1), 2.0).unwrap());
        let config = RegressorConfig {
            architecture,
            channels: 16,
            blocks: 2,
            groups: 4,
            fc_hidden: None,
            encoder: EncoderConfig {
                resolution: 8,
                in_channels: 1,
                widths: vec![4, 8],
                group_size: 4,
                pooling: Pooling::Flatten,
                features: 6,
            },
        };
        MeshRegressor::new(config, topo, 3).unwrap()
    }

    #[test]
    fn output_shapes_and_positive_scale() {
        for arch in [Architecture::Graph, Architecture::Fc] {
            let m = toy(arch);
            let img = Tensor::new([64, 1], (0..64).map(|i| ((i % 7) as f64) / 7.0).collect()).unwrap();
            let p = m.predict(&img).unwrap();
            assert_eq!(p.mesh.len(), 42 * 3);
            assert_eq!(p.coarse.len(), 21 * 3);
            assert!(p.camera.s > 0.0);
        }
    }

    #[test]
    fn fc_parameters_match_graph_head() {
        let g = toy(Architecture::Graph).head_parameter_count() as f64;
        let f = toy(Architecture::Fc).head_parameter_count() as f64;
        assert!((f / g - 1.0).abs() <= 0.1, "graph {g} fc {f}");
    }

    #[test]
    fn deterministic_initialization() {
        assert_eq!(toy(Architecture::Graph).params().digest(), toy(Architecture::Graph).params().digest());
    }

    #[test]
    fn topology_round_trip() {
        let topo = MeshTopology::new(icosphere(1), 2.0).unwrap();
        let mut c = Container::new();
        topo.write_to(&mut c, "t/");
        assert_eq!(MeshTopology::read_from(&c, "t/").unwrap(), topo);
    }

    #[test]
    fn bad_channel_configs_rejected() {
        let mut c = toy(Architecture::Graph).config().clone();
        c.channels = 18;
        assert!(c.validate().is_err());
        c.channels = 16;
        c.groups = 2;
        assert!(c.validate().is_err());
    }
}
