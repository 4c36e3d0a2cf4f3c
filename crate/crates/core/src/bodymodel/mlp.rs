//! MLP regressing pose rotations and shape coefficients from a coarse mesh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::ParamVars;
use crate::regressor::{Bound, Linear, ParamStore};

use super::params::BodyParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamMlpConfig {
    pub coarse_vertices: usize,
    pub hidden: Vec<usize>,
    pub joints: usize,
    pub betas: usize,
}

impl ParamMlpConfig {
    pub fn outputs(&self) -> usize {
        9 * self.joints + self.betas
    }
}

/// Output of one forward pass on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamMlpOutput {
    pub params: ParamVars,
    /// Joints whose raw 3×3 block had a degenerate projection.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegressorMlp {
    config: ParamMlpConfig,
    store: ParamStore,
    layers: Vec<Linear>,
}

/// Prefix of every MLP parameter name.
pub const MLP_PREFIX: &str = "mlp.";

impl ParamRegressorMlp {
    pub fn new(config: ParamMlpConfig, seed: u64) -> Result<Self> {
        if config.coarse_vertices == 0 || config.joints == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("parameter MLP needs positive sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = 3 * config.coarse_vertices;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(Linear::new(&mut store, &format!("mlp.hidden{i}"), width, h, 2.0, &mut rng));
            width = h;
        }
        let out = Linear::new(&mut store, "mlp.output", width, config.outputs(), 0.01, &mut rng);
        // Start at identity rotations and the mean shape.
        let bias = BodyParams::identity(config.joints, config.betas);
        let mut b = bias.rotation_rows().into_data();
        b.extend(bias.beta);
        *store.get_mut(out.b) = Tensor::new([1, config.outputs()], b)?;
        layers.push(out);
        Ok(ParamRegressorMlp { config, store, layers })
    }

    pub fn config(&self) -> &ParamMlpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Maps an `N_c×3` coarse mesh to SO(3)-projected `J×9` rotation rows
    /// and a `1×B` shape row.
    pub fn forward(&self, tape: &Tape, p: &Bound, coarse: Var) -> Result<ParamMlpOutput> {
        let shape = tape.shape(coarse);
        if shape != [self.config.coarse_vertices, 3] {
            return Err(Error::shape(
                "param_mlp_forward",
                format!("expected {}×3 coarse vertices, got {shape:?}", self.config.coarse_vertices),
            ));
        }
        let mut x = tape.reshape(coarse, &[1, 3 * self.config.coarse_vertices])?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, p, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        let j9 = 9 * self.config.joints;
        let parts = tape.split_cols(x, &[j9, self.config.betas])?;
        let raw = tape.reshape(parts[0], &[self.config.joints, 9])?;
        let (rotations, degenerate) = tape.so3_project_rows(raw)?;
        Ok(ParamMlpOutput { params: ParamVars { rotations, beta: parts[1] }, degenerate })
    }

    /// Forward pass without gradients, in matrix form.
    pub fn predict(&self, coarse: &[f64]) -> Result<BodyParams> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let x = tape.constant(Tensor::new([coarse.len() / 3, 3], coarse.to_vec())?);
        let out = self.forward(&tape, &p, x)?;
        let rows = tape.value(out.params.rotations).clone();
        let beta = tape.value(out.params.beta).data().to_vec();
        BodyParams::from_rotation_rows(&rows, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_rotations_for_any_weights() {
        let config = ParamMlpConfig { coarse_vertices: 10, hidden: vec![16, 16], joints: 4, betas: 2 };
        let mut mlp = ParamRegressorMlp::new(config, 5).unwrap();
        // Scramble the weights far from initialization.
        for (i, v) in mlp.params_mut().values_mut().iter_mut().enumerate() {
            for (j, x) in v.data_mut().iter_mut().enumerate() {
                *x = ((i * 31 + j * 17) as f64 * 0.61).sin() * 3.0;
            }
        }
        let coarse: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).cos()).collect();
        let params = mlp.predict(&coarse).unwrap();
        assert_eq!(params.beta.len(), 2);
        params.check_so3(1e-9).unwrap();
    }

    #[test]
    fn wrong_input_size_rejected() {
        let config = ParamMlpConfig { coarse_vertices: 10, hidden: vec![8], joints: 4, betas: 2 };
        let mlp = ParamRegressorMlp::new(config, 5).unwrap();
        assert!(mlp.predict(&[0.0; 27]).is_err());
    }
}
