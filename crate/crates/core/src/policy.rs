//! Three-layer perceptron mapping normalized ray distances to driving
//! commands, with Gaussian parameter mutation and a compact binary format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::vehicle::ControlCommand;

/// File magic for serialized policies.
pub const POLICY_MAGIC: &[u8; 5] = b"RLEV1";

/// `[inputs, hidden1, hidden2, outputs]`.
pub type LayerSizes = [usize; 4];

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("expected {expected} inputs, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("invalid layer sizes {0:?}: widths must be positive and the output width 2")]
    InvalidSizes(Vec<usize>),
    #[error("malformed policy file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major, one row per output unit.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply_tanh(&self, input: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs)) {
            *o = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
        for (o, b) in out.iter_mut().zip(&self.biases) {
            *o = (*o + b).tanh();
        }
    }
}

/// Feed-forward network with two tanh hidden layers and a tanh output pair
/// `(steer, throttle)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    sizes: LayerSizes,
    layers: [Dense; 3],
}

/// Reusable activation buffers for [`MlpPolicy::forward_with`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn check_sizes(sizes: &LayerSizes) -> Result<(), PolicyError> {
    if sizes.contains(&0) || sizes[3] != 2 {
        return Err(PolicyError::InvalidSizes(sizes.to_vec()));
    }
    Ok(())
}

impl MlpPolicy {
    /// Default architecture for `n_inputs` rays.
    pub fn default_sizes(n_inputs: usize) -> LayerSizes {
        [n_inputs, DEFAULT_HIDDEN, DEFAULT_HIDDEN, 2]
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: LayerSizes) -> Result<Self, PolicyError> {
        check_sizes(&sizes)?;
        Ok(MlpPolicy {
            sizes,
            layers: [
                Dense::zeros(sizes[0], sizes[1]),
                Dense::zeros(sizes[1], sizes[2]),
                Dense::zeros(sizes[2], sizes[3]),
            ],
        })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero. Deterministic in
    /// `seed`.
    pub fn random_init(seed: u64, sizes: LayerSizes) -> Result<Self, PolicyError> {
        let mut policy = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut policy.layers {
            let normal = Normal::new(0.0, 1.0 / (layer.inputs as f64).sqrt())
                .expect("positive standard deviation");
            for w in &mut layer.weights {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(policy)
    }

    pub fn sizes(&self) -> LayerSizes {
        self.sizes
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters in file order: per layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Rebuilds a policy from [`parameters`](Self::parameters) output.
    pub fn from_parameters(sizes: LayerSizes, params: &[f64]) -> Result<Self, PolicyError> {
        let mut policy = Self::zeros(sizes)?;
        if params.len() != policy.num_parameters() {
            return Err(PolicyError::Format(format!(
                "{} parameters for sizes {sizes:?}, expected {}",
                params.len(),
                policy.num_parameters()
            )));
        }
        let mut it = params.iter().copied();
        policy.for_each_parameter_mut(|p| *p = it.next().unwrap_or_default());
        Ok(policy)
    }

    fn for_each_parameter_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(&mut f);
            l.biases.iter_mut().for_each(&mut f);
        }
    }

    /// Evaluates the network. Inputs should already be divided by the
    /// sensor range cap.
    pub fn forward(&self, inputs: &[f64]) -> Result<ControlCommand, PolicyError> {
        self.forward_with(inputs, &mut Scratch::default())
    }

    pub fn forward_with(
        &self,
        inputs: &[f64],
        scratch: &mut Scratch,
    ) -> Result<ControlCommand, PolicyError> {
        if inputs.len() != self.sizes[0] {
            return Err(PolicyError::InputLength {
                expected: self.sizes[0],
                got: inputs.len(),
            });
        }
        scratch.h1.resize(self.sizes[1], 0.0);
        scratch.h2.resize(self.sizes[2], 0.0);
        let mut out = [0.0; 2];
        self.layers[0].apply_tanh(inputs, &mut scratch.h1);
        self.layers[1].apply_tanh(&scratch.h1, &mut scratch.h2);
        self.layers[2].apply_tanh(&scratch.h2, &mut out);
        Ok(ControlCommand::new(out[0], out[1]))
    }

    /// A copy with every weight and bias perturbed by independent
    /// `N(0, sigma²)` noise. Deterministic in `(self, sigma, seed)`.
    pub fn mutate(&self, sigma: f64, seed: u64) -> MlpPolicy {
        let mut child = self.clone();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            child.for_each_parameter_mut(|p| *p += normal.sample(&mut rng));
        }
        child
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * 5 + 8 * self.num_parameters());
        out.extend_from_slice(POLICY_MAGIC);
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for s in self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for p in self.parameters() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let rest = bytes
            .strip_prefix(POLICY_MAGIC.as_slice())
            .ok_or_else(|| PolicyError::Format("missing RLEV1 magic".into()))?;
        let (count, mut rest) = take_u32(rest)?;
        if count != 4 {
            return Err(PolicyError::Format(format!(
                "expected 4 layer sizes, found {count}"
            )));
        }
        let mut sizes = [0usize; 4];
        for s in &mut sizes {
            let (v, r) = take_u32(rest)?;
            *s = v as usize;
            rest = r;
        }
        check_sizes(&sizes)?;
        if rest.len() % 8 != 0 {
            return Err(PolicyError::Format("trailing bytes".into()));
        }
        let params: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::Format("non-finite parameter".into()));
        }
        Self::from_parameters(sizes, &params)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn take_u32(bytes: &[u8]) -> Result<(u32, &[u8]), PolicyError> {
    if bytes.len() < 4 {
        return Err(PolicyError::Format("truncated header".into()));
    }
    let (head, rest) = bytes.split_at(4);
    Ok((u32::from_le_bytes(head.try_into().expect("4 bytes")), rest))
}
