use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GanError, OutputActivation};
use crate::ndgrad::{Array, GradError, ParamSet, Tape, Tensor};

const LEAKY_SLOPE: f64 = 0.2;
const MODEL_FORMAT: &str = "defectforge-generator";

/// Layer widths and output mapping of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: OutputActivation,
}

impl MlpSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

/// Leaky-ReLU MLP with parameters `l{i}.w` (`[in, out]`) and `l{i}.b` (`[1, out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    /// Weights uniform in `±sqrt(6 / fan_in)`, biases uniform in `±1 / sqrt(fan_in)`.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let widths = spec.widths();
        let mut params = ParamSet::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params
                .insert(format!("l{i}.w"), Array::new(vec![fan_in, fan_out], w).expect("layer shape"))
                .expect("fresh name");
            let bb = 1.0 / (fan_in as f64).sqrt();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bb..bb)).collect();
            params
                .insert(format!("l{i}.b"), Array::new(vec![1, fan_out], b).expect("bias shape"))
                .expect("fresh name");
        }
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: ParamSet) -> Result<Self, GanError> {
        let mut expected = ParamSet::new();
        for (i, pair) in spec.widths().windows(2).enumerate() {
            expected.insert(format!("l{i}.w"), Array::zeros(&[pair[0], pair[1]]))?;
            expected.insert(format!("l{i}.b"), Array::zeros(&[1, pair[1]]))?;
        }
        params
            .check_compatible(&expected)
            .map_err(|e| GanError::ModelFormat(e.to_string()))?;
        Ok(Self { spec, params })
    }

    /// Parameters as fresh leaves on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        self.wrap(crate::ndgrad::bind(tape, &self.params))
    }

    /// Parameters as untracked constants.
    pub fn constants(&self) -> BoundMlp {
        self.wrap(self.params.iter().map(|(_, a)| Tensor::constant(a.clone())).collect())
    }

    fn wrap(&self, tensors: Vec<Tensor>) -> BoundMlp {
        BoundMlp {
            tensors,
            activation: self.spec.activation,
        }
    }

    /// Untracked forward pass on a `[m, input]` batch.
    pub fn forward(&self, x: &Array) -> Result<Array, GradError> {
        Ok(self.constants().forward(&Tensor::constant(x.clone()))?.value().clone())
    }
}

/// An [`Mlp`]'s parameters as tensors, ready to run on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    tensors: Vec<Tensor>,
    activation: OutputActivation,
}

impl BoundMlp {
    pub fn params(&self) -> Vec<&Tensor> {
        self.tensors.iter().collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, GradError> {
        let m = x.shape()[0];
        let ones = Tensor::constant(Array::full(&[m, 1], 1.0));
        let layers = self.tensors.len() / 2;
        let mut h = x.clone();
        for i in 0..layers {
            let (w, b) = (&self.tensors[2 * i], &self.tensors[2 * i + 1]);
            h = h.matmul(w)?.add(&ones.matmul(b)?)?;
            if i + 1 < layers {
                h = h.leaky_relu(LEAKY_SLOPE)?;
            }
        }
        match self.activation {
            OutputActivation::Linear => Ok(h),
            OutputActivation::TanhUnit => h.tanh()?.add_scalar(1.0)?.scale(0.5),
        }
    }
}

/// Anything that scores a `[m, d]` batch with a `[m, 1]` column.
pub trait Critic {
    fn score(&self, x: &Tensor) -> Result<Tensor, GradError>;
}

impl Critic for BoundMlp {
    fn score(&self, x: &Tensor) -> Result<Tensor, GradError> {
        self.forward(x)
    }
}

/// `D(x) = x · w` with `w` of shape `[d, 1]`.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    pub w: Tensor,
}

impl Critic for LinearCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor, GradError> {
        x.matmul(&self.w)
    }
}

/// Critic network `ω`: patch pixels to one unbounded score.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub mlp: Mlp,
}

impl CriticNet {
    pub fn init(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec {
            input,
            hidden: hidden.to_vec(),
            output: 1,
            activation: OutputActivation::Linear,
        };
        Self { mlp: Mlp::init(spec, rng) }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    z_dim: usize,
    patch_h: usize,
    patch_w: usize,
    hidden: Vec<usize>,
    activation: OutputActivation,
    class: Option<String>,
}

/// Generator network `θ`: noise of width `z_dim` to `patch_h * patch_w` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub mlp: Mlp,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Defect class the generator was trained on.
    pub class_label: Option<String>,
}

impl GeneratorNet {
    pub fn init(
        z_dim: usize,
        hidden: &[usize],
        patch_h: usize,
        patch_w: usize,
        activation: OutputActivation,
        rng: &mut impl Rng,
    ) -> Self {
        let spec = MlpSpec {
            input: z_dim,
            hidden: hidden.to_vec(),
            output: patch_h * patch_w,
            activation,
        };
        Self {
            mlp: Mlp::init(spec, rng),
            patch_h,
            patch_w,
            class_label: None,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.mlp.spec.input
    }

    /// Maps a `[m, z_dim]` noise batch to `[m, patch pixels]`.
    pub fn generate(&self, z: &Array) -> Result<Array, GradError> {
        self.mlp.forward(z)
    }

    /// One JSON header line describing the architecture, then the parameter container.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), GanError> {
        let header = ModelHeader {
            format: MODEL_FORMAT.to_string(),
            z_dim: self.z_dim(),
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            hidden: self.mlp.spec.hidden.clone(),
            activation: self.mlp.spec.activation,
            class: self.class_label.clone(),
        };
        let line = serde_json::to_string(&header).expect("header serializes");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        self.mlp.params.write_to(&mut w).map_err(|e| GanError::ModelFormat(e.to_string()))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: impl Read) -> Result<Self, GanError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: ModelHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| GanError::ModelFormat(format!("header: {e}")))?;
        if header.format != MODEL_FORMAT {
            return Err(GanError::ModelFormat(format!("unknown format `{}`", header.format)));
        }
        let params = ParamSet::read_from(r).map_err(|e| GanError::ModelFormat(e.to_string()))?;
        let spec = MlpSpec {
            input: header.z_dim,
            hidden: header.hidden,
            output: header.patch_h * header.patch_w,
            activation: header.activation,
        };
        Ok(Self {
            mlp: Mlp::from_params(spec, params)?,
            patch_h: header.patch_h,
            patch_w: header.patch_w,
            class_label: header.class,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GanError> {
        Self::read_from(bytes)
    }
}
