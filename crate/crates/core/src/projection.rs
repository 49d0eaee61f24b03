//! Pooling and projection of module representations into the shared
//! d-dimensional unit-sphere embedding space.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::model::{ArrayKind, Model, NamedArray, Parameter};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EMBED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One affine map.
    Linear,
    /// Affine, ReLU, affine; hidden width equals the input width.
    Mlp,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Mlp => "mlp",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::Config(format!("unknown head kind `{other}` (linear|mlp)"))),
        }
    }
}

/// Unit-norm embeddings tagged with the dataset indices they came from.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// `[B, d]`, unit rows.
    pub values: Tensor,
    pub sample_indices: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(values: Tensor, sample_indices: Vec<usize>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != sample_indices.len() {
            return Err(shape_err!(
                "{} indices for embeddings of shape {:?}",
                sample_indices.len(),
                values.shape()
            ));
        }
        Ok(Self { values, sample_indices })
    }

    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values.data()[i * d..(i + 1) * d]
    }
}

/// Global average pool followed by a reshape: `[B, o, k, k]` to `[B, o]`.
pub fn pool_and_flatten(rep: &Tensor) -> Result<Tensor> {
    if rep.rank() != 4 {
        return Err(shape_err!("pool_and_flatten expects rank 4, got {:?}", rep.shape()));
    }
    let (b, o) = (rep.shape()[0], rep.shape()[1]);
    tensor::reshape(&tensor::global_avg_pool(rep)?, &[b, o])
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    kind: HeadKind,
    input_dim: usize,
    output_dim: usize,
    /// `[w, b]` for linear, `[w1, b1, w2, b2]` for mlp.
    params: Vec<Parameter>,
}

fn linear_params(rng: &mut ChaCha8Rng, prefix: &str, suffix: &str, n: usize, k: usize) -> Result<[Parameter; 2]> {
    let bound = 1.0 / (n as f64).sqrt();
    let w = (0..n * k).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..k).map(|_| rng.random_range(-bound..bound)).collect();
    Ok([
        Parameter::new(format!("{prefix}.weight{suffix}"), w, &[n, k])?,
        Parameter::new(format!("{prefix}.bias{suffix}"), b, &[k])?,
    ])
}

impl ProjectionHead {
    /// A head with weights and biases drawn uniformly in `±1/sqrt(fan_in)`.
    pub fn new(kind: HeadKind, input_dim: usize, output_dim: usize, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Spec("projection dimensions must be positive".into()));
        }
        let params = match kind {
            HeadKind::Linear => linear_params(rng, name, "", input_dim, output_dim)?.into(),
            HeadKind::Mlp => {
                let [w1, b1] = linear_params(rng, name, "1", input_dim, input_dim)?;
                let [w2, b2] = linear_params(rng, name, "2", input_dim, output_dim)?;
                vec![w1, b1, w2, b2]
            }
        };
        Ok(Self { kind, input_dim, output_dim, params })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// The pre-normalization map: affine, or affine-ReLU-affine.
    pub fn raw(&self, flat: &Tensor) -> Result<Tensor> {
        if flat.rank() != 2 || flat.shape()[1] != self.input_dim {
            return Err(shape_err!(
                "projection head expects [B, {}], got {:?}",
                self.input_dim,
                flat.shape()
            ));
        }
        let p = &self.params;
        match self.kind {
            HeadKind::Linear => tensor::affine(flat, &p[0].tensor, Some(&p[1].tensor)),
            HeadKind::Mlp => {
                let hidden = tensor::relu(&tensor::affine(flat, &p[0].tensor, Some(&p[1].tensor))?);
                tensor::affine(&hidden, &p[2].tensor, Some(&p[3].tensor))
            }
        }
    }

    /// Projects `[B, n]` features and ℓ2-normalizes each row.
    pub fn project(&self, flat: &Tensor, sample_indices: &[usize]) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(tensor::l2_normalize(&self.raw(flat)?)?, sample_indices.to_vec())
    }
}

/// Teacher-side and student-side heads for one contrastive site.
#[derive(Debug, Clone)]
pub struct HeadPair {
    pub teacher: ProjectionHead,
    pub student: ProjectionHead,
}

/// One head pair per module plus one for the penultimate vectors.
#[derive(Debug, Clone)]
pub struct HeadSet {
    pub modules: Vec<HeadPair>,
    pub penultimate: HeadPair,
}

/// Builds `M + 1` independently initialized, trainable head pairs.
pub fn make_heads(
    teacher_dims: &[usize],
    student_dims: &[usize],
    penultimate_dims: (usize, usize),
    embed_dim: usize,
    kind: HeadKind,
    seed: u64,
) -> Result<HeadSet> {
    if teacher_dims.len() != student_dims.len() {
        return Err(Error::Spec(format!(
            "teacher has {} modules, student has {}",
            teacher_dims.len(),
            student_dims.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = |t: usize, s: usize, site: &str| -> Result<HeadPair> {
        Ok(HeadPair {
            teacher: ProjectionHead::new(kind, t, embed_dim, &format!("heads.{site}.teacher"), &mut rng)?,
            student: ProjectionHead::new(kind, s, embed_dim, &format!("heads.{site}.student"), &mut rng)?,
        })
    };
    let modules = teacher_dims
        .iter()
        .zip(student_dims)
        .enumerate()
        .map(|(m, (&t, &s))| pair(t, s, &format!("module{m}")))
        .collect::<Result<Vec<_>>>()?;
    let penultimate = pair(penultimate_dims.0, penultimate_dims.1, "penultimate")?;
    Ok(HeadSet { modules, penultimate })
}

impl HeadSet {
    /// Heads sized for a teacher/student pair.
    pub fn for_models(teacher: &Model, student: &Model, embed_dim: usize, kind: HeadKind, seed: u64) -> Result<Self> {
        let dims = |m: &Model| (0..m.num_modules()).map(|i| m.module_channels(i)).collect::<Vec<_>>();
        make_heads(
            &dims(teacher),
            &dims(student),
            (teacher.penultimate_dim(), student.penultimate_dim()),
            embed_dim,
            kind,
            seed,
        )
    }

    fn pairs(&self) -> impl Iterator<Item = &HeadPair> {
        self.modules.iter().chain(std::iter::once(&self.penultimate))
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.pairs()
            .flat_map(|p| p.teacher.parameters().iter().chain(p.student.parameters()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.modules
            .iter_mut()
            .chain(std::iter::once(&mut self.penultimate))
            .flat_map(|p| p.teacher.parameters_mut().chain(p.student.parameters_mut()))
            .collect()
    }

    pub fn student_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.modules
            .iter_mut()
            .chain(std::iter::once(&mut self.penultimate))
            .flat_map(|p| p.student.parameters_mut())
            .collect()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.tensor.zero_grad();
        }
    }

    /// Checkpoint arrays, all marked discardable.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.parameters()
            .into_iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                kind: ArrayKind::Head,
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.to_vec(),
            })
            .collect()
    }
}
