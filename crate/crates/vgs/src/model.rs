//! The two-branch embedding model.
//!
//! The speech branch runs a 1-D convolution over MFCC frames (valid
//! padding, linear activation), a stack of unidirectional GRU layers, and
//! two additive-attention pools: one over the first layer's states, one
//! over the last layer's. The two pooled vectors are combined with an
//! elementwise product and L2-normalized. The image branch is a single
//! linear projection of a precomputed feature vector, also L2-normalized.
//! Similarity between the branches is cosine distance.
//!
//! Every forward operation exists twice: a plain evaluation here, and a
//! recording variant on an [`autodiff::Tape`] used by training. Both share
//! the same input handling so they stay numerically aligned; a test pins
//! them together.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::{RngExt, SeedableRng};

use crate::autodiff::{Tape, Var};
use crate::containers::{self, TensorEntry};
use crate::dsp::MfccSequence;
use crate::{Result, VgsError};

/// Architecture sizes. `embed_dim` always equals `gru_units` because the
/// pooled state vectors are used directly as the speech embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub mfcc_dim: usize,
    pub conv_filters: usize,
    pub conv_len: usize,
    pub conv_stride: usize,
    pub gru_layers: usize,
    pub gru_units: usize,
    pub image_dim: usize,
    pub embed_dim: usize,
}

impl Default for ModelDims {
    /// Full-scale configuration.
    fn default() -> Self {
        ModelDims {
            mfcc_dim: 13,
            conv_filters: 64,
            conv_len: 6,
            conv_stride: 3,
            gru_layers: 5,
            gru_units: 512,
            image_dim: 4096,
            embed_dim: 512,
        }
    }
}

impl ModelDims {
    /// Desk-scale configuration used by the synthetic corpus experiments.
    pub fn toy(image_dim: usize) -> Self {
        ModelDims {
            mfcc_dim: 13,
            conv_filters: 32,
            conv_len: 6,
            conv_stride: 3,
            gru_layers: 5,
            gru_units: 64,
            image_dim,
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mfcc_dim", self.mfcc_dim),
            ("conv_filters", self.conv_filters),
            ("conv_len", self.conv_len),
            ("conv_stride", self.conv_stride),
            ("gru_layers", self.gru_layers),
            ("gru_units", self.gru_units),
            ("image_dim", self.image_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(VgsError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.embed_dim != self.gru_units {
            return Err(VgsError::Invalid(format!(
                "embed_dim {} must equal gru_units {}",
                self.embed_dim, self.gru_units
            )));
        }
        Ok(())
    }
}

/// One GRU layer. Gate equations, with `x` the input row and `h` the
/// previous state row:
///
/// ```text
/// z = sigmoid(x W_z + h U_z + b_z)
/// r = sigmoid(x W_r + h U_r + b_r)
/// c = tanh(x W_c + (r * h) U_c + b_c)
/// h' = (1 - z) * h + z * c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub update_x: Array2<f64>,
    pub reset_x: Array2<f64>,
    pub cand_x: Array2<f64>,
    pub update_h: Array2<f64>,
    pub reset_h: Array2<f64>,
    pub cand_h: Array2<f64>,
    pub update_b: Array2<f64>,
    pub reset_b: Array2<f64>,
    pub cand_b: Array2<f64>,
}

/// Additive attention: score each state row with `v . tanh(h W)`, softmax
/// the scores, and return the weighted sum of states.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub score_w: Array2<f64>,
    pub score_v: Array2<f64>,
}

/// All trainable tensors plus the dimensions that shape them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Flattened kernel, `(conv_len * mfcc_dim) x conv_filters`; row
    /// `j * mfcc_dim + k` is tap `j`, coefficient `k`.
    pub conv_kernel: Array2<f64>,
    pub conv_bias: Array2<f64>,
    pub gru: Vec<GruLayer>,
    pub attn_early: Attention,
    pub attn_late: Attention,
    pub image_w: Array2<f64>,
    pub image_b: Array2<f64>,
}

/// A unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f64>);

impl Embedding {
    /// Scales a vector to unit norm; zero or non-finite norm is an error.
    pub fn normalize(v: Array1<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(VgsError::DegenerateEmbedding);
        }
        Ok(Embedding(v / norm))
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        assert_eq!(self.dim(), other.dim(), "embedding dims differ");
        self.0.dot(&other.0)
    }
}

/// Cosine distance `1 - a . b` between unit embeddings; 0 for identical
/// directions, 2 for opposite.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> f64 {
    1.0 - a.dot(b)
}

fn uniform(rows: usize, cols: usize, rng: &mut rand::rngs::ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.05..0.05))
}

impl ModelParams {
    /// Seeded initialization: weights uniform in [-0.05, 0.05), biases
    /// zero. Tensors are filled in canonical order, so a seed pins every
    /// value.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(seed);
        let u = dims.gru_units;
        let conv_kernel = uniform(dims.conv_len * dims.mfcc_dim, dims.conv_filters, &mut rng);
        let conv_bias = Array2::zeros((1, dims.conv_filters));
        let mut gru = Vec::with_capacity(dims.gru_layers);
        for layer in 0..dims.gru_layers {
            let input = if layer == 0 { dims.conv_filters } else { u };
            gru.push(GruLayer {
                update_x: uniform(input, u, &mut rng),
                reset_x: uniform(input, u, &mut rng),
                cand_x: uniform(input, u, &mut rng),
                update_h: uniform(u, u, &mut rng),
                reset_h: uniform(u, u, &mut rng),
                cand_h: uniform(u, u, &mut rng),
                update_b: Array2::zeros((1, u)),
                reset_b: Array2::zeros((1, u)),
                cand_b: Array2::zeros((1, u)),
            });
        }
        let attn_early = Attention {
            score_w: uniform(u, u, &mut rng),
            score_v: uniform(u, 1, &mut rng),
        };
        let attn_late = Attention {
            score_w: uniform(u, u, &mut rng),
            score_v: uniform(u, 1, &mut rng),
        };
        let image_w = uniform(dims.image_dim, dims.embed_dim, &mut rng);
        let image_b = Array2::zeros((1, dims.embed_dim));
        Ok(ModelParams {
            dims: dims.clone(),
            conv_kernel,
            conv_bias,
            gru,
            attn_early,
            attn_late,
            image_w,
            image_b,
        })
    }

    /// All tensors in canonical order. Training state, checkpoints, and
    /// tape registration all follow this order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("conv.kernel".into(), &self.conv_kernel),
            ("conv.bias".into(), &self.conv_bias),
        ];
        for (i, layer) in self.gru.iter().enumerate() {
            out.push((format!("gru{i}.update_x"), &layer.update_x));
            out.push((format!("gru{i}.reset_x"), &layer.reset_x));
            out.push((format!("gru{i}.cand_x"), &layer.cand_x));
            out.push((format!("gru{i}.update_h"), &layer.update_h));
            out.push((format!("gru{i}.reset_h"), &layer.reset_h));
            out.push((format!("gru{i}.cand_h"), &layer.cand_h));
            out.push((format!("gru{i}.update_b"), &layer.update_b));
            out.push((format!("gru{i}.reset_b"), &layer.reset_b));
            out.push((format!("gru{i}.cand_b"), &layer.cand_b));
        }
        out.push(("attn_early.score_w".into(), &self.attn_early.score_w));
        out.push(("attn_early.score_v".into(), &self.attn_early.score_v));
        out.push(("attn_late.score_w".into(), &self.attn_late.score_w));
        out.push(("attn_late.score_v".into(), &self.attn_late.score_v));
        out.push(("image.weight".into(), &self.image_w));
        out.push(("image.bias".into(), &self.image_b));
        out
    }

    /// Mutable view of the tensors in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("conv.kernel".into(), &mut self.conv_kernel),
            ("conv.bias".into(), &mut self.conv_bias),
        ];
        for (i, layer) in self.gru.iter_mut().enumerate() {
            out.push((format!("gru{i}.update_x"), &mut layer.update_x));
            out.push((format!("gru{i}.reset_x"), &mut layer.reset_x));
            out.push((format!("gru{i}.cand_x"), &mut layer.cand_x));
            out.push((format!("gru{i}.update_h"), &mut layer.update_h));
            out.push((format!("gru{i}.reset_h"), &mut layer.reset_h));
            out.push((format!("gru{i}.cand_h"), &mut layer.cand_h));
            out.push((format!("gru{i}.update_b"), &mut layer.update_b));
            out.push((format!("gru{i}.reset_b"), &mut layer.reset_b));
            out.push((format!("gru{i}.cand_b"), &mut layer.cand_b));
        }
        out.push(("attn_early.score_w".into(), &mut self.attn_early.score_w));
        out.push(("attn_early.score_v".into(), &mut self.attn_early.score_v));
        out.push(("attn_late.score_w".into(), &mut self.attn_late.score_w));
        out.push(("attn_late.score_v".into(), &mut self.attn_late.score_v));
        out.push(("image.weight".into(), &mut self.image_w));
        out.push(("image.bias".into(), &mut self.image_b));
        out
    }

    /// Writes a checkpoint. The convolution kernel is stored with its
    /// logical rank-3 shape and the stride travels along as a scalar, so a
    /// checkpoint fully determines the architecture.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (name, tensor) in self.tensors() {
            let data: Vec<f64> = tensor.iter().cloned().collect();
            let dims = if name == "conv.kernel" {
                vec![
                    self.dims.conv_len as u32,
                    self.dims.mfcc_dim as u32,
                    self.dims.conv_filters as u32,
                ]
            } else if tensor.nrows() == 1 {
                vec![tensor.ncols() as u32]
            } else if tensor.ncols() == 1 && name.ends_with("score_v") {
                vec![tensor.nrows() as u32]
            } else {
                vec![tensor.nrows() as u32, tensor.ncols() as u32]
            };
            entries.push(TensorEntry {
                name,
                dims,
                data,
            });
        }
        entries.push(TensorEntry::scalar(
            "conv.stride",
            self.dims.conv_stride as f64,
        ));
        containers::write_checkpoint(path, &entries)
    }

    /// Reads a checkpoint written by [`ModelParams::save`], rebuilding the
    /// dimensions from the stored shapes and failing on any inconsistency.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = containers::read_checkpoint(path)?;
        let mut by_name: std::collections::BTreeMap<String, TensorEntry> = std::collections::BTreeMap::new();
        for e in entries {
            if by_name.insert(e.name.clone(), e).is_some() {
                return Err(VgsError::Shape("duplicate tensor name in checkpoint".into()));
            }
        }
        fn take(
            by_name: &mut std::collections::BTreeMap<String, TensorEntry>,
            name: &str,
        ) -> Result<TensorEntry> {
            by_name
                .remove(name)
                .ok_or_else(|| VgsError::Shape(format!("checkpoint is missing tensor {name}")))
        }

        let kernel = take(&mut by_name, "conv.kernel")?;
        if kernel.dims.len() != 3 {
            return Err(VgsError::Shape(format!(
                "conv.kernel must be rank 3, got {:?}",
                kernel.dims
            )));
        }
        let (conv_len, mfcc_dim, conv_filters) = (
            kernel.dims[0] as usize,
            kernel.dims[1] as usize,
            kernel.dims[2] as usize,
        );
        let stride_entry = take(&mut by_name, "conv.stride")?;
        let conv_stride = stride_entry.data[0] as usize;

        let matrix = |e: TensorEntry, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let expected: Vec<u32> = if rows == 1 && !e.name.contains("weight") {
                vec![cols as u32]
            } else {
                vec![rows as u32, cols as u32]
            };
            let ok = e.dims == expected
                || (e.dims.len() == 1 && rows == 1 && e.dims[0] as usize == cols)
                || (e.dims.len() == 1 && cols == 1 && e.dims[0] as usize == rows)
                || (e.dims.len() == 2
                    && e.dims[0] as usize == rows
                    && e.dims[1] as usize == cols)
                || (e.dims.len() == 3 && e.data.len() == rows * cols);
            if !ok {
                return Err(VgsError::Shape(format!(
                    "tensor {} has dims {:?}, expected {}x{}",
                    e.name, e.dims, rows, cols
                )));
            }
            Array2::from_shape_vec((rows, cols), e.data)
                .map_err(|_| VgsError::Shape(format!("tensor {} data length mismatch", e.name)))
        };

        let conv_kernel = matrix(kernel, conv_len * mfcc_dim, conv_filters)?;
        let conv_bias = matrix(take(&mut by_name, "conv.bias")?, 1, conv_filters)?;

        let gru_layers = by_name
            .keys()
            .filter(|k| k.starts_with("gru") && k.ends_with(".update_x"))
            .count();
        if gru_layers == 0 {
            return Err(VgsError::Shape("checkpoint has no GRU layers".into()));
        }
        let first_uh = by_name
            .get("gru0.update_h")
            .ok_or_else(|| VgsError::Shape("checkpoint is missing tensor gru0.update_h".into()))?;
        if first_uh.dims.len() != 2 {
            return Err(VgsError::Shape("gru0.update_h must be rank 2".into()));
        }
        let gru_units = first_uh.dims[0] as usize;

        let mut gru = Vec::with_capacity(gru_layers);
        for i in 0..gru_layers {
            let input = if i == 0 { conv_filters } else { gru_units };
            gru.push(GruLayer {
                update_x: matrix(take(&mut by_name, &format!("gru{i}.update_x"))?, input, gru_units)?,
                reset_x: matrix(take(&mut by_name, &format!("gru{i}.reset_x"))?, input, gru_units)?,
                cand_x: matrix(take(&mut by_name, &format!("gru{i}.cand_x"))?, input, gru_units)?,
                update_h: matrix(take(&mut by_name, &format!("gru{i}.update_h"))?, gru_units, gru_units)?,
                reset_h: matrix(take(&mut by_name, &format!("gru{i}.reset_h"))?, gru_units, gru_units)?,
                cand_h: matrix(take(&mut by_name, &format!("gru{i}.cand_h"))?, gru_units, gru_units)?,
                update_b: matrix(take(&mut by_name, &format!("gru{i}.update_b"))?, 1, gru_units)?,
                reset_b: matrix(take(&mut by_name, &format!("gru{i}.reset_b"))?, 1, gru_units)?,
                cand_b: matrix(take(&mut by_name, &format!("gru{i}.cand_b"))?, 1, gru_units)?,
            });
        }
        let attn_early = Attention {
            score_w: matrix(take(&mut by_name, "attn_early.score_w")?, gru_units, gru_units)?,
            score_v: matrix(take(&mut by_name, "attn_early.score_v")?, gru_units, 1)?,
        };
        let attn_late = Attention {
            score_w: matrix(take(&mut by_name, "attn_late.score_w")?, gru_units, gru_units)?,
            score_v: matrix(take(&mut by_name, "attn_late.score_v")?, gru_units, 1)?,
        };
        let image_entry = take(&mut by_name, "image.weight")?;
        if image_entry.dims.len() != 2 {
            return Err(VgsError::Shape("image.weight must be rank 2".into()));
        }
        let image_dim = image_entry.dims[0] as usize;
        let embed_dim = image_entry.dims[1] as usize;
        let image_w = matrix(image_entry, image_dim, embed_dim)?;
        let image_b = matrix(take(&mut by_name, "image.bias")?, 1, embed_dim)?;

        if !by_name.is_empty() {
            let extra: Vec<&String> = by_name.keys().collect();
            return Err(VgsError::Shape(format!(
                "checkpoint has unexpected tensors: {extra:?}"
            )));
        }

        let dims = ModelDims {
            mfcc_dim,
            conv_filters,
            conv_len,
            conv_stride,
            gru_layers,
            gru_units,
            image_dim,
            embed_dim,
        };
        dims.validate()?;
        let params = ModelParams {
            dims,
            conv_kernel,
            conv_bias,
            gru,
            attn_early,
            attn_late,
            image_w,
            image_b,
        };
        Ok(params)
    }
}

/// Unrolls MFCC frames into convolution patches: row `t` concatenates
/// frames `t*stride .. t*stride+len`.
fn im2col(frames: &Array2<f64>, len: usize, stride: usize) -> Array2<f64> {
    let t_out = (frames.nrows() - len) / stride + 1;
    let d = frames.ncols();
    let mut out = Array2::zeros((t_out, len * d));
    for t in 0..t_out {
        for j in 0..len {
            let src = frames.row(t * stride + j);
            out.slice_mut(s![t, j * d..(j + 1) * d]).assign(&src);
        }
    }
    out
}

fn check_speech_input(dims: &ModelDims, mfcc: &MfccSequence) -> Result<()> {
    if mfcc.dim() != dims.mfcc_dim {
        return Err(VgsError::Shape(format!(
            "mfcc dim {} does not match model input dim {}",
            mfcc.dim(),
            dims.mfcc_dim
        )));
    }
    if mfcc.len() < dims.conv_len {
        return Err(VgsError::TooShort {
            got: mfcc.len(),
            need: dims.conv_len,
            unit: "frames",
        });
    }
    Ok(())
}

/// Convolves MFCC frames with the model's kernel bank. Valid padding and a
/// linear activation: output has `(T - len) / stride + 1` rows.
pub fn conv1d_forward(params: &ModelParams, mfcc: &MfccSequence) -> Result<Array2<f64>> {
    check_speech_input(&params.dims, mfcc)?;
    let cols = im2col(mfcc.frames(), params.dims.conv_len, params.dims.conv_stride);
    Ok(cols.dot(&params.conv_kernel) + &params.conv_bias)
}

/// Runs one GRU layer over the input rows, starting from state `h0`.
pub fn gru_layer_forward(
    layer: &GruLayer,
    inputs: &Array2<f64>,
    h0: &Array1<f64>,
) -> Result<Array2<f64>> {
    let units = layer.update_h.nrows();
    if inputs.ncols() != layer.update_x.nrows() {
        return Err(VgsError::Shape(format!(
            "gru input dim {} does not match weight rows {}",
            inputs.ncols(),
            layer.update_x.nrows()
        )));
    }
    if h0.len() != units {
        return Err(VgsError::Shape(format!(
            "h0 len {} does not match {} units",
            h0.len(),
            units
        )));
    }
    let mut h = h0.to_owned().insert_axis(Axis(0));
    let mut out = Array2::zeros((inputs.nrows(), units));
    for t in 0..inputs.nrows() {
        let x = inputs.slice(s![t..t + 1, ..]);
        let z = (x.dot(&layer.update_x) + h.dot(&layer.update_h) + &layer.update_b)
            .mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let r = (x.dot(&layer.reset_x) + h.dot(&layer.reset_h) + &layer.reset_b)
            .mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let c = (x.dot(&layer.cand_x) + (&r * &h).dot(&layer.cand_h) + &layer.cand_b)
            .mapv(f64::tanh);
        h = &h * &(1.0 - &z) + &z * &c;
        out.row_mut(t).assign(&h.row(0));
    }
    Ok(out)
}

/// Pools state rows into one vector with additive attention.
pub fn attention_pool(attn: &Attention, states: &Array2<f64>) -> Result<Array1<f64>> {
    if states.nrows() == 0 {
        return Err(VgsError::Invalid("attention over zero states".into()));
    }
    if states.ncols() != attn.score_w.nrows() {
        return Err(VgsError::Shape(format!(
            "state dim {} does not match attention dim {}",
            states.ncols(),
            attn.score_w.nrows()
        )));
    }
    let scores = states.dot(&attn.score_w).mapv(f64::tanh).dot(&attn.score_v);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|v| (v - max).exp());
    let total: f64 = exp.sum();
    let weights = exp / total;
    let mut pooled = Array1::zeros(states.ncols());
    for (t, row) in states.rows().into_iter().enumerate() {
        pooled = pooled + &row.to_owned() * weights[[t, 0]];
    }
    Ok(pooled)
}

/// Embeds an utterance: convolution, the GRU stack from zero states,
/// attention pools over the first and last layers, elementwise product,
/// unit norm.
pub fn encode_speech(params: &ModelParams, mfcc: &MfccSequence) -> Result<Embedding> {
    check_speech_input(&params.dims, mfcc)?;
    let mut states = conv1d_forward(params, mfcc)?;
    let h0 = Array1::zeros(params.dims.gru_units);
    let mut early = None;
    for (i, layer) in params.gru.iter().enumerate() {
        states = gru_layer_forward(layer, &states, &h0)?;
        if i == 0 {
            early = Some(attention_pool(&params.attn_early, &states)?);
        }
    }
    let early = early.expect("at least one GRU layer");
    let late = attention_pool(&params.attn_late, &states)?;
    Embedding::normalize(early * late)
}

/// Embeds an image feature vector: linear projection, unit norm.
pub fn encode_image(params: &ModelParams, features: &Array1<f64>) -> Result<Embedding> {
    if features.len() != params.dims.image_dim {
        return Err(VgsError::Shape(format!(
            "feature dim {} does not match model image dim {}",
            features.len(),
            params.dims.image_dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(VgsError::Invalid("non-finite image feature".into()));
    }
    let projected = features.dot(&params.image_w) + &params.image_b.row(0);
    Embedding::normalize(projected)
}

/// Leaf handles for every parameter tensor on a tape, in canonical order.
pub struct TapeParams {
    pub vars: Vec<Var>,
    dims: ModelDims,
}

impl TapeParams {
    /// Registers all tensors of `params` as leaves, in the same order as
    /// [`ModelParams::tensors`].
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .map(|(_, tensor)| tape.leaf(tensor.clone()))
            .collect();
        TapeParams {
            vars,
            dims: params.dims.clone(),
        }
    }

    fn conv_kernel(&self) -> Var {
        self.vars[0]
    }
    fn conv_bias(&self) -> Var {
        self.vars[1]
    }
    fn gru(&self, layer: usize, tensor: usize) -> Var {
        self.vars[2 + layer * 9 + tensor]
    }
    fn attn_early(&self) -> (Var, Var) {
        let base = 2 + self.dims.gru_layers * 9;
        (self.vars[base], self.vars[base + 1])
    }
    fn attn_late(&self) -> (Var, Var) {
        let base = 2 + self.dims.gru_layers * 9;
        (self.vars[base + 2], self.vars[base + 3])
    }
    fn image(&self) -> (Var, Var) {
        let base = 2 + self.dims.gru_layers * 9;
        (self.vars[base + 4], self.vars[base + 5])
    }
}

fn tape_attention(tape: &mut Tape, w: Var, v: Var, states: Var) -> Var {
    let hidden = tape.matmul(states, w);
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, v);
    let weights = tape.softmax(scores);
    let weights_row = tape.transpose(weights);
    tape.matmul(weights_row, states)
}

/// Recording version of [`encode_speech`]; returns the embedding node.
pub fn tape_encode_speech(
    tape: &mut Tape,
    tp: &TapeParams,
    mfcc: &MfccSequence,
) -> Result<Var> {
    check_speech_input(&tp.dims, mfcc)?;
    let cols = im2col(mfcc.frames(), tp.dims.conv_len, tp.dims.conv_stride);
    let cols = tape.leaf(cols);
    let conv = tape.matmul(cols, tp.conv_kernel());
    let mut states = tape.add_row_broadcast(conv, tp.conv_bias());
    let ones = tape.leaf(Array2::from_elem((1, tp.dims.gru_units), 1.0));
    let mut early = None;
    for layer in 0..tp.dims.gru_layers {
        let t_steps = tape.value(states).nrows();
        let (wz, wr, wc) = (tp.gru(layer, 0), tp.gru(layer, 1), tp.gru(layer, 2));
        let (uz, ur, uc) = (tp.gru(layer, 3), tp.gru(layer, 4), tp.gru(layer, 5));
        let (bz, br, bc) = (tp.gru(layer, 6), tp.gru(layer, 7), tp.gru(layer, 8));
        let mut h = tape.leaf(Array2::zeros((1, tp.dims.gru_units)));
        let mut rows = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let x = tape.row(states, t);
            let zx = tape.matmul(x, wz);
            let zh = tape.matmul(h, uz);
            let z = tape.add(zx, zh);
            let z = tape.add(z, bz);
            let z = tape.sigmoid(z);
            let rx = tape.matmul(x, wr);
            let rh = tape.matmul(h, ur);
            let r = tape.add(rx, rh);
            let r = tape.add(r, br);
            let r = tape.sigmoid(r);
            let cx = tape.matmul(x, wc);
            let gated = tape.mul(r, h);
            let ch = tape.matmul(gated, uc);
            let c = tape.add(cx, ch);
            let c = tape.add(c, bc);
            let c = tape.tanh(c);
            let keep = tape.sub(ones, z);
            let kept = tape.mul(keep, h);
            let new = tape.mul(z, c);
            h = tape.add(kept, new);
            rows.push(h);
        }
        states = tape.stack_rows(&rows);
        if layer == 0 {
            let (w, v) = tp.attn_early();
            early = Some(tape_attention(tape, w, v, states));
        }
    }
    let early = early.expect("at least one GRU layer");
    let (w, v) = tp.attn_late();
    let late = tape_attention(tape, w, v, states);
    let combined = tape.mul(early, late);
    tape.l2_normalize(combined)
}

/// Recording version of [`encode_image`]; returns the embedding node.
pub fn tape_encode_image(tape: &mut Tape, tp: &TapeParams, features: &Array1<f64>) -> Result<Var> {
    if features.len() != tp.dims.image_dim {
        return Err(VgsError::Shape(format!(
            "feature dim {} does not match model image dim {}",
            features.len(),
            tp.dims.image_dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(VgsError::Invalid("non-finite image feature".into()));
    }
    let f = tape.leaf(features.to_owned().insert_axis(Axis(0)));
    let (w, b) = tp.image();
    let projected = tape.matmul(f, w);
    let projected = tape.add(projected, b);
    tape.l2_normalize(projected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    type TestRng = rand::rngs::ChaCha8Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            mfcc_dim: 4,
            conv_filters: 5,
            conv_len: 3,
            conv_stride: 2,
            gru_layers: 2,
            gru_units: 6,
            image_dim: 7,
            embed_dim: 6,
        }
    }

    fn random_mfcc(frames: usize, dim: usize, seed: u64) -> MfccSequence {
        let mut rng = TestRng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((frames, dim), |_| rng.random_range(-1.0..1.0));
        MfccSequence::from_frames(m, 10).unwrap()
    }

    #[test]
    fn conv_output_length_follows_the_stride_formula() {
        let dims = ModelDims {
            mfcc_dim: 13,
            conv_len: 6,
            conv_stride: 3,
            ..ModelDims::toy(8)
        };
        let params = ModelParams::init(&dims, 1).unwrap();
        let out = conv1d_forward(&params, &random_mfcc(30, 13, 2)).unwrap();
        assert_eq!(out.nrows(), 9);
        let out = conv1d_forward(&params, &random_mfcc(6, 13, 3)).unwrap();
        assert_eq!(out.nrows(), 1);
    }

    #[test]
    fn conv_with_zero_kernel_emits_the_bias_everywhere() {
        let dims = tiny_dims();
        let mut params = ModelParams::init(&dims, 1).unwrap();
        params.conv_kernel.fill(0.0);
        params.conv_bias = Array2::from_shape_fn((1, dims.conv_filters), |(_, j)| j as f64 + 0.5);
        let out = conv1d_forward(&params, &random_mfcc(9, 4, 4)).unwrap();
        for row in out.rows() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, j as f64 + 0.5);
            }
        }
    }

    #[test]
    fn conv_rejects_utterances_shorter_than_the_kernel() {
        let params = ModelParams::init(&tiny_dims(), 1).unwrap();
        assert!(matches!(
            conv1d_forward(&params, &random_mfcc(2, 4, 5)),
            Err(VgsError::TooShort { .. })
        ));
    }

    #[test]
    fn gru_with_zero_everything_stays_at_zero() {
        let dims = tiny_dims();
        let params = ModelParams::init(&dims, 1).unwrap();
        let mut layer = params.gru[1].clone();
        for t in [
            &mut layer.update_x,
            &mut layer.reset_x,
            &mut layer.cand_x,
            &mut layer.update_h,
            &mut layer.reset_h,
            &mut layer.cand_h,
        ] {
            t.fill(0.0);
        }
        let inputs = Array2::from_elem((4, dims.gru_units), 0.3);
        let h0 = Array1::zeros(dims.gru_units);
        let out = gru_layer_forward(&layer, &inputs, &h0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_with_zero_weights_halves_a_ones_state() {
        // z = sigmoid(0) = 0.5 and the candidate is tanh(0) = 0, so the
        // first step yields exactly half the initial state.
        let dims = tiny_dims();
        let params = ModelParams::init(&dims, 1).unwrap();
        let mut layer = params.gru[1].clone();
        for t in [
            &mut layer.update_x,
            &mut layer.reset_x,
            &mut layer.cand_x,
            &mut layer.update_h,
            &mut layer.reset_h,
            &mut layer.cand_h,
        ] {
            t.fill(0.0);
        }
        let inputs = Array2::zeros((1, dims.gru_units));
        let h0 = Array1::ones(dims.gru_units);
        let out = gru_layer_forward(&layer, &inputs, &h0).unwrap();
        for &v in out.row(0) {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    /// Scalar-by-scalar reference of the gate equations, independent of
    /// the matrix implementation.
    fn scalar_gru(
        layer: &GruLayer,
        inputs: &Array2<f64>,
        h0: &Array1<f64>,
    ) -> Array2<f64> {
        let units = layer.update_h.nrows();
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h: Vec<f64> = h0.to_vec();
        let mut out = Array2::zeros((inputs.nrows(), units));
        for t in 0..inputs.nrows() {
            let mut z = vec![0.0; units];
            let mut r = vec![0.0; units];
            for j in 0..units {
                let mut az = layer.update_b[[0, j]];
                let mut ar = layer.reset_b[[0, j]];
                for k in 0..inputs.ncols() {
                    az += inputs[[t, k]] * layer.update_x[[k, j]];
                    ar += inputs[[t, k]] * layer.reset_x[[k, j]];
                }
                for k in 0..units {
                    az += h[k] * layer.update_h[[k, j]];
                    ar += h[k] * layer.reset_h[[k, j]];
                }
                z[j] = sigmoid(az);
                r[j] = sigmoid(ar);
            }
            let mut c = vec![0.0; units];
            for j in 0..units {
                let mut ac = layer.cand_b[[0, j]];
                for k in 0..inputs.ncols() {
                    ac += inputs[[t, k]] * layer.cand_x[[k, j]];
                }
                for k in 0..units {
                    ac += r[k] * h[k] * layer.cand_h[[k, j]];
                }
                c[j] = ac.tanh();
            }
            for j in 0..units {
                h[j] = (1.0 - z[j]) * h[j] + z[j] * c[j];
                out[[t, j]] = h[j];
            }
        }
        out
    }

    #[test]
    fn gru_matches_a_scalar_reference() {
        let mut rng = TestRng::seed_from_u64(9);
        let units = 2;
        let input_dim = 3;
        let rand2 = |rng: &mut TestRng, r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
        };
        let layer = GruLayer {
            update_x: rand2(&mut rng, input_dim, units),
            reset_x: rand2(&mut rng, input_dim, units),
            cand_x: rand2(&mut rng, input_dim, units),
            update_h: rand2(&mut rng, units, units),
            reset_h: rand2(&mut rng, units, units),
            cand_h: rand2(&mut rng, units, units),
            update_b: rand2(&mut rng, 1, units),
            reset_b: rand2(&mut rng, 1, units),
            cand_b: rand2(&mut rng, 1, units),
        };
        let inputs = rand2(&mut rng, 3, input_dim);
        let h0 = Array1::from_shape_fn(units, |_| rng.random_range(-1.0..1.0));
        let fast = gru_layer_forward(&layer, &inputs, &h0).unwrap();
        let slow = scalar_gru(&layer, &inputs, &h0);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_over_one_state_returns_that_state() {
        let params = ModelParams::init(&tiny_dims(), 3).unwrap();
        let mut rng = TestRng::seed_from_u64(10);
        let states = Array2::from_shape_fn((1, 6), |_| rng.random_range(-1.0..1.0));
        let pooled = attention_pool(&params.attn_early, &states).unwrap();
        for (a, b) in pooled.iter().zip(states.row(0).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_with_zero_scores_averages_the_states() {
        let mut params = ModelParams::init(&tiny_dims(), 3).unwrap();
        params.attn_early.score_w.fill(0.0);
        let mut rng = TestRng::seed_from_u64(11);
        let states = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let pooled = attention_pool(&params.attn_early, &states).unwrap();
        let mean = states.sum_axis(Axis(0)) / 5.0;
        for (a, b) in pooled.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_a_brute_force_evaluation() {
        let params = ModelParams::init(&tiny_dims(), 4).unwrap();
        let attn = &params.attn_late;
        let mut rng = TestRng::seed_from_u64(12);
        let states = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let pooled = attention_pool(attn, &states).unwrap();

        let mut scores = vec![0.0; 4];
        for (t, score) in scores.iter_mut().enumerate() {
            for j in 0..6 {
                let mut pre = 0.0;
                for k in 0..6 {
                    pre += states[[t, k]] * attn.score_w[[k, j]];
                }
                *score += pre.tanh() * attn.score_v[[j, 0]];
            }
        }
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut expected = vec![0.0; 6];
        for t in 0..4 {
            let w = scores[t].exp() / z;
            for (j, e) in expected.iter_mut().enumerate() {
                *e += w * states[[t, j]];
            }
        }
        for (a, b) in pooled.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn speech_embeddings_are_unit_norm_and_deterministic() {
        let params = ModelParams::init(&tiny_dims(), 5).unwrap();
        let mfcc = random_mfcc(12, 4, 6);
        let e1 = encode_speech(&params, &mfcc).unwrap();
        let e2 = encode_speech(&params, &mfcc).unwrap();
        let norm: f64 = e1.vector().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(e1.vector(), e2.vector());
    }

    #[test]
    fn tape_and_pure_speech_encoders_agree() {
        let params = ModelParams::init(&tiny_dims(), 7).unwrap();
        let mfcc = random_mfcc(11, 4, 8);
        let pure = encode_speech(&params, &mfcc).unwrap();
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let var = tape_encode_speech(&mut tape, &tp, &mfcc).unwrap();
        let taped = tape.value(var);
        assert_eq!(taped.nrows(), 1);
        for (a, b) in taped.row(0).iter().zip(pure.vector().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn tape_and_pure_image_encoders_agree() {
        let params = ModelParams::init(&tiny_dims(), 7).unwrap();
        let mut rng = TestRng::seed_from_u64(13);
        let features = Array1::from_shape_fn(7, |_| rng.random_range(-1.0..1.0));
        let pure = encode_image(&params, &features).unwrap();
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let var = tape_encode_image(&mut tape, &tp, &features).unwrap();
        for (a, b) in tape.value(var).row(0).iter().zip(pure.vector().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_registration_follows_canonical_tensor_order() {
        let params = ModelParams::init(&tiny_dims(), 8).unwrap();
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let tensors = params.tensors();
        assert_eq!(tp.vars.len(), tensors.len());
        for (&var, (_, tensor)) in tp.vars.iter().zip(tensors.iter()) {
            assert_eq!(tape.value(var), *tensor);
        }
    }

    #[test]
    fn image_encoder_with_zero_weights_returns_the_normalized_bias() {
        let dims = tiny_dims();
        let mut params = ModelParams::init(&dims, 9).unwrap();
        params.image_w.fill(0.0);
        params.image_b = Array2::from_shape_fn((1, 6), |(_, j)| j as f64 + 1.0);
        let features = Array1::ones(7);
        let e = encode_image(&params, &features).unwrap();
        let norm: f64 = (1..=6).map(|v| (v * v) as f64).sum::<f64>();
        let norm = norm.sqrt();
        for (j, v) in e.vector().iter().enumerate() {
            assert!((v - (j as f64 + 1.0) / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn image_embedding_is_scale_invariant_with_zero_bias() {
        let dims = tiny_dims();
        let mut params = ModelParams::init(&dims, 10).unwrap();
        params.image_b.fill(0.0);
        let mut rng = TestRng::seed_from_u64(14);
        let features = Array1::from_shape_fn(7, |_| rng.random_range(0.1..1.0));
        let a = encode_image(&params, &features).unwrap();
        let b = encode_image(&params, &(&features * 3.0)).unwrap();
        for (x, y) in a.vector().iter().zip(b.vector().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn image_encoder_rejects_wrong_dims_and_non_finite_input() {
        let params = ModelParams::init(&tiny_dims(), 11).unwrap();
        assert!(matches!(
            encode_image(&params, &Array1::zeros(5)),
            Err(VgsError::Shape(_))
        ));
        let mut features = Array1::zeros(7);
        features[3] = f64::INFINITY;
        assert!(matches!(
            encode_image(&params, &features),
            Err(VgsError::Invalid(_))
        ));
    }

    #[test]
    fn cosine_distance_spans_identical_orthogonal_and_opposite() {
        let e1 = Embedding::normalize(Array1::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let e2 = Embedding::normalize(Array1::from_vec(vec![-1.0, 0.0, 0.0])).unwrap();
        let e3 = Embedding::normalize(Array1::from_vec(vec![0.0, 1.0, 0.0])).unwrap();
        assert!(cosine_distance(&e1, &e1).abs() < 1e-12);
        assert!((cosine_distance(&e1, &e2) - 2.0).abs() < 1e-12);
        assert!((cosine_distance(&e1, &e3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("vgs-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.vgsm");
        let params = ModelParams::init(&tiny_dims(), 12).unwrap();
        params.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(back.dims, params.dims);
        for ((na, ta), (nb, tb)) in back.tensors().iter().zip(params.tensors().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {na} changed");
        }
    }

    #[test]
    fn checkpoint_with_inconsistent_shapes_fails_to_load() {
        let dir = std::env::temp_dir().join("vgs-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_dims.vgsm");
        let params = ModelParams::init(&tiny_dims(), 13).unwrap();
        let mut entries: Vec<TensorEntry> = Vec::new();
        for (name, tensor) in params.tensors() {
            let mut dims = vec![tensor.nrows() as u32, tensor.ncols() as u32];
            if name == "conv.kernel" {
                dims = vec![3, 4, 5];
            }
            if name == "gru0.update_h" {
                // Claim a different unit count than the data supports.
                dims = vec![7, 7];
            }
            entries.push(TensorEntry {
                name,
                dims,
                data: tensor.iter().cloned().collect(),
            });
        }
        entries.push(TensorEntry::scalar("conv.stride", 2.0));
        // write_checkpoint itself rejects entries whose dims do not match
        // the data length, which is the first line of defense.
        assert!(containers::write_checkpoint(&path, &entries).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let dims = tiny_dims();
        let a = ModelParams::init(&dims, 42).unwrap();
        let b = ModelParams::init(&dims, 42).unwrap();
        let c = ModelParams::init(&dims, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.conv_kernel, c.conv_kernel);
    }

    #[test]
    fn dims_require_matching_embed_and_unit_sizes() {
        let mut dims = tiny_dims();
        dims.embed_dim = 5;
        assert!(dims.validate().is_err());
        assert!(ModelParams::init(&dims, 1).is_err());
    }
}
