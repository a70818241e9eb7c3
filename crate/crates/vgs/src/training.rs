//! Triplet-loss training of both encoders with Adam.
//!
//! The contrast set for each matched pair is the rest of the minibatch.
//! Gradients flow through one shared tape per batch: parameters register
//! once, every example's two encoders record onto the same tape, and a
//! single backward pass accumulates per-example seeds in fixed order, so
//! results are bit-reproducible for a given seed.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::Tape;
use crate::dataset::{GroundedCorpus, Split};
use crate::dsp::MfccSequence;
use crate::model::{
    encode_speech, Embedding, ModelDims, ModelParams, TapeParams,
};
use crate::retrieval::{gold_rank_direct, median_rank, recall_at_k};
use crate::{Result, VgsError};

type Rng = rand::rngs::ChaCha8Rng;

/// Optimization knobs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Hinge margin of the triplet loss.
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Contrast set size; at least 2 so every pair has a mismatched term.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// When set, a VGSM checkpoint is written there per epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.2,
            learning_rate: 2e-4,
            epochs: 15,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            grad_clip: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(VgsError::Invalid("margin must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(VgsError::Invalid("learning rate must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(VgsError::Invalid(
                "batch size must be at least 2 for contrastive terms".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(VgsError::Invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(VgsError::Invalid("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Pairwise cosine distances D[i][j] = d(speech_i, image_j).
fn distance_matrix(speech: &[Array1<f64>], images: &[Array1<f64>]) -> Array2<f64> {
    let n = speech.len();
    Array2::from_shape_fn((n, n), |(i, j)| 1.0 - speech[i].dot(&images[j]))
}

/// Loss and its gradient with respect to each embedding vector. Inactive
/// hinges (including exact kinks) contribute zero gradient.
fn loss_and_embedding_grads(
    speech: &[Array1<f64>],
    images: &[Array1<f64>],
    margin: f64,
) -> (f64, Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let n = speech.len();
    let d = distance_matrix(speech, images);
    let mut loss = 0.0;
    // g[a][b] = dL/dD[a][b]; d(u_a, i_b) = 1 - u_a . i_b.
    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let imposter_speech = margin + d[(i, i)] - d[(j, i)];
            if imposter_speech > 0.0 {
                loss += imposter_speech;
                g[(i, i)] += 1.0;
                g[(j, i)] -= 1.0;
            }
            let imposter_image = margin + d[(i, i)] - d[(i, j)];
            if imposter_image > 0.0 {
                loss += imposter_image;
                g[(i, i)] += 1.0;
                g[(i, j)] -= 1.0;
            }
        }
    }
    let dim = speech[0].len();
    let mut d_speech = vec![Array1::<f64>::zeros(dim); n];
    let mut d_images = vec![Array1::<f64>::zeros(dim); n];
    for a in 0..n {
        for b in 0..n {
            let w = g[(a, b)];
            if w != 0.0 {
                d_speech[a].scaled_add(-w, &images[b]);
                d_images[b].scaled_add(-w, &speech[a]);
            }
        }
    }
    (loss, d_speech, d_images)
}

/// Triplet loss over a batch of matched embedding pairs, contrasting each
/// pair against all other batch members on both sides.
pub fn triplet_loss(speech: &[Embedding], images: &[Embedding], margin: f64) -> Result<f64> {
    if speech.len() != images.len() {
        return Err(VgsError::Shape(format!(
            "{} speech vs {} image embeddings",
            speech.len(),
            images.len()
        )));
    }
    if speech.len() < 2 {
        return Err(VgsError::Invalid(
            "triplet loss needs at least 2 pairs".into(),
        ));
    }
    let s: Vec<Array1<f64>> = speech.iter().map(|e| e.vector().clone()).collect();
    let v: Vec<Array1<f64>> = images.iter().map(|e| e.vector().clone()).collect();
    let (loss, _, _) = loss_and_embedding_grads(&s, &v, margin);
    Ok(loss)
}

/// Per-tensor gradients in the canonical parameter order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tensors: Vec<Array2<f64>>,
}

impl ModelGrads {
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for t in &mut self.tensors {
                t.mapv_inplace(|v| v * scale);
            }
        }
    }
}

/// One training example: caption features paired with image features.
pub type TrainPair<'a> = (&'a MfccSequence, &'a Array1<f64>);

/// Computes the batch loss and gradients for every model tensor.
///
/// Both encoders of every example record onto one tape; the loss gradient
/// seeds each embedding node and a single backward pass accumulates into
/// the shared parameter leaves.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &[TrainPair],
    config: &TrainConfig,
) -> Result<(f64, ModelGrads)> {
    if batch.len() < 2 {
        return Err(VgsError::Invalid(
            "batch must hold at least 2 pairs".into(),
        ));
    }
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, params);
    let mut speech_vars = Vec::with_capacity(batch.len());
    let mut image_vars = Vec::with_capacity(batch.len());
    for (index, (mfcc, features)) in batch.iter().enumerate() {
        let attribute = |e: VgsError| match e {
            VgsError::DegenerateEmbedding => VgsError::NonFiniteLoss { index },
            other => other,
        };
        speech_vars.push(crate::model::tape_encode_speech(&mut tape, &tp, mfcc).map_err(attribute)?);
        image_vars.push(crate::model::tape_encode_image(&mut tape, &tp, features).map_err(attribute)?);
    }
    let mut speech_vals = Vec::with_capacity(batch.len());
    let mut image_vals = Vec::with_capacity(batch.len());
    for index in 0..batch.len() {
        let s = tape.value(speech_vars[index]).row(0).to_owned();
        let v = tape.value(image_vars[index]).row(0).to_owned();
        if s.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(VgsError::NonFiniteLoss { index });
        }
        speech_vals.push(s);
        image_vals.push(v);
    }
    let (loss, d_speech, d_images) =
        loss_and_embedding_grads(&speech_vals, &image_vals, config.margin);
    let mut seeds = Vec::with_capacity(batch.len() * 2);
    for index in 0..batch.len() {
        let row = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
        seeds.push((speech_vars[index], row(&d_speech[index])));
        seeds.push((image_vars[index], row(&d_images[index])));
    }
    let grads = tape.backward(&seeds);
    let tensors = tp.vars.iter().map(|v| grads.get(*v).clone()).collect();
    Ok((loss, ModelGrads { tensors }))
}

/// Per-tensor Adam moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn adam_update_tensor(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    step: u64,
    config: &TrainConfig,
) {
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    azip_update(p, g, m, v, config, bc1, bc2);
}

fn azip_update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    config: &TrainConfig,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        });
}

/// Bias-corrected Adam update over every model tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.tensors.len() != state.m.len() {
        return Err(VgsError::Shape(format!(
            "{} gradient tensors vs {} state slots",
            grads.tensors.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let step = state.step;
    for (k, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
        if tensor.dim() != grads.tensors[k].dim() {
            return Err(VgsError::Shape(format!(
                "gradient {k} has shape {:?}, parameter has {:?}",
                grads.tensors[k].dim(),
                tensor.dim()
            )));
        }
        adam_update_tensor(
            tensor,
            &grads.tensors[k],
            &mut state.m[k],
            &mut state.v[k],
            step,
            config,
        );
    }
    Ok(())
}

/// Splits shuffled caption indices into batches with pairwise-distinct
/// images. Captions displaced by a duplicate image go back to the queue
/// front in order; a tail that cannot seat 2 distinct images is dropped.
pub(crate) fn build_batches(image_ids: &[u64], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut queue: VecDeque<usize> = order.iter().cloned().collect();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::new();
        let mut images = BTreeSet::new();
        let mut displaced = Vec::new();
        while batch.len() < batch_size {
            let Some(idx) = queue.pop_front() else { break };
            if images.insert(image_ids[idx]) {
                batch.push(idx);
            } else {
                displaced.push(idx);
            }
        }
        for idx in displaced.into_iter().rev() {
            queue.push_front(idx);
        }
        if batch.len() < 2 {
            // Whatever remains shares a single image; unusable.
            break;
        }
        batches.push(batch);
    }
    batches
}

/// One epoch's log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean triplet loss per training pair.
    pub loss: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
}

/// Everything `train` produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation median rank.
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    /// 1-based epoch of `params`; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Caption-to-image retrieval over one split: (R@1, R@5, R@10, median
/// gold rank).
pub fn evaluate_split(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    split: Split,
) -> Result<(f64, f64, f64, f64)> {
    let images = crate::retrieval::embed_split_images(params, corpus, split)?;
    let mut ranks = Vec::new();
    for cap in corpus.split_captions(split) {
        let query = encode_speech(params, &cap.mfcc)?;
        ranks.push(gold_rank_direct(&query, &images, cap.image_id)?);
    }
    Ok((
        recall_at_k(&ranks, 1)?,
        recall_at_k(&ranks, 5)?,
        recall_at_k(&ranks, 10)?,
        median_rank(&ranks)?,
    ))
}

/// Trains from a fresh initialization on the corpus's train split,
/// validating on the val split each epoch. Returns the parameters of the
/// epoch with the lowest validation median rank (ties keep the earlier
/// epoch); zero epochs return the initialization.
pub fn train(corpus: &GroundedCorpus, dims: &ModelDims, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    dims.validate()?;
    if dims.image_dim != corpus.feature_dim {
        return Err(VgsError::Shape(format!(
            "model expects image dim {}, corpus provides {}",
            dims.image_dim, corpus.feature_dim
        )));
    }
    let train_captions = corpus.split_captions(Split::Train);
    if train_captions.is_empty() {
        return Err(VgsError::Invalid("train split has no captions".into()));
    }
    if config.epochs > 0 && corpus.val_images.is_empty() {
        return Err(VgsError::Invalid("val split is empty".into()));
    }
    let image_ids: Vec<u64> = train_captions.iter().map(|c| c.image_id).collect();
    let features: Vec<&Array1<f64>> = train_captions
        .iter()
        .map(|c| {
            corpus
                .image(c.image_id)
                .map(|img| &img.features)
                .ok_or_else(|| VgsError::Invalid(format!("missing image {}", c.image_id)))
        })
        .collect::<Result<_>>()?;

    let mut params = ModelParams::init(dims, config.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_median = f64::INFINITY;
    let mut best_params = params.clone();

    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_captions.len()).collect();
        order.shuffle(&mut rng);
        let batches = build_batches(&image_ids, &order, config.batch_size);
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        for batch_ix in &batches {
            let batch: Vec<TrainPair> = batch_ix
                .iter()
                .map(|&i| (&train_captions[i].mfcc, features[i]))
                .collect();
            let (loss, mut grads) =
                loss_and_gradients(&params, &batch, config).map_err(|e| {
                    VgsError::Invalid(format!("epoch {epoch}: {e}"))
                })?;
            if let Some(max_norm) = config.grad_clip {
                grads.clip_global_norm(max_norm);
            }
            adam_step(&mut params, &grads, &mut state, config)?;
            loss_sum += loss;
            pair_count += batch.len();
        }
        let mean_loss = if pair_count > 0 {
            loss_sum / pair_count as f64
        } else {
            0.0
        };
        let (r1, r5, r10, median) = evaluate_split(&params, corpus, Split::Val)?;
        metrics.push(EpochMetrics {
            epoch,
            loss: mean_loss,
            r1,
            r5,
            r10,
            median_rank: median,
        });
        if let Some(dir) = &config.checkpoint_dir {
            params.save(&dir.join(format!("epoch_{epoch:03}.vgsm")))?;
        }
        if median < best_median {
            best_median = median;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        metrics,
        best_epoch,
    })
}

/// Writes the per-epoch log as CSV under a `# seed=` comment line.
pub fn write_metrics_csv(metrics: &[EpochMetrics], seed: u64, path: &Path) -> Result<()> {
    let mut out = format!("# seed={seed}\nepoch,loss,r1,r5,r10,median_rank\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{:.6},{:.4},{:.4},{:.4},{:.1}\n",
            m.epoch, m.loss, m.r1, m.r5, m.r10, m.median_rank
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_corpus, CorpusSpec};
    use crate::model::encode_image;
    use ndarray::Array2;
    use rand::RngExt;

    type TestRng = rand::rngs::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::normalize(Array1::from_vec(v)).unwrap()
    }

    fn random_unit(rng: &mut TestRng, dim: usize) -> Embedding {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(e) = Embedding::normalize(Array1::from_vec(v)) {
                return e;
            }
        }
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            mfcc_dim: 13,
            conv_filters: 8,
            conv_len: 6,
            conv_stride: 3,
            gru_layers: 2,
            gru_units: 12,
            image_dim: 8,
            embed_dim: 12,
        }
    }

    #[test]
    fn hand_built_two_pair_batch_evaluates_to_a_quarter() {
        // Unit vectors realizing the distance matrix
        // d(u1,i1)=0.5 d(u2,i1)=0.6 d(u1,i2)=0.55 d(u2,i2)=0:
        // only the two pair-1 hinges stay active, 0.1 + 0.15.
        let b = 0.25 / 0.84f64.sqrt();
        let c = (1.0 - 0.25 - b * b).sqrt();
        let i1 = unit(vec![1.0, 0.0, 0.0]);
        let i2 = unit(vec![0.4, 0.84f64.sqrt(), 0.0]);
        let u1 = unit(vec![0.5, b, c]);
        let u2 = i2.clone();
        let loss = triplet_loss(&[u1, u2], &[i1, i2], 0.2).unwrap();
        assert!((loss - 0.25).abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn inactive_hinges_give_exactly_zero() {
        let u1 = unit(vec![1.0, 0.0, 0.0, 0.0]);
        let u2 = unit(vec![0.0, 1.0, 0.0, 0.0]);
        let loss = triplet_loss(&[u1.clone(), u2.clone()], &[u1, u2], 0.2).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_matches_brute_force_double_loop() {
        let mut rng = TestRng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 5;
            let speech: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 4)).collect();
            let images: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 4)).collect();
            let margin = 0.2;
            let loss = triplet_loss(&speech, &images, margin).unwrap();
            let d = |a: &Embedding, b: &Embedding| crate::model::cosine_distance(a, b);
            let mut naive = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    naive += (margin + d(&speech[i], &images[i]) - d(&speech[j], &images[i])).max(0.0);
                    naive += (margin + d(&speech[i], &images[i]) - d(&speech[i], &images[j])).max(0.0);
                }
            }
            assert!((loss - naive).abs() < 1e-12);
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn loss_is_invariant_under_common_row_permutation() {
        let mut rng = TestRng::seed_from_u64(9);
        let n = 6;
        let speech: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 5)).collect();
        let images: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 5)).collect();
        let base = triplet_loss(&speech, &images, 0.2).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let ps: Vec<Embedding> = perm.iter().map(|&i| speech[i].clone()).collect();
        let pv: Vec<Embedding> = perm.iter().map(|&i| images[i].clone()).collect();
        let permuted = triplet_loss(&ps, &pv, 0.2).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let u = unit(vec![1.0, 0.0]);
        assert!(triplet_loss(&[u.clone()], &[u.clone()], 0.2).is_err());
        assert!(triplet_loss(&[u.clone(), u.clone()], &[u], 0.2).is_err());
    }

    fn random_frames(rng: &mut TestRng, t: usize, dim: usize) -> MfccSequence {
        // Cepstra-scale inputs keep the embedding norm well away from
        // zero, where finite differences lose accuracy.
        let frames = Array2::from_shape_fn((t, dim), |_| rng.random_range(-5.0..5.0));
        MfccSequence::from_frames(frames, 10).unwrap()
    }

    fn random_batch(rng: &mut TestRng, dims: &ModelDims, n: usize) -> (Vec<MfccSequence>, Vec<Array1<f64>>) {
        let mfcc = (0..n)
            .map(|i| random_frames(rng, dims.conv_len + 3 * i + 2, dims.mfcc_dim))
            .collect();
        let images = (0..n)
            .map(|_| Array1::from_shape_fn(dims.image_dim, |_| rng.random_range(-1.0..1.0)))
            .collect();
        (mfcc, images)
    }

    #[test]
    fn batch_gradients_match_finite_differences_of_pure_forward() {
        let dims = ModelDims {
            mfcc_dim: 4,
            conv_filters: 5,
            conv_len: 3,
            conv_stride: 2,
            gru_layers: 2,
            gru_units: 6,
            image_dim: 7,
            embed_dim: 6,
        };
        let config = TrainConfig::default();
        let mut rng = TestRng::seed_from_u64(31);
        for point in 0..3 {
            // Random parameter points at a scale where the embedding norm
            // stays O(1); near-zero norms wreck finite differences.
            let mut params = ModelParams::init(&dims, 100 + point).unwrap();
            for (_, tensor) in params.tensors_mut() {
                tensor.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
            let (mfcc, images) = random_batch(&mut rng, &dims, 3);
            let batch: Vec<TrainPair> = mfcc.iter().zip(&images).map(|(m, f)| (m, f)).collect();
            let (loss, grads) = loss_and_gradients(&params, &batch, &config).unwrap();
            assert!(loss.is_finite());

            let eval = |p: &ModelParams| -> f64 {
                let s: Vec<Embedding> =
                    mfcc.iter().map(|m| encode_speech(p, m).unwrap()).collect();
                let v: Vec<Embedding> =
                    images.iter().map(|f| encode_image(p, f).unwrap()).collect();
                triplet_loss(&s, &v, config.margin).unwrap()
            };
            let h = 1e-5;
            let n_tensors = params.tensors().len();
            for k in 0..n_tensors {
                let len = grads.tensors[k].len();
                let stride = (len / 10).max(1);
                for flat in (0..len).step_by(stride) {
                    let idx = (flat / grads.tensors[k].ncols(), flat % grads.tensors[k].ncols());
                    let mut plus = params.clone();
                    plus.tensors_mut()[k].1[idx] += h;
                    let mut minus = params.clone();
                    minus.tensors_mut()[k].1[idx] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = grads.tensors[k][idx];
                    let denom = an.abs().max(fd.abs()).max(1.0);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-4,
                        "tensor {k} entry {idx:?}: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn identical_pairs_at_zero_margin_give_exactly_zero_gradients() {
        // Every hinge sits exactly at its kink, which must count as
        // inactive: zero loss and bit-zero gradients.
        let dims = small_dims();
        let params = ModelParams::init(&dims, 7).unwrap();
        let mut rng = TestRng::seed_from_u64(8);
        let mfcc = random_frames(&mut rng, 12, dims.mfcc_dim);
        let img = Array1::from_shape_fn(dims.image_dim, |_| rng.random_range(-1.0..1.0));
        let batch: Vec<TrainPair> = vec![(&mfcc, &img), (&mfcc, &img)];
        let config = TrainConfig {
            margin: 0.0,
            ..TrainConfig::default()
        };
        let (loss, grads) = loss_and_gradients(&params, &batch, &config).unwrap();
        assert_eq!(loss, 0.0);
        for t in &grads.tensors {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_finite_input_reports_the_batch_index() {
        let dims = small_dims();
        let params = ModelParams::init(&dims, 7).unwrap();
        let mut rng = TestRng::seed_from_u64(8);
        let mfcc_a = random_frames(&mut rng, 10, dims.mfcc_dim);
        let mfcc_b = random_frames(&mut rng, 11, dims.mfcc_dim);
        let good = Array1::from_shape_fn(dims.image_dim, |_| rng.random_range(-1.0..1.0));
        // All-zero features survive input validation but normalize to a
        // degenerate embedding, which must carry the batch index.
        let bad = Array1::zeros(dims.image_dim);
        let batch: Vec<TrainPair> = vec![(&mfcc_a, &good), (&mfcc_b, &bad)];
        match loss_and_gradients(&params, &batch, &TrainConfig::default()) {
            Err(VgsError::NonFiniteLoss { index }) => assert_eq!(index, 1),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate_times_sign() {
        let dims = small_dims();
        let mut params = ModelParams::init(&dims, 3).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let config = TrainConfig::default();
        let grads = ModelGrads {
            tensors: params
                .tensors()
                .iter()
                .enumerate()
                .map(|(k, (_, t))| {
                    Array2::from_shape_fn(t.dim(), |(i, j)| {
                        if (i + j + k) % 2 == 0 { 0.5 } else { -0.25 }
                    })
                })
                .collect(),
        };
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        for (k, ((_, after), (_, before))) in params
            .tensors()
            .into_iter()
            .zip(before.tensors())
            .enumerate()
        {
            let g = &grads.tensors[k];
            for ((a, b), g) in after.iter().zip(before.iter()).zip(g.iter()) {
                let delta = a - b;
                let expect = -config.learning_rate * g.signum();
                assert!(
                    (delta - expect).abs() < 1e-9,
                    "delta {delta} vs {expect}"
                );
            }
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let dims = small_dims();
        let mut params = ModelParams::init(&dims, 3).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = ModelGrads {
            tensors: params
                .tensors()
                .iter()
                .map(|(_, t)| Array2::zeros(t.dim()))
                .collect(),
        };
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_matches_a_scalar_reference_trace() {
        let config = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = Array2::from_elem((1, 1), 2.0);
        let mut m = Array2::zeros((1, 1));
        let mut v = Array2::zeros((1, 1));
        // Hand-rolled scalar Adam on f(x) = x^2, gradient 2x.
        let (mut sp, mut sm, mut sv) = (2.0f64, 0.0f64, 0.0f64);
        for step in 1..=3u64 {
            let g = 2.0 * sp;
            sm = config.beta1 * sm + (1.0 - config.beta1) * g;
            sv = config.beta2 * sv + (1.0 - config.beta2) * g * g;
            let m_hat = sm / (1.0 - config.beta1.powi(step as i32));
            let v_hat = sv / (1.0 - config.beta2.powi(step as i32));
            sp -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);

            let ga = Array2::from_elem((1, 1), 2.0 * p[(0, 0)]);
            adam_update_tensor(&mut p, &ga, &mut m, &mut v, step, &config);
            assert!(
                (p[(0, 0)] - sp).abs() < 1e-12,
                "step {step}: {} vs {sp}",
                p[(0, 0)]
            );
        }
    }

    #[test]
    fn gradient_clipping_rescales_to_the_requested_norm() {
        let mut grads = ModelGrads {
            tensors: vec![
                Array2::from_elem((1, 2), 3.0),
                Array2::from_elem((1, 1), 4.0),
            ],
        };
        let norm = (9.0f64 + 9.0 + 16.0).sqrt();
        assert!((grads.global_norm() - norm).abs() < 1e-12);
        grads.clip_global_norm(1.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
        let mut small = ModelGrads {
            tensors: vec![Array2::from_elem((1, 1), 0.5)],
        };
        small.clip_global_norm(1.0);
        assert_eq!(small.tensors[0][(0, 0)], 0.5);
    }

    #[test]
    fn batching_separates_duplicate_images_and_drops_lone_tails() {
        let image_ids = [1, 1, 1, 2, 2, 3];
        let order: Vec<usize> = (0..6).collect();
        let batches = build_batches(&image_ids, &order, 2);
        assert_eq!(batches, vec![vec![0, 3], vec![1, 4], vec![2, 5]]);
        for batch in &batches {
            let images: BTreeSet<u64> = batch.iter().map(|&i| image_ids[i]).collect();
            assert_eq!(images.len(), batch.len());
        }

        let lone = build_batches(&[7, 7], &[0, 1], 4);
        assert!(lone.is_empty());

        // The size-1 tail (caption 6) cannot form a contrastive batch and
        // is dropped; everything else is used exactly once.
        let image_ids = [5, 5, 6, 7, 7, 8, 9];
        let order: Vec<usize> = (0..7).collect();
        let batches = build_batches(&image_ids, &order, 3);
        assert_eq!(batches, vec![vec![0, 2, 3], vec![1, 4, 5]]);
        let mut seen = BTreeSet::new();
        for batch in &batches {
            assert!(batch.len() >= 2);
            let images: BTreeSet<u64> = batch.iter().map(|&i| image_ids[i]).collect();
            assert_eq!(images.len(), batch.len());
            for &i in batch {
                assert!(seen.insert(i), "caption {i} appeared twice");
            }
        }
        assert_eq!(seen.len(), 6);
    }

    fn train_corpus() -> GroundedCorpus {
        generate_toy_corpus(
            &CorpusSpec {
                categories: 3,
                images_per_category: 6,
                captions_per_image: 2,
                feature_dim: 8,
                ..CorpusSpec::default()
            },
            13,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_return_the_untouched_initialization() {
        let corpus = train_corpus();
        let dims = small_dims();
        let config = TrainConfig {
            epochs: 0,
            seed: 21,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &dims, &config).unwrap();
        assert_eq!(outcome.best_epoch, 0);
        assert!(outcome.metrics.is_empty());
        assert_eq!(outcome.params, ModelParams::init(&dims, 21).unwrap());
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let corpus = train_corpus();
        let dims = small_dims();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&corpus, &dims, &config).unwrap();
        let b = train(&corpus, &dims, &config).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.metrics.len(), 2);

        let dir = std::env::temp_dir().join("vgs-train-metrics");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        write_metrics_csv(&a.metrics, config.seed, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=5\nepoch,loss,r1,r5,r10,median_rank\n"));
        assert_eq!(text.lines().count(), 2 + a.metrics.len());
    }

    #[test]
    fn checkpoints_appear_per_epoch() {
        let corpus = train_corpus();
        let dims = small_dims();
        let dir = std::env::temp_dir().join("vgs-train-ckpt");
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            checkpoint_dir: Some(dir.clone()),
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &dims, &config).unwrap();
        assert!(dir.join("epoch_001.vgsm").exists());
        assert!(dir.join("epoch_002.vgsm").exists());
        assert!(outcome.best_epoch >= 1);
        let best = ModelParams::load(&dir.join(format!("epoch_{:03}.vgsm", outcome.best_epoch))).unwrap();
        assert_eq!(best, outcome.params);
    }

    #[test]
    fn config_validation_gates_bad_settings() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { margin: -0.1, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 1, ..ok.clone() },
            TrainConfig { beta1: 1.0, ..ok.clone() },
            TrainConfig { epsilon: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
