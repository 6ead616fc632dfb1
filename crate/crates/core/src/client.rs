//! One client's local update: negative sampling, mini-batch BCE plus the
//! alignment penalty, alternating updates of the private modules and the
//! local item embedding, and optional Laplace noise on the upload.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_negative_rows, Dataset, NegativeSampleBatch};
use crate::error::{Error, Result};
use crate::model::{ClientModel, PrivateGradients, Variant};
use crate::nn::{bce_with_logits, laplace_sample, sgd_update, DenseMatrix, GradientAt, MlpParams};

/// Hyperparameters of a local update.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTraining {
    /// Alignment coefficient λ.
    pub lambda: f64,
    /// η₁, for the user embedding and rating predictor.
    pub user_lr: f64,
    /// η₂, for the local item embedding.
    pub item_lr: f64,
    /// E₂.
    pub epochs: usize,
    pub batch_size: usize,
    pub negative_ratio: usize,
    /// Laplace scale δ added to the upload; 0 disables noise.
    pub ldp_scale: f64,
}

/// The slice of the dataset a client owns: its warm interactions as warm
/// row indices, plus the size of the warm catalogue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalData {
    pub positives: Vec<usize>,
    pub num_warm: usize,
}

impl LocalData {
    pub fn for_user(dataset: &Dataset, user: usize) -> Result<Self> {
        Ok(LocalData {
            positives: dataset.warm_positive_rows(user)?,
            num_warm: dataset.num_warm(),
        })
    }
}

/// A client between rounds: private modules plus its own random stream.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub user: usize,
    pub model: ClientModel,
    rng: ChaCha8Rng,
}

impl ClientState {
    /// Each user gets an independent ChaCha stream of the run seed, so results
    /// never depend on which thread runs which client.
    pub fn new(user: usize, variant: Variant, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64 + 1);
        let model = ClientModel::init(variant, dim, &mut rng);
        ClientState { user, model, rng }
    }

    pub fn from_model(user: usize, model: ClientModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64 + 1);
        ClientState { user, model, rng }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Labelled warm rows for one mini-batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingBatch {
    pub rows: Vec<usize>,
    pub labels: Vec<f64>,
}

impl TrainingBatch {
    /// Positives then negatives, translated from item ids to warm rows.
    pub fn from_sample(sample: &NegativeSampleBatch, dataset: &Dataset) -> Result<Self> {
        let mut batch = TrainingBatch::default();
        for (items, label) in [(&sample.positives, 1.0), (&sample.negatives, 0.0)] {
            for &item in items {
                let row = dataset
                    .warm_row(item)
                    .ok_or_else(|| Error::Lookup(format!("item {item} is not a warm item")))?;
                batch.rows.push(row);
                batch.labels.push(label);
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recommendation: f64,
    pub alignment: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalGradients {
    pub item_embedding: DenseMatrix,
    pub private: PrivateGradients,
}

/// What a client hands back after a local update.
#[derive(Clone, Debug)]
pub struct LocalUpdateReport {
    pub user: usize,
    /// The uploaded item embedding, noised when δ > 0.
    pub item_embedding: DenseMatrix,
    /// BCE per processed batch, evaluated before that batch's updates.
    pub recommendation_loss: Vec<f64>,
    /// Alignment penalty per processed batch (or per alignment-only step).
    pub alignment_penalty: Vec<f64>,
    pub batches: usize,
    /// True when BCE was skipped this round (no positives or no negatives).
    pub skipped_recommendation: bool,
}

impl LocalUpdateReport {
    pub fn mean_recommendation_loss(&self) -> Option<f64> {
        if self.recommendation_loss.is_empty() {
            None
        } else {
            Some(self.recommendation_loss.iter().sum::<f64>() / self.recommendation_loss.len() as f64)
        }
    }
}

/// `(1/m)·Σ_v ‖p_u(v) − r_v‖²` with gradient `(2/m)(p_u − r)` flowing to `p_u` only.
pub fn alignment_penalty(item_embedding: &DenseMatrix, representation: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if item_embedding.shape() != representation.shape() {
        return Err(Error::dim(
            "alignment_penalty",
            item_embedding.shape(),
            representation.shape(),
        ));
    }
    let m = item_embedding.rows();
    if m == 0 {
        return Ok((0.0, DenseMatrix::zeros(0, item_embedding.cols())));
    }
    let diff = item_embedding.sub(representation)?;
    Ok((diff.squared_norm() / m as f64, diff.scale(2.0 / m as f64)))
}

fn alignment_value(item_embedding: &DenseMatrix, representation: &DenseMatrix) -> f64 {
    let m = item_embedding.rows().max(1) as f64;
    item_embedding
        .as_slice()
        .iter()
        .zip(representation.as_slice())
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / m
}

struct BcePass {
    loss: f64,
    params: Option<PrivateGradients>,
    item_grad: DenseMatrix,
}

fn bce_pass(
    model: &ClientModel,
    scorer: &MlpParams,
    batch: &TrainingBatch,
    want_params: bool,
) -> Result<BcePass> {
    let inputs = model.item_embedding.gather_rows(&batch.rows)?;
    let trace = scorer.forward_trace(&inputs)?;
    let (loss, grad) = bce_with_logits(trace.logits().as_slice(), &batch.labels)?;
    let upstream = DenseMatrix::from_vec(grad.len(), 1, grad)?;
    let (grads, item_grad) = scorer.backprop(&trace, &upstream, GradientAt::Logit, want_params)?;
    Ok(BcePass {
        loss,
        params: grads.map(|g| model.unfold_gradients(g)),
        item_grad,
    })
}

/// `L_total = BCE(batch) + λ·R(p_u, r)` and its gradients with respect to
/// every trainable tensor of the client. `model.item_embedding` must hold `p_u`.
pub fn local_loss(
    model: &ClientModel,
    batch: &TrainingBatch,
    representation: &DenseMatrix,
    lambda: f64,
) -> Result<(LossBreakdown, LocalGradients)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("λ must be non-negative, got {lambda}")));
    }
    let (alignment, align_grad) = alignment_penalty(&model.item_embedding, representation)?;
    let mut item_grad = align_grad.scale(lambda);
    let (recommendation, private) = if batch.is_empty() {
        let zeros = crate::nn::GradientBundle::zeros_like(&model.predictor);
        (
            0.0,
            PrivateGradients {
                user_embedding: model.user_embedding.as_ref().map(|q| vec![0.0; q.len()]),
                predictor: zeros,
            },
        )
    } else {
        let pass = bce_pass(model, &model.item_scorer(), batch, true)?;
        for (i, &row) in batch.rows.iter().enumerate() {
            for (g, b) in item_grad.row_mut(row).iter_mut().zip(pass.item_grad.row(i)) {
                *g += b;
            }
        }
        (pass.loss, pass.params.expect("requested"))
    };
    let total = recommendation + lambda * alignment;
    if !total.is_finite() {
        return Err(Error::training("local_loss", format!("non-finite loss {total}")));
    }
    Ok((
        LossBreakdown {
            recommendation,
            alignment,
            total,
        },
        LocalGradients {
            item_embedding: item_grad,
            private,
        },
    ))
}

fn step_private(model: &mut ClientModel, grads: &PrivateGradients, lr: f64) -> Result<()> {
    model.predictor.sgd_step(&grads.predictor, lr)?;
    if let (Some(q), Some(gq)) = (model.user_embedding.as_mut(), grads.user_embedding.as_ref()) {
        sgd_update(q, gq, lr, "user embedding")?;
    }
    Ok(())
}

/// `p_u ← p_u − η₂·(∂BCE + λ·(2/m)(p_u − r))`; BCE gradients are given per batch row.
fn step_items(
    item_embedding: &mut DenseMatrix,
    representation: &DenseMatrix,
    bce_rows: Option<(&[usize], &DenseMatrix)>,
    lambda: f64,
    lr: f64,
) -> Result<()> {
    let m = item_embedding.rows();
    if let Some((_, g)) = bce_rows {
        crate::nn::ensure_finite(g.as_slice(), "item embedding")?;
    }
    if lambda > 0.0 && m > 0 {
        let c = lr * lambda * 2.0 / m as f64;
        for (p, r) in item_embedding
            .as_mut_slice()
            .iter_mut()
            .zip(representation.as_slice())
        {
            *p -= c * (*p - r);
        }
    }
    if let Some((rows, g)) = bce_rows {
        for (i, &row) in rows.iter().enumerate() {
            for (p, gv) in item_embedding.row_mut(row).iter_mut().zip(g.row(i)) {
                *p -= lr * gv;
            }
        }
    }
    Ok(())
}

/// Runs one round of local training and returns the (optionally noised) item
/// embedding for upload.
///
/// The client sees only the broadcast global item embedding, the warm
/// attribute representations and its own interactions. Per batch it first
/// steps `(q_u, s_u)` with η₁ holding `p_u` fixed, then re-evaluates and steps
/// `p_u` with η₂ holding the updated `(q_u, s_u)` fixed.
pub fn client_update(
    state: &mut ClientState,
    global_item_embedding: &DenseMatrix,
    representation: &DenseMatrix,
    config: &LocalTraining,
    data: &LocalData,
) -> Result<LocalUpdateReport> {
    let d = state.model.dim();
    let expected = (data.num_warm, d);
    if global_item_embedding.shape() != expected {
        return Err(Error::dim("client_update global p", global_item_embedding.shape(), expected));
    }
    if representation.shape() != expected {
        return Err(Error::dim("client_update r_warm", representation.shape(), expected));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let user = state.user;
    let ctx = |e: Error| e.within(format!("client {user}"));

    state.model.item_embedding = global_item_embedding.clone();
    let (negatives, _) =
        sample_negative_rows(&data.positives, data.num_warm, config.negative_ratio, &mut state.rng)?;

    let mut report = LocalUpdateReport {
        user,
        item_embedding: DenseMatrix::zeros(0, d),
        recommendation_loss: Vec::new(),
        alignment_penalty: Vec::new(),
        batches: 0,
        skipped_recommendation: data.positives.is_empty() || negatives.is_empty(),
    };

    if report.skipped_recommendation {
        for _ in 0..config.epochs {
            report
                .alignment_penalty
                .push(alignment_value(&state.model.item_embedding, representation));
            step_items(
                &mut state.model.item_embedding,
                representation,
                None,
                config.lambda,
                config.item_lr,
            )
            .map_err(ctx)?;
        }
    } else {
        let mut samples: Vec<(usize, f64)> = data
            .positives
            .iter()
            .map(|&r| (r, 1.0))
            .chain(negatives.iter().map(|&r| (r, 0.0)))
            .collect();
        samples.shuffle(&mut state.rng);
        let batches: Vec<TrainingBatch> = samples
            .chunks(config.batch_size)
            .map(|chunk| TrainingBatch {
                rows: chunk.iter().map(|s| s.0).collect(),
                labels: chunk.iter().map(|s| s.1).collect(),
            })
            .collect();

        for epoch in 0..config.epochs {
            for (b, batch) in batches.iter().enumerate() {
                let fail = |e: Error| ctx(e.within(format!("epoch {epoch} batch {b}")));
                let model = &mut state.model;

                let first = bce_pass(model, &model.item_scorer(), batch, true).map_err(fail)?;
                if !first.loss.is_finite() {
                    return Err(fail(Error::training("bce", format!("non-finite loss {}", first.loss))));
                }
                step_private(model, first.params.as_ref().expect("requested"), config.user_lr)
                    .map_err(fail)?;

                let second = bce_pass(model, &model.item_scorer(), batch, false).map_err(fail)?;
                report
                    .alignment_penalty
                    .push(alignment_value(&model.item_embedding, representation));
                step_items(
                    &mut model.item_embedding,
                    representation,
                    Some((&batch.rows, &second.item_grad)),
                    config.lambda,
                    config.item_lr,
                )
                .map_err(fail)?;

                report.recommendation_loss.push(first.loss);
                report.batches += 1;
            }
        }
    }

    let trained = std::mem::replace(&mut state.model.item_embedding, DenseMatrix::zeros(0, d));
    report.item_embedding = apply_ldp(&trained, config.ldp_scale, &mut state.rng).map_err(ctx)?;
    Ok(report)
}

/// Adds i.i.d. Laplace(0, δ) noise element-wise; δ = 0 returns the input unchanged.
pub fn apply_ldp<R: Rng + ?Sized>(item_embedding: &DenseMatrix, scale: f64, rng: &mut R) -> Result<DenseMatrix> {
    let noise = laplace_sample(rng, scale, item_embedding.rows(), item_embedding.cols())?;
    if scale == 0.0 {
        return Ok(item_embedding.clone());
    }
    item_embedding.add(&noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LocalTraining {
        LocalTraining {
            lambda: 1.0,
            user_lr: 0.05,
            item_lr: 0.05,
            epochs: 1,
            batch_size: 256,
            negative_ratio: 5,
            ldp_scale: 0.0,
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn alignment_closed_forms() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = DenseMatrix::zeros(1, 2);
        let (pen, g) = alignment_penalty(&p, &r).unwrap();
        assert_eq!(pen, 1.0);
        assert_eq!(g.as_slice(), &[2.0, 0.0]);
        let (pen, g) = alignment_penalty(&p, &p).unwrap();
        assert_eq!(pen, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(alignment_penalty(&p, &DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_matrix(&mut rng, 8, 4);
        let r = rand_matrix(&mut rng, 8, 4);
        let (_, g) = alignment_penalty(&p, &r).unwrap();
        let h = 1e-5;
        for idx in 0..32 {
            let mut plus = p.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = (alignment_penalty(&plus, &r).unwrap().0 - alignment_penalty(&minus, &r).unwrap().0)
                / (2.0 * h);
            let a = g.as_slice()[idx];
            assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-3), "{fd} vs {a}");
        }
    }

    #[test]
    fn zero_lambda_is_plain_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = ClientState::new(0, Variant::Ncf, 4, 1);
        state.model.item_embedding = rand_matrix(&mut rng, 10, 4);
        let r = rand_matrix(&mut rng, 10, 4);
        let batch = TrainingBatch {
            rows: vec![1, 3, 7],
            labels: vec![1.0, 0.0, 0.0],
        };
        let (loss, grads) = local_loss(&state.model, &batch, &r, 0.0).unwrap();
        let logits = state
            .model
            .logits(&state.model.item_embedding.gather_rows(&batch.rows).unwrap())
            .unwrap();
        let (bce, _) = bce_with_logits(&logits, &batch.labels).unwrap();
        assert!((loss.total - bce).abs() < 1e-12);
        for row in [0, 2, 4, 5, 6, 8, 9] {
            assert!(grads.item_embedding.row(row).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_learning_rates_return_global_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_matrix(&mut rng, 30, 6);
        let r = rand_matrix(&mut rng, 30, 6);
        let data = LocalData {
            positives: vec![2, 5, 11],
            num_warm: 30,
        };
        let mut state = ClientState::new(3, Variant::Ncf, 6, 9);
        let c = LocalTraining {
            user_lr: 0.0,
            item_lr: 0.0,
            ..cfg()
        };
        let before = state.model.clone();
        let rep = client_update(&mut state, &p, &r, &c, &data).unwrap();
        assert_eq!(rep.item_embedding, p);
        assert_eq!(state.model.predictor, before.predictor);
        assert_eq!(state.model.item_embedding.rows(), 0);
    }

    #[test]
    fn update_order_is_observable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = rand_matrix(&mut rng, 20, 4);
        let r = rand_matrix(&mut rng, 20, 4);
        let data = LocalData {
            positives: vec![0, 1, 2],
            num_warm: 20,
        };
        let mut state = ClientState::new(0, Variant::Ncf, 4, 2);
        let before = state.model.clone();
        let rep = client_update(&mut state, &p, &r, &LocalTraining { item_lr: 0.0, ..cfg() }, &data).unwrap();
        assert_eq!(rep.item_embedding, p);
        assert_ne!(state.model.predictor, before.predictor);
        assert_ne!(state.model.user_embedding, before.user_embedding);

        let mut state = ClientState::new(0, Variant::Ncf, 4, 2);
        let rep = client_update(&mut state, &p, &r, &LocalTraining { user_lr: 0.0, ..cfg() }, &data).unwrap();
        assert_ne!(rep.item_embedding, p);
        assert_eq!(state.model.predictor, before.predictor);
        assert_eq!(state.model.user_embedding, before.user_embedding);
    }

    #[test]
    fn strong_alignment_pulls_embedding_to_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 10;
        let p = rand_matrix(&mut rng, m, 3);
        let r = rand_matrix(&mut rng, m, 3);
        let data = LocalData {
            positives: vec![],
            num_warm: m,
        };
        let mut state = ClientState::new(0, Variant::Pfedrec, 3, 0);
        // alignment-only path: each epoch contracts p − r by (1 − 2λη₂/m)
        let c = LocalTraining {
            lambda: 1e6,
            user_lr: 0.0,
            item_lr: 2e-6,
            epochs: 30,
            ..cfg()
        };
        let start = p.sub(&r).unwrap().squared_norm();
        let rep = client_update(&mut state, &p, &r, &c, &data).unwrap();
        let end = rep.item_embedding.sub(&r).unwrap().squared_norm();
        assert!(end < 1e-3 * start, "{end} vs {start}");
        assert!(rep.skipped_recommendation);
        let trace = &rep.alignment_penalty;
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn trace_lengths_follow_epochs_and_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = rand_matrix(&mut rng, 60, 4);
        let r = rand_matrix(&mut rng, 60, 4);
        let data = LocalData {
            positives: (0..8).collect(),
            num_warm: 60,
        };
        let mut state = ClientState::new(1, Variant::Pfedrec, 4, 0);
        let c = LocalTraining {
            epochs: 3,
            batch_size: 16,
            ..cfg()
        };
        let rep = client_update(&mut state, &p, &r, &c, &data).unwrap();
        // 8 positives + 40 negatives in batches of 16
        assert_eq!(rep.batches, 9);
        assert_eq!(rep.recommendation_loss.len(), 9);
        assert_eq!(rep.alignment_penalty.len(), 9);
        assert!(rep.recommendation_loss.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut state = ClientState::new(0, Variant::Ncf, 4, 0);
        let data = LocalData {
            positives: vec![0],
            num_warm: 5,
        };
        let ok = DenseMatrix::zeros(5, 4);
        assert!(client_update(&mut state, &DenseMatrix::zeros(4, 4), &ok, &cfg(), &data).is_err());
        assert!(client_update(&mut state, &ok, &DenseMatrix::zeros(5, 3), &cfg(), &data).is_err());
    }

    #[test]
    fn ldp_identity_and_reproducibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = rand_matrix(&mut rng, 4, 3);
        assert_eq!(apply_ldp(&p, 0.0, &mut rng).unwrap(), p);
        let a = apply_ldp(&p, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = apply_ldp(&p, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, p);
        assert!(matches!(apply_ldp(&p, -1.0, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn ldp_noise_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = rand_matrix(&mut rng, 2, 3);
        let n = 100_000;
        let mut acc = DenseMatrix::zeros(2, 3);
        for _ in 0..n {
            acc.axpy(1.0, &apply_ldp(&p, 0.3, &mut rng).unwrap()).unwrap();
        }
        let mean = acc.scale(1.0 / n as f64);
        assert!(mean.max_abs_diff(&p).unwrap() < 0.01);
    }
}
