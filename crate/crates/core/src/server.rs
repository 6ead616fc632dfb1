//! Server side of the protocol: global item embedding, client sampling,
//! averaging, and the meta attribute network fitted to the global embedding.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::MetaAttributeNetwork;
use crate::nn::{mse_loss_and_grad, DenseMatrix, GradientAt};

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global_item_embedding: DenseMatrix,
    pub meta_net: MetaAttributeNetwork,
    pub round: usize,
    rng: ChaCha8Rng,
}

impl ServerState {
    /// Global embedding entries are drawn from `N(0, init_scale²)`; the meta
    /// network uses the default layer init. Uses stream 0 of `seed`.
    pub fn new(num_warm: usize, dim: usize, attribute_dim: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if !(init_scale >= 0.0) || !init_scale.is_finite() {
            return Err(Error::Config(format!(
                "embedding init scale must be finite and non-negative, got {init_scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta_net = MetaAttributeNetwork::init(attribute_dim, dim, &mut rng);
        let global_item_embedding = if init_scale == 0.0 {
            DenseMatrix::zeros(num_warm, dim)
        } else {
            let normal = Normal::new(0.0, init_scale).expect("validated scale");
            DenseMatrix::from_fn(num_warm, dim, |_, _| normal.sample(&mut rng))
        };
        Ok(ServerState {
            global_item_embedding,
            meta_net,
            round: 0,
            rng,
        })
    }

    pub fn from_parts(global_item_embedding: DenseMatrix, meta_net: MetaAttributeNetwork, round: usize, seed: u64) -> Result<Self> {
        if global_item_embedding.cols() != meta_net.output_dim() {
            return Err(Error::dim(
                "server state",
                global_item_embedding.shape(),
                (global_item_embedding.rows(), meta_net.output_dim()),
            ));
        }
        if !global_item_embedding.is_finite() {
            return Err(Error::Checkpoint("global item embedding is not finite".into()));
        }
        Ok(ServerState {
            global_item_embedding,
            meta_net,
            round,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn sample_clients(&mut self, n: usize, ratio: f64) -> Result<Vec<usize>> {
        sample_clients(n, ratio, &mut self.rng)
    }

    /// Fits φ to the current global embedding; see [`train_meta_network`].
    pub fn train_meta_network(
        &mut self,
        warm_attributes: &DenseMatrix,
        epochs: usize,
        lr: f64,
        batch_size: Option<usize>,
    ) -> Result<Vec<f64>> {
        train_meta_network(
            &mut self.meta_net,
            &self.global_item_embedding,
            warm_attributes,
            epochs,
            lr,
            batch_size,
            &mut self.rng,
        )
    }

    pub fn cold_representations(&self, cold_attributes: &DenseMatrix) -> Result<DenseMatrix> {
        cold_representations(&self.meta_net, cold_attributes)
    }
}

/// Number of clients drawn per round, `⌈α·n⌉`, tolerant to float round-off
/// in `α·n` (0.1 × 5551 must give 556, 0.3 × 10 must give 3).
pub fn clients_per_round(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("client sampling ratio must be in (0, 1], got {ratio}")));
    }
    let exact = ratio * n as f64;
    Ok(((exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize).min(n))
}

/// Draws `⌈α·n⌉` distinct client ids uniformly without replacement, sorted.
pub fn sample_clients<R: rand::Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    let count = clients_per_round(n, ratio)?;
    if count == n {
        return Ok((0..n).collect());
    }
    let mut ids = index::sample(rng, n, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Element-wise mean of the uploads, accumulated in the order given.
pub fn aggregate(uploads: &[DenseMatrix]) -> Result<DenseMatrix> {
    let Some(first) = uploads.first() else {
        return Err(Error::Aggregation("no uploads to aggregate".into()));
    };
    let mut acc = first.clone();
    for up in &uploads[1..] {
        if up.shape() != acc.shape() {
            return Err(Error::dim("aggregate", up.shape(), acc.shape()));
        }
        for (a, v) in acc.as_mut_slice().iter_mut().zip(up.as_slice()) {
            *a += v;
        }
    }
    if uploads.len() > 1 {
        let inv = 1.0 / uploads.len() as f64;
        for a in acc.as_mut_slice() {
            *a *= inv;
        }
    }
    Ok(acc)
}

/// `E₁` gradient-descent epochs on `(1/m)·Σ‖ℳ_φ(x_v) − p(v)‖²` with rate γ;
/// `p` is read-only. Full batch unless `batch_size` is smaller than `m`, in
/// which case each epoch visits shuffled mini-batches.
///
/// Returns the loss of each epoch: the full-batch loss before its step, or
/// the mean mini-batch loss.
pub fn train_meta_network<R: rand::Rng + ?Sized>(
    meta_net: &mut MetaAttributeNetwork,
    target: &DenseMatrix,
    warm_attributes: &DenseMatrix,
    epochs: usize,
    lr: f64,
    batch_size: Option<usize>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("meta learning rate must be positive, got {lr}")));
    }
    if warm_attributes.rows() != target.rows() || warm_attributes.cols() != meta_net.attribute_dim() {
        return Err(Error::dim(
            "meta network attributes",
            warm_attributes.shape(),
            (target.rows(), meta_net.attribute_dim()),
        ));
    }
    let m = target.rows();
    let batch = batch_size.filter(|&b| b > 0 && b < m);
    let mut trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..epochs {
        let fail = |msg: String| Error::training(format!("meta network epoch {epoch}"), msg);
        let mut step = |x: &DenseMatrix, y: &DenseMatrix| -> Result<f64> {
            let pred = meta_net.params.forward(x)?;
            let (loss, grad) = mse_loss_and_grad(&pred, y)?;
            if !loss.is_finite() {
                return Err(fail(format!("non-finite loss {loss}")));
            }
            let (grads, _) = meta_net.params.backward_at(x, &grad, GradientAt::Output)?;
            meta_net
                .params
                .sgd_step(&grads, lr)
                .map_err(|e| e.within(format!("meta network epoch {epoch}")))?;
            Ok(loss)
        };
        let loss = match batch {
            None => step(warm_attributes, target)?,
            Some(b) => {
                order.shuffle(rng);
                let mut total = 0.0;
                let mut count = 0;
                for chunk in order.chunks(b) {
                    total += step(&warm_attributes.gather_rows(chunk)?, &target.gather_rows(chunk)?)?;
                    count += 1;
                }
                total / count as f64
            }
        };
        trace.push(loss);
    }
    Ok(trace)
}

/// `r = ℳ_φ(X)` row by row; an empty attribute matrix gives an empty result.
pub fn cold_representations(meta_net: &MetaAttributeNetwork, attributes: &DenseMatrix) -> Result<DenseMatrix> {
    if attributes.cols() != meta_net.attribute_dim() {
        return Err(Error::dim(
            "cold attributes",
            attributes.shape(),
            (attributes.rows(), meta_net.attribute_dim()),
        ));
    }
    if attributes.rows() == 0 {
        return Ok(DenseMatrix::zeros(0, meta_net.output_dim()));
    }
    meta_net.attribute_representation(attributes)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::nn::{Activation, Layer, MlpParams};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sampling_counts() {
        let mut r = rng(0);
        assert_eq!(sample_clients(7, 1.0, &mut r).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(sample_clients(5551, 0.1, &mut r).unwrap().len(), 556);
        assert_eq!(clients_per_round(10, 0.3).unwrap(), 3);
        assert_eq!(clients_per_round(10, 0.31).unwrap(), 4);
        assert_eq!(clients_per_round(200, 0.5).unwrap(), 100);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sample_clients(10, bad, &mut r), Err(Error::Config(_))));
        }
        let s = sample_clients(100, 0.37, &mut r).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut r = rng(1);
        let rounds = 10_000;
        let mut counts = [0usize; 20];
        for _ in 0..rounds {
            for id in sample_clients(20, 0.5, &mut r).unwrap() {
                counts[id] += 1;
            }
        }
        let sigma = (rounds as f64 * 0.25).sqrt();
        for c in counts {
            assert!((c as f64 - 0.5 * rounds as f64).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn aggregate_closed_forms() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(aggregate(&[a.clone()]).unwrap(), a);
        assert_eq!(aggregate(&[a.clone(), b]).unwrap().as_slice(), &[1.0, 1.0]);
        assert!(matches!(aggregate(&[]), Err(Error::Aggregation(_))));
        assert!(matches!(
            aggregate(&[a, DenseMatrix::zeros(2, 2)]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn aggregate_matches_independent_mean() {
        let mut r = rng(2);
        let ups: Vec<DenseMatrix> = (0..7).map(|_| rand_matrix(&mut r, 5, 4)).collect();
        let agg = aggregate(&ups).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mean = ups.iter().map(|u| u.get(i, j)).sum::<f64>() / 7.0;
                assert!((agg.get(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_point_leaves_meta_network_unchanged() {
        let mut r = rng(3);
        let mut net = MetaAttributeNetwork::init(6, 3, &mut r);
        let x = rand_matrix(&mut r, 10, 6);
        let p = net.attribute_representation(&x).unwrap();
        let before = net.clone();
        let trace = train_meta_network(&mut net, &p, &x, 3, 0.1, None, &mut r).unwrap();
        assert!(trace.iter().all(|&l| l == 0.0));
        assert_eq!(net, before);
    }

    #[test]
    fn meta_training_does_not_touch_target_and_descends() {
        let mut r = rng(4);
        let mut server = ServerState::new(40, 3, 5, 0.5, 9).unwrap();
        let x = rand_matrix(&mut r, 40, 5);
        let p = server.global_item_embedding.clone();
        let trace = server.train_meta_network(&x, 50, 0.05, None).unwrap();
        assert_eq!(server.global_item_embedding, p);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        let trace = server.train_meta_network(&x, 5, 0.05, Some(8)).unwrap();
        assert_eq!(trace.len(), 5);
    }

    /// Gaussian elimination with partial pivoting on the normal equations.
    fn least_squares_loss(x: &DenseMatrix, y: &DenseMatrix) -> f64 {
        let (m, k) = (x.rows(), x.cols() + 1);
        let aug = |i: usize, j: usize| if j == k - 1 { 1.0 } else { x.get(i, j) };
        let mut ata = vec![vec![0.0; k]; k];
        let mut aty = vec![vec![0.0; y.cols()]; k];
        for i in 0..m {
            for a in 0..k {
                for b in 0..k {
                    ata[a][b] += aug(i, a) * aug(i, b);
                }
                for c in 0..y.cols() {
                    aty[a][c] += aug(i, a) * y.get(i, c);
                }
            }
        }
        for col in 0..k {
            let piv = (col..k).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, piv);
            aty.swap(col, piv);
            for row in 0..k {
                if row != col {
                    let f = ata[row][col] / ata[col][col];
                    for j in 0..k {
                        ata[row][j] -= f * ata[col][j];
                    }
                    for c in 0..y.cols() {
                        aty[row][c] -= f * aty[col][c];
                    }
                }
            }
        }
        let mut loss = 0.0;
        for i in 0..m {
            for c in 0..y.cols() {
                let pred: f64 = (0..k).map(|a| aug(i, a) * aty[a][c] / ata[a][a]).sum();
                loss += (pred - y.get(i, c)).powi(2);
            }
        }
        loss / m as f64
    }

    #[test]
    fn gradient_descent_approaches_least_squares() {
        let mut r = rng(5);
        let x = rand_matrix(&mut r, 60, 4);
        let y = rand_matrix(&mut r, 60, 2);
        let mut net = MetaAttributeNetwork::from_params(
            MlpParams::new(vec![Layer {
                weight: DenseMatrix::zeros(2, 4),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            }])
            .unwrap(),
        )
        .unwrap();
        let trace = train_meta_network(&mut net, &y, &x, 3000, 0.1, None, &mut r).unwrap();
        let optimum = least_squares_loss(&x, &y);
        let last = *trace.last().unwrap();
        assert!(last <= optimum * 1.001 + 1e-12, "{last} vs {optimum}");
    }

    #[test]
    fn cold_representations_are_row_wise() {
        let mut r = rng(6);
        let net = MetaAttributeNetwork::init(4, 3, &mut r);
        let x = rand_matrix(&mut r, 5, 4);
        let all = cold_representations(&net, &x).unwrap();
        for i in 0..5 {
            let one = cold_representations(&net, &x.gather_rows(&[i]).unwrap()).unwrap();
            assert!(one.max_abs_diff(&all.gather_rows(&[i]).unwrap()).unwrap() < 1e-15);
        }
        assert_eq!(cold_representations(&net, &DenseMatrix::zeros(0, 4)).unwrap().shape(), (0, 3));
        assert!(cold_representations(&net, &DenseMatrix::zeros(2, 5)).is_err());
    }
}
