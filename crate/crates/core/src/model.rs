//! Client recommendation models and the server-side meta attribute network.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, DenseMatrix, GradientBundle, LayerGradient, MlpParams};

/// Which rating predictor a client runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// User embedding concatenated with the item embedding, then a
    /// `2d → d → d/2 → 1` MLP with a sigmoid output.
    #[default]
    Ncf,
    /// No user embedding; a personal one-layer `d → 1` scorer with a sigmoid output.
    Pfedrec,
}

impl Variant {
    /// Alignment coefficient used when none is configured.
    pub fn default_lambda(self) -> f64 {
        match self {
            Variant::Ncf => 1.0,
            Variant::Pfedrec => 10.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ncf => "ncf",
            Variant::Pfedrec => "pfedrec",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncf" | "ifedncf" => Ok(Variant::Ncf),
            "pfedrec" | "ipfedrec" => Ok(Variant::Pfedrec),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected ncf or pfedrec)"))),
        }
    }
}

/// One client's recommendation model.
///
/// `item_embedding` holds the local copy of the warm item embedding while a
/// local update runs and is empty (`0 × d`) otherwise; the user embedding and
/// predictor are the private, persistent part.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModel {
    pub variant: Variant,
    pub item_embedding: DenseMatrix,
    pub user_embedding: Option<Vec<f64>>,
    pub predictor: MlpParams,
}

/// Gradients of a client loss with respect to the private parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivateGradients {
    pub user_embedding: Option<Vec<f64>>,
    pub predictor: GradientBundle,
}

impl ClientModel {
    pub fn init<R: Rng + ?Sized>(variant: Variant, dim: usize, rng: &mut R) -> Self {
        match variant {
            Variant::Ncf => {
                let half = (dim / 2).max(1);
                let predictor = MlpParams::init(
                    &[2 * dim, dim, half, 1],
                    Activation::Relu,
                    Activation::Sigmoid,
                    rng,
                );
                let bound = 1.0 / (dim as f64).sqrt();
                let user = (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
                ClientModel {
                    variant,
                    item_embedding: DenseMatrix::zeros(0, dim),
                    user_embedding: Some(user),
                    predictor,
                }
            }
            Variant::Pfedrec => ClientModel {
                variant,
                item_embedding: DenseMatrix::zeros(0, dim),
                user_embedding: None,
                predictor: MlpParams::init(&[dim, 1], Activation::Relu, Activation::Sigmoid, rng),
            },
        }
    }

    /// Assembles a model from explicit parameters, checking the variant wiring.
    pub fn from_parts(
        variant: Variant,
        user_embedding: Option<Vec<f64>>,
        predictor: MlpParams,
    ) -> Result<Self> {
        let dim = match (variant, &user_embedding) {
            (Variant::Ncf, Some(q)) => {
                if predictor.input_dim() != 2 * q.len() {
                    return Err(Error::dim(
                        "NCF predictor input",
                        (predictor.input_dim(), 1),
                        (2 * q.len(), 1),
                    ));
                }
                q.len()
            }
            (Variant::Ncf, None) => {
                return Err(Error::Config("the NCF variant needs a user embedding".into()))
            }
            (Variant::Pfedrec, None) => predictor.input_dim(),
            (Variant::Pfedrec, Some(_)) => {
                return Err(Error::Config("the PFedRec variant has no user embedding".into()))
            }
        };
        if predictor.output_dim() != 1 {
            return Err(Error::dim("predictor output", (predictor.output_dim(), 1), (1, 1)));
        }
        Ok(ClientModel {
            variant,
            item_embedding: DenseMatrix::zeros(0, dim),
            user_embedding,
            predictor,
        })
    }

    /// Item embedding dimension `d`.
    pub fn dim(&self) -> usize {
        match &self.user_embedding {
            Some(q) => q.len(),
            None => self.predictor.input_dim(),
        }
    }

    /// The predictor specialized to this user, taking item rows alone.
    ///
    /// For NCF the user half of the first layer is folded into its bias:
    /// `W·[q; p] + b = W_p·p + (W_q·q + b)`.
    pub fn item_scorer(&self) -> MlpParams {
        let Some(q) = &self.user_embedding else {
            return self.predictor.clone();
        };
        let d = q.len();
        let mut scorer = self.predictor.clone();
        let first = &mut scorer.layers_mut()[0];
        let full = &self.predictor.layers()[0].weight;
        for o in 0..full.rows() {
            let row = full.row(o);
            first.bias[o] += row[..d].iter().zip(q).map(|(w, x)| w * x).sum::<f64>();
        }
        first.weight = full.column_slice(d, 2 * d);
        scorer
    }

    /// Maps gradients of the [`ClientModel::item_scorer`] network back onto the
    /// predictor and user embedding.
    pub fn unfold_gradients(&self, scorer_grads: GradientBundle) -> PrivateGradients {
        let Some(q) = &self.user_embedding else {
            return PrivateGradients {
                user_embedding: None,
                predictor: scorer_grads,
            };
        };
        let d = q.len();
        let mut layers = scorer_grads.layers;
        let first = &layers[0];
        let w_full = &self.predictor.layers()[0].weight;
        // ∂W_q = ∂b ⊗ q and ∂q = W_qᵀ·∂b, since q enters every row identically.
        let weight = DenseMatrix::from_fn(w_full.rows(), 2 * d, |o, j| {
            if j < d {
                first.bias[o] * q[j]
            } else {
                first.weight.get(o, j - d)
            }
        });
        let mut grad_q = vec![0.0; d];
        for (o, gb) in first.bias.iter().enumerate() {
            for (gq, w) in grad_q.iter_mut().zip(&w_full.row(o)[..d]) {
                *gq += w * gb;
            }
        }
        layers[0] = LayerGradient {
            weight,
            bias: layers[0].bias.clone(),
        };
        PrivateGradients {
            user_embedding: Some(grad_q),
            predictor: GradientBundle { layers },
        }
    }

    /// Explicit predictor input: `[q; p_v]` per row for NCF, `p_v` for PFedRec.
    pub fn predictor_input(&self, item_rows: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(item_rows)?;
        match &self.user_embedding {
            Some(q) => {
                let user = DenseMatrix::from_fn(item_rows.rows(), q.len(), |_, j| q[j]);
                user.hconcat(item_rows)
            }
            None => Ok(item_rows.clone()),
        }
    }

    /// Pre-sigmoid scores, one per item row.
    pub fn logits(&self, item_rows: &DenseMatrix) -> Result<Vec<f64>> {
        self.check_rows(item_rows)?;
        Ok(self.item_scorer().forward_logits(item_rows)?.into_vec())
    }

    /// Scores in (0, 1), one per item row.
    pub fn predict(&self, item_rows: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self.logits(item_rows)?.into_iter().map(sigmoid).collect())
    }

    fn check_rows(&self, item_rows: &DenseMatrix) -> Result<()> {
        if item_rows.cols() != self.dim() {
            return Err(Error::dim(
                "item rows",
                item_rows.shape(),
                (item_rows.rows(), self.dim()),
            ));
        }
        Ok(())
    }
}

/// Server-side map from raw item attributes to the item embedding space:
/// one linear layer `d_attr → d` with no output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaAttributeNetwork {
    pub params: MlpParams,
}

impl MetaAttributeNetwork {
    pub fn init<R: Rng + ?Sized>(attribute_dim: usize, dim: usize, rng: &mut R) -> Self {
        MetaAttributeNetwork {
            params: MlpParams::init(&[attribute_dim, dim], Activation::Relu, Activation::Identity, rng),
        }
    }

    pub fn from_params(params: MlpParams) -> Result<Self> {
        if params.layers().len() != 1 || params.layers()[0].activation != Activation::Identity {
            return Err(Error::Config(
                "the meta attribute network is a single linear layer".into(),
            ));
        }
        Ok(MetaAttributeNetwork { params })
    }

    pub fn attribute_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.params.output_dim()
    }

    /// One `d`-dimensional representation per attribute row.
    pub fn attribute_representation(&self, attributes: &DenseMatrix) -> Result<DenseMatrix> {
        self.params.forward(attributes)
    }
}
