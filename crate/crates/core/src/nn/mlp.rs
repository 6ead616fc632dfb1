use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::sigmoid;
use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(W·x + b)` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Gradients for every layer of an [`MlpParams`], in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGradient>,
}

impl GradientBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradientBundle {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.as_slice().iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0))
    }

    /// Flattened view in parameter order: layer by layer, weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

/// Values kept from a forward pass for the backward pass.
pub(crate) struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    activations: Vec<DenseMatrix>,
    preacts: Vec<DenseMatrix>,
}

impl ForwardTrace {
    pub(crate) fn output(&self) -> &DenseMatrix {
        self.activations.last().expect("trace always holds the input")
    }

    pub(crate) fn logits(&self) -> &DenseMatrix {
        self.preacts.last().expect("networks have at least one layer")
    }
}

/// Where the upstream gradient handed to backward is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientAt {
    /// Gradient with respect to the network output (after the last activation).
    Output,
    /// Gradient with respect to the last layer's pre-activation.
    Logit,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::dim(
                    "MlpParams::new bias",
                    layer.weight.shape(),
                    (layer.bias.len(), 1),
                ));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.input_dim() != layer.output_dim() {
                    return Err(Error::dim(
                        "MlpParams::new layer chain",
                        layer.weight.shape(),
                        next.weight.shape(),
                    ));
                }
            }
        }
        Ok(MlpParams { layers })
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights and zero biases.
    ///
    /// `sizes` lists the input dimension followed by every layer's output
    /// dimension; hidden layers use `hidden`, the final layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need an input and at least one output size");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let weight =
                    DenseMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let mut x = self.check_input(input)?.clone();
        for layer in &self.layers {
            let mut z = affine(layer, &x)?;
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass that stops before the final activation.
    pub fn forward_logits(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let trace = self.forward_trace(input)?;
        Ok(trace.logits().clone())
    }

    pub(crate) fn forward_trace(&self, input: &DenseMatrix) -> Result<ForwardTrace> {
        let input = self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut preacts = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for layer in &self.layers {
            let z = affine(layer, activations.last().expect("non-empty"))?;
            let a = if layer.activation == Activation::Identity {
                z.clone()
            } else {
                let act = layer.activation;
                z.map(|v| act.apply(v))
            };
            preacts.push(z);
            activations.push(a);
        }
        Ok(ForwardTrace {
            activations,
            preacts,
        })
    }

    /// Gradients of a scalar loss with respect to every parameter and to the
    /// input, given `upstream = ∂loss/∂output`.
    pub fn backward(
        &self,
        input: &DenseMatrix,
        upstream: &DenseMatrix,
    ) -> Result<(GradientBundle, DenseMatrix)> {
        self.backward_at(input, upstream, GradientAt::Output)
    }

    /// Like [`MlpParams::backward`], with the upstream gradient taken at `at`.
    pub fn backward_at(
        &self,
        input: &DenseMatrix,
        upstream: &DenseMatrix,
        at: GradientAt,
    ) -> Result<(GradientBundle, DenseMatrix)> {
        let trace = self.forward_trace(input)?;
        let (grads, input_grad) = self.backprop(&trace, upstream, at, true)?;
        Ok((grads.expect("parameter gradients requested"), input_grad))
    }

    pub(crate) fn backprop(
        &self,
        trace: &ForwardTrace,
        upstream: &DenseMatrix,
        at: GradientAt,
        want_params: bool,
    ) -> Result<(Option<GradientBundle>, DenseMatrix)> {
        let out_shape = trace.output().shape();
        if upstream.shape() != out_shape {
            return Err(Error::dim("mlp backward upstream", upstream.shape(), out_shape));
        }
        let last = self.layers.len() - 1;
        let mut delta = match at {
            GradientAt::Logit => upstream.clone(),
            GradientAt::Output => activation_grad(
                self.layers[last].activation,
                &trace.preacts[last],
                &trace.activations[last + 1],
                upstream,
            ),
        };

        let mut layer_grads = Vec::with_capacity(if want_params { self.layers.len() } else { 0 });
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if want_params {
                let weight = delta.matmul_tn(&trace.activations[l])?;
                let mut bias = vec![0.0; layer.output_dim()];
                for row in delta.row_iter() {
                    for (b, d) in bias.iter_mut().zip(row) {
                        *b += d;
                    }
                }
                layer_grads.push(LayerGradient { weight, bias });
            }
            let upstream_in = delta.matmul(&layer.weight)?;
            delta = if l == 0 {
                upstream_in
            } else {
                activation_grad(
                    self.layers[l - 1].activation,
                    &trace.preacts[l - 1],
                    &trace.activations[l],
                    &upstream_in,
                )
            };
        }
        let grads = want_params.then(|| {
            layer_grads.reverse();
            GradientBundle {
                layers: layer_grads,
            }
        });
        Ok((grads, delta))
    }

    /// Plain SGD: `θ ← θ − lr·∂θ`. Nothing is modified if any gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim(
                "sgd_step layer count",
                (self.layers.len(), 0),
                (grads.layers.len(), 0),
            ));
        }
        for (i, (layer, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if layer.weight.shape() != g.weight.shape() {
                return Err(Error::dim("sgd_step weight", layer.weight.shape(), g.weight.shape()));
            }
            if layer.bias.len() != g.bias.len() {
                return Err(Error::dim("sgd_step bias", (layer.bias.len(), 1), (g.bias.len(), 1)));
            }
            ensure_finite(g.weight.as_slice(), &format!("layer {i} weight"))?;
            ensure_finite(&g.bias, &format!("layer {i} bias"))?;
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            apply_step(layer.weight.as_mut_slice(), g.weight.as_slice(), lr);
            apply_step(&mut layer.bias, &g.bias, lr);
        }
        Ok(())
    }

    /// Flattened parameters in the same order as [`GradientBundle::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the parameter at a flattened index.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if index < nw {
                return &mut l.weight.as_mut_slice()[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input<'a>(&self, input: &'a DenseMatrix) -> Result<&'a DenseMatrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim(
                "mlp input",
                input.shape(),
                (input.rows(), self.input_dim()),
            ));
        }
        Ok(input)
    }
}

fn affine(layer: &Layer, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut z = x.matmul_nt(&layer.weight)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

fn activation_grad(
    act: Activation,
    z: &DenseMatrix,
    a: &DenseMatrix,
    upstream: &DenseMatrix,
) -> DenseMatrix {
    if act == Activation::Identity {
        return upstream.clone();
    }
    let mut out = upstream.clone();
    for ((g, &zv), &av) in out
        .as_mut_slice()
        .iter_mut()
        .zip(z.as_slice())
        .zip(a.as_slice())
    {
        *g *= act.derivative(zv, av);
    }
    out
}

pub(crate) fn ensure_finite(values: &[f64], name: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::training(
            name.to_string(),
            format!("non-finite gradient at index {pos}"),
        ));
    }
    Ok(())
}

fn apply_step(param: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// SGD on a flat tensor; `name` identifies the tensor in the error.
pub fn sgd_update(param: &mut [f64], grad: &[f64], lr: f64, name: &str) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::dim("sgd_update", (param.len(), 1), (grad.len(), 1)));
    }
    ensure_finite(grad, name)?;
    apply_step(param, grad, lr);
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::loss::sigmoid;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = MlpParams::new(vec![Layer {
            weight: DenseMatrix::identity(2),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weight_sigmoid_layer_is_constant() {
        let net = MlpParams::new(vec![Layer {
            weight: DenseMatrix::zeros(1, 3),
            bias: vec![0.5],
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let x = DenseMatrix::from_fn(4, 3, |i, j| (i * 7 + j) as f64 - 3.0);
        let y = net.forward(&x).unwrap();
        for &v in y.as_slice() {
            assert!((v - 0.622_459_331_201_854_6).abs() < 1e-9);
        }
        assert!((sigmoid(0.5) - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn random_net_matches_straight_line_evaluation() {
        let mut r = rng();
        let net = MlpParams::init(&[3, 4, 1], Activation::Relu, Activation::Sigmoid, &mut r);
        let x = DenseMatrix::from_fn(5, 3, |_, _| r.random_range(-1.0..1.0));
        let got = net.forward(&x).unwrap();
        let (l0, l1) = (&net.layers()[0], &net.layers()[1]);
        for i in 0..5 {
            let mut h = [0.0; 4];
            for (o, hv) in h.iter_mut().enumerate() {
                let mut s = l0.bias[o];
                for t in 0..3 {
                    s += l0.weight.get(o, t) * x.get(i, t);
                }
                *hv = if s > 0.0 { s } else { 0.0 };
            }
            let mut z = l1.bias[0];
            for (t, hv) in h.iter().enumerate() {
                z += l1.weight.get(0, t) * hv;
            }
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((got.get(i, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = MlpParams::init(&[3, 2], Activation::Relu, Activation::Identity, &mut rng());
        let err = net.forward(&DenseMatrix::zeros(2, 4)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn new_rejects_broken_chain() {
        let a = Layer {
            weight: DenseMatrix::zeros(3, 2),
            bias: vec![0.0; 3],
            activation: Activation::Relu,
        };
        let b = Layer {
            weight: DenseMatrix::zeros(1, 4),
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        assert!(MlpParams::new(vec![a.clone(), b]).is_err());
        let bad_bias = Layer {
            bias: vec![0.0; 2],
            ..a
        };
        assert!(MlpParams::new(vec![bad_bias]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let net = MlpParams::init(&[4, 5, 2], Activation::Relu, Activation::Sigmoid, &mut r);
        let x = DenseMatrix::from_fn(3, 4, |_, _| r.random_range(-1.0..1.0));
        let (g, gi) = net.backward(&x, &DenseMatrix::zeros(3, 2)).unwrap();
        assert!(g.is_zero());
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_transposed_weight_product() {
        let mut r = rng();
        let net = MlpParams::init(&[3, 2], Activation::Relu, Activation::Identity, &mut r);
        let x = DenseMatrix::from_fn(1, 3, |_, _| r.random_range(-1.0..1.0));
        let up = DenseMatrix::from_rows(&[vec![0.7, -1.3]]).unwrap();
        let (_, gi) = net.backward(&x, &up).unwrap();
        let w = &net.layers()[0].weight;
        let expect = w.transpose().matmul(&up.transpose()).unwrap().transpose();
        assert_eq!(gi, expect);
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let net = MlpParams::init(&[3, 2], Activation::Relu, Activation::Identity, &mut rng());
        let x = DenseMatrix::zeros(4, 3);
        assert!(net.backward(&x, &DenseMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn sgd_step_closed_form_and_zero_lr() {
        let mut net = MlpParams::new(vec![Layer {
            weight: DenseMatrix::filled(1, 1, 1.0),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let grads = GradientBundle {
            layers: vec![LayerGradient {
                weight: DenseMatrix::filled(1, 1, 0.5),
                bias: vec![0.0],
            }],
        };
        let before = net.clone();
        net.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(net, before);
        net.sgd_step(&grads, 0.1).unwrap();
        assert!((net.layers()[0].weight.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_rejects_non_finite_and_names_parameter() {
        let mut net = MlpParams::init(&[2, 2, 1], Activation::Relu, Activation::Identity, &mut rng());
        let mut grads = GradientBundle::zeros_like(&net);
        grads.layers[1].bias[0] = f64::NAN;
        let before = net.clone();
        let err = net.sgd_step(&grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer 1 bias"), "{err}");
        assert_eq!(net, before);
    }
}
