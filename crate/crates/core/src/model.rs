//! Model description and the sequential network built from it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::alpha::{AlphaPool, PoolGeometry, ReluPlus, ALPHA_INIT};
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, Conv2d, Dense, Layer, Param, ParamRole, Relu};
use crate::pool::{AvgPool, LpPool, MaxPool, LP_RHO_INIT};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    Lp,
    AlphaI,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
            PoolKind::Lp => "lp",
            PoolKind::AlphaI => "alphaI",
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            "lp" => Ok(PoolKind::Lp),
            "alphaI" | "alphai" | "alpha" => Ok(PoolKind::AlphaI),
            other => Err(Error::Config(format!(
                "unknown pool type `{other}` (expected max, avg, lp or alphaI)"
            ))),
        }
    }
}

/// Activation placed between each convolution and its pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    /// ReLU+ in front of alpha-integration pools, plain ReLU otherwise.
    Auto,
    Relu,
    ReluPlus,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Auto => "auto",
            ActivationKind::Relu => "relu",
            ActivationKind::ReluPlus => "relu_plus",
        }
    }

    fn resolve(self, pool: PoolKind) -> ActivationKind {
        match (self, pool) {
            (ActivationKind::Auto, PoolKind::AlphaI) => ActivationKind::ReluPlus,
            (ActivationKind::Auto, _) => ActivationKind::Relu,
            (other, _) => other,
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ActivationKind::Auto),
            "relu" => Ok(ActivationKind::Relu),
            "relu_plus" | "relu+" => Ok(ActivationKind::ReluPlus),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture of a conv/activation/pool stack followed by one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    pub pool: PoolKind,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub activation: ActivationKind,
    pub alpha_init: f64,
    pub freeze_alpha: bool,
    pub lp_rho_init: f64,
}

impl ModelConfig {
    /// Two conv(5x5, pad 2) / activation / pool(2x2, stride 2) stages with
    /// 32 and 64 filters, then a dense classifier.
    pub fn simple_cnn(input: (usize, usize, usize), classes: usize, pool: PoolKind) -> Self {
        ModelConfig {
            input,
            classes,
            conv_channels: vec![32, 64],
            conv_kernel: 5,
            conv_padding: 2,
            pool,
            pool_window: 2,
            pool_stride: 2,
            activation: ActivationKind::Auto,
            alpha_init: ALPHA_INIT,
            freeze_alpha: false,
            lp_rho_init: LP_RHO_INIT,
        }
    }

    pub fn mnist(pool: PoolKind) -> Self {
        Self::simple_cnn((1, 28, 28), 10, pool)
    }

    pub fn cifar10(pool: PoolKind) -> Self {
        Self::simple_cnn((3, 32, 32), 10, pool)
    }
}

/// Sequential network.
pub struct Model<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
    input: (usize, usize, usize),
    classes: usize,
}

/// Builds and shape-checks the network described by `config`.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Model<T>> {
    if config.conv_channels.is_empty() {
        return Err(Error::Config("at least one convolution is required".into()));
    }
    if config.classes < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    let geom = PoolGeometry::new(
        (config.pool_window, config.pool_window),
        (config.pool_stride, config.pool_stride),
    )?;
    let activation = config.activation.resolve(config.pool);
    let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
    let (c0, h0, w0) = config.input;
    let mut dims = vec![1, c0, h0, w0];
    let mut in_channels = c0;
    for (i, &out_channels) in config.conv_channels.iter().enumerate() {
        let stage = i + 1;
        let mut conv = Conv2d::new(
            format!("conv{stage}"),
            in_channels,
            out_channels,
            config.conv_kernel,
            1,
            config.conv_padding,
            rng,
        )?;
        // Nothing consumes the gradient with respect to the images.
        conv.set_input_grad(i > 0);
        layers.push(Box::new(conv));
        layers.push(match activation {
            ActivationKind::ReluPlus => Box::new(ReluPlus::new(format!("act{stage}"))),
            _ => Box::new(Relu::new(format!("act{stage}"))),
        });
        let name = format!("pool{stage}");
        layers.push(match config.pool {
            PoolKind::Max => Box::new(MaxPool::new(name, geom)),
            PoolKind::Avg => Box::new(AvgPool::new(name, geom)),
            PoolKind::Lp => Box::new(LpPool::new(name, geom, config.lp_rho_init)),
            PoolKind::AlphaI => {
                let mut pool = AlphaPool::new(name, geom, config.alpha_init);
                pool.alpha_param_mut().frozen = config.freeze_alpha;
                Box::new(pool)
            }
        });
        for layer in &layers[layers.len() - 3..] {
            dims = layer.output_dims(&dims)?;
        }
        in_channels = out_channels;
    }
    let features: usize = dims[1..].iter().product();
    layers.push(Box::new(Dense::new("fc", features, config.classes, rng)?));
    Model::from_layers(layers, config.input, config.classes)
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from explicit layers, checking the shape chain.
    pub fn from_layers(
        layers: Vec<Box<dyn Layer<T>>>,
        input: (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let mut dims = vec![1, input.0, input.1, input.2];
        for layer in &layers {
            dims = layer.output_dims(&dims)?;
        }
        if dims != [1, classes] {
            return Err(Error::ShapeMismatch {
                op: "model output",
                expected: vec![1, classes],
                got: dims,
            });
        }
        Ok(Model {
            layers,
            input,
            classes,
        })
    }

    pub fn input(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer<T>>] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.input;
        if x.shape().rank() != 4 || x.dims()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: vec![x.dims().first().copied().unwrap_or(0), c, h, w],
                got: x.dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut out = self.layers[0].forward(x)?;
        for layer in &mut self.layers[1..] {
            out = layer.forward(&out)?;
        }
        Ok(out)
    }

    /// Logits without keeping anything for `backward`; identical to `forward`.
    pub fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut out = self.layers[0].infer(x)?;
        for layer in &mut self.layers[1..] {
            out = layer.infer(&out)?;
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut grad = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(grad)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Current `alpha` of every alpha-integration pool, input side first.
    pub fn alphas(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .filter(|p| p.role == ParamRole::Alpha)
            .map(|p| p.scalar().as_f64())
            .collect()
    }

    /// Forward, loss, fresh gradients. Returns `(mean loss, correct count)`.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, usize)> {
        let logits = self.forward(x)?;
        let correct = count_correct(&logits, labels);
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        self.zero_grad();
        self.backward(&grad)?;
        Ok((loss, correct))
    }

    pub fn loss(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.infer(x)?;
        Ok(argmax_rows(&logits))
    }
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.dims()[1];
    logits
        .as_slice()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simple_cnn_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (config, batch) in [
            (ModelConfig::mnist(PoolKind::AlphaI), 3),
            (ModelConfig::cifar10(PoolKind::Max), 2),
        ] {
            let (c, h, w) = config.input;
            let mut model = build_model::<f32, _>(&config, &mut rng).unwrap();
            let x = Tensor::new(&[batch, c, h, w], 0.5).unwrap();
            assert_eq!(model.forward(&x).unwrap().dims(), &[batch, 10]);
        }
    }

    fn infer_matches_forward_for<T: Scalar>(seed: u64) {
        use rand::Rng;
        for pool in [PoolKind::AlphaI, PoolKind::Max, PoolKind::Avg, PoolKind::Lp] {
            for activation in [ActivationKind::Auto, ActivationKind::ReluPlus] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut config = ModelConfig::mnist(pool);
                config.conv_channels = vec![4, 6];
                config.activation = activation;
                config.alpha_init = -4.0;
                let mut model = build_model::<T, _>(&config, &mut rng).unwrap();
                let data = (0..5 * 784).map(|_| T::from_f64_lossy(rng.gen_range(-0.5..1.0))).collect();
                let x = Tensor::from_vec(&[5, 1, 28, 28], data).unwrap();
                let inferred = model.infer(&x).unwrap();
                let forward = model.forward(&x).unwrap();
                assert_eq!(inferred.as_slice(), forward.as_slice(), "{pool} {activation:?}");
            }
        }
    }

    #[test]
    fn infer_matches_forward_bitwise() {
        infer_matches_forward_for::<f32>(1);
        infer_matches_forward_for::<f64>(2);
    }

    #[test]
    fn each_alpha_pool_owns_its_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = build_model::<f64, _>(&ModelConfig::mnist(PoolKind::AlphaI), &mut rng).unwrap();
        assert_eq!(model.alphas(), vec![-1.0, -1.0]);
        let names: Vec<String> = model
            .params()
            .iter()
            .filter(|p| p.role == ParamRole::Alpha)
            .map(|p| p.name.clone())
            .collect();
        assert_eq!(names, ["pool1.alpha", "pool2.alpha"]);
        let alpha = model
            .params_mut()
            .into_iter()
            .find(|p| p.role == ParamRole::Alpha)
            .unwrap();
        alpha.value.as_mut_slice()[0] = -3.0;
        assert_eq!(model.alphas(), vec![-3.0, -1.0]);
    }

    #[test]
    fn activation_follows_pool_type() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (pool, act) in [
            (PoolKind::AlphaI, "relu_plus"),
            (PoolKind::Max, "relu"),
            (PoolKind::Avg, "relu"),
            (PoolKind::Lp, "relu"),
        ] {
            let model = build_model::<f32, _>(&ModelConfig::mnist(pool), &mut rng).unwrap();
            let kinds: Vec<&str> = model.layers().iter().map(|l| l.kind()).collect();
            assert_eq!(kinds[1], act);
            assert_eq!(kinds.len(), 7);
        }
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut config = ModelConfig::mnist(PoolKind::Max);
        config.input = (1, 4, 4);
        config.conv_channels = vec![4, 4, 4];
        config.conv_padding = 0;
        config.conv_kernel = 3;
        assert!(build_model::<f32, _>(&config, &mut rng).is_err());
        assert!("median".parse::<PoolKind>().is_err());
    }
}
