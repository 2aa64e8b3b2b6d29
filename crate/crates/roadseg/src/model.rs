//! The encoder-decoder segmentation network.
//!
//! Encoder: an initial 7x7/2 conv block and max-pool followed by four stages
//! of residual basic blocks (two 3x3 convs with batch norm, identity
//! shortcut; the first block of a downsampling stage uses stride 2 with a 1x1
//! projection shortcut). Decoder: per level, a 1x1 conv cutting the width by
//! `decoder_reduction`, batch norm, ReLU, then a 2x2/2 transposed conv, batch
//! norm, ReLU; each decoder output is concatenated with the encoder feature
//! map of matching resolution. Head: spatial dropout, 1x1 conv, sigmoid.
//!
//! All 3x3 and 7x7 convolutions use "same"-style zero padding (kernel/2) so
//! the skip-connected shapes align, which is also why forward requires both
//! input sides to be divisible by 32 = 2^5 (stem + pool + three strided
//! stages).

use std::cell::{Cell, RefCell};
use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    add, batchnorm2d, concat_channels, conv2d, conv_transpose2d, maxpool2d, relu, sigmoid,
    spatial_dropout, BnStats, Element, TensorBase, TensorError,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stem_channels: usize,
    pub dropout_p: f64,
    pub decoder_reduction: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_depths: [3, 4, 6, 3],
            stage_channels: [64, 128, 256, 512],
            stem_channels: 64,
            dropout_p: 0.3,
            decoder_reduction: 4,
            input_channels: 3,
            output_channels: 1,
        }
    }
}

impl ModelConfig {
    /// The reduced configuration used by desk-scale experiments: stage widths
    /// and depths shrunk, everything else (stem width, dropout) at default.
    pub fn reduced() -> Self {
        ModelConfig {
            stage_depths: [1, 1, 1, 1],
            stage_channels: [8, 16, 32, 64],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("stage depths must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stem_channels == 0 {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        if !self.stage_channels.windows(2).all(|p| p[0] < p[1]) {
            return Err(ModelError::Config(format!(
                "stage channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.decoder_reduction == 0 {
            return Err(ModelError::Config("decoder_reduction must be positive".into()));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(ModelError::Config("input/output channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of the final decoder feature map feeding the head.
    fn head_in_channels(&self) -> usize {
        (2 * self.stem_channels / self.decoder_reduction).max(1)
    }
}

#[derive(Clone, Debug)]
pub enum ModelError {
    Config(String),
    /// Input spatial side not divisible by 32.
    NotDivisible { dim: &'static str, value: usize },
    Input(String),
    MissingParam(String),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(m) => write!(f, "model config: {m}"),
            ModelError::NotDivisible { dim, value } => {
                write!(f, "input {dim} {value} is not divisible by 32")
            }
            ModelError::Input(m) => write!(f, "model input: {m}"),
            ModelError::MissingParam(name) => write!(f, "missing parameter {name}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum ParamKind {
    /// Convolution weight [out, in, k, k]; He fan-in = in * k * k.
    ConvWeight { fan_in: usize },
    /// Transposed-convolution weight [in, out, k, k]; He fan-in = in * k * k.
    ConvTWeight { fan_in: usize },
    BnGamma,
    BnBeta,
    Bias,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

/// The full named-parameter layout of a configuration, in build order, plus
/// the batch-norm layers (name, channels). Single source of truth shared by
/// initialization and checkpoint loading.
pub(crate) fn param_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let mut params = Vec::new();
    let mut bns = Vec::new();

    let conv = |params: &mut Vec<ParamSpec>, name: String, out: usize, inp: usize, k: usize| {
        params.push(ParamSpec {
            name,
            kind: ParamKind::ConvWeight { fan_in: inp * k * k },
            shape: vec![out, inp, k, k],
        });
    };
    let bn = |params: &mut Vec<ParamSpec>, bns: &mut Vec<(String, usize)>, name: &str, c: usize| {
        params.push(ParamSpec {
            name: format!("{name}.g"),
            kind: ParamKind::BnGamma,
            shape: vec![c],
        });
        params.push(ParamSpec {
            name: format!("{name}.b"),
            kind: ParamKind::BnBeta,
            shape: vec![c],
        });
        bns.push((name.to_string(), c));
    };

    let [c1, c2, c3, c4] = cfg.stage_channels;
    let stem = cfg.stem_channels;

    conv(&mut params, "stem.conv.w".into(), stem, cfg.input_channels, 7);
    bn(&mut params, &mut bns, "stem.bn", stem);

    let stage_io = [(stem, c1, 1usize), (c1, c2, 2), (c2, c3, 2), (c3, c4, 2)];
    for (s, &(cin, cout, stride0)) in stage_io.iter().enumerate() {
        for b in 0..cfg.stage_depths[s] {
            let prefix = format!("enc{}.{}", s + 1, b);
            let (inp, stride) = if b == 0 { (cin, stride0) } else { (cout, 1) };
            conv(&mut params, format!("{prefix}.conv1.w"), cout, inp, 3);
            bn(&mut params, &mut bns, &format!("{prefix}.bn1"), cout);
            conv(&mut params, format!("{prefix}.conv2.w"), cout, cout, 3);
            bn(&mut params, &mut bns, &format!("{prefix}.bn2"), cout);
            if inp != cout || stride != 1 {
                conv(&mut params, format!("{prefix}.proj.w"), cout, inp, 1);
                bn(&mut params, &mut bns, &format!("{prefix}.proj_bn"), cout);
            }
        }
    }

    for (d, (inp, out)) in decoder_io(cfg).into_iter().enumerate() {
        let prefix = format!("dec{}", d + 1);
        let r = (inp / cfg.decoder_reduction).max(1);
        conv(&mut params, format!("{prefix}.reduce.w"), r, inp, 1);
        bn(&mut params, &mut bns, &format!("{prefix}.reduce_bn"), r);
        params.push(ParamSpec {
            name: format!("{prefix}.up.w"),
            kind: ParamKind::ConvTWeight { fan_in: r * 2 * 2 },
            shape: vec![r, out, 2, 2],
        });
        bn(&mut params, &mut bns, &format!("{prefix}.up_bn"), out);
    }

    conv(
        &mut params,
        "head.conv.w".into(),
        cfg.output_channels,
        cfg.head_in_channels(),
        1,
    );
    params.push(ParamSpec {
        name: "head.conv.b".into(),
        kind: ParamKind::Bias,
        shape: vec![cfg.output_channels],
    });

    (params, bns)
}

/// (input, output) channel pairs of the five decoder blocks. Each block emits
/// the channel width of the next-shallower encoder level; its input is the
/// previous decoder output concatenated with the matching skip, except for
/// the first block (raw deepest feature map) and the last one (no skip left).
fn decoder_io(cfg: &ModelConfig) -> [(usize, usize); 5] {
    let [c1, c2, c3, _c4] = cfg.stage_channels;
    let stem = cfg.stem_channels;
    [
        (cfg.stage_channels[3], c3),
        (2 * c3, c2),
        (2 * c2, c1),
        (2 * c1, stem),
        (2 * stem, cfg.head_in_channels()),
    ]
}

/// Standard normal draw via Box-Muller; two uniforms per value keeps the
/// stream layout independent of call history.
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The parameter set and batch-norm state of the network.
pub struct ModelBase<T: Element> {
    config: ModelConfig,
    params: IndexMap<String, TensorBase<T>>,
    bn: IndexMap<String, RefCell<BnStats<T>>>,
    mode: Cell<Mode>,
}

pub type Model = ModelBase<f32>;

impl<T: Element> fmt::Debug for ModelBase<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("param_count", &self.param_count())
            .field("mode", &self.mode.get())
            .finish()
    }
}

impl<T: Element> ModelBase<T> {
    /// Builds a model with He-initialized convolutions (seeded), unit gamma,
    /// zero beta/bias, and identity running statistics.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, bns) = param_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for spec in layout {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.kind {
                ParamKind::ConvWeight { fan_in } | ParamKind::ConvTWeight { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| T::from_f64(normal_draw(&mut rng) * std))
                        .collect()
                }
                ParamKind::BnGamma => vec![T::one(); numel],
                ParamKind::BnBeta | ParamKind::Bias => vec![T::zero(); numel],
            };
            params.insert(spec.name, TensorBase::param(data, &spec.shape)?);
        }
        let bn = bns
            .into_iter()
            .map(|(name, c)| (name, RefCell::new(BnStats::identity(c))))
            .collect();
        Ok(ModelBase {
            config,
            params,
            bn,
            mode: Cell::new(Mode::Train),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode.get()
    }

    pub fn set_train(&self) {
        self.mode.set(Mode::Train);
    }

    pub fn set_eval(&self) {
        self.mode.set(Mode::Eval);
    }

    pub fn params(&self) -> &IndexMap<String, TensorBase<T>> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Batch-norm running statistics, cloned out in layout order.
    pub fn bn_snapshot(&self) -> Vec<(String, BnStats<T>)> {
        self.bn
            .iter()
            .map(|(name, cell)| (name.clone(), cell.borrow().clone()))
            .collect()
    }

    pub(crate) fn set_bn_stats(&self, name: &str, stats: BnStats<T>) -> Result<(), ModelError> {
        let cell = self
            .bn
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        *cell.borrow_mut() = stats;
        Ok(())
    }

    /// Copies parameters and statistics into another precision (used by the
    /// 64-bit gradient-check path).
    pub fn cast<U: Element>(&self) -> ModelBase<U> {
        ModelBase {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, v)| (k.clone(), RefCell::new(v.borrow().cast::<U>())))
                .collect(),
            mode: Cell::new(self.mode.get()),
        }
    }

    fn p(&self, name: &str) -> Result<&TensorBase<T>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn bn_apply(
        &self,
        x: &TensorBase<T>,
        name: &str,
        train: bool,
    ) -> Result<TensorBase<T>, ModelError> {
        let gamma = self.p(&format!("{name}.g"))?;
        let beta = self.p(&format!("{name}.b"))?;
        let cell = self
            .bn
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let mut stats = cell.borrow_mut();
        Ok(batchnorm2d(x, gamma, beta, &mut stats, train, BN_EPS, BN_MOMENTUM)?)
    }

    fn basic_block(
        &self,
        x: &TensorBase<T>,
        prefix: &str,
        stride: usize,
        projected: bool,
        train: bool,
    ) -> Result<TensorBase<T>, ModelError> {
        let w1 = self.p(&format!("{prefix}.conv1.w"))?;
        let y = conv2d(x, w1, None, stride, 1)?;
        let y = relu(&self.bn_apply(&y, &format!("{prefix}.bn1"), train)?);
        let w2 = self.p(&format!("{prefix}.conv2.w"))?;
        let y = conv2d(&y, w2, None, 1, 1)?;
        let y = self.bn_apply(&y, &format!("{prefix}.bn2"), train)?;
        let shortcut = if projected {
            let wp = self.p(&format!("{prefix}.proj.w"))?;
            let s = conv2d(x, wp, None, stride, 0)?;
            self.bn_apply(&s, &format!("{prefix}.proj_bn"), train)?
        } else {
            x.clone()
        };
        Ok(relu(&add(&y, &shortcut)?))
    }

    fn decoder_block(
        &self,
        x: &TensorBase<T>,
        prefix: &str,
        train: bool,
    ) -> Result<TensorBase<T>, ModelError> {
        let wr = self.p(&format!("{prefix}.reduce.w"))?;
        let y = conv2d(x, wr, None, 1, 0)?;
        let y = relu(&self.bn_apply(&y, &format!("{prefix}.reduce_bn"), train)?);
        let wu = self.p(&format!("{prefix}.up.w"))?;
        let y = conv_transpose2d(&y, wu, 2)?;
        Ok(relu(&self.bn_apply(&y, &format!("{prefix}.up_bn"), train)?))
    }

    fn validate_input(&self, x: &TensorBase<T>) -> Result<(), ModelError> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(ModelError::Input(format!(
                "expected NCHW input, got shape {s:?}"
            )));
        }
        if s[1] != self.config.input_channels {
            return Err(ModelError::Input(format!(
                "expected {} input channels, got {}",
                self.config.input_channels, s[1]
            )));
        }
        if s[2] % 32 != 0 {
            return Err(ModelError::NotDivisible {
                dim: "height",
                value: s[2],
            });
        }
        if s[3] % 32 != 0 {
            return Err(ModelError::NotDivisible {
                dim: "width",
                value: s[3],
            });
        }
        Ok(())
    }

    fn encode(&self, x: &TensorBase<T>, train: bool) -> Result<EncoderFeatures<T>, ModelError> {
        let w = self.p("stem.conv.w")?;
        let stem = conv2d(x, w, None, 2, 3)?;
        let stem = relu(&self.bn_apply(&stem, "stem.bn", train)?);
        let pooled = maxpool2d(&stem, 3, 2, 1)?;

        let mut stages = Vec::with_capacity(4);
        let mut cur = pooled;
        let stage_in = [
            self.config.stem_channels,
            self.config.stage_channels[0],
            self.config.stage_channels[1],
            self.config.stage_channels[2],
        ];
        for s in 0..4 {
            let cout = self.config.stage_channels[s];
            let stride0 = if s == 0 { 1 } else { 2 };
            for b in 0..self.config.stage_depths[s] {
                let prefix = format!("enc{}.{}", s + 1, b);
                let (stride, projected) = if b == 0 {
                    (stride0, stage_in[s] != cout || stride0 != 1)
                } else {
                    (1, false)
                };
                cur = self.basic_block(&cur, &prefix, stride, projected, train)?;
            }
            stages.push(cur.clone());
        }
        Ok(EncoderFeatures { stem, stages })
    }

    /// Full forward pass. `dropout_rng` must be provided in train mode when
    /// `dropout_p > 0`; eval mode ignores it (dropout is the identity there).
    pub fn forward(
        &self,
        x: &TensorBase<T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorBase<T>, ModelError> {
        self.validate_input(x)?;
        let train = self.mode.get() == Mode::Train;
        let feats = self.encode(x, train)?;

        let mut d = feats.stages[3].clone();
        let skips = [&feats.stages[2], &feats.stages[1], &feats.stages[0], &feats.stem];
        for (i, skip) in skips.iter().enumerate() {
            d = self.decoder_block(&d, &format!("dec{}", i + 1), train)?;
            d = concat_channels(&d, skip)?;
        }
        d = self.decoder_block(&d, "dec5", train)?;

        let p = self.config.dropout_p;
        if train && p > 0.0 {
            let rng = dropout_rng.ok_or_else(|| {
                ModelError::Input("train-mode forward with dropout_p > 0 needs an rng".into())
            })?;
            d = spatial_dropout(&d, p, true, rng)?;
        }

        let wh = self.p("head.conv.w")?;
        let bh = self.p("head.conv.b")?;
        let logits = conv2d(&d, wh, Some(bh), 1, 0)?;
        Ok(sigmoid(&logits))
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }
}

struct EncoderFeatures<T: Element> {
    stem: TensorBase<T>,
    stages: Vec<TensorBase<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;

    #[test]
    fn reduced_config_forward_shape() {
        let model = Model::build(ModelConfig::reduced(), 1).unwrap();
        model.set_eval();
        let x = TensorBase::<f32>::zeros(&[1, 3, 64, 64]);
        let y = no_grad(|| model.forward(&x, None)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_shape_96() {
        let model = Model::build(ModelConfig::reduced(), 2).unwrap();
        model.set_eval();
        let x = TensorBase::<f32>::zeros(&[1, 3, 96, 96]);
        let y = no_grad(|| model.forward(&x, None)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 96, 96]);
    }

    #[test]
    fn indivisible_side_is_named() {
        let model = Model::build(ModelConfig::reduced(), 3).unwrap();
        let x = TensorBase::<f32>::zeros(&[1, 3, 100, 100]);
        match model.forward(&x, None) {
            Err(ModelError::NotDivisible { dim: "height", value: 100 }) => {}
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = Model::build(ModelConfig::reduced(), 77).unwrap();
        let b = Model::build(ModelConfig::reduced(), 77).unwrap();
        for (name, ta) in a.params() {
            let tb = &b.params()[name];
            assert_eq!(ta.to_vec(), tb.to_vec(), "param {name} differs");
        }
        let c = Model::build(ModelConfig::reduced(), 78).unwrap();
        let first = a.params().first().unwrap();
        assert_ne!(first.1.to_vec(), c.params()[first.0].to_vec());
    }

    #[test]
    fn eval_forward_is_pure() {
        let model = Model::build(ModelConfig::reduced(), 5).unwrap();
        model.set_eval();
        let data: Vec<f32> = (0..3 * 32 * 32).map(|i| (i % 255) as f32 / 255.0).collect();
        let x = TensorBase::<f32>::from_vec(data, &[1, 3, 32, 32]).unwrap();
        let y1 = no_grad(|| model.forward(&x, None)).unwrap().to_vec();
        let y2 = no_grad(|| model.forward(&x, None)).unwrap().to_vec();
        assert_eq!(y1, y2);
    }

    #[test]
    fn encoder_downsampling_trace() {
        let model = Model::build(ModelConfig::reduced(), 6).unwrap();
        model.set_eval();
        let x = TensorBase::<f32>::zeros(&[1, 3, 64, 64]);
        let feats = no_grad(|| model.encode(&x, false)).unwrap();
        assert_eq!(feats.stem.shape()[2], 32); // H/2
        let sides: Vec<usize> = feats.stages.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sides, vec![16, 8, 4, 2]); // H/4, H/8, H/16, H/32
    }

    #[test]
    fn default_param_count_matches_layer_tally() {
        // Independent per-layer arithmetic for the default architecture.
        let cfg = ModelConfig::default();
        let mut expected = 0usize;
        // stem: 7x7 conv from 3 channels + bn
        expected += 64 * 3 * 7 * 7 + 2 * 64;
        // encoder stages: (in, out, blocks, first-block projection?)
        let stages = [(64, 64, 3, false), (64, 128, 4, true), (128, 256, 6, true), (256, 512, 3, true)];
        for (cin, cout, blocks, proj) in stages {
            // first block
            expected += cout * cin * 9 + 2 * cout + cout * cout * 9 + 2 * cout;
            if proj {
                expected += cout * cin + 2 * cout;
            }
            // remaining blocks
            expected += (blocks - 1) * (2 * (cout * cout * 9 + 2 * cout));
        }
        // decoder blocks: (in, out), reduce = in/4
        let dec = [(512, 256), (512, 128), (256, 64), (128, 64), (128, 32)];
        for (inp, out) in dec {
            let r = inp / 4;
            expected += r * inp + 2 * r; // 1x1 reduce + bn
            expected += r * out * 4 + 2 * out; // 2x2 transposed conv + bn
        }
        // head 1x1 conv from 32 channels + bias
        expected += 1 * 32 + 1;

        let model = Model::build(cfg, 0).unwrap();
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn dropout_needs_rng_in_train_mode() {
        let model = Model::build(ModelConfig::reduced(), 9).unwrap();
        model.set_train();
        let x = TensorBase::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(model.forward(&x, None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.forward(&x, Some(&mut rng)).is_ok());
    }

    #[test]
    fn end_to_end_gradient_spot_check() {
        // Small version of the full finite-difference criterion: a few
        // sampled parameters of the f64 reduced model, 32x32 input.
        use crate::gradcheck::rel_err;
        use crate::loss::{combined_loss, LossConfig, MaskPair};

        let mut cfg = ModelConfig::reduced();
        cfg.dropout_p = 0.0;
        let model = ModelBase::<f64>::build(cfg, 11).unwrap();
        model.set_train();

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x_data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = TensorBase::<f64>::from_vec(x_data, &[1, 3, 32, 32]).unwrap();
        let t_data: Vec<f64> = (0..32 * 32).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let target = TensorBase::<f64>::from_vec(t_data, &[1, 1, 32, 32]).unwrap();

        let loss_of = |m: &ModelBase<f64>| -> f64 {
            let y = m.forward(&x, None).unwrap();
            let pair = MaskPair::new(target.clone(), y).unwrap();
            combined_loss(&pair, &LossConfig::default()).unwrap().item()
        };

        let y = model.forward(&x, None).unwrap();
        let pair = MaskPair::new(target.clone(), y).unwrap();
        let loss = combined_loss(&pair, &LossConfig::default()).unwrap();
        loss.backward().unwrap();

        let names: Vec<String> = model.params().keys().cloned().collect();
        // eps well below the typical distance to the nearest ReLU/max-pool
        // kink; at 1e-3 the probes stride across kinks and the central
        // difference averages the two slopes.
        let eps = 1e-5;
        for k in 0..3 {
            let name = &names[(k * 7919) % names.len()];
            let t = &model.params()[name];
            let idx = (k * 104729) % t.numel();
            let analytic = t.grad().unwrap()[idx];
            let orig = t.to_vec()[idx];
            t.apply_update(|d| d[idx] = orig + eps);
            let plus = loss_of(&model);
            t.apply_update(|d| d[idx] = orig - eps);
            let minus = loss_of(&model);
            t.apply_update(|d| d[idx] = orig);
            let fd = (plus - minus) / (2.0 * eps);
            assert!(
                rel_err(analytic, fd) < 1e-3,
                "{name}[{idx}]: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
