//! CNN6-style encoder, projection heads, classifier and the composed model graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    AvgPool2, BatchNorm2d, Conv2d, GlobalPool, GlobalPoolKind, L2Normalize, Linear, Mode, Param,
    Relu,
};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub global_pool: GlobalPoolKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            kernel: 5,
            global_pool: GlobalPoolKind::MeanPlusMax,
        }
    }
}

impl EncoderConfig {
    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Smallest time (and mel) extent that survives every pooling stage.
    pub fn min_extent(&self) -> usize {
        1 << self.n_blocks()
    }

    /// Exact trainable parameter count: bias-free convolutions plus batch-norm
    /// gain and shift per block.
    pub fn param_count(&self) -> usize {
        let mut prev = 1;
        let mut total = 0;
        for &c in &self.channels {
            total += prev * c * self.kernel * self.kernel + 2 * c;
            prev = c;
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("model.channels", "need at least one non-zero block"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config("model.kernel", "kernel must be odd and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub l2_normalize_output: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            out_dim: 128,
            l2_normalize_output: true,
        }
    }
}

/// Heads attached to the shared encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub n_classes: Option<usize>,
    pub projectors: Vec<ProjectorConfig>,
}

impl HeadSet {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes.is_none() && self.projectors.is_empty() {
            return Err(Error::config("model.heads", "at least one head is required"));
        }
        if self.n_classes == Some(0) {
            return Err(Error::config("model.heads", "classifier needs at least one class"));
        }
        if self
            .projectors
            .iter()
            .any(|p| p.hidden_dim == 0 || p.out_dim == 0)
        {
            return Err(Error::config("model.projector", "dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu,
    pool: AvgPool2,
}

/// Convolutional encoder: `n_blocks` × (conv → batch norm → ReLU → 2×2 average
/// pool) followed by global pooling to a fixed-width embedding.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    blocks: Vec<ConvBlock<T>>,
    pool: GlobalPool,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut prev = 1;
        let blocks = cfg
            .channels
            .iter()
            .map(|&c| {
                let b = ConvBlock {
                    conv: Conv2d::new(prev, c, cfg.kernel, rng),
                    bn: BatchNorm2d::new(c),
                    relu: Relu::default(),
                    pool: AvgPool2::default(),
                };
                prev = c;
                b
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            pool: GlobalPool::new(cfg.global_pool),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv.param_count() + b.bn.param_count())
            .sum()
    }

    /// `x` is `[B, 1, mels, frames]`; returns `[B, embedding_dim]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().len() != 4 || x.dim(1) != 1 {
            return Err(Error::Shape(format!(
                "encoder expects [B, 1, mels, frames], got {:?}",
                x.shape()
            )));
        }
        let required = self.cfg.min_extent();
        if x.dim(3) < required || x.dim(2) < required {
            return Err(Error::InputTooShort {
                frames: x.dim(3).min(x.dim(2)),
                required,
            });
        }
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.conv.forward(&h)?;
            h = b.bn.forward(&h, mode)?;
            h = b.relu.forward(&h);
            h = b.pool.forward(&h)?;
        }
        self.pool.forward(&h)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.pool.backward(dy)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.pool.backward(&g)?;
            g = b.relu.backward(&g)?;
            g = b.bn.backward(&g)?;
            g = b.conv.backward(&g)?;
        }
        Ok(g)
    }

    fn params_mut(&mut self, prefix: &str, out: &mut Vec<(String, *mut Param<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}block{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("{prefix}block{i}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("{prefix}block{i}.bn.beta"), &mut b.bn.beta));
        }
    }

    fn state(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}block{i}.conv.weight"), &b.conv.weight.value));
            out.push((format!("{prefix}block{i}.bn.gamma"), &b.bn.gamma.value));
            out.push((format!("{prefix}block{i}.bn.beta"), &b.bn.beta.value));
            out.push((format!("{prefix}block{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{prefix}block{i}.bn.running_var"), &b.bn.running_var));
        }
        out
    }

    fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}block{i}.conv.weight"), &mut b.conv.weight.value));
            out.push((format!("{prefix}block{i}.bn.gamma"), &mut b.bn.gamma.value));
            out.push((format!("{prefix}block{i}.bn.beta"), &mut b.bn.beta.value));
            out.push((format!("{prefix}block{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("{prefix}block{i}.bn.running_var"), &mut b.bn.running_var));
        }
        out
    }
}

/// One-hidden-layer MLP projector with optional L2-normalized output.
#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    relu: Relu,
    pub fc2: Linear<T>,
    norm: Option<L2Normalize<T>>,
}

impl<T: Scalar> Projector<T> {
    pub fn new<R: Rng>(in_dim: usize, cfg: &ProjectorConfig, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(in_dim, cfg.hidden_dim, rng),
            relu: Relu::default(),
            fc2: Linear::new(cfg.hidden_dim, cfg.out_dim, rng),
            norm: cfg.l2_normalize_output.then(L2Normalize::new),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(x)?;
        let h = self.relu.forward(&h);
        let z = self.fc2.forward(&h)?;
        Ok(match &mut self.norm {
            Some(n) => n.forward(&z),
            None => z,
        })
    }

    pub fn backward(&mut self, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &mut self.norm {
            Some(n) => n.backward(dz)?,
            None => dz.clone(),
        };
        let g = self.fc2.backward(&g)?;
        let g = self.relu.backward(&g)?;
        self.fc1.backward(&g)
    }
}

/// Outputs of one forward pass through the model graph.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub embeddings: Tensor<T>,
    pub logits: Option<Tensor<T>>,
    pub projections: Vec<Tensor<T>>,
}

/// Upstream gradients for the model outputs. `None` entries contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    pub logits: Option<Tensor<T>>,
    pub projections: Vec<Option<Tensor<T>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadSet,
}

impl ModelConfig {
    /// Stable hash of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn encoder_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&self.encoder).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Shared encoder with an optional classifier and any number of projectors.
#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub classifier: Option<Linear<T>>,
    pub projectors: Vec<Projector<T>>,
    encoder_frozen: bool,
    forwarded: bool,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.heads.validate()?;
        let encoder = Encoder::new(&cfg.encoder, rng)?;
        let emb = cfg.encoder.embedding_dim();
        let classifier = cfg.heads.n_classes.map(|c| Linear::new(emb, c, rng));
        let projectors = cfg
            .heads
            .projectors
            .iter()
            .map(|p| Projector::new(emb, p, rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            classifier,
            projectors,
            encoder_frozen: false,
            forwarded: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.classifier.as_ref().map_or(0, |c| c.param_count())
            + self.projectors.iter().map(|p| p.param_count()).sum::<usize>()
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        let embeddings = self.encoder.forward(x, mode)?;
        let logits = match &mut self.classifier {
            Some(c) => Some(c.forward(&embeddings)?),
            None => None,
        };
        let projections = self
            .projectors
            .iter_mut()
            .map(|p| p.forward(&embeddings))
            .collect::<Result<Vec<_>>>()?;
        self.forwarded = true;
        Ok(ForwardOutput {
            embeddings,
            logits,
            projections,
        })
    }

    /// Propagates output gradients into every trainable parameter. The encoder
    /// is skipped entirely while frozen, so its gradients stay `None`.
    pub fn backward(&mut self, grads: &OutputGrads<T>) -> Result<()> {
        if !self.forwarded {
            return Err(Error::NoForward("model"));
        }
        self.forwarded = false;
        let mut d_emb: Option<Tensor<T>> = None;
        let mut add = |g: Tensor<T>| match &mut d_emb {
            Some(acc) => acc.add_assign(&g),
            None => d_emb = Some(g),
        };
        if let (Some(c), Some(g)) = (&mut self.classifier, &grads.logits) {
            add(c.backward(g)?);
        }
        for (p, g) in self.projectors.iter_mut().zip(&grads.projections) {
            if let Some(g) = g {
                add(p.backward(g)?);
            }
        }
        if let (false, Some(g)) = (self.encoder_frozen, d_emb) {
            self.encoder.backward(&g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.grad = None;
        }
    }

    /// Trainable parameters in a stable order, encoder excluded while frozen.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut raw: Vec<(String, *mut Param<T>)> = Vec::new();
        if !self.encoder_frozen {
            self.encoder.params_mut("encoder.", &mut raw);
        }
        if let Some(c) = &mut self.classifier {
            raw.push(("classifier.weight".into(), &mut c.weight));
            raw.push(("classifier.bias".into(), &mut c.bias));
        }
        for (k, p) in self.projectors.iter_mut().enumerate() {
            raw.push((format!("projector{k}.fc1.weight"), &mut p.fc1.weight));
            raw.push((format!("projector{k}.fc1.bias"), &mut p.fc1.bias));
            raw.push((format!("projector{k}.fc2.weight"), &mut p.fc2.weight));
            raw.push((format!("projector{k}.fc2.bias"), &mut p.fc2.bias));
        }
        // SAFETY: every pointer refers to a distinct field of `self`, which
        // stays mutably borrowed for the lifetime of the returned references.
        raw.into_iter()
            .map(|(n, p)| (n, unsafe { &mut *p }))
            .collect()
    }

    /// All named tensors (parameters and batch-norm statistics).
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.state("encoder.");
        if let Some(c) = &self.classifier {
            out.push(("classifier.weight".into(), &c.weight.value));
            out.push(("classifier.bias".into(), &c.bias.value));
        }
        for (k, p) in self.projectors.iter().enumerate() {
            out.push((format!("projector{k}.fc1.weight"), &p.fc1.weight.value));
            out.push((format!("projector{k}.fc1.bias"), &p.fc1.bias.value));
            out.push((format!("projector{k}.fc2.weight"), &p.fc2.weight.value));
            out.push((format!("projector{k}.fc2.bias"), &p.fc2.bias.value));
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.state_mut("encoder.");
        if let Some(c) = &mut self.classifier {
            out.push(("classifier.weight".into(), &mut c.weight.value));
            out.push(("classifier.bias".into(), &mut c.bias.value));
        }
        for (k, p) in self.projectors.iter_mut().enumerate() {
            out.push((format!("projector{k}.fc1.weight"), &mut p.fc1.weight.value));
            out.push((format!("projector{k}.fc1.bias"), &mut p.fc1.bias.value));
            out.push((format!("projector{k}.fc2.weight"), &mut p.fc2.weight.value));
            out.push((format!("projector{k}.fc2.bias"), &mut p.fc2.bias.value));
        }
        out
    }

    /// Hash over encoder parameters and batch-norm statistics.
    pub fn encoder_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.encoder.state("encoder.") {
            h.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: vec![4, 8],
                ..Default::default()
            },
            heads: HeadSet {
                n_classes: Some(3),
                projectors: vec![ProjectorConfig {
                    hidden_dim: 6,
                    out_dim: 5,
                    l2_normalize_output: true,
                }],
            },
        }
    }

    #[test]
    fn default_encoder_param_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.param_count(), 4_304_320);
        assert_eq!(cfg.embedding_dim(), 512);
    }

    #[test]
    fn counted_params_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        let m = Model::<f32>::new(&cfg, &mut rng).unwrap();
        assert_eq!(m.encoder.param_count(), cfg.encoder.param_count());
        assert_eq!(
            m.param_count(),
            cfg.encoder.param_count() + (8 * 3 + 3) + (8 * 6 + 6) + (6 * 5 + 5)
        );
    }

    #[test]
    fn too_short_input_names_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::<f32>::new(&small_cfg(), &mut rng).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 1, 8, 3]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { required: 4, .. }));
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::<f32>::new(&small_cfg(), &mut rng).unwrap();
        m.set_encoder_frozen(true);
        let out = m.forward(&Tensor::filled(&[2, 1, 8, 8], 0.5), Mode::Eval).unwrap();
        let g = OutputGrads {
            logits: Some(Tensor::filled(out.logits.as_ref().unwrap().shape(), 1.0)),
            projections: vec![None],
        };
        m.backward(&g).unwrap();
        assert!(m.encoder.blocks.iter().all(|b| b.conv.weight.grad.is_none()));
        assert!(m.classifier.as_ref().unwrap().weight.grad.is_some());
        assert!(m.params_mut().iter().all(|(n, _)| !n.starts_with("encoder.")));
    }

    #[test]
    fn model_backward_requires_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::<f32>::new(&small_cfg(), &mut rng).unwrap();
        assert!(m.backward(&OutputGrads::default()).is_err());
    }

    #[test]
    fn eval_mode_rows_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Model::<f64>::new(&small_cfg(), &mut rng).unwrap();
        let mut x = Tensor::zeros(&[3, 1, 8, 10]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 / 11.0;
        }
        // duplicate sample 0 into slot 2
        let plane = 80;
        let first: Vec<f64> = x.data()[..plane].to_vec();
        x.data_mut()[2 * plane..].copy_from_slice(&first);
        let out = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.embeddings.row(0), out.embeddings.row(2));
        let single = Tensor::from_vec(&[1, 1, 8, 10], first).unwrap();
        let out1 = m.forward(&single, Mode::Eval).unwrap();
        for (a, b) in out1.embeddings.row(0).iter().zip(out.embeddings.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_layer_gives_equal_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ProjectorConfig {
            l2_normalize_output: false,
            ..Default::default()
        };
        let mut p = Projector::<f64>::new(16, &cfg, &mut rng);
        p.fc2 = Linear::zeroed(cfg.hidden_dim, cfg.out_dim);
        let x = Tensor::from_vec(&[2, 16], (0..32).map(|i| i as f64).collect()).unwrap();
        let z = p.forward(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == z.data()[0]));
    }
}
