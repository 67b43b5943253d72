use std::path::Path;

use ispeech_neural::{checkpoint, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::config::ModelConfig;
use crate::error::{Error, Result};
use crate::signal::ClassLabel;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub probabilities: Vec<f64>,
    pub argmax: ClassLabel,
    pub confidence: f64,
}

impl IntentDistribution {
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let (idx, &confidence) = probabilities
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        Self {
            argmax: ClassLabel::from_index(idx).unwrap_or(ClassLabel::Rest),
            probabilities,
            confidence,
        }
    }

    /// Most probable command class, ignoring REST.
    pub fn command_argmax(&self) -> ClassLabel {
        let mut best = ClassLabel::COMMANDS[0];
        for &c in &ClassLabel::COMMANDS[1..] {
            if self.probabilities[c.index()] > self.probabilities[best.index()] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    rel: Option<usize>,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_kernel: usize,
    patch_bias: usize,
    temporal: Vec<BlockIds>,
    pool_key: usize,
    pool_query: usize,
    channel_embedding: usize,
    spatial: Vec<BlockIds>,
    head_ln_g: usize,
    head_ln_b: usize,
    intent_w: usize,
    intent_b: usize,
    signature_w: usize,
    signature_b: usize,
}

/// Dual sequential transformer: shared per-channel patch convolution, a
/// temporal encoder within each channel, a spatial encoder across channels,
/// and two heads on the pooled representation.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Graph outputs of a batched forward pass.
pub struct Forward<'t, T> {
    /// `[batch, n_intent_classes]`
    pub intent_logits: Var<'t, T>,
    /// `[batch, signature_dim]`, unit rows.
    pub signature: Var<'t, T>,
}

/// Dropout source for training passes; `None` runs in inference mode.
pub type Train<'a> = Option<&'a mut ChaCha8Rng>;

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
        };
        Ok(self.store.insert(name, value)?.0)
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, relative: bool, n_layers: usize) -> Result<BlockIds> {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let proj = Init::Normal(1.0 / (d as f64).sqrt());
        let resid = 1.0 / (2.0 * n_layers.max(1) as f64).sqrt();
        Ok(BlockIds {
            ln1_g: self.add(format!("{prefix}.ln1.gamma"), &[d], Init::Ones)?,
            ln1_b: self.add(format!("{prefix}.ln1.beta"), &[d], Init::Zeros)?,
            wq: self.add(format!("{prefix}.attn.wq"), &[d, d], proj)?,
            bq: self.add(format!("{prefix}.attn.bq"), &[d], Init::Zeros)?,
            wk: self.add(format!("{prefix}.attn.wk"), &[d, d], proj)?,
            bk: self.add(format!("{prefix}.attn.bk"), &[d], Init::Zeros)?,
            wv: self.add(format!("{prefix}.attn.wv"), &[d, d], proj)?,
            bv: self.add(format!("{prefix}.attn.bv"), &[d], Init::Zeros)?,
            wo: self.add(format!("{prefix}.attn.wo"), &[d, d], Init::Normal(resid / (d as f64).sqrt()))?,
            bo: self.add(format!("{prefix}.attn.bo"), &[d], Init::Zeros)?,
            rel: if relative {
                let w = 2 * cfg.rel_pos_max_offset + 1;
                Some(self.add(format!("{prefix}.attn.rel_bias"), &[cfg.n_heads, w], Init::Zeros)?)
            } else {
                None
            },
            ln2_g: self.add(format!("{prefix}.ln2.gamma"), &[d], Init::Ones)?,
            ln2_b: self.add(format!("{prefix}.ln2.beta"), &[d], Init::Zeros)?,
            w1: self.add(format!("{prefix}.ffn.w1"), &[d, f], proj)?,
            b1: self.add(format!("{prefix}.ffn.b1"), &[f], Init::Zeros)?,
            w2: self.add(format!("{prefix}.ffn.w2"), &[f, d], Init::Normal(resid / (f as f64).sqrt()))?,
            b2: self.add(format!("{prefix}.ffn.b2"), &[d], Init::Zeros)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

fn apply_dropout<'t, T: Scalar>(x: Var<'t, T>, p: f64, train: &mut Train<'_>) -> Var<'t, T> {
    match train {
        Some(rng) if p > 0.0 => x.dropout(p, &mut **rng),
        _ => x,
    }
}

impl<T: Scalar> Decoder<T> {
    /// Freshly initialised model; deterministic in `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.d_model;
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let patch_kernel = b.add(
            "patch.kernel".into(),
            &[d, 1, config.patch_len],
            Init::Normal((2.0 / config.patch_len as f64).sqrt()),
        )?;
        let patch_bias = b.add("patch.bias".into(), &[d], Init::Zeros)?;
        let temporal = (0..config.n_temporal_layers)
            .map(|l| b.block(&format!("temporal.{l}"), &config, true, config.n_temporal_layers))
            .collect::<Result<Vec<_>>>()?;
        let pool_key = b.add("pool.key".into(), &[d, d], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let pool_query = b.add("pool.query".into(), &[d, 1], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let channel_embedding = b.add("spatial.channel_embedding".into(), &[config.n_channels, d], Init::Normal(0.1))?;
        let spatial = (0..config.n_spatial_layers)
            .map(|l| b.block(&format!("spatial.{l}"), &config, false, config.n_spatial_layers))
            .collect::<Result<Vec<_>>>()?;
        let head_ln_g = b.add("head.ln.gamma".into(), &[d], Init::Ones)?;
        let head_ln_b = b.add("head.ln.beta".into(), &[d], Init::Zeros)?;
        let intent_w = b.add(
            "head.intent.weight".into(),
            &[d, config.n_intent_classes],
            Init::Normal(0.1 / (d as f64).sqrt()),
        )?;
        let intent_b = b.add("head.intent.bias".into(), &[config.n_intent_classes], Init::Zeros)?;
        let signature_w = b.add(
            "head.signature.weight".into(),
            &[d, config.signature_dim],
            Init::Normal(1.0 / (d as f64).sqrt()),
        )?;
        let signature_b = b.add("head.signature.bias".into(), &[config.signature_dim], Init::Zeros)?;
        let layout = Layout {
            patch_kernel,
            patch_bias,
            temporal,
            pool_key,
            pool_query,
            channel_embedding,
            spatial,
            head_ln_g,
            head_ln_b,
            intent_w,
            intent_b,
            signature_w,
            signature_b,
        };
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Zeroes the learned channel-index embedding.
    pub fn zero_channel_embedding(&mut self) {
        let id = ispeech_neural::ParamId(self.layout.channel_embedding);
        self.params.get_mut(id).value.fill(T::zero());
    }

    /// Bias added to the attention logit of query `i` and key `j` in `head`
    /// of temporal layer `layer`.
    pub fn rel_attention_bias(&self, layer: usize, head: usize, i: usize, j: usize) -> Result<f64> {
        let block = self
            .layout
            .temporal
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no temporal layer {layer}")))?;
        let table = &self.params.get(ispeech_neural::ParamId(block.rel.expect("temporal layers are relative"))).value;
        if head >= self.config.n_heads {
            return Err(Error::Config(format!("no head {head}")));
        }
        let m = self.config.rel_pos_max_offset as isize;
        let offset = (j as isize - i as isize).clamp(-m, m);
        let width = 2 * self.config.rel_pos_max_offset + 1;
        Ok(table.data()[head * width + (offset + m) as usize].as_f64())
    }

    fn window_tensor(&self, windows: &[&[f32]]) -> Result<Tensor<T>> {
        let c = self.config.n_channels;
        let t = self.config.window_samples;
        let mut data = Vec::with_capacity(windows.len() * c * t);
        for w in windows {
            if w.len() != c * t {
                return Err(Error::Data(format!(
                    "window has {} values, model expects {c} channels x {t} samples",
                    w.len()
                )));
            }
            data.extend(w.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::from_vec(&[windows.len(), c, t], data)?)
    }

    // ----- graph building blocks -----

    fn attention<'t>(
        &self,
        v: &[Var<'t, T>],
        b: &BlockIds,
        x: Var<'t, T>,
        train: &mut Train<'_>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.n_heads;
        let dh = d / h;
        let split = |y: Var<'t, T>| -> Result<Var<'t, T>> {
            y.reshape(&[n, l, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * h, l, dh]).map_err(Error::from)
        };
        let q = split(x.matmul(v[b.wq])?.add_suffix(v[b.bq])?)?;
        let k = split(x.matmul(v[b.wk])?.add_suffix(v[b.bk])?)?;
        let val = split(x.matmul(v[b.wv])?.add_suffix(v[b.bv])?)?;
        let mut scores = q.bmm(k, true)?.scale(T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        if let Some(rel) = b.rel {
            let bias = v[rel].rel_bias(l, self.config.rel_pos_max_offset)?;
            scores = scores.reshape(&[n, h, l, l])?.add_suffix(bias)?.reshape(&[n * h, l, l])?;
        }
        let probs = scores.softmax();
        let ctx = probs
            .bmm(val, false)?
            .reshape(&[n, h, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, l, d])?;
        let out = ctx.matmul(v[b.wo])?.add_suffix(v[b.bo])?;
        Ok(apply_dropout(out, self.config.dropout, train))
    }

    fn block<'t>(&self, v: &[Var<'t, T>], b: &BlockIds, x: Var<'t, T>, train: &mut Train<'_>) -> Result<Var<'t, T>> {
        let a = x.layer_norm(v[b.ln1_g], v[b.ln1_b], LN_EPS)?;
        let x = x.add(self.attention(v, b, a, train)?)?;
        let f = x.layer_norm(v[b.ln2_g], v[b.ln2_b], LN_EPS)?;
        let f = f.matmul(v[b.w1])?.add_suffix(v[b.b1])?.gelu();
        let f = f.matmul(v[b.w2])?.add_suffix(v[b.b2])?;
        Ok(x.add(apply_dropout(f, self.config.dropout, train))?)
    }

    /// `[batch, C, T]` → `[batch * C, n_patches, d_model]`.
    pub fn patchify_graph<'t>(&self, v: &[Var<'t, T>], input: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = input.shape();
        if s.len() != 3 || s[1] != self.config.n_channels || s[2] != self.config.window_samples {
            return Err(Error::Data(format!(
                "input shape {s:?} does not match [batch, {}, {}]",
                self.config.n_channels, self.config.window_samples
            )));
        }
        let (bsz, c, t) = (s[0], s[1], s[2]);
        let y = input
            .reshape(&[bsz * c, 1, t])?
            .conv1d(v[self.layout.patch_kernel], self.config.patch_stride)?
            .permute(&[0, 2, 1])?
            .add_suffix(v[self.layout.patch_bias])?
            .gelu();
        Ok(y)
    }

    /// `[N, n_patches, d]` → `[N, d]`.
    pub fn temporal_graph<'t>(&self, v: &[Var<'t, T>], patches: Var<'t, T>, train: &mut Train<'_>) -> Result<Var<'t, T>> {
        let mut x = patches;
        for b in &self.layout.temporal {
            x = self.block(v, b, x, train)?;
        }
        let s = x.shape();
        let (n, l, d) = (s[0], s[1], s[2]);
        let scores = x
            .matmul(v[self.layout.pool_key])?
            .matmul(v[self.layout.pool_query])?
            .reshape(&[n, 1, l])?
            .scale(T::from_f64_lossy(1.0 / (d as f64).sqrt()))
            .softmax();
        Ok(scores.bmm(x, false)?.reshape(&[n, d])?)
    }

    /// `[batch, C, d]` → `[batch, d]`.
    pub fn spatial_graph<'t>(&self, v: &[Var<'t, T>], channels: Var<'t, T>, train: &mut Train<'_>) -> Result<Var<'t, T>> {
        let s = channels.shape();
        if s.len() != 3 || s[1] != self.config.n_channels || s[2] != self.config.d_model {
            return Err(Error::Data(format!(
                "channel vectors {s:?} do not match [batch, {}, {}]",
                self.config.n_channels, self.config.d_model
            )));
        }
        let mut x = channels.add_suffix(v[self.layout.channel_embedding])?;
        for b in &self.layout.spatial {
            x = self.block(v, b, x, train)?;
        }
        Ok(x.mean_axis(1)?)
    }

    pub fn heads_graph<'t>(&self, v: &[Var<'t, T>], pooled: Var<'t, T>) -> Result<Forward<'t, T>> {
        let h = pooled.layer_norm(v[self.layout.head_ln_g], v[self.layout.head_ln_b], LN_EPS)?;
        let intent_logits = h.matmul(v[self.layout.intent_w])?.add_suffix(v[self.layout.intent_b])?;
        let signature = h
            .matmul(v[self.layout.signature_w])?
            .add_suffix(v[self.layout.signature_b])?
            .l2_normalize();
        Ok(Forward {
            intent_logits,
            signature,
        })
    }

    /// Full batched forward pass on `[batch, C, T]` input, with parameters
    /// bound as `v` (in store order).
    pub fn forward_graph<'t>(
        &self,
        v: &[Var<'t, T>],
        input: Var<'t, T>,
        mut train: Train<'_>,
    ) -> Result<Forward<'t, T>> {
        let bsz = input.shape()[0];
        let patches = self.patchify_graph(v, input)?;
        let summaries = self.temporal_graph(v, patches, &mut train)?;
        let channels = summaries.reshape(&[bsz, self.config.n_channels, self.config.d_model])?;
        let pooled = self.spatial_graph(v, channels, &mut train)?;
        self.heads_graph(v, pooled)
    }

    // ----- inference on plain windows -----

    /// Per-channel patch embeddings `[C, n_patches, d_model]` of one window.
    pub fn patchify(&self, window: &[f32]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let v = self.params.bind_frozen(&tape);
        let x = tape.constant(self.window_tensor(&[window])?);
        let p = self.patchify_graph(&v, x)?;
        let c = self.config.n_channels;
        Ok(p.to_tensor().reshape(&[c, self.config.n_patches(), self.config.d_model])?)
    }

    /// One summary vector per channel, `[C, d_model]`, from patch embeddings.
    pub fn temporal_encode(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let s = patches.shape();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(Error::Data(format!("patch tensor has shape {s:?}")));
        }
        let tape = Tape::new();
        let v = self.params.bind_frozen(&tape);
        let x = tape.constant(patches.clone());
        Ok(self.temporal_graph(&v, x, &mut None)?.to_tensor())
    }

    /// Pooled representation `[d_model]` from channel vectors `[C, d_model]`.
    pub fn spatial_encode(&self, channel_vecs: &Tensor<T>) -> Result<Tensor<T>> {
        let s = channel_vecs.shape();
        if s.len() != 2 || s[0] != self.config.n_channels || s[1] != self.config.d_model {
            return Err(Error::Data(format!(
                "expected [{}, {}] channel vectors, got {s:?}",
                self.config.n_channels, self.config.d_model
            )));
        }
        let tape = Tape::new();
        let v = self.params.bind_frozen(&tape);
        let x = tape.constant(channel_vecs.clone().reshape(&[1, s[0], s[1]])?);
        let pooled = self.spatial_graph(&v, x, &mut None)?;
        Ok(pooled.to_tensor().reshape(&[self.config.d_model])?)
    }

    /// Intent distributions and signatures for a batch of windows.
    pub fn infer_batch(&self, windows: &[&[f32]]) -> Result<Vec<(IntentDistribution, Vec<f32>)>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let v = self.params.bind_frozen(&tape);
        let x = tape.constant(self.window_tensor(windows)?);
        let out = self.forward_graph(&v, x, None)?;
        let probs = out.intent_logits.softmax().to_tensor();
        let sig = out.signature.to_tensor();
        let k = self.config.n_intent_classes;
        let s = self.config.signature_dim;
        Ok((0..windows.len())
            .map(|i| {
                let p = probs.data()[i * k..(i + 1) * k].iter().map(|x| x.as_f64()).collect();
                let g = sig.data()[i * s..(i + 1) * s].iter().map(|x| x.as_f64() as f32).collect();
                (IntentDistribution::from_probabilities(p), g)
            })
            .collect())
    }

    pub fn forward_intent(&self, window: &[f32]) -> Result<IntentDistribution> {
        Ok(self.infer_batch(&[window])?.remove(0).0)
    }

    pub fn forward_signature(&self, window: &[f32]) -> Result<Vec<f32>> {
        Ok(self.infer_batch(&[window])?.remove(0).1)
    }

    /// Batched inference in groups of `batch` windows.
    pub fn infer_many(&self, windows: &[&[f32]], batch: usize) -> Result<Vec<(IntentDistribution, Vec<f32>)>> {
        let mut out = Vec::with_capacity(windows.len());
        for group in windows.chunks(batch.max(1)) {
            out.extend(self.infer_batch(group)?);
        }
        Ok(out)
    }

    // ----- persistence -----

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.params, &self.config.digest())
    }

    pub fn from_checkpoint_bytes(config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let ckpt = checkpoint::decode::<T>(bytes)?;
        if ckpt.digest != config.digest() {
            return Err(Error::Format("checkpoint digest does not match the model configuration".into()));
        }
        let mut model = Self::new(config, 0)?;
        model.params.load_values(ckpt.params)?;
        Ok(model)
    }

    /// Writes the checkpoint to `path` and the configuration as JSON beside
    /// it (`path` with a `.json` extension), both via atomic rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, &self.to_checkpoint_bytes())?;
        crate::fsutil::atomic_write(&config_path(path), self.config.to_json().as_bytes())?;
        Ok(())
    }

    /// Loads a checkpoint and its sibling configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(config_path(path))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(config, &bytes)
    }

    /// Copies every parameter value from `other`, which must share the
    /// configuration.
    pub fn copy_from(&mut self, other: &Decoder<T>) -> Result<()> {
        if other.config != self.config {
            return Err(Error::Config("cannot copy weights between different configurations".into()));
        }
        self.params = other.params.clone();
        Ok(())
    }

    /// Uniform random window with standard deviation `std`.
    pub fn random_window<R: Rng>(&self, rng: &mut R, std: f64) -> Vec<f32> {
        let n = self.config.n_channels * self.config.window_samples;
        (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) as f32 * (std * 3f64.sqrt()) as f32).collect()
    }
}

pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("json")
}

pub type DecoderModel = Decoder<f32>;
