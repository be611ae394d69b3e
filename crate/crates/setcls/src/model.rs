//! Transformer set classifier.
//!
//! RoI features are embedded into tokens by a two-layer head, a trainable
//! classification token is prepended, and the token set runs through a stack
//! of post-norm transformer encoder layers without any positional encoding —
//! the tracklet is a set, and the set prediction is read off the
//! classification token. Three linear heads produce the set logits (from
//! `z_0`), per-token instance logits (from `z_1..z_L`) and cluster logits
//! (from the pre-encoder tokens `x_1..x_L`).

use crate::diffcore::{nn, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Inference tracklets longer than this are uniformly subsampled.
pub const MAX_TRACKLET_LEN: usize = 128;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetClassifierConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub num_classes: usize,
    pub feedforward_dim: usize,
}

impl SetClassifierConfig {
    /// Full-scale defaults: width 512, 8 heads, 3 encoder layers.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        SetClassifierConfig {
            input_dim,
            model_dim: 512,
            heads: 8,
            encoder_layers: 3,
            num_classes,
            feedforward_dim: 4 * 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.encoder_layers < 1 {
            return Err(Error::Config("encoder_layers must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input_dim == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config("input_dim and feedforward_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    norm1_gain: usize,
    norm1_shift: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    norm2_gain: usize,
    norm2_shift: usize,
}

#[derive(Clone, Debug)]
struct Slots {
    embed_fc1_w: usize,
    embed_fc1_b: usize,
    embed_fc2_w: usize,
    embed_fc2_b: usize,
    cls_token: usize,
    layers: Vec<LayerSlots>,
    set_w: usize,
    set_b: usize,
    inst_w: usize,
    inst_b: usize,
    cluster_w: usize,
    cluster_b: usize,
}

pub struct SetClassifierModel {
    pub config: SetClassifierConfig,
    pub params: ParamSet,
    slots: Slots,
}

/// Output handles of one forward pass; values live on the pass's tape.
pub struct SetClassifierOutput {
    /// `[1, C]` logits from the classification token.
    pub set_logits: Var,
    /// `[L, C]` logits from the post-encoder RoI tokens.
    pub instance_logits: Var,
    /// `[L, C]` logits from the pre-encoder RoI tokens.
    pub cluster_logits: Var,
    /// `[L+1, d]` post-encoder token embeddings `z_0..z_L`.
    pub embeddings: Var,
}

/// A recorded forward computation, ready for loss attachment and backward.
pub struct ForwardPass {
    pub tape: Tape,
    param_vars: Vec<Var>,
    pub output: SetClassifierOutput,
}

impl ForwardPass {
    pub fn set_logits_vec(&self) -> Vec<f64> {
        self.tape.value(self.output.set_logits).data().to_vec()
    }

    pub fn instance_logits(&self) -> &Tensor {
        self.tape.value(self.output.instance_logits)
    }

    pub fn cluster_logits(&self) -> &Tensor {
        self.tape.value(self.output.cluster_logits)
    }

    /// Runs backward from `loss` and adds `scale *` the resulting parameter
    /// gradients into `params`. Gradients accumulate across calls; callers
    /// zero them between optimizer steps.
    pub fn accumulate_grads(&self, loss: Var, params: &mut ParamSet, scale: f64) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let Some(g) = grads.get(var.index()).and_then(|g| g.as_ref()) {
                params.get_mut(idx).grad.axpy(scale, g)?;
            }
        }
        Ok(())
    }
}

impl SetClassifierModel {
    /// Fresh model with Xavier-uniform linear weights, zero biases, unit
    /// layer-norm gains, and a Gaussian classification token (std 0.02).
    pub fn new(config: SetClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.model_dim;
        let din = config.input_dim;
        let ff = config.feedforward_dim;
        let c = config.num_classes;

        let xavier = |rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize| -> Tensor {
            use rand::Rng;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::matrix(fan_in, fan_out, data).expect("xavier shape")
        };

        let embed_fc1_w = params.add("embed.fc1.weight", xavier(&mut rng, din, d))?;
        let embed_fc1_b = params.add("embed.fc1.bias", Tensor::zeros(vec![d]))?;
        let embed_fc2_w = params.add("embed.fc2.weight", xavier(&mut rng, d, d))?;
        let embed_fc2_b = params.add("embed.fc2.bias", Tensor::zeros(vec![d]))?;

        let cls = {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, 0.02).expect("normal params");
            let data = (0..d).map(|_| normal.sample(&mut rng)).collect();
            Tensor::matrix(1, d, data)?
        };
        let cls_token = params.add("cls_token", cls)?;

        let mut layers = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let p = |n: &str| format!("enc{i}.{n}");
            layers.push(LayerSlots {
                wq: params.add(p("attn.wq"), xavier(&mut rng, d, d))?,
                bq: params.add(p("attn.bq"), Tensor::zeros(vec![d]))?,
                wk: params.add(p("attn.wk"), xavier(&mut rng, d, d))?,
                bk: params.add(p("attn.bk"), Tensor::zeros(vec![d]))?,
                wv: params.add(p("attn.wv"), xavier(&mut rng, d, d))?,
                bv: params.add(p("attn.bv"), Tensor::zeros(vec![d]))?,
                wo: params.add(p("attn.wo"), xavier(&mut rng, d, d))?,
                bo: params.add(p("attn.bo"), Tensor::zeros(vec![d]))?,
                norm1_gain: params.add(p("norm1.gain"), Tensor::full(vec![d], 1.0))?,
                norm1_shift: params.add(p("norm1.shift"), Tensor::zeros(vec![d]))?,
                ff1_w: params.add(p("ffn.fc1.weight"), xavier(&mut rng, d, ff))?,
                ff1_b: params.add(p("ffn.fc1.bias"), Tensor::zeros(vec![ff]))?,
                ff2_w: params.add(p("ffn.fc2.weight"), xavier(&mut rng, ff, d))?,
                ff2_b: params.add(p("ffn.fc2.bias"), Tensor::zeros(vec![d]))?,
                norm2_gain: params.add(p("norm2.gain"), Tensor::full(vec![d], 1.0))?,
                norm2_shift: params.add(p("norm2.shift"), Tensor::zeros(vec![d]))?,
            });
        }

        let set_w = params.add("set_head.weight", xavier(&mut rng, d, c))?;
        let set_b = params.add("set_head.bias", Tensor::zeros(vec![c]))?;
        let inst_w = params.add("instance_head.weight", xavier(&mut rng, d, c))?;
        let inst_b = params.add("instance_head.bias", Tensor::zeros(vec![c]))?;
        let cluster_w = params.add("cluster_head.weight", xavier(&mut rng, d, c))?;
        let cluster_b = params.add("cluster_head.bias", Tensor::zeros(vec![c]))?;

        Ok(SetClassifierModel {
            config,
            params,
            slots: Slots {
                embed_fc1_w,
                embed_fc1_b,
                embed_fc2_w,
                embed_fc2_b,
                cls_token,
                layers,
                set_w,
                set_b,
                inst_w,
                inst_b,
                cluster_w,
                cluster_b,
            },
        })
    }

    /// Records the full forward computation for a tracklet of `L` RoI
    /// feature rows.
    pub fn forward(&self, features: &Tensor) -> Result<ForwardPass> {
        let (l, din) = features.dims2()?;
        if l == 0 {
            return Err(Error::Invalid("empty tracklet".into()));
        }
        if l > MAX_TRACKLET_LEN {
            return Err(Error::Invalid(format!(
                "tracklet length {l} exceeds cap {MAX_TRACKLET_LEN}; subsample first"
            )));
        }
        if din != self.config.input_dim {
            return Err(Error::Shape(format!(
                "feature dim {din} does not match model input_dim {}",
                self.config.input_dim
            )));
        }

        let mut tape = Tape::new();
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<_>>()?;
        let pv = |slot: usize| param_vars[slot];

        let x = tape.leaf(features.clone())?;

        // Embedding head: two linear layers with a rectifier in between.
        let h = tape.matmul(x, pv(self.slots.embed_fc1_w))?;
        let h = tape.add_row(h, pv(self.slots.embed_fc1_b))?;
        let h = tape.relu(h)?;
        let roi_tokens = tape.matmul(h, pv(self.slots.embed_fc2_w))?;
        let roi_tokens = tape.add_row(roi_tokens, pv(self.slots.embed_fc2_b))?;

        // Cluster logits come from the pre-encoder tokens.
        let cl = tape.matmul(roi_tokens, pv(self.slots.cluster_w))?;
        let cluster_logits = tape.add_row(cl, pv(self.slots.cluster_b))?;

        let mut tokens = tape.concat_rows(pv(self.slots.cls_token), roi_tokens)?;

        for layer in &self.slots.layers {
            let attn_params = nn::AttentionParams {
                wq: pv(layer.wq),
                bq: pv(layer.bq),
                wk: pv(layer.wk),
                bk: pv(layer.bk),
                wv: pv(layer.wv),
                bv: pv(layer.bv),
                wo: pv(layer.wo),
                bo: pv(layer.bo),
            };
            let attn = nn::multi_head_attention(&mut tape, tokens, &attn_params, self.config.heads)?;
            let sum1 = tape.add(tokens, attn)?;
            let normed1 =
                tape.layer_norm(sum1, pv(layer.norm1_gain), pv(layer.norm1_shift), LAYER_NORM_EPS)?;
            let f = tape.matmul(normed1, pv(layer.ff1_w))?;
            let f = tape.add_row(f, pv(layer.ff1_b))?;
            let f = tape.relu(f)?;
            let f = tape.matmul(f, pv(layer.ff2_w))?;
            let f = tape.add_row(f, pv(layer.ff2_b))?;
            let sum2 = tape.add(normed1, f)?;
            tokens =
                tape.layer_norm(sum2, pv(layer.norm2_gain), pv(layer.norm2_shift), LAYER_NORM_EPS)?;
        }

        let z0 = tape.slice_rows(tokens, 0, 1)?;
        let zrest = tape.slice_rows(tokens, 1, l)?;

        let set_logits = tape.matmul(z0, pv(self.slots.set_w))?;
        let set_logits = tape.add_row(set_logits, pv(self.slots.set_b))?;
        let instance_logits = tape.matmul(zrest, pv(self.slots.inst_w))?;
        let instance_logits = tape.add_row(instance_logits, pv(self.slots.inst_b))?;

        Ok(ForwardPass {
            tape,
            param_vars,
            output: SetClassifierOutput {
                set_logits,
                instance_logits,
                cluster_logits,
                embeddings: tokens,
            },
        })
    }

    /// Maps RoI features to tokens without running the encoder.
    /// Same architecture reading a different parameter store. Used by the
    /// finite-difference checker, which perturbs parameters externally.
    pub fn with_params(&self, params: ParamSet) -> Result<SetClassifierModel> {
        if params.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "parameter store has {} entries, architecture needs {}",
                params.len(),
                self.params.len()
            )));
        }
        Ok(SetClassifierModel { config: self.config, params, slots: self.slots.clone() })
    }

    pub fn embed_rois(&self, features: &Tensor) -> Result<Tensor> {
        let (_, din) = features.dims2()?;
        if din != self.config.input_dim {
            return Err(Error::Shape(format!(
                "feature dim {din} does not match model input_dim {}",
                self.config.input_dim
            )));
        }
        let fc1w = &self.params.get(self.slots.embed_fc1_w).value;
        let fc1b = &self.params.get(self.slots.embed_fc1_b).value;
        let fc2w = &self.params.get(self.slots.embed_fc2_w).value;
        let fc2b = &self.params.get(self.slots.embed_fc2_b).value;
        let mut h = features.matmul(fc1w)?;
        let (m, d) = h.dims2()?;
        for r in 0..m {
            for c in 0..d {
                let v = h.at2(r, c) + fc1b.data()[c];
                h.set2(r, c, if v > 0.0 { v } else { 0.0 });
            }
        }
        let mut out = h.matmul(fc2w)?;
        for r in 0..m {
            for c in 0..d {
                out.set2(r, c, out.at2(r, c) + fc2b.data()[c]);
            }
        }
        Ok(out)
    }

    /// Softmax of the set logits of a completed forward pass.
    pub fn predict_set_probs(pass: &ForwardPass) -> Vec<f64> {
        softmax_vec(&pass.set_logits_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.config.input_dim,
            self.config.model_dim,
            self.config.heads,
            self.config.encoder_layers,
            self.config.num_classes,
            self.config.feedforward_dim,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.iter() {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &e in p.value.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = SetClassifierConfig {
            input_dim: cur.u32()? as usize,
            model_dim: cur.u32()? as usize,
            heads: cur.u32()? as usize,
            encoder_layers: cur.u32()? as usize,
            num_classes: cur.u32()? as usize,
            feedforward_dim: cur.u32()? as usize,
        };
        let mut model = SetClassifierModel::new(config, 0)?;
        let count = cur.u64()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, config implies {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }
            let value = Tensor::new(shape, data)?;
            let idx = model
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
            if model.params.get(idx).value.shape() != value.shape() {
                return Err(Error::Format(format!("parameter {name:?} shape mismatch")));
            }
            model.params.get_mut(idx).value = value;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Index of the largest entry; exact ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Evenly spaced subsampling of `len` frames down to `cap`, ties broken
/// toward earlier frames. Identity when `len <= cap`.
pub fn subsample_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|j| j * len / cap).collect()
    }
}
