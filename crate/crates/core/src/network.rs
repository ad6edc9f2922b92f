//! The attention-gated 3D CNN.
//!
//! Four stages of `Conv3d(k, pad k/2) → BatchNorm → ReLU`, max-pooled after
//! each of the first three. A soft attention gate re-weights a shallower
//! feature map `x` using the deepest stage `g` as gating signal:
//!
//! ```text
//! alpha = sigmoid(psi(relu(Wx * x + upsample(Wg * g))))
//! x_att = alpha ⊙ x
//! ```
//!
//! The two global average pools (deepest stage and `x_att`) are concatenated
//! and mapped to two logits by a dense layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use colearn_autograd::{BatchNormConfig, Element, PoolSpec, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical;
use crate::error::{invalid, Error, Result};
use crate::volume::{Volume, VolumeKind};

pub const INPUT_CHANNELS: usize = 2;
pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub num_maxpools: usize,
    pub sag_source_stage: usize,
    pub sag_gating_stage: usize,
    pub sag_intermediate_channels: usize,
    pub num_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            stage_channels: vec![8, 16, 32, 64],
            kernel: 3,
            num_maxpools: 3,
            sag_source_stage: 2,
            sag_gating_stage: 3,
            sag_intermediate_channels: 16,
            num_classes: 2,
        }
    }
}

impl NetworkConfig {
    /// The full-scale layout: 128³ inputs and wider stages.
    pub fn full_scale() -> Self {
        Self {
            input_side: 128,
            stage_channels: vec![16, 32, 64, 128],
            sag_intermediate_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(invalid!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.num_maxpools != NUM_STAGES - 1 {
            return Err(invalid!("the network has exactly 3 max pools, got {}", self.num_maxpools));
        }
        if self.stage_channels.len() != NUM_STAGES || self.stage_channels.contains(&0) {
            return Err(invalid!("stage_channels must list 4 positive widths"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid!("kernel must be odd, got {}", self.kernel));
        }
        let pools = 1 << self.num_maxpools;
        if self.input_side < pools || !self.input_side.is_multiple_of(pools) {
            return Err(invalid!("input_side {} must be a positive multiple of {pools}", self.input_side));
        }
        if self.sag_source_stage >= self.sag_gating_stage || self.sag_gating_stage >= NUM_STAGES {
            return Err(invalid!(
                "need sag_source_stage < sag_gating_stage < 4, got {} and {}",
                self.sag_source_stage,
                self.sag_gating_stage
            ));
        }
        if self.sag_intermediate_channels == 0 {
            return Err(invalid!("sag_intermediate_channels must be positive"));
        }
        Ok(())
    }

    /// Side of the feature map gated by attention: the source stage after its max pool.
    pub fn attention_side(&self) -> usize {
        self.input_side >> (self.sag_source_stage + 1).min(self.num_maxpools)
    }

    /// Shapes of every trainable parameter, in definition order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            out.push((format!("stage{i}.conv.weight"), vec![c, cin, k, k, k]));
            out.push((format!("stage{i}.conv.bias"), vec![c]));
            out.push((format!("stage{i}.bn.gamma"), vec![c]));
            out.push((format!("stage{i}.bn.beta"), vec![c]));
            cin = c;
        }
        let cx = self.stage_channels[self.sag_source_stage];
        let cg = self.stage_channels[self.sag_gating_stage];
        let ci = self.sag_intermediate_channels;
        out.push(("sag.wx.weight".into(), vec![ci, cx, 1, 1, 1]));
        out.push(("sag.wg.weight".into(), vec![ci, cg, 1, 1, 1]));
        out.push(("sag.wg.bias".into(), vec![ci]));
        out.push(("sag.psi.weight".into(), vec![1, ci, 1, 1, 1]));
        out.push(("sag.psi.bias".into(), vec![1]));
        let features = self.stage_channels[NUM_STAGES - 1] + cx;
        out.push(("head.weight".into(), vec![features, self.num_classes]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }

    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        (0..NUM_STAGES)
            .flat_map(|i| {
                let c = self.stage_channels[i];
                [
                    (format!("stage{i}.bn.running_mean"), vec![c]),
                    (format!("stage{i}.bn.running_var"), vec![c]),
                ]
            })
            .collect()
    }

    /// Architecture hash over the canonical config and every tensor name and shape.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(canonical::to_string(self).expect("config serializes"));
        for (name, shape) in self.param_shapes().into_iter().chain(self.buffer_shapes()) {
            h.update(format!("\n{name}:{shape:?}"));
        }
        hex::encode(h.finalize())
    }
}

/// Network definition plus named parameters and batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGraph<T> {
    config: NetworkConfig,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

/// Vars recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    /// Gate coefficients `[N, 1, d, h, w]`.
    pub alpha: Var,
    /// Tape handle of every parameter, by name.
    pub params: BTreeMap<String, Var>,
}

/// Attention gate output for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub alpha: Tensor<f32>,
    pub upsampled: Volume,
}

pub fn build_network<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<ParamGraph<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name == "sag.psi.weight" {
            // The gate starts neutral (alpha = 0.5). A random projection of
            // non-negative activations tends to saturate the sigmoid over the
            // whole volume, where the gate then barely learns.
            vec![T::zero(); n]
        } else if name.ends_with(".weight") {
            let fan_in: usize = if shape.len() == 5 { shape[1..].iter().product() } else { shape[0] };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
        } else if name.ends_with(".gamma") {
            vec![T::one(); n]
        } else {
            vec![T::zero(); n]
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    let buffers = cfg
        .buffer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let fill = if name.ends_with("running_var") { T::one() } else { T::zero() };
            (name, Tensor::full(shape, fill))
        })
        .collect();
    Ok(ParamGraph {
        config: cfg.clone(),
        params,
        buffers,
    })
}

impl<T: Element> ParamGraph<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| invalid!("no parameter `{name}`"))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn cast<U: Element>(&self) -> ParamGraph<U> {
        let cast = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ParamGraph {
            config: self.config.clone(),
            params: cast(&self.params),
            buffers: cast(&self.buffers),
        }
    }

    /// Records the forward pass of `batch: [N, 2, S, S, S]` onto `tape`.
    ///
    /// In training mode batchnorm uses batch statistics and updates the
    /// running statistics in place.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: Tensor<T>, training: bool) -> Result<Forward> {
        let s = self.config.input_side;
        let shape = batch.shape();
        if shape.len() != 5 || shape[1] != INPUT_CHANNELS || shape[2..] != [s, s, s] {
            return Err(invalid!("batch shape {shape:?} does not match [N, 2, {s}, {s}, {s}]"));
        }
        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        let p = |name: &str| vars[name];
        let bn = BatchNormConfig {
            training,
            ..BatchNormConfig::default()
        };
        let pad = self.config.kernel / 2;

        let mut h = tape.constant(batch);
        let mut stage_out = Vec::with_capacity(NUM_STAGES);
        let mut pooled = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let conv = tape.conv3d(
                h,
                p(&format!("stage{i}.conv.weight")),
                Some(p(&format!("stage{i}.conv.bias"))),
                1,
                pad,
            )?;
            let [mut rm, mut rv] = [format!("stage{i}.bn.running_mean"), format!("stage{i}.bn.running_var")]
                .map(|k| self.buffers.remove(&k).expect("buffer present"));
            let normed = tape.batchnorm3d(
                conv,
                p(&format!("stage{i}.bn.gamma")),
                p(&format!("stage{i}.bn.beta")),
                &mut rm,
                &mut rv,
                bn,
            );
            self.buffers.insert(format!("stage{i}.bn.running_mean"), rm);
            self.buffers.insert(format!("stage{i}.bn.running_var"), rv);
            h = tape.relu(normed?)?;
            stage_out.push(h);
            if i < self.config.num_maxpools {
                h = tape.maxpool3d(h, PoolSpec::default())?;
            }
            pooled.push(h);
        }

        let x = pooled[self.config.sag_source_stage];
        let g = stage_out[self.config.sag_gating_stage];
        let (x_att, alpha) = sag(tape, x, g, &vars)?;

        let main = tape.global_avgpool(stage_out[NUM_STAGES - 1])?;
        let att = tape.global_avgpool(x_att)?;
        let features = tape.concat(&[main, att], 1)?;
        let logits = tape.dense(features, p("head.weight"), p("head.bias"))?;
        let probs = tape.softmax(logits)?;
        Ok(Forward {
            logits,
            probs,
            alpha,
            params: vars,
        })
    }

    /// Gate coefficients for one `[2, S, S, S]` input, upsampled to the input grid.
    pub fn extract_attention(&self, input: &Tensor<T>) -> Result<AttentionMap> {
        let s = self.config.input_side;
        let batch = input.clone().reshape([1, INPUT_CHANNELS, s, s, s])?;
        let mut tape = Tape::new();
        let mut net = self.clone();
        let fwd = net.forward(&mut tape, batch, false)?;
        let up = tape.trilinear_upsample(fwd.alpha, [s, s, s])?;
        let alpha = tape.value(fwd.alpha)?.cast::<f32>();
        let data: Vec<f32> = tape
            .value(up)?
            .data()
            .iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
            .collect();
        let upsampled = Volume::new([s, s, s], None, VolumeKind::Normalized, data)?;
        Ok(AttentionMap { alpha, upsampled })
    }
}

/// Soft attention gate. Returns `(x_att, alpha)`.
pub fn sag<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    g: Var,
    params: &BTreeMap<String, Var>,
) -> Result<(Var, Var)> {
    let get = |name: &str| params.get(name).copied().ok_or_else(|| invalid!("no parameter `{name}`"));
    let xs = tape.shape(x)?.to_vec();
    let gs = tape.shape(g)?.to_vec();
    if xs.len() != 5 || gs.len() != 5 || xs[0] != gs[0] {
        return Err(invalid!("attention gate inputs {xs:?} and {gs:?} disagree on batch"));
    }
    let wx = tape.conv3d(x, get("sag.wx.weight")?, None, 1, 0)?;
    let mut wg = tape.conv3d(g, get("sag.wg.weight")?, Some(get("sag.wg.bias")?), 1, 0)?;
    let target = [xs[2], xs[3], xs[4]];
    if gs[2..] != target {
        wg = tape.trilinear_upsample(wg, target)?;
    }
    let joint = tape.add(wx, wg)?;
    let joint = tape.relu(joint)?;
    let q = tape.conv3d(joint, get("sag.psi.weight")?, Some(get("sag.psi.bias")?), 1, 0)?;
    let alpha = tape.sigmoid(q)?;
    let x_att = tape.gate_channels(alpha, x)?;
    Ok((x_att, alpha))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    fingerprint: String,
    dtype: String,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn elem_bytes<T: Element>() -> usize {
    std::mem::size_of::<T>()
}

fn push_le<T: Element>(out: &mut Vec<u8>, v: T) {
    match elem_bytes::<T>() {
        4 => out.extend((v.as_f64() as f32).to_le_bytes()),
        _ => out.extend(v.as_f64().to_le_bytes()),
    }
}

fn read_le<T: Element>(b: &[u8]) -> T {
    match b.len() {
        4 => T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64),
        _ => T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())),
    }
}

/// Writes `dir/model.json` and `dir/model.bin`.
pub fn save_checkpoint<T: Element>(pg: &ParamGraph<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in pg.params.iter().chain(&pg.buffers) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.len(),
        });
        t.data().iter().for_each(|&v| push_le(&mut blob, v));
    }
    let manifest = CheckpointManifest {
        fingerprint: pg.fingerprint(),
        dtype: T::NAME.into(),
        config: pg.config.clone(),
        tensors,
    };
    canonical::write(&manifest, dir.join("model.json"))?;
    let bin = dir.join("model.bin");
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))
}

pub fn load_checkpoint<T: Element>(dir: impl AsRef<Path>) -> Result<ParamGraph<T>> {
    let dir = dir.as_ref();
    let json = dir.join("model.json");
    let m: CheckpointManifest = canonical::read(&json)?;
    m.config.validate().map_err(|e| Error::format(&json, e.to_string()))?;
    if m.config.fingerprint() != m.fingerprint {
        return Err(Error::format(&json, "architecture fingerprint does not match its config"));
    }
    if m.dtype != T::NAME {
        return Err(Error::format(&json, format!("checkpoint holds {} but {} was requested", m.dtype, T::NAME)));
    }
    let bin = dir.join("model.bin");
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let width = elem_bytes::<T>();

    let mut expected: BTreeMap<String, Vec<usize>> = m.config.param_shapes().into_iter().collect();
    let buffer_names: Vec<String> = m.config.buffer_shapes().iter().map(|(n, _)| n.clone()).collect();
    expected.extend(m.config.buffer_shapes());
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut end = 0;
    for e in m.tensors {
        match expected.remove(&e.name) {
            Some(shape) if shape == e.shape => {}
            _ => return Err(Error::format(&json, format!("unexpected tensor `{}` {:?}", e.name, e.shape))),
        }
        let (start, stop) = (e.offset, e.offset + e.len * width);
        if stop > blob.len() || e.len != e.shape.iter().product::<usize>() {
            return Err(Error::format(&bin, format!("truncated blob for `{}`", e.name)));
        }
        end = end.max(stop);
        let data = blob[start..stop].chunks_exact(width).map(read_le::<T>).collect();
        let t = Tensor::new(e.shape, data)?;
        if buffer_names.contains(&e.name) {
            buffers.insert(e.name, t);
        } else {
            params.insert(e.name, t);
        }
    }
    if let Some(name) = expected.keys().next() {
        return Err(Error::format(&json, format!("missing tensor `{name}`")));
    }
    if end != blob.len() {
        return Err(Error::format(&bin, format!("blob has {} bytes, manifest covers {end}", blob.len())));
    }
    Ok(ParamGraph {
        config: m.config,
        params,
        buffers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_count(cfg: &NetworkConfig) -> usize {
        let k3 = cfg.kernel.pow(3);
        let c = &cfg.stage_channels;
        let mut n = 0;
        let mut cin = INPUT_CHANNELS;
        for &co in c {
            n += co * cin * k3 + co + 2 * co;
            cin = co;
        }
        let (cx, cg, ci) = (c[cfg.sag_source_stage], c[cfg.sag_gating_stage], cfg.sag_intermediate_channels);
        n += ci * cx + ci * cg + ci + ci + 1;
        n + (c[3] + cx) * 2 + 2
    }

    #[test]
    fn parameter_count_matches_layer_list() {
        let cfg = NetworkConfig::default();
        let pg = build_network::<f32>(&cfg, 1).unwrap();
        assert_eq!(pg.param_count(), closed_form_count(&cfg));
        // stages 456 + 3504 + 13920 + 55488, gate 1569, head 194
        assert_eq!(pg.param_count(), 75131);
    }

    #[test]
    fn rejects_three_classes() {
        let cfg = NetworkConfig {
            num_classes: 3,
            ..NetworkConfig::default()
        };
        assert!(build_network::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = NetworkConfig::default();
        assert_eq!(build_network::<f32>(&cfg, 9).unwrap(), build_network::<f32>(&cfg, 9).unwrap());
        assert_ne!(build_network::<f32>(&cfg, 9).unwrap(), build_network::<f32>(&cfg, 10).unwrap());
    }
}
