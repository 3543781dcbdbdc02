//! Feedback retention policies: small feedforward networks mapping the
//! observed surplus through tanh hidden layers and a logistic readout to a
//! retention level in (0, 1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hidden-layer activation; bounded as the policy class requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Tanh,
}

/// Output squashing onto (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSquash {
    Logistic,
}

/// Network topology descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArchitecture {
    /// Input dimension; the policy observes the current surplus only.
    pub input_dim: usize,
    /// Hidden-layer widths, outermost first.
    pub hidden_layers: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_squash: OutputSquash,
    /// Optional affine input conditioning x ↦ (x − shift)·scale. Identity by
    /// default; fixed ahead of training, never learned.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for MlpArchitecture {
    /// The base topology: surplus in, two tanh layers of 32, logistic out.
    fn default() -> Self {
        MlpArchitecture {
            input_dim: 1,
            hidden_layers: vec![32, 32],
            hidden_activation: HiddenActivation::Tanh,
            output_squash: OutputSquash::Logistic,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

impl MlpArchitecture {
    pub fn with_hidden(hidden_layers: Vec<usize>) -> Self {
        MlpArchitecture {
            hidden_layers,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != 1 {
            return Err(Error::InvalidParams(
                "only scalar surplus input is supported (input_dim = 1)".into(),
            ));
        }
        if self.hidden_layers.is_empty() {
            return Err(Error::InvalidParams(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParams(
                "hidden layer widths must be at least 1".into(),
            ));
        }
        if !self.input_shift.is_finite() || !self.input_scale.is_finite() {
            return Err(Error::InvalidParams(
                "input normalization must be finite".into(),
            ));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per affine layer, hidden layers then readout.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut fan_in = self.input_dim;
        for &width in &self.hidden_layers {
            dims.push((fan_in, width));
            fan_in = width;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fi, fo)| fi * fo + fo)
            .sum()
    }

    fn max_width(&self) -> usize {
        self.hidden_layers
            .iter()
            .copied()
            .max()
            .unwrap_or(1)
            .max(self.input_dim)
    }
}

/// One affine layer, weights row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// A retention network: tanh hidden layers, logistic readout.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub arch: MlpArchitecture,
    pub layers: Vec<Layer>,
}

/// Largest f64 strictly below one. The logistic saturates to exactly 0 or 1
/// in f64 once |z| ≳ 37; nudging back keeps retentions valid proportions in
/// the open interval.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    let raw = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    raw.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

/// Receives intermediate activations during a forward pass. The no-op
/// implementation compiles away for plain evaluation.
pub(crate) trait TraceSink {
    fn push(&mut self, values: &[f64]);
}

pub(crate) struct NoTrace;

impl TraceSink for NoTrace {
    #[inline]
    fn push(&mut self, _values: &[f64]) {}
}

/// Writes activations into a caller-owned buffer in forward order:
/// normalized input, each hidden layer, output.
pub(crate) struct SliceTrace<'a> {
    pub buf: &'a mut [f64],
    pub pos: usize,
}

impl TraceSink for SliceTrace<'_> {
    #[inline]
    fn push(&mut self, values: &[f64]) {
        self.buf[self.pos..self.pos + values.len()].copy_from_slice(values);
        self.pos += values.len();
    }
}

/// Ping-pong activation buffers reused across forward passes.
#[derive(Debug, Clone)]
pub(crate) struct ForwardScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ForwardScratch {
    pub fn for_arch(arch: &MlpArchitecture) -> Self {
        let w = arch.max_width();
        ForwardScratch {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

impl MlpPolicy {
    /// Number of activation values recorded per traced forward pass.
    pub(crate) fn trace_len(&self) -> usize {
        1 + self.arch.hidden_layers.iter().sum::<usize>() + 1
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    /// Assemble a policy from explicit layers, checking shapes.
    pub fn from_parts(arch: MlpArchitecture, layers: Vec<Layer>) -> Result<MlpPolicy> {
        arch.validate()?;
        let dims = arch.layer_dims();
        if layers.len() != dims.len() {
            return Err(Error::InvalidParams(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (l, (fan_in, fan_out)) in layers.iter().zip(&dims) {
            if l.weights.len() != fan_in * fan_out || l.biases.len() != *fan_out {
                return Err(Error::InvalidParams(format!(
                    "layer shape mismatch: expected {fan_out}×{fan_in} weights"
                )));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(
                    "policy parameters must be finite".into(),
                ));
            }
        }
        Ok(MlpPolicy { arch, layers })
    }

    /// All-zero parameters; evaluates to exactly 1/2 everywhere.
    pub fn zeroed(arch: &MlpArchitecture) -> MlpPolicy {
        let layers = arch
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| Layer {
                weights: vec![0.0; fan_in * fan_out],
                biases: vec![0.0; fan_out],
            })
            .collect();
        MlpPolicy {
            arch: arch.clone(),
            layers,
        }
    }

    pub(crate) fn forward_with<S: TraceSink>(
        &self,
        surplus: f64,
        scratch: &mut ForwardScratch,
        sink: &mut S,
    ) -> f64 {
        let normalized = (surplus - self.arch.input_shift) * self.arch.input_scale;
        sink.push(&[normalized]);
        scratch.a[0] = normalized;
        let mut in_len = 1;
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let out_len = layer.biases.len();
            let last = li + 1 == n_layers;
            for j in 0..out_len {
                let row = &layer.weights[j * in_len..(j + 1) * in_len];
                let mut z = layer.biases[j];
                for (w, h) in row.iter().zip(&scratch.a[..in_len]) {
                    z += w * h;
                }
                scratch.b[j] = if last { logistic(z) } else { z.tanh() };
            }
            sink.push(&scratch.b[..out_len]);
            std::mem::swap(&mut scratch.a, &mut scratch.b);
            in_len = out_len;
        }
        scratch.a[0]
    }

    /// Retention level b̄(surplus) in the open interval (0, 1).
    pub fn eval_retention(&self, surplus: f64) -> f64 {
        assert!(surplus.is_finite(), "surplus must be finite, got {surplus}");
        let mut scratch = ForwardScratch::for_arch(&self.arch);
        self.forward_with(surplus, &mut scratch, &mut NoTrace)
    }

    /// Elementwise retention evaluation; identical to the scalar loop.
    pub fn eval_retention_batch(&self, surpluses: &[f64]) -> Vec<f64> {
        let mut scratch = ForwardScratch::for_arch(&self.arch);
        surpluses
            .iter()
            .map(|&x| {
                assert!(x.is_finite(), "surplus must be finite, got {x}");
                self.forward_with(x, &mut scratch, &mut NoTrace)
            })
            .collect()
    }
}

/// Symmetric scaled-uniform weights (bound √(6/(fan_in+fan_out))), zero
/// biases; deterministic under the seed.
pub fn init_policy(arch: &MlpArchitecture, seed: u64) -> Result<MlpPolicy> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_dims()
        .iter()
        .map(|&(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Layer {
                weights: (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect(),
                biases: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpPolicy {
        arch: arch.clone(),
        layers,
    })
}

/// A reinsurance policy over the whole horizon: either one network applied
/// at every step, or one network per step.
#[derive(Debug, Clone, PartialEq)]
pub enum ReinsurancePolicy {
    Shared(MlpPolicy),
    PerStep(Vec<MlpPolicy>),
}

impl ReinsurancePolicy {
    pub fn network_count(&self) -> usize {
        match self {
            ReinsurancePolicy::Shared(_) => 1,
            ReinsurancePolicy::PerStep(nets) => nets.len(),
        }
    }

    pub fn networks(&self) -> &[MlpPolicy] {
        match self {
            ReinsurancePolicy::Shared(net) => std::slice::from_ref(net),
            ReinsurancePolicy::PerStep(nets) => nets,
        }
    }

    pub fn networks_mut(&mut self) -> &mut [MlpPolicy] {
        match self {
            ReinsurancePolicy::Shared(net) => std::slice::from_mut(net),
            ReinsurancePolicy::PerStep(nets) => nets,
        }
    }

    /// Which network decides at a given step.
    pub(crate) fn net_index(&self, step: usize) -> usize {
        match self {
            ReinsurancePolicy::Shared(_) => 0,
            ReinsurancePolicy::PerStep(_) => step,
        }
    }

    pub fn retention(&self, step: usize, surplus: f64) -> f64 {
        self.networks()[self.net_index(step)].eval_retention(surplus)
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.networks()[0].arch
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().map(MlpPolicy::parameter_count).sum()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RETPOL01";

/// Write a policy checkpoint: versioned architecture header followed by the
/// parameters of each network in layer order, row-major, f64 little-endian.
pub fn save_checkpoint(policy: &ReinsurancePolicy, path: &Path) -> Result<()> {
    let nets = policy.networks();
    let arch = &nets[0].arch;
    if nets.iter().any(|n| n.arch != *arch) {
        return Err(Error::Checkpoint(
            "all networks in a checkpoint must share one architecture".into(),
        ));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    w.write_all(&(arch.input_dim as u32).to_le_bytes())?;
    w.write_all(&arch.input_shift.to_le_bytes())?;
    w.write_all(&arch.input_scale.to_le_bytes())?;
    w.write_all(&(arch.hidden_layers.len() as u32).to_le_bytes())?;
    for &width in &arch.hidden_layers {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&[0u8, 0u8])?; // activation tags: tanh, logistic
    for net in nets {
        for layer in &net.layers {
            for value in layer.weights.iter().chain(&layer.biases) {
                w.write_all(&value.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], reproducing the stored
/// policy bit for bit.
pub fn load_checkpoint(path: &Path) -> Result<ReinsurancePolicy> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint (bad magic/version)"));
    }
    let mut u32_buf = [0u8; 4];
    let mut f64_buf = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let network_count = read_u32(&mut r)? as usize;
    let input_dim = read_u32(&mut r)? as usize;
    r.read_exact(&mut f64_buf)?;
    let input_shift = f64::from_le_bytes(f64_buf);
    r.read_exact(&mut f64_buf)?;
    let input_scale = f64::from_le_bytes(f64_buf);
    let n_hidden = read_u32(&mut r)? as usize;
    if network_count == 0 || n_hidden == 0 || network_count > 1 << 20 || n_hidden > 1 << 10 {
        return Err(bad("implausible header counts"));
    }
    let mut hidden_layers = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_layers.push(read_u32(&mut r)? as usize);
    }
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    if tags != [0, 0] {
        return Err(bad("unknown activation tags"));
    }
    let arch = MlpArchitecture {
        input_dim,
        hidden_layers,
        hidden_activation: HiddenActivation::Tanh,
        output_squash: OutputSquash::Logistic,
        input_shift,
        input_scale,
    };
    arch.validate().map_err(|e| bad(&e.to_string()))?;

    let mut nets = Vec::with_capacity(network_count);
    for _ in 0..network_count {
        let layers = arch
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| -> Result<Layer> {
                let mut read_vec = |len: usize| -> Result<Vec<f64>> {
                    let mut out = Vec::with_capacity(len);
                    for _ in 0..len {
                        r.read_exact(&mut f64_buf)?;
                        out.push(f64::from_le_bytes(f64_buf));
                    }
                    Ok(out)
                };
                Ok(Layer {
                    weights: read_vec(fan_in * fan_out)?,
                    biases: read_vec(fan_out)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nets.push(MlpPolicy::from_parts(arch.clone(), layers).map_err(|e| bad(&e.to_string()))?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(if network_count == 1 {
        ReinsurancePolicy::Shared(nets.pop().expect("one network"))
    } else {
        ReinsurancePolicy::PerStep(nets)
    })
}
