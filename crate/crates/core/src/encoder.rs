//! Feed-forward encoder mapping an input vector to a diagonal Gaussian
//! embedding, plus the trainable prototype-noise parameter `gamma`.
//!
//! The final layer has `2 * embed_dim` outputs: the first half is the mean,
//! the second half passes through softplus (plus [`VARIANCE_FLOOR`]) to give
//! the per-axis variance.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softplus, Gradients, Tape, Tensor, Var};
use crate::error::{Result, SpeError};
use crate::gaussian::{DiagonalGaussian, VARIANCE_FLOOR};
use crate::manifest::{join_list, read_f32_blob, write_f32_blob, Manifest};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GAMMA0: f64 = 0.01;

const MANIFEST_FILE: &str = "encoder.manifest";
const PARAMS_FILE: &str = "encoder.params.f32";

/// Whether a model is trained and evaluated as a stochastic embedding or as
/// the deterministic prototypical-network baseline (mean head only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Spe,
    Pn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Spe => "spe",
            ModelKind::Pn => "pn",
        }
    }
}

impl FromStr for ModelKind {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spe" => Ok(ModelKind::Spe),
            "pn" => Ok(ModelKind::Pn),
            other => Err(SpeError::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

impl PoolMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolMode::Average => "avg",
            PoolMode::Max => "max",
        }
    }
}

impl FromStr for PoolMode {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            other => Err(SpeError::invalid(format!(
                "unknown pooling mode `{other}` (expected avg or max)"
            ))),
        }
    }
}

/// Fixed per-channel block pooling applied to image inputs before the first
/// layer. Pixels are interleaved row-major `(y, x, channel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pooling {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub factor: usize,
    pub mode: PoolMode,
}

impl Pooling {
    pub fn output_len(&self) -> usize {
        (self.height / self.factor) * (self.width / self.factor) * self.channels
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f64>) {
        let (oh, ow, c, f) = (
            self.height / self.factor,
            self.width / self.factor,
            self.channels,
            self.factor,
        );
        out.clear();
        match self.mode {
            PoolMode::Average => out.resize(oh * ow * c, 0.0),
            PoolMode::Max => out.resize(oh * ow * c, f64::NEG_INFINITY),
        }
        let norm = 1.0 / (f * f) as f64;
        for y in 0..oh * f {
            for xx in 0..ow * f {
                let src = (y * self.width + xx) * c;
                let dst = ((y / f) * ow + xx / f) * c;
                for ch in 0..c {
                    let v = x[src + ch] as f64;
                    match self.mode {
                        PoolMode::Average => out[dst + ch] += v * norm,
                        PoolMode::Max => out[dst + ch] = out[dst + ch].max(v),
                    }
                }
            }
        }
    }

    /// `HxWxC/factor/mode`, as stored in model manifests.
    pub fn to_spec(&self) -> String {
        format!(
            "{}x{}x{}/{}/{}",
            self.height,
            self.width,
            self.channels,
            self.factor,
            self.mode.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Length of the raw input vector.
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub pooling: Option<Pooling>,
}

impl EncoderConfig {
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            pooling: None,
        }
    }

    pub fn network_input_dim(&self) -> usize {
        self.pooling.map_or(self.input_dim, |p| p.output_len())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.network_input_dim()];
        widths.extend(&self.hidden_dims);
        widths.push(2 * self.embed_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(SpeError::invalid("encoder dimensions must be positive"));
        }
        if let Some(p) = self.pooling {
            if p.factor == 0
                || p.height * p.width * p.channels != self.input_dim
                || p.height % p.factor != 0
                || p.width % p.factor != 0
            {
                return Err(SpeError::invalid(format!(
                    "pooling {p:?} does not fit input_dim {}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Dense layer with weights stored row-major as `[inputs, outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    pub gamma: f64,
    pub seed: u64,
}

/// Embeddings of a batch recorded on a tape; both are `[batch, embed_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes<'t> {
    pub mean: Var<'t>,
    pub variance: Var<'t>,
}

/// Model parameters registered as tape leaves.
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    pub gamma: Var<'t>,
}

impl<'t> ParamVars<'t> {
    /// softplus(gamma), the prototype-noise variance, as a scalar node.
    pub fn sigma_epsilon_sq(&self) -> Result<Var<'t>> {
        Ok(self.gamma.softplus()?)
    }

    /// Gradient of every parameter in [`EncoderModel::parameters`] order.
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(grads.wrt(*w).into_data());
            out.extend(grads.wrt(*b).into_data());
        }
        out.push(grads.wrt(self.gamma).item());
        out
    }
}

impl EncoderModel {
    /// Fresh model with fan-in uniform initialization of weights and biases
    /// and `gamma = support_count * gamma0^(2 / embed_dim)`.
    pub fn init(
        config: EncoderConfig,
        kind: ModelKind,
        support_count: usize,
        gamma0: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !(gamma0 > 0.0) || support_count == 0 {
            return Err(SpeError::invalid(
                "gamma0 and the support count must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(inputs, outputs)| {
                let bound = 1.0 / (inputs as f64).sqrt();
                let weight = (0..inputs * outputs)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..outputs)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    inputs,
                    outputs,
                    weight,
                    bias,
                }
            })
            .collect();
        let gamma = initial_gamma(support_count, gamma0, config.embed_dim);
        Ok(Self {
            config,
            kind,
            layers,
            gamma,
            seed,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// `softplus(gamma)`: the isotropic prototype-noise variance.
    pub fn sigma_epsilon_sq(&self) -> f64 {
        softplus(self.gamma)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + 1
    }

    /// All parameters in declared order: each layer's weight then bias, then gamma.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(&l.weight);
            out.extend(&l.bias);
        }
        out.push(self.gamma);
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        SpeError::dims(self.parameter_count(), params.len())?;
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weight.len());
            l.weight.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        self.gamma = rest[0];
        Ok(())
    }

    fn prepare_input(&self, x: &[f32], buf: &mut Vec<f64>) -> Result<()> {
        SpeError::dims(self.config.input_dim, x.len())?;
        match self.config.pooling {
            Some(p) => p.apply(x, buf),
            None => {
                buf.clear();
                buf.extend(x.iter().map(|&v| v as f64));
            }
        }
        Ok(())
    }

    /// Raw network output (`2 * embed_dim` values) for one input.
    pub fn forward_raw(&self, x: &[f32]) -> Result<Vec<f64>> {
        let mut act = Vec::new();
        self.prepare_input(x, &mut act)?;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = layer.bias.clone();
            for (i, &a) in act.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &layer.weight[i * layer.outputs..(i + 1) * layer.outputs];
                next.iter_mut().zip(row).for_each(|(n, w)| *n += a * w);
            }
            if li != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = next;
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(SpeError::Numerical("non-finite encoder activation".into()));
        }
        Ok(act)
    }

    /// `p(z | x)` as a diagonal Gaussian.
    pub fn encode(&self, x: &[f32]) -> Result<DiagonalGaussian> {
        let out = self.forward_raw(x)?;
        let d = self.embed_dim();
        let variance = out[d..]
            .iter()
            .map(|&p| softplus(p) + VARIANCE_FLOOR)
            .collect();
        DiagonalGaussian::new(out[..d].to_vec(), variance)
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> Result<ParamVars<'t>> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(Tensor::matrix(l.inputs, l.outputs, l.weight.clone())?)?;
                let b = tape.leaf(Tensor::vector(l.bias.clone()))?;
                Ok((w, b))
            })
            .collect::<Result<Vec<_>>>()?;
        let gamma = tape.leaf(Tensor::scalar(self.gamma))?;
        Ok(ParamVars { layers, gamma })
    }

    /// Differentiable encoding of a batch of inputs.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamVars<'t>,
        inputs: &[&[f32]],
    ) -> Result<EmbeddingNodes<'t>> {
        if inputs.is_empty() {
            return Err(SpeError::Empty("encoder batch"));
        }
        let n = inputs.len();
        let width = self.config.network_input_dim();
        let mut data = Vec::with_capacity(n * width);
        let mut buf = Vec::new();
        for x in inputs {
            self.prepare_input(x, &mut buf)?;
            data.extend_from_slice(&buf);
        }
        let mut act = tape.constant(Tensor::matrix(n, width, data)?)?;
        let last = params.layers.len() - 1;
        for (li, (w, b)) in params.layers.iter().enumerate() {
            let outputs = w.shape()[1];
            act = act.matmul(*w)?.add(b.broadcast(&[n, outputs])?)?;
            if li != last {
                act = act.relu()?;
            }
        }
        let d = self.embed_dim();
        let mean = act.slice(1, 0, d)?;
        let variance = act.slice(1, d, 2 * d)?.softplus()?.offset(VARIANCE_FLOOR)?;
        Ok(EmbeddingNodes { mean, variance })
    }

    /// Writes `encoder.manifest` and `encoder.params.f32` into `dir`.
    /// Parameters are stored as little-endian `f32`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut m = Manifest::new();
        m.set("format_version", MODEL_FORMAT_VERSION)
            .set("kind", self.kind.as_str())
            .set("input_dim", self.config.input_dim)
            .set("hidden_dims", join_list(&self.config.hidden_dims))
            .set("embed_dim", self.config.embed_dim)
            .set("activation", "relu")
            .set(
                "pooling",
                match self.config.pooling {
                    Some(p) => p.to_spec(),
                    None => "none".to_string(),
                },
            )
            .set("gamma", self.gamma as f32)
            .set("seed", self.seed)
            .set("param_count", self.parameter_count() - 1);
        m.write(&dir.join(MANIFEST_FILE))?;
        let params = self.parameters();
        write_f32_blob(
            &dir.join(PARAMS_FILE),
            params[..params.len() - 1].iter().map(|&v| v as f32),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let version: u32 = m.parse_value("format_version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(SpeError::Format(format!(
                "unsupported model format version {version}"
            )));
        }
        let pooling = match m.require("pooling")? {
            "none" => None,
            spec => Some(parse_pooling(spec)?),
        };
        let config = EncoderConfig {
            input_dim: m.parse_value("input_dim")?,
            hidden_dims: m.parse_list("hidden_dims")?,
            embed_dim: m.parse_value("embed_dim")?,
            pooling,
        };
        config.validate()?;
        let kind: ModelKind = m.require("kind")?.parse()?;
        let gamma = m.parse_value::<f32>("gamma")? as f64;
        let seed = m.parse_value("seed")?;
        let count: usize = m.parse_value("param_count")?;
        let blob = read_f32_blob(&dir.join(PARAMS_FILE), count)?;
        let mut model = Self::init(config, kind, 1, 1.0, seed)?;
        let mut params: Vec<f64> = blob.into_iter().map(f64::from).collect();
        params.push(gamma);
        model.set_parameters(&params)?;
        Ok(model)
    }

    /// Copy with every parameter rounded to `f32`, i.e. what [`save`] stores.
    ///
    /// [`save`]: EncoderModel::save
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        let params: Vec<f64> = self.parameters().iter().map(|&v| v as f32 as f64).collect();
        out.set_parameters(&params).expect("same layout");
        out
    }
}

fn parse_pooling(spec: &str) -> Result<Pooling> {
    let bad = || SpeError::Format(format!("bad pooling spec `{spec}`"));
    let parts: Vec<&str> = spec.split('/').collect();
    let [dims, factor, mode] = parts[..] else {
        return Err(bad());
    };
    let dims: Vec<usize> = dims
        .split('x')
        .map(|d| d.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(bad());
    }
    Ok(Pooling {
        height: dims[0],
        width: dims[1],
        channels: dims[2],
        factor: factor.parse().map_err(|_| bad())?,
        mode: mode.parse().map_err(|_| bad())?,
    })
}

/// `support_count * gamma0^(2 / embed_dim)`.
pub fn initial_gamma(support_count: usize, gamma0: f64, embed_dim: usize) -> f64 {
    support_count as f64 * gamma0.powf(2.0 / embed_dim as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_model(seed: u64) -> EncoderModel {
        EncoderModel::init(
            EncoderConfig::mlp(4, vec![6, 5], 2),
            ModelKind::Spe,
            8,
            DEFAULT_GAMMA0,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn gamma_prescription() {
        assert!((initial_gamma(20, 0.01, 2) - 0.2).abs() < 1e-15);
        assert!((initial_gamma(8, 0.01, 4) - 0.8).abs() < 1e-15);
        let m = small_model(1);
        assert!((m.gamma - 0.08).abs() < 1e-15);
    }

    #[test]
    fn sigma_epsilon_values() {
        let mut m = small_model(1);
        m.gamma = 0.0;
        assert!((m.sigma_epsilon_sq() - 2f64.ln()).abs() < 1e-15);
        m.gamma = 0.2;
        assert!((m.sigma_epsilon_sq() - (1.0 + 0.2f64.exp()).ln()).abs() < 1e-15);
        assert!((m.sigma_epsilon_sq() - 0.7981).abs() < 1e-4);
        m.gamma = -50.0;
        assert!(m.sigma_epsilon_sq() > 0.0 && m.sigma_epsilon_sq() < 1e-20);
    }

    #[test]
    fn zero_network_gives_ln2_variance() {
        let mut m = small_model(3);
        let zeros = vec![0.0; m.parameter_count()];
        m.set_parameters(&zeros).unwrap();
        let g = m.encode(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(g.mean(), &[0.0, 0.0]);
        for v in g.variance() {
            assert!((v - 2f64.ln() - VARIANCE_FLOOR).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_deterministic_and_encode_is_pure() {
        assert_eq!(small_model(9), small_model(9));
        assert_ne!(small_model(9).parameters(), small_model(10).parameters());
        let m = small_model(9);
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        assert!(m.encode(&[0.0; 3]).is_err());
    }

    #[test]
    fn init_rejects_bad_config() {
        let bad = EncoderConfig::mlp(4, vec![0], 2);
        assert!(EncoderModel::init(bad, ModelKind::Spe, 8, 0.01, 0).is_err());
        let cfg = EncoderConfig::mlp(4, vec![3], 2);
        assert!(EncoderModel::init(cfg, ModelKind::Spe, 8, 0.0, 0).is_err());
    }

    #[test]
    fn tape_forward_matches_direct_encode() {
        let m = small_model(4);
        let inputs: Vec<Vec<f32>> = vec![vec![0.5, -0.2, 1.0, 0.0], vec![-1.0, 0.3, 0.3, 2.0]];
        let refs: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let tape = Tape::new();
        let params = m.register(&tape).unwrap();
        let emb = m.forward(&tape, &params, &refs).unwrap();
        let (mean, var) = (emb.mean.value(), emb.variance.value());
        for (i, x) in inputs.iter().enumerate() {
            let g = m.encode(x).unwrap();
            for k in 0..2 {
                assert!((mean.data()[i * 2 + k] - g.mean()[k]).abs() < 1e-12);
                assert!((var.data()[i * 2 + k] - g.variance()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let m = small_model(5);
        let x: Vec<f32> = vec![0.4, -0.7, 1.1, 0.2];
        let out_len = 4;
        for coord in 0..out_len {
            let tape = Tape::new();
            let params = m.register(&tape).unwrap();
            let emb = m.forward(&tape, &params, &[&x]).unwrap();
            let both = crate::autodiff::concat(&[emb.mean, emb.variance], 1).unwrap();
            let y = both.slice(1, coord, coord + 1).unwrap().sum(None).unwrap();
            let analytic = params.flat_gradient(&tape.backward(y).unwrap());
            let base = m.parameters();
            let h = 1e-5;
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = base.clone();
                let mut mm = m.clone();
                p[i] += h;
                mm.set_parameters(&p).unwrap();
                let g = mm.encode(&x).unwrap();
                let up = [g.mean(), g.variance()].concat()[coord];
                p[i] -= 2.0 * h;
                mm.set_parameters(&p).unwrap();
                let g = mm.encode(&x).unwrap();
                let down = [g.mean(), g.variance()].concat()[coord];
                let numeric = (up - down) / (2.0 * h);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-4 || (a - numeric).abs() < 1e-9,
                    "param {i}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn variance_floor_holds_for_extreme_parameters() {
        let mut m = small_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: Vec<f64> = (0..m.parameter_count())
            .map(|_| rng.random_range(-20.0..20.0))
            .collect();
        m.set_parameters(&params).unwrap();
        for _ in 0..200 {
            let x: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = m.encode(&x).unwrap();
            assert!(g.variance().iter().all(|&v| v >= VARIANCE_FLOOR));
        }
    }

    #[test]
    fn pooling_reduces_blocks() {
        let p = Pooling {
            height: 2,
            width: 4,
            channels: 1,
            factor: 2,
            mode: PoolMode::Average,
        };
        let mut out = Vec::new();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        p.apply(&x, &mut out);
        assert_eq!(out, vec![3.5, 5.5]);
        let max = Pooling {
            mode: PoolMode::Max,
            ..p
        };
        max.apply(&x, &mut out);
        assert_eq!(out, vec![6.0, 8.0]);
    }

    #[test]
    fn save_load_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EncoderConfig::mlp(16, vec![3], 2);
        cfg.pooling = Some(Pooling {
            height: 4,
            width: 2,
            channels: 2,
            factor: 2,
            mode: PoolMode::Max,
        });
        let mut m = EncoderModel::init(cfg, ModelKind::Pn, 8, 0.01, 77).unwrap();
        m.gamma = 0.123456789;
        m.save(dir.path()).unwrap();
        let loaded = EncoderModel::load(dir.path()).unwrap();
        assert_eq!(loaded, m.rounded_to_f32());
        // Saving the loaded model reproduces the files byte for byte.
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        for f in [MANIFEST_FILE, PARAMS_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        small_model(1).save(dir.path()).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            EncoderModel::load(dir.path()),
            Err(SpeError::Format(_))
        ));
    }
}
