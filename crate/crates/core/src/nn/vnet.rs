//! 3D V-Net: residual encoder/decoder with strided down-sampling, transposed
//! up-sampling and skip concatenation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{layout_for_channels, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, tags};
use crate::volume::{MultiChannelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Prelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VNetConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
    pub activation: Activation,
    pub residual: bool,
    /// Add the low-dose input channel (the last one) to the network output.
    pub predict_residual: bool,
}

impl Default for VNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            levels: 4,
            base_channels: 16,
            convs_per_level: 2,
            activation: Activation::Prelu,
            residual: true,
            predict_residual: true,
        }
    }
}

impl VNetConfig {
    /// Small preset for single-CPU runs on 32³ volumes.
    pub fn desk() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        layout_for_channels(self.in_channels).map_err(|_| {
            Error::invalid(format!("in_channels must be 2 or 4, got {}", self.in_channels))
        })?;
        if self.levels < 2 {
            return Err(Error::invalid(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.base_channels < 4 {
            return Err(Error::invalid(format!("base_channels must be at least 4, got {}", self.base_channels)));
        }
        if self.convs_per_level == 0 {
            return Err(Error::invalid("convs_per_level must be positive"));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this along every axis.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Zero,
    Const(f64),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
    transposed: bool,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    conv: ConvRef,
    slope: Option<usize>,
}

#[derive(Debug, Clone)]
struct Arch {
    input: Unit,
    enc: Vec<Vec<Unit>>,
    down: Vec<Unit>,
    up: Vec<Unit>,
    dec: Vec<Vec<Unit>>,
    head: ConvRef,
}

struct Builder<'a> {
    cfg: &'a VNetConfig,
    specs: Vec<ParamSpec>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, transposed: bool) -> ConvRef {
        let (shape, fan_in) = if transposed {
            (vec![c_in, c_out, k, k, k], c_in * k * k * k / (stride * stride * stride).max(1))
        } else {
            (vec![c_out, c_in, k, k, k], c_in * k * k * k)
        };
        let w = self.param(format!("{name}.weight"), shape, Init::Kaiming { fan_in: fan_in.max(1), gain: 2.0 });
        let b = self.param(format!("{name}.bias"), vec![c_out], Init::Zero);
        let padding = if stride == 1 { k / 2 } else { 0 };
        ConvRef {
            w,
            b,
            stride,
            padding,
            transposed,
        }
    }

    fn unit(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, transposed: bool) -> Unit {
        let conv = self.conv(name, c_in, c_out, k, stride, transposed);
        let slope = match self.cfg.activation {
            Activation::Prelu => Some(self.param(format!("{name}.slope"), vec![c_out], Init::Const(0.25))),
            Activation::Relu => None,
        };
        Unit { conv, slope }
    }

    fn block(&mut self, name: &str, c: usize) -> Vec<Unit> {
        (0..self.cfg.convs_per_level)
            .map(|j| self.unit(&format!("{name}.conv{j}"), c, c, 3, 1, false))
            .collect()
    }
}

fn architecture(cfg: &VNetConfig) -> (Vec<ParamSpec>, Arch) {
    let mut b = Builder { cfg, specs: Vec::new() };
    let c0 = cfg.channels(0);
    let input = b.unit("input", cfg.in_channels, c0, 3, 1, false);
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for level in 0..cfg.levels {
        enc.push(b.block(&format!("enc{level}"), cfg.channels(level)));
        if level + 1 < cfg.levels {
            down.push(b.unit(&format!("down{level}"), cfg.channels(level), cfg.channels(level + 1), 2, 2, false));
        }
    }
    let mut up = Vec::new();
    let mut dec = Vec::new();
    for level in (0..cfg.levels - 1).rev() {
        // the bottom level feeds C channels upward, decoder blocks feed 2C
        let from = if level + 2 == cfg.levels {
            cfg.channels(level + 1)
        } else {
            2 * cfg.channels(level + 1)
        };
        up.push(b.unit(&format!("up{level}"), from, cfg.channels(level), 2, 2, true));
        dec.push(b.block(&format!("dec{level}"), 2 * cfg.channels(level)));
    }
    let head_w = b.param(
        "head.weight".into(),
        vec![1, 2 * c0, 1, 1, 1],
        if cfg.predict_residual {
            Init::Zero
        } else {
            Init::Kaiming {
                fan_in: 2 * c0,
                gain: 1.0,
            }
        },
    );
    let head_b = b.param("head.bias".into(), vec![1], Init::Zero);
    let arch = Arch {
        input,
        enc,
        down,
        up,
        dec,
        head: ConvRef {
            w: head_w,
            b: head_b,
            stride: 1,
            padding: 0,
            transposed: false,
        },
    };
    (b.specs, arch)
}

/// Named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct VNetModel<T> {
    config: VNetConfig,
    params: Vec<Param<T>>,
    arch: Arch,
}

impl<T: Real> PartialEq for VNetModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Real> VNetModel<T> {
    /// Fresh model with seeded initialization.
    pub fn new(config: VNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, arch) = architecture(&config);
        let mut rng = stream_rng(seed, &[tags::INIT]);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Zero => vec![T::zero(); n],
                    Init::Const(v) => vec![T::of(v); n],
                    Init::Kaiming { fan_in, gain } => {
                        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                        (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                    }
                };
                Ok(Param {
                    name: s.name,
                    value: Tensor::new(s.shape, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params, arch })
    }

    /// Assemble a model from named arrays, checking names and shapes.
    pub fn from_params(config: VNetConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, arch) = architecture(&config);
        if named.len() != specs.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} arrays, found {}", specs.len(), named.len()),
            ));
        }
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        let params = specs
            .into_iter()
            .map(|s| {
                let t = by_name
                    .remove(&s.name)
                    .ok_or_else(|| Error::format("parameters", format!("missing array {}", s.name)))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(Error::format(
                        "parameters",
                        format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape),
                    ));
                }
                if t.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::format("parameters", format!("{} holds non-finite values", s.name)));
                }
                Ok(Param { name: s.name, value: t })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params, arch })
    }

    pub fn config(&self) -> &VNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> VNetModel<U> {
        VNetModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            arch: self.arch.clone(),
        }
    }

    /// Zero the output layer so a residual model reproduces its low-dose input.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.param_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, x, y, z] = shape[..] else {
            return Err(Error::shape(format!("network input must be [C, X, Y, Z], got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        for (level, f) in (1..self.config.levels).map(|l| (l, 1usize << l)) {
            if [x, y, z].iter().any(|&d| d % f != 0 || d == 0) {
                return Err(Error::shape(format!(
                    "input dims {:?} are not divisible by {f} at down level {level}",
                    [x, y, z]
                )));
            }
        }
        Ok(())
    }

    /// Add every parameter to `g` as a leaf.
    pub fn leaves(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), requires_grad)).collect()
    }

    fn unit(&self, g: &mut Graph<T>, p: &[Var], u: &Unit, x: Var, residual: Option<Var>) -> Result<Var> {
        let mut h = self.conv(g, p, &u.conv, x)?;
        if let Some(r) = residual {
            h = g.add(h, r)?;
        }
        match u.slope {
            Some(s) => g.prelu(h, p[s]),
            None => Ok(g.relu(h)),
        }
    }

    fn conv(&self, g: &mut Graph<T>, p: &[Var], c: &ConvRef, x: Var) -> Result<Var> {
        if c.transposed {
            g.conv_transpose3d(x, p[c.w], Some(p[c.b]), c.stride, c.padding)
        } else {
            g.conv3d(x, p[c.w], Some(p[c.b]), c.stride, c.padding)
        }
    }

    fn block(&self, g: &mut Graph<T>, p: &[Var], units: &[Unit], x: Var) -> Result<Var> {
        let mut h = x;
        for (j, u) in units.iter().enumerate() {
            let last = j + 1 == units.len();
            let res = (last && self.config.residual).then_some(x);
            h = self.unit(g, p, u, h, res)?;
        }
        Ok(h)
    }

    /// Record the forward pass on `g` and return the `[1, X, Y, Z]` output.
    pub fn build(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        let a = &self.arch;
        let mut h = self.unit(g, params, &a.input, input, None)?;
        let mut skips = Vec::with_capacity(self.config.levels);
        for level in 0..self.config.levels {
            h = self.block(g, params, &a.enc[level], h)?;
            if level + 1 < self.config.levels {
                skips.push(h);
                h = self.unit(g, params, &a.down[level], h, None)?;
            }
        }
        for (i, skip) in skips.into_iter().rev().enumerate() {
            let up = self.unit(g, params, &a.up[i], h, None)?;
            let cat = g.concat_channels(up, skip)?;
            h = self.block(g, params, &a.dec[i], cat)?;
        }
        let mut out = self.conv(g, params, &a.head, h)?;
        if self.config.predict_residual {
            let ld = g.select_channel(input, self.config.in_channels - 1)?;
            out = g.add(out, ld)?;
        }
        Ok(out)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.leaves(&mut g, false);
        let x = g.leaf(input.clone(), false);
        let y = self.build(&mut g, &p, x)?;
        Ok(g.take_value(y))
    }

    /// MSE loss against `target` and the gradient of every parameter.
    pub fn loss_and_grads(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let p = self.leaves(&mut g, true);
        let x = g.leaf(input.clone(), false);
        let y = self.build(&mut g, &p, x)?;
        let t = g.leaf(target.clone(), false);
        let l = g.mse_loss(y, t)?;
        g.backward(l)?;
        let loss = g.value(l).data()[0];
        let grads = p
            .iter()
            .zip(&self.params)
            .map(|(&v, prm)| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); prm.value.len()]))
            .collect();
        Ok((loss, grads))
    }

    pub fn loss(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        let pred = self.forward(input)?;
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!("target shape {:?} != prediction {:?}", target.shape(), pred.shape())));
        }
        let n = T::of(pred.len() as f64);
        Ok(pred.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
    }

    /// Predict a volume on the grid of the low-dose channel.
    pub fn predict_volume(&self, input: &MultiChannelVolume) -> Result<Volume> {
        let t = Tensor::<T>::from_multichannel(input)?;
        let out = self.forward(&t)?;
        out.channel_volume(0, input.low_dose())
    }
}

/// Draw uniform values in `[-scale, scale)`; handy for tests and checks.
pub fn random_tensor<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.gen_range(-scale..scale))).collect()).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn desk_param_count() {
        let m = VNetModel::<f32>::new(VNetConfig::desk(), 0).unwrap();
        let n = m.param_count();
        assert!((150_000..160_000).contains(&n), "{n}");
    }

    #[test]
    fn zero_head_reproduces_low_dose_exactly() {
        let cfg = VNetConfig {
            levels: 2,
            base_channels: 4,
            ..VNetConfig::desk()
        };
        let m = VNetModel::<f64>::new(cfg, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor::<f64, _>(vec![4, 8, 8, 8], 1.0, &mut rng);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 8]);
        assert_eq!(y.data(), &x.data()[3 * 512..]);
    }

    #[test]
    fn desk_output_shape() {
        let m = VNetModel::<f32>::new(VNetConfig::desk(), 0).unwrap();
        let y = m.forward(&Tensor::zeros(vec![4, 32, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[1, 32, 32, 32]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = VNetModel::<f32>::new(VNetConfig::desk(), 0).unwrap();
        let e = m.forward(&Tensor::zeros(vec![4, 10, 16, 16])).unwrap_err();
        assert!(e.to_string().contains("level 2"), "{e}");
        assert!(m.forward(&Tensor::zeros(vec![2, 16, 16, 16])).is_err());
        assert!(VNetConfig {
            in_channels: 3,
            ..VNetConfig::desk()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = VNetConfig {
            predict_residual: false,
            ..VNetConfig::desk()
        };
        let m = VNetModel::<f32>::new(cfg.clone(), 4).unwrap();
        assert_eq!(m, VNetModel::<f32>::new(cfg, 4).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor::<f32, _>(vec![4, 16, 16, 16], 1.0, &mut rng);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn output_matches_input_spatial_shape(
            levels in 2usize..4,
            base in 4usize..7,
            two_channels in any::<bool>(),
            relu in any::<bool>(),
            residual in any::<bool>(),
            mults in prop::array::uniform3(1usize..3),
        ) {
            let cfg = VNetConfig {
                in_channels: if two_channels { 2 } else { 4 },
                levels,
                base_channels: base,
                convs_per_level: 1,
                activation: if relu { Activation::Relu } else { Activation::Prelu },
                residual,
                predict_residual: true,
            };
            let f = cfg.size_multiple();
            let dims = mults.map(|m| m * f);
            let m = VNetModel::<f32>::new(cfg.clone(), 0).unwrap();
            let y = m.forward(&Tensor::zeros(vec![cfg.in_channels, dims[0], dims[1], dims[2]])).unwrap();
            prop_assert_eq!(y.shape(), &[1, dims[0], dims[1], dims[2]]);
        }
    }
}
