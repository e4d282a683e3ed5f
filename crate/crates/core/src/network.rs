//! Executable networks: a [`NetworkSpec`] with its parameters resolved.
//!
//! Layer semantics are written once, in [`Network::forward`], against the
//! [`Executor`] trait. Executors decide what a value is (a whole tensor or a
//! grid of patches) and how a convolution gets its padding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::netspec::{ConvPadding, LayerSpec, NetworkSpec};
use crate::nn::{
    activation, bn_inference, pixel_shuffle, upsample_nearest2x, Activation, BnParams, ConvKernel, ResBlock,
};
use crate::rng::seeded;
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: ConvKernel,
    pub stride: usize,
    pub padding: ConvPadding,
}

impl Conv {
    pub fn halo(&self) -> usize {
        self.kernel.halo()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    BatchNorm(BnParams),
    Act(Activation),
    Upsample2x,
    PixelShuffle(usize),
    ResBlock(ResBlock),
}

/// How values flow through a network.
pub trait Executor {
    type Value: Clone;

    /// Applies an operation that only needs the pixels of one patch
    /// (per-pixel maps, nearest upsampling, pixel shuffle).
    fn local(&mut self, v: Self::Value, op: &(dyn Fn(&Tensor) -> Result<Tensor> + Sync)) -> Result<Self::Value>;

    /// Pads (as the executor sees fit) and convolves.
    fn conv(&mut self, v: &Self::Value, kernel: &ConvKernel, stride: usize, padding: ConvPadding)
        -> Result<Self::Value>;

    fn add(&mut self, a: Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// A network ready to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Parameter names and shapes, in file order, for `spec`.
///
/// Per layer `i`: convs store `layers.i.weight (out, in, k, k)` and
/// `layers.i.bias (out)`; batch norms store `gamma`, `beta`,
/// `running_mean`, `running_var`; residual blocks nest `bn1`, `conv1`,
/// `bn2`, `conv2` and, when channels change, `skip`.
pub fn param_layout(spec: &NetworkSpec) -> Vec<(String, Vec<usize>)> {
    fn bn(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize) {
        for field in ["gamma", "beta", "running_mean", "running_var"] {
            out.push((format!("{prefix}.{field}"), vec![c]));
        }
    }
    fn conv(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, o: usize, i: usize, k: usize) {
        out.push((format!("{prefix}.weight"), vec![o, i, k, k]));
        out.push((format!("{prefix}.bias"), vec![o]));
    }
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = format!("layers.{i}");
        match *layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                conv(&mut out, &p, out_channels, in_channels, kernel)
            }
            LayerSpec::BatchNorm { channels, .. } => bn(&mut out, &p, channels),
            LayerSpec::ResBlock { in_channels, out_channels, .. } => {
                bn(&mut out, &format!("{p}.bn1"), in_channels);
                conv(&mut out, &format!("{p}.conv1"), out_channels, in_channels, 3);
                bn(&mut out, &format!("{p}.bn2"), out_channels);
                conv(&mut out, &format!("{p}.conv2"), out_channels, out_channels, 3);
                if in_channels != out_channels {
                    conv(&mut out, &format!("{p}.skip"), out_channels, in_channels, 1);
                }
            }
            LayerSpec::Act { .. } | LayerSpec::Upsample2x | LayerSpec::PixelShuffle { .. } => {}
        }
    }
    out
}

impl Network {
    /// Resolves `spec` against `store`. The store must hold exactly the
    /// parameters of [`param_layout`], in that order.
    pub fn from_store(spec: &NetworkSpec, store: &WeightStore) -> Result<Self> {
        spec.validate()?;
        let layout = param_layout(spec);
        let records = store.records();
        if records.len() != layout.len() {
            return Err(Error::Format(format!(
                "network needs {} parameters, store has {}",
                layout.len(),
                records.len()
            )));
        }
        for (rec, (name, shape)) in records.iter().zip(&layout) {
            if &rec.name != name || &rec.shape != shape {
                return Err(Error::Format(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    rec.name, rec.shape
                )));
            }
        }
        let mut values = records.iter().map(|r| store.values(r));
        Network::assemble(spec, &mut || values.next().expect("layout checked").to_vec())
    }

    fn assemble(spec: &NetworkSpec, next: &mut dyn FnMut() -> Vec<f32>) -> Result<Self> {
        fn kernel(next: &mut dyn FnMut() -> Vec<f32>, o: usize, i: usize, k: usize) -> Result<ConvKernel> {
            let w = Tensor::from_vec(Shape::new(o, i, k, k), next())?;
            ConvKernel::new(w, next())
        }
        fn bn(next: &mut dyn FnMut() -> Vec<f32>, eps: f32) -> BnParams {
            BnParams { gamma: next(), beta: next(), running_mean: next(), running_var: next(), eps }
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            layers.push(match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel: k, stride, padding } => Layer::Conv(Conv {
                    kernel: kernel(next, out_channels, in_channels, k)?,
                    stride,
                    padding,
                }),
                LayerSpec::BatchNorm { eps, .. } => {
                    let p = bn(next, eps);
                    p.validate()?;
                    Layer::BatchNorm(p)
                }
                LayerSpec::Act { act } => Layer::Act(act),
                LayerSpec::Upsample2x => Layer::Upsample2x,
                LayerSpec::PixelShuffle { factor } => Layer::PixelShuffle(factor),
                LayerSpec::ResBlock { in_channels, out_channels, act, eps } => {
                    let bn1 = bn(next, eps);
                    let conv1 = kernel(next, out_channels, in_channels, 3)?;
                    let bn2 = bn(next, eps);
                    let conv2 = kernel(next, out_channels, out_channels, 3)?;
                    let skip = if in_channels != out_channels {
                        Some(kernel(next, out_channels, in_channels, 1)?)
                    } else {
                        None
                    };
                    let block = ResBlock { bn1, conv1, bn2, conv2, skip, act };
                    block.validate()?;
                    bn_check(&block)?;
                    Layer::ResBlock(block)
                }
            });
        }
        Ok(Network { spec: spec.clone(), layers })
    }

    /// Random parameters, deterministic in `seed`.
    ///
    /// Conv weights are normal with std `1/sqrt(fan_in)` (halved on the
    /// second conv of each residual block so the residual sum stays
    /// bounded), biases normal with std 0.05, and batch-norm statistics
    /// mildly perturbed around the identity.
    pub fn random(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = param_layout(spec);
        let mut store = WeightStore::new();
        for (idx, (name, shape)) in layout.iter().enumerate() {
            let mut rng = seeded(seed, idx as u64);
            let count: usize = shape.iter().product();
            let field = name.rsplit('.').next().unwrap_or_default();
            let mut normal = |std: f32| -> Vec<f32> {
                (0..count).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
            };
            let values = match field {
                "weight" => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let gain = if name.contains(".conv2.") { 0.5 } else { 1.0 };
                    normal(gain / fan_in.sqrt())
                }
                "bias" => normal(0.05),
                "beta" | "running_mean" => normal(0.1),
                _ => {
                    let mut rng = seeded(seed, idx as u64);
                    (0..count).map(|_| rng.random_range(0.8f32..1.2)).collect()
                }
            };
            store.push(name.clone(), shape.clone(), &values)?;
        }
        Network::from_store(spec, &store)
    }

    /// All conv weights and biases zero, batch norms the identity.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = WeightStore::new();
        for (name, shape) in param_layout(spec) {
            let count: usize = shape.iter().product();
            let fill = if name.ends_with(".gamma") || name.ends_with(".running_var") { 1.0 } else { 0.0 };
            store.push(name, shape, &vec![fill; count])?;
        }
        Network::from_store(spec, &store)
    }

    /// Builds a network directly from layers; `spec` must describe them.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        let net = Network { spec, layers };
        let store = net.to_store()?;
        Network::from_store(&net.spec, &store)
    }

    pub fn to_store(&self) -> Result<WeightStore> {
        let layout = param_layout(&self.spec);
        let mut values: Vec<Vec<f32>> = Vec::with_capacity(layout.len());
        fn push_bn(v: &mut Vec<Vec<f32>>, p: &BnParams) {
            v.extend([p.gamma.clone(), p.beta.clone(), p.running_mean.clone(), p.running_var.clone()]);
        }
        fn push_conv(v: &mut Vec<Vec<f32>>, k: &ConvKernel) {
            v.extend([k.weights().data().to_vec(), k.bias().to_vec()]);
        }
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => push_conv(&mut values, &c.kernel),
                Layer::BatchNorm(p) => push_bn(&mut values, p),
                Layer::ResBlock(b) => {
                    push_bn(&mut values, &b.bn1);
                    push_conv(&mut values, &b.conv1);
                    push_bn(&mut values, &b.bn2);
                    push_conv(&mut values, &b.conv2);
                    if let Some(k) = &b.skip {
                        push_conv(&mut values, k);
                    }
                }
                Layer::Act(_) | Layer::Upsample2x | Layer::PixelShuffle(_) => {}
            }
        }
        if values.len() != layout.len() {
            return Err(Error::spec("layers do not match the network spec"));
        }
        let mut store = WeightStore::new();
        for ((name, shape), v) in layout.into_iter().zip(values) {
            store.push(name, shape, &v)?;
        }
        Ok(store)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Replaces the spec while keeping the parameters (used when only
    /// padding annotations change).
    pub(crate) fn with_spec(&self, spec: NetworkSpec) -> Result<Self> {
        let store = self.to_store()?;
        Network::from_store(&spec, &store)
    }

    pub fn forward<E: Executor>(&self, e: &mut E, input: E::Value) -> Result<E::Value> {
        let mut v = input;
        for layer in &self.layers {
            v = match layer {
                Layer::Conv(c) => e.conv(&v, &c.kernel, c.stride, c.padding)?,
                Layer::BatchNorm(p) => e.local(v, &|t| bn_inference(t, p))?,
                Layer::Act(a) => {
                    let a = *a;
                    e.local(v, &move |t| Ok(activation(t, a)))?
                }
                Layer::Upsample2x => e.local(v, &|t| Ok(upsample_nearest2x(t)))?,
                Layer::PixelShuffle(f) => {
                    let f = *f;
                    e.local(v, &move |t| pixel_shuffle(t, f))?
                }
                Layer::ResBlock(b) => residual_forward(e, b, v)?,
            };
        }
        Ok(v)
    }
}

fn bn_check(b: &ResBlock) -> Result<()> {
    b.bn1.validate()?;
    b.bn2.validate()
}

/// The residual block of [`crate::nn::residual_block`], expressed against
/// an [`Executor`].
pub fn residual_forward<E: Executor>(e: &mut E, b: &ResBlock, x: E::Value) -> Result<E::Value> {
    let skip = match &b.skip {
        Some(k) => e.conv(&x, k, 1, ConvPadding::External)?,
        None => x.clone(),
    };
    let act = b.act;
    let h = e.local(x, &|t| Ok(activation(&bn_inference(t, &b.bn1)?, act)))?;
    let h = e.conv(&h, &b.conv1, 1, ConvPadding::External)?;
    let h = e.local(h, &|t| Ok(activation(&bn_inference(t, &b.bn2)?, act)))?;
    let h = e.conv(&h, &b.conv2, 1, ConvPadding::External)?;
    e.add(skip, &h)
}
