//! The localization U-Net and the residual deep-supervised segmentation net.

mod config;
mod gradcheck;
mod plan;

use std::collections::HashMap;
use std::path::Path;

pub use config::{Arch, HeadUpsample, NetworkConfig, INSTANCE_NORM_EPS};
pub use gradcheck::{check_network_gradients, NetworkGradReport};
pub use plan::Shape5;

use crate::error::{Error, Result, ResultExt};
use crate::tensor::{load_arrays, save_arrays, Element, Graph, NdArray, Tensor};
use plan::{Builder, GraphEval, Program, ShapeEval};

/// Ordered, uniquely named parameter arrays.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<NdArray<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    fn new(names: Vec<String>, values: Vec<NdArray<T>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {n:?}")));
            }
        }
        Ok(Self { names, values, index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NdArray<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }
}

/// Spatial bookkeeping of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeReport {
    pub bottleneck: Shape5,
    pub outputs: Vec<Shape5>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Element = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    program: Program,
}

pub fn build_localization_net(cfg: &NetworkConfig, seed: u64) -> Result<Network<f32>> {
    if cfg.arch != Arch::PlainUnet {
        return Err(Error::Config("localization net needs arch = plain_unet".into()));
    }
    Network::build(cfg, seed)
}

pub fn build_segmentation_net(cfg: &NetworkConfig, seed: u64) -> Result<Network<f32>> {
    if cfg.arch != Arch::ResDsUnet {
        return Err(Error::Config("segmentation net needs arch = res_ds_unet".into()));
    }
    Network::build(cfg, seed)
}

impl<T: Element> Network<T> {
    /// Builds the architecture named by `cfg.arch` with parameters drawn from `seed`.
    ///
    /// Initial values are drawn in `f64` and rounded, so `f32` and `f64` networks
    /// built from one seed agree up to rounding.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(seed);
        let program = plan::build_program(cfg, &mut b);
        let values = b.values.iter().map(NdArray::cast).collect();
        let net = Self {
            config: cfg.clone(),
            params: ParamStore::new(b.names, values)?,
            program,
        };
        let mut batch1 = [1, cfg.in_channels, 0, 0, 0];
        batch1[2..].copy_from_slice(&cfg.patch_size);
        net.shape_walk(batch1)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                values: self.params.values.iter().map(NdArray::cast).collect(),
                index: self.params.index.clone(),
            },
            program: self.program.clone(),
        }
    }

    /// Adds every parameter to `g`, in store order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Tensor> {
        self.params
            .values
            .iter()
            .map(|v| g.leaf(v.clone(), trainable))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if shape.len() != 5 || shape[0] == 0 || shape[1] != cfg.in_channels || shape[2..] != cfg.patch_size {
            return Err(Error::Shape(format!(
                "network input {shape:?}, expected (n, {}, {:?})",
                cfg.in_channels, cfg.patch_size
            )));
        }
        Ok(())
    }

    /// Logits for every head, finest first, using parameter handles from [`Network::bind`].
    pub fn forward_bound(&self, g: &mut Graph<T>, params: &[Tensor], x: Tensor) -> Result<Vec<Tensor>> {
        if params.len() != self.params.len() {
            return Err(Error::Misuse(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        self.check_input(g.shape(x))?;
        let mut e = GraphEval { g, params };
        Ok(plan::run(&mut e, &self.program, x)?.outputs)
    }

    /// Forward pass with frozen parameters.
    pub fn forward(&self, g: &mut Graph<T>, x: Tensor) -> Result<Vec<Tensor>> {
        let params = self.bind(g, false);
        self.forward_bound(g, &params, x)
    }

    /// Forward pass on a plain array, returning head logits.
    pub fn predict(&self, x: &NdArray<T>) -> Result<Vec<NdArray<T>>> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let outs = self.forward(&mut g, input)?;
        Ok(outs.into_iter().map(|t| g.value(t).clone()).collect())
    }

    /// Propagates shapes through the program without touching activations.
    pub fn shape_walk(&self, input: Shape5) -> Result<ShapeReport> {
        let param_shapes: Vec<Vec<usize>> = self.params.values.iter().map(|v| v.shape().to_vec()).collect();
        let mut e = ShapeEval {
            param_shapes: &param_shapes,
        };
        let r = plan::run(&mut e, &self.program, input)?;
        Ok(ShapeReport {
            bottleneck: r.bottleneck,
            outputs: r.outputs,
        })
    }

    /// Zeroes the last conv of every residual branch, leaving only shortcuts.
    pub fn zero_residual_branches(&mut self) {
        if let Program::Residual(p) = &self.program {
            for blk in p.encoder.iter().chain(&p.decoder) {
                for idx in std::iter::once(blk.conv2.w).chain(blk.conv2.b) {
                    self.params.values[idx].data_mut().fill(T::zero());
                }
            }
        }
    }

    pub fn to_named_arrays(&self) -> Vec<(String, NdArray<f32>)> {
        self.params.iter().map(|(n, v)| (n.to_string(), v.cast())).collect()
    }

    /// Replaces parameters from a named list that must match this network exactly.
    pub fn load_named_arrays(&mut self, arrays: Vec<(String, NdArray<f32>)>) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, network has {} parameters",
                arrays.len(),
                self.params.len()
            )));
        }
        let mut fresh = Vec::with_capacity(arrays.len());
        for ((name, a), (own, cur)) in arrays.iter().zip(self.params.iter()) {
            if name != own || a.shape() != cur.shape() {
                return Err(Error::Config(format!(
                    "checkpoint array {name:?} {:?} does not match parameter {own:?} {:?}",
                    a.shape(),
                    cur.shape()
                )));
            }
            fresh.push(a.cast());
        }
        self.params.values = fresh;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_arrays(path, &self.to_named_arrays())
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let arrays = load_arrays(path)?;
        self.load_named_arrays(arrays)
            .context(|| format!("loading {}", path.display()))
    }
}
