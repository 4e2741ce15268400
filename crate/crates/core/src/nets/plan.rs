//! Layer records, parameter registration and the two forward programs.
//!
//! Programs are written once against [`Eval`]; the graph evaluator runs them on
//! real tensors and the shape evaluator walks them symbolically, so full-size
//! configurations can be checked without allocating activations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arch, HeadUpsample, NetworkConfig, INSTANCE_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_dims, Element, Graph, NdArray, Tensor, Triple};

pub type Shape5 = [usize; 5];

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub w: usize,
    pub b: Option<usize>,
    pub stride: Triple,
}

#[derive(Debug, Clone)]
pub(crate) struct NormLayer {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct UpLayer {
    pub w: usize,
    pub stride: Triple,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvUnit {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

/// Pre-activation residual unit: `(norm, act, conv) x 2 + shortcut`.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub norm1: NormLayer,
    pub conv1: ConvLayer,
    pub norm2: NormLayer,
    pub conv2: ConvLayer,
    pub projection: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub conv: ConvLayer,
    pub factor: Triple,
    pub learned_up: Option<UpLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct PlainProgram {
    pub encoder: Vec<[ConvUnit; 2]>,
    pub pools: Vec<Triple>,
    pub ups: Vec<UpLayer>,
    pub decoder: Vec<[ConvUnit; 2]>,
    pub head: ConvLayer,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ResProgram {
    pub stem: ConvLayer,
    pub encoder: Vec<ResBlock>,
    pub downs: Vec<ConvLayer>,
    pub ups: Vec<UpLayer>,
    pub decoder: Vec<ResBlock>,
    pub heads: Vec<Head>,
}

#[derive(Debug, Clone)]
pub(crate) enum Program {
    Plain(PlainProgram),
    Residual(ResProgram),
}

/// Registers named parameters in order and draws their initial values.
pub(crate) struct Builder {
    rng: ChaCha8Rng,
    pub names: Vec<String>,
    pub values: Vec<NdArray<f64>>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: NdArray<f64>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: Triple, stride: Triple) -> ConvLayer {
        let fan_in = cin * kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f64).sqrt();
        let w = NdArray::randn(vec![cout, cin, kernel[0], kernel[1], kernel[2]], std, &mut self.rng);
        let w = self.push(format!("{name}.w"), w);
        let b = self.push(format!("{name}.b"), NdArray::zeros(vec![cout]));
        ConvLayer { w, b: Some(b), stride }
    }

    pub fn norm(&mut self, name: &str, ch: usize) -> NormLayer {
        let gamma = self.push(format!("{name}.gamma"), NdArray::ones(vec![ch]));
        let beta = self.push(format!("{name}.beta"), NdArray::zeros(vec![ch]));
        NormLayer { gamma, beta }
    }

    /// Transposed conv with kernel equal to stride; fan-in counts input channels only.
    pub fn up(&mut self, name: &str, cin: usize, cout: usize, stride: Triple) -> UpLayer {
        let std = (2.0 / cin as f64).sqrt();
        let w = NdArray::randn(vec![cin, cout, stride[0], stride[1], stride[2]], std, &mut self.rng);
        UpLayer {
            w: self.push(format!("{name}.w"), w),
            stride,
        }
    }

    pub fn unit(&mut self, name: &str, cin: usize, cout: usize) -> ConvUnit {
        ConvUnit {
            conv: self.conv(&format!("{name}.conv"), cin, cout, [3; 3], [1; 3]),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }

    pub fn res_block(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, [3; 3], [1; 3]),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, [3; 3], [1; 3]),
            projection: (cin != cout).then(|| self.conv(&format!("{name}.proj"), cin, cout, [1; 3], [1; 3])),
        }
    }
}

fn half(f: usize) -> usize {
    (f / 2).max(1)
}

pub(crate) fn build_plain(cfg: &NetworkConfig, b: &mut Builder) -> PlainProgram {
    let levels = cfg.levels();
    let mut encoder = Vec::with_capacity(levels);
    let mut cin = cfg.in_channels;
    for l in 0..levels {
        let f = cfg.filters(l);
        encoder.push([b.unit(&format!("enc{l}.0"), cin, f), b.unit(&format!("enc{l}.1"), f, f)]);
        cin = f;
    }
    let pools = (0..levels - 1).map(|l| cfg.pool_kernel(l)).collect();
    let mut ups = Vec::new();
    let mut decoder = Vec::new();
    for l in 0..levels - 1 {
        let f = cfg.filters(l);
        ups.push(b.up(&format!("up{l}"), cfg.filters(l + 1), f, cfg.pool_kernel(l)));
        decoder.push([b.unit(&format!("dec{l}.0"), 2 * f, f), b.unit(&format!("dec{l}.1"), f, f)]);
    }
    let head = b.conv("head", cfg.filters(0), cfg.out_classes, [1; 3], [1; 3]);
    PlainProgram {
        encoder,
        pools,
        ups,
        decoder,
        head,
        slope: cfg.negative_slope,
    }
}

pub(crate) fn build_residual(cfg: &NetworkConfig, b: &mut Builder) -> ResProgram {
    let levels = cfg.levels();
    let stem = b.conv("stem", cfg.in_channels, cfg.filters(0), [1, 3, 3], [1; 3]);
    let mut encoder = Vec::with_capacity(levels);
    let mut downs = Vec::new();
    for l in 0..levels {
        let f = cfg.filters(l);
        if l > 0 {
            let stride = cfg.pool_kernel(l - 1);
            let kernel = stride.map(|s| if s == 2 { 3 } else { 1 });
            downs.push(b.conv(&format!("down{l}"), cfg.filters(l - 1), f, kernel, stride));
        }
        encoder.push(b.res_block(&format!("enc{l}"), f, f));
    }
    let mut ups = Vec::new();
    let mut decoder = Vec::new();
    let mut heads = Vec::new();
    for l in 0..levels - 1 {
        let f = cfg.filters(l);
        let below = if l + 2 == levels { cfg.filters(l + 1) } else { half(cfg.filters(l + 1)) };
        ups.push(b.up(&format!("up{l}"), below, f, cfg.pool_kernel(l)));
        decoder.push(b.res_block(&format!("dec{l}"), f, half(f)));
    }
    for l in 0..cfg.ds_levels {
        let factor = cfg.scale_at(l);
        let conv = b.conv(&format!("ds{l}.conv"), half(cfg.filters(l)), cfg.out_classes, [1; 3], [1; 3]);
        let learned_up = (cfg.head_upsample == HeadUpsample::Transposed && factor != [1; 3])
            .then(|| b.up(&format!("ds{l}.up"), cfg.out_classes, cfg.out_classes, factor));
        heads.push(Head { conv, factor, learned_up });
    }
    ResProgram {
        stem,
        encoder,
        downs,
        ups,
        decoder,
        heads,
    }
}

pub(crate) fn build_program(cfg: &NetworkConfig, b: &mut Builder) -> Program {
    match cfg.arch {
        Arch::PlainUnet => Program::Plain(build_plain(cfg, b)),
        Arch::ResDsUnet => Program::Residual(build_residual(cfg, b)),
    }
}

/// Operator set the programs are written against.
pub(crate) trait Eval {
    type V: Copy;
    fn conv(&mut self, x: Self::V, layer: &ConvLayer) -> Result<Self::V>;
    fn conv_t(&mut self, x: Self::V, layer: &UpLayer) -> Result<Self::V>;
    fn pool(&mut self, x: Self::V, kernel: Triple) -> Result<Self::V>;
    fn norm(&mut self, x: Self::V, layer: &NormLayer) -> Result<Self::V>;
    fn act(&mut self, x: Self::V, slope: f64) -> Result<Self::V>;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn upsample(&mut self, x: Self::V, factor: Triple) -> Result<Self::V>;
}

pub(crate) struct GraphEval<'g, T: Element> {
    pub g: &'g mut Graph<T>,
    pub params: &'g [Tensor],
}

impl<T: Element> Eval for GraphEval<'_, T> {
    type V = Tensor;

    fn conv(&mut self, x: Tensor, l: &ConvLayer) -> Result<Tensor> {
        self.g.conv3d(x, self.params[l.w], l.b.map(|b| self.params[b]), l.stride)
    }
    fn conv_t(&mut self, x: Tensor, l: &UpLayer) -> Result<Tensor> {
        self.g.conv_transpose3d(x, self.params[l.w], l.stride)
    }
    fn pool(&mut self, x: Tensor, kernel: Triple) -> Result<Tensor> {
        self.g.max_pool3d(x, kernel)
    }
    fn norm(&mut self, x: Tensor, l: &NormLayer) -> Result<Tensor> {
        self.g.instance_norm(x, self.params[l.gamma], self.params[l.beta], INSTANCE_NORM_EPS)
    }
    fn act(&mut self, x: Tensor, slope: f64) -> Result<Tensor> {
        self.g.leaky_relu(x, slope)
    }
    fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.g.add(a, b)
    }
    fn concat(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.g.concat_channels(&[a, b])
    }
    fn upsample(&mut self, x: Tensor, factor: Triple) -> Result<Tensor> {
        self.g.upsample_nearest(x, factor)
    }
}

/// Symbolic evaluation on `(n, c, z, y, x)` shapes.
pub(crate) struct ShapeEval<'p> {
    pub param_shapes: &'p [Vec<usize>],
}

fn spatial(s: Shape5) -> Triple {
    [s[2], s[3], s[4]]
}

fn shape5(n: usize, c: usize, d: Triple) -> Shape5 {
    [n, c, d[0], d[1], d[2]]
}

impl ShapeEval<'_> {
    fn channels_match(&self, op: &str, x: Shape5, expected: usize) -> Result<()> {
        if x[1] != expected {
            return Err(Error::Shape(format!("{op}: input has {} channels, layer expects {expected}", x[1])));
        }
        Ok(())
    }
}

impl Eval for ShapeEval<'_> {
    type V = Shape5;

    fn conv(&mut self, x: Shape5, l: &ConvLayer) -> Result<Shape5> {
        let w = &self.param_shapes[l.w];
        self.channels_match("conv3d", x, w[1])?;
        Ok(shape5(x[0], w[0], conv_out_dims(spatial(x), l.stride)))
    }
    fn conv_t(&mut self, x: Shape5, l: &UpLayer) -> Result<Shape5> {
        let w = &self.param_shapes[l.w];
        self.channels_match("conv_transpose3d", x, w[0])?;
        let d = spatial(x);
        Ok(shape5(x[0], w[1], std::array::from_fn(|a| d[a] * l.stride[a])))
    }
    fn pool(&mut self, x: Shape5, k: Triple) -> Result<Shape5> {
        let d = spatial(x);
        if (0..3).any(|a| !d[a].is_multiple_of(k[a])) {
            return Err(Error::Shape(format!("max_pool3d: spatial {d:?} not divisible by {k:?}")));
        }
        Ok(shape5(x[0], x[1], std::array::from_fn(|a| d[a] / k[a])))
    }
    fn norm(&mut self, x: Shape5, l: &NormLayer) -> Result<Shape5> {
        self.channels_match("instance_norm", x, self.param_shapes[l.gamma][0])?;
        Ok(x)
    }
    fn act(&mut self, x: Shape5, _slope: f64) -> Result<Shape5> {
        Ok(x)
    }
    fn add(&mut self, a: Shape5, b: Shape5) -> Result<Shape5> {
        if a != b {
            return Err(Error::Shape(format!("add: {a:?} vs {b:?}")));
        }
        Ok(a)
    }
    fn concat(&mut self, a: Shape5, b: Shape5) -> Result<Shape5> {
        if a[0] != b[0] || spatial(a) != spatial(b) {
            return Err(Error::Shape(format!("concat: {a:?} vs {b:?}")));
        }
        Ok(shape5(a[0], a[1] + b[1], spatial(a)))
    }
    fn upsample(&mut self, x: Shape5, f: Triple) -> Result<Shape5> {
        let d = spatial(x);
        Ok(shape5(x[0], x[1], std::array::from_fn(|a| d[a] * f[a])))
    }
}

/// Outputs (finest first) plus the bottleneck activation.
pub(crate) struct Evaluated<V> {
    pub outputs: Vec<V>,
    pub bottleneck: V,
}

fn conv_unit<E: Eval>(e: &mut E, x: E::V, u: &ConvUnit, slope: f64) -> Result<E::V> {
    let h = e.conv(x, &u.conv)?;
    let h = e.norm(h, &u.norm)?;
    e.act(h, slope)
}

pub(crate) fn res_block<E: Eval>(e: &mut E, x: E::V, blk: &ResBlock) -> Result<E::V> {
    let h = e.norm(x, &blk.norm1)?;
    let h = e.act(h, 0.0)?;
    let h = e.conv(h, &blk.conv1)?;
    let h = e.norm(h, &blk.norm2)?;
    let h = e.act(h, 0.0)?;
    let h = e.conv(h, &blk.conv2)?;
    let shortcut = block_shortcut(e, x, blk)?;
    e.add(h, shortcut)
}

pub(crate) fn block_shortcut<E: Eval>(e: &mut E, x: E::V, blk: &ResBlock) -> Result<E::V> {
    match &blk.projection {
        Some(p) => e.conv(x, p),
        None => Ok(x),
    }
}

pub(crate) fn run_plain<E: Eval>(e: &mut E, p: &PlainProgram, input: E::V) -> Result<Evaluated<E::V>> {
    let mut x = input;
    let mut skips = Vec::with_capacity(p.encoder.len());
    for (l, units) in p.encoder.iter().enumerate() {
        if l > 0 {
            x = e.pool(x, p.pools[l - 1])?;
        }
        x = conv_unit(e, x, &units[0], p.slope)?;
        x = conv_unit(e, x, &units[1], p.slope)?;
        skips.push(x);
    }
    let bottleneck = x;
    for l in (0..p.decoder.len()).rev() {
        let up = e.conv_t(x, &p.ups[l])?;
        x = e.concat(skips[l], up)?;
        x = conv_unit(e, x, &p.decoder[l][0], p.slope)?;
        x = conv_unit(e, x, &p.decoder[l][1], p.slope)?;
    }
    let logits = e.conv(x, &p.head)?;
    Ok(Evaluated {
        outputs: vec![logits],
        bottleneck,
    })
}

pub(crate) fn run_residual<E: Eval>(e: &mut E, p: &ResProgram, input: E::V) -> Result<Evaluated<E::V>> {
    let mut x = e.conv(input, &p.stem)?;
    let mut skips = Vec::with_capacity(p.encoder.len());
    for (l, blk) in p.encoder.iter().enumerate() {
        if l > 0 {
            x = e.conv(x, &p.downs[l - 1])?;
        }
        x = res_block(e, x, blk)?;
        skips.push(x);
    }
    let bottleneck = x;
    let mut outputs: Vec<Option<E::V>> = vec![None; p.heads.len()];
    for l in (0..p.decoder.len()).rev() {
        let up = e.conv_t(x, &p.ups[l])?;
        let summed = e.add(up, skips[l])?;
        x = res_block(e, summed, &p.decoder[l])?;
        if let Some(head) = p.heads.get(l) {
            let logits = e.conv(x, &head.conv)?;
            outputs[l] = Some(match &head.learned_up {
                Some(up) => e.conv_t(logits, up)?,
                None if head.factor == [1; 3] => logits,
                None => e.upsample(logits, head.factor)?,
            });
        }
    }
    Ok(Evaluated {
        outputs: outputs.into_iter().map(|o| o.expect("every head level is visited")).collect(),
        bottleneck,
    })
}

pub(crate) fn run<E: Eval>(e: &mut E, program: &Program, input: E::V) -> Result<Evaluated<E::V>> {
    match program {
        Program::Plain(p) => run_plain(e, p, input),
        Program::Residual(p) => run_residual(e, p, input),
    }
}

/// Graph evaluation that also records which branch every non-smooth op took:
/// the sign of each activation input and the argmax of each pooling window.
pub(crate) struct PatternEval<'g, T: Element> {
    pub inner: GraphEval<'g, T>,
    pub pattern: Vec<u32>,
}

impl<T: Element> Eval for PatternEval<'_, T> {
    type V = Tensor;

    fn conv(&mut self, x: Tensor, l: &ConvLayer) -> Result<Tensor> {
        self.inner.conv(x, l)
    }
    fn conv_t(&mut self, x: Tensor, l: &UpLayer) -> Result<Tensor> {
        self.inner.conv_t(x, l)
    }
    fn pool(&mut self, x: Tensor, kernel: Triple) -> Result<Tensor> {
        let (_, argmax) = crate::tensor::raw::max_pool3d_forward(self.inner.g.value(x), kernel)?;
        self.pattern.extend(argmax.into_iter().map(|i| i as u32));
        self.inner.pool(x, kernel)
    }
    fn norm(&mut self, x: Tensor, l: &NormLayer) -> Result<Tensor> {
        self.inner.norm(x, l)
    }
    fn act(&mut self, x: Tensor, slope: f64) -> Result<Tensor> {
        let values = self.inner.g.value(x).data();
        self.pattern.extend(values.iter().map(|&v| u32::from(v >= T::zero())));
        self.inner.act(x, slope)
    }
    fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.inner.add(a, b)
    }
    fn concat(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.inner.concat(a, b)
    }
    fn upsample(&mut self, x: Tensor, factor: Triple) -> Result<Tensor> {
        self.inner.upsample(x, factor)
    }
}

impl Program {
    /// Biases of convs whose output goes straight into instance norm. Their gradient
    /// is identically zero because normalization removes any per-channel offset.
    pub fn norm_fed_biases(&self) -> Vec<usize> {
        match self {
            Program::Plain(p) => p
                .encoder
                .iter()
                .chain(&p.decoder)
                .flatten()
                .filter_map(|u| u.conv.b)
                .collect(),
            Program::Residual(p) => p.encoder.iter().chain(&p.decoder).filter_map(|b| b.conv1.b).collect(),
        }
    }
}
