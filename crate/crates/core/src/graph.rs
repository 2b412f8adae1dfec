//! Layer graph description and forward execution.
//!
//! A [`GraphSpec`] is the plain description of a network (what the graph text
//! file encodes). [`NetworkGraph`] is a validated spec with every weight
//! reference resolved against a weight container, ready to run.
//!
//! Window geometry for convolution and pooling: output position `(i, j)` reads
//! the input window anchored at `(i * sy - py, j * sx - px)` of size
//! `(kh, kw)`. Positions outside the input are zero for convolution and are
//! skipped for pooling.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model_io::WeightContainer;
use crate::tensor::Tensor;

/// Name under which layers refer to the preprocessed image.
pub const GRAPH_INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    AvgPool,
    /// Elementwise residual sum of two inputs.
    Add,
    /// Identity marker left where a batchnorm was folded into the preceding conv.
    BatchNormFolded,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Add => "add",
            LayerKind::BatchNormFolded => "bn-folded",
        }
    }

    pub fn has_window(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool)
    }

    fn arity(self) -> usize {
        if self == LayerKind::Add {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "avgpool" => LayerKind::AvgPool,
            "add" => LayerKind::Add,
            "bn-folded" => LayerKind::BatchNormFolded,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        })
    }
}

/// Kernel, stride and padding, each as `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Window {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Window {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent for an input extent, or `None` when the kernel does not fit.
    pub fn output_extent(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let ph = height + 2 * self.padding.0;
        let pw = width + 2 * self.padding.1;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return None;
        }
        Some((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }

    /// Top-left input coordinate (possibly negative) of the window of output `(i, j)`.
    #[inline]
    pub fn anchor(&self, i: usize, j: usize) -> (isize, isize) {
        (
            (i * self.stride.0) as isize - self.padding.0 as isize,
            (j * self.stride.1) as isize - self.padding.1 as isize,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub window: Option<Window>,
    pub weight: Option<String>,
    pub bias: Option<String>,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn conv(name: &str, input: &str, weight: &str, bias: Option<&str>, window: Window) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv,
            window: Some(window),
            weight: Some(weight.to_string()),
            bias: bias.map(str::to_string),
            inputs: vec![input.to_string()],
        }
    }

    pub fn pool(name: &str, kind: LayerKind, input: &str, window: Window) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            window: Some(window),
            weight: None,
            bias: None,
            inputs: vec![input.to_string()],
        }
    }

    pub fn unary(name: &str, kind: LayerKind, input: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            window: None,
            weight: None,
            bias: None,
            inputs: vec![input.to_string()],
        }
    }

    pub fn add(name: &str, a: &str, b: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Add,
            window: None,
            weight: None,
            bias: None,
            inputs: vec![a.to_string(), b.to_string()],
        }
    }
}

/// Spatial input shape; spatial extents may be left open for fully
/// convolutional use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: usize,
}

/// Per-channel normalization applied to 8-bit pixels:
/// `(pixel * pixel_scale - mean[c]) / scale[c]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Preprocessing {
    pub pixel_scale: f32,
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Preprocessing {
    pub fn identity(channels: usize) -> Self {
        Preprocessing {
            pixel_scale: 1.0 / 255.0,
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub input: InputShape,
    pub preprocessing: Preprocessing,
    pub layers: Vec<LayerSpec>,
    pub descriptor_tap: String,
    pub backprop_start: String,
}

/// Where a layer reads one of its inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `(Hf, Wf, Cout, Cin)`.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvParams {
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[2]
    }
}

/// A validated graph with resolved parameters. Immutable once built.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    spec: GraphSpec,
    sources: Vec<Vec<Source>>,
    params: Vec<Option<ConvParams>>,
    index: HashMap<String, usize>,
    channels: Vec<usize>,
    strides: Vec<(usize, usize)>,
}

impl NetworkGraph {
    pub fn build(spec: GraphSpec, weights: &WeightContainer) -> Result<Self> {
        let mut index = HashMap::new();
        let mut sources = Vec::with_capacity(spec.layers.len());
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut channels: Vec<usize> = Vec::with_capacity(spec.layers.len());
        let mut strides: Vec<(usize, usize)> = Vec::with_capacity(spec.layers.len());

        if spec.input.channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        if spec.preprocessing.mean.len() != spec.input.channels
            || spec.preprocessing.scale.len() != spec.input.channels
        {
            return Err(Error::Config(format!(
                "preprocessing needs {} means and scales",
                spec.input.channels
            )));
        }
        if spec.preprocessing.scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::Config("preprocessing scale must be finite and nonzero".into()));
        }

        let all_names: std::collections::HashSet<&str> =
            spec.layers.iter().map(|l| l.name.as_str()).collect();

        for (li, layer) in spec.layers.iter().enumerate() {
            if layer.name == GRAPH_INPUT {
                return Err(Error::layer(&layer.name, "layer name is reserved"));
            }
            if index.contains_key(&layer.name) {
                return Err(Error::layer(&layer.name, "duplicate layer name"));
            }
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::layer(
                    &layer.name,
                    format!("{} takes {} input(s), got {}", layer.kind, layer.kind.arity(), layer.inputs.len()),
                ));
            }
            match (layer.kind.has_window(), layer.window) {
                (true, None) => return Err(Error::layer(&layer.name, "missing kernel/stride/padding")),
                (false, Some(_)) => {
                    return Err(Error::layer(&layer.name, "kernel/stride/padding not allowed for this kind"))
                }
                (true, Some(w)) => {
                    if w.kernel.0 == 0 || w.kernel.1 == 0 || w.stride.0 == 0 || w.stride.1 == 0 {
                        return Err(Error::layer(&layer.name, "kernel and stride must be positive"));
                    }
                    if layer.kind != LayerKind::Conv && (w.padding.0 >= w.kernel.0 || w.padding.1 >= w.kernel.1) {
                        return Err(Error::layer(&layer.name, "pooling padding must be smaller than the kernel"));
                    }
                }
                (false, None) => {}
            }
            if layer.kind != LayerKind::Conv && (layer.weight.is_some() || layer.bias.is_some()) {
                return Err(Error::layer(&layer.name, "only conv layers carry weights"));
            }

            let mut srcs = Vec::with_capacity(layer.inputs.len());
            for input in &layer.inputs {
                let src = if input == GRAPH_INPUT {
                    Source::Input
                } else if let Some(&j) = index.get(input) {
                    Source::Layer(j)
                } else if all_names.contains(input.as_str()) {
                    // Named later in the list: a forward edge would close a cycle.
                    return Err(Error::Cycle(layer.name.clone()));
                } else {
                    return Err(Error::UnresolvedInput {
                        layer: layer.name.clone(),
                        input: input.clone(),
                    });
                };
                srcs.push(src);
            }

            let src_channels = |s: Source| match s {
                Source::Input => spec.input.channels,
                Source::Layer(j) => channels[j],
            };
            let src_stride = |s: Source| match s {
                Source::Input => (1, 1),
                Source::Layer(j) => strides[j],
            };
            let in_ch = src_channels(srcs[0]);
            let in_stride = src_stride(srcs[0]);

            let (out_ch, stride, param) = match layer.kind {
                LayerKind::Conv => {
                    let wname = layer
                        .weight
                        .as_ref()
                        .ok_or_else(|| Error::layer(&layer.name, "conv layer needs a weight reference"))?;
                    let weight = weights
                        .get(wname)
                        .ok_or_else(|| Error::UnresolvedWeight(wname.clone()))?
                        .clone();
                    let w = layer.window.unwrap();
                    let wd = weight.dims().to_vec();
                    if wd.len() != 4 || wd[0] != w.kernel.0 || wd[1] != w.kernel.1 || wd[3] != in_ch {
                        return Err(Error::layer(
                            &layer.name,
                            format!(
                                "weight `{wname}` has dims {wd:?}, expected ({}, {}, Cout, {in_ch})",
                                w.kernel.0, w.kernel.1
                            ),
                        ));
                    }
                    let bias = match &layer.bias {
                        Some(bname) => {
                            let b = weights
                                .get(bname)
                                .ok_or_else(|| Error::UnresolvedWeight(bname.clone()))?;
                            if b.len() != wd[2] {
                                return Err(Error::layer(
                                    &layer.name,
                                    format!("bias `{bname}` has {} values, expected {}", b.len(), wd[2]),
                                ));
                            }
                            Some(b.data().to_vec())
                        }
                        None => None,
                    };
                    let s = (in_stride.0 * w.stride.0, in_stride.1 * w.stride.1);
                    (wd[2], s, Some(ConvParams { weight, bias }))
                }
                LayerKind::MaxPool | LayerKind::AvgPool => {
                    let w = layer.window.unwrap();
                    (in_ch, (in_stride.0 * w.stride.0, in_stride.1 * w.stride.1), None)
                }
                LayerKind::Add => {
                    let other = srcs[1];
                    if src_channels(other) != in_ch || src_stride(other) != in_stride {
                        return Err(Error::layer(&layer.name, "add inputs differ in channels or stride"));
                    }
                    (in_ch, in_stride, None)
                }
                LayerKind::Relu | LayerKind::BatchNormFolded => (in_ch, in_stride, None),
            };

            index.insert(layer.name.clone(), li);
            sources.push(srcs);
            params.push(param);
            channels.push(out_ch);
            strides.push(stride);
        }

        if spec.layers.is_empty() {
            return Err(Error::Config("graph has no layers".into()));
        }
        let mut consumed = vec![false; spec.layers.len()];
        for srcs in &sources {
            for s in srcs {
                if let Source::Layer(j) = s {
                    consumed[*j] = true;
                }
            }
        }
        let terminals = consumed.iter().filter(|c| !**c).count();
        if terminals != 1 {
            return Err(Error::Config(format!("graph must have exactly one terminal output, found {terminals}")));
        }
        for tap in [&spec.descriptor_tap, &spec.backprop_start] {
            if !index.contains_key(tap) {
                return Err(Error::UnknownLayer(tap.clone()));
            }
        }

        Ok(NetworkGraph {
            spec,
            sources,
            params,
            index,
            channels,
            strides,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.spec.layers
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn sources(&self, layer: usize) -> &[Source] {
        &self.sources[layer]
    }

    pub fn params(&self, layer: usize) -> Option<&ConvParams> {
        self.params[layer].as_ref()
    }

    /// Output channel count of a layer.
    pub fn channels(&self, layer: usize) -> usize {
        self.channels[layer]
    }

    /// Cumulative stride of a layer's output relative to the input image.
    pub fn cumulative_stride(&self, layer: usize) -> (usize, usize) {
        self.strides[layer]
    }

    pub fn descriptor_tap(&self) -> &str {
        &self.spec.descriptor_tap
    }

    pub fn backprop_start(&self) -> &str {
        &self.spec.backprop_start
    }

    pub fn conv_count(&self) -> usize {
        self.spec.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }

    /// Returns a copy with a different descriptor tap.
    pub fn with_descriptor_tap(&self, tap: &str) -> Result<Self> {
        self.layer_index(tap)?;
        let mut g = self.clone();
        g.spec.descriptor_tap = tap.to_string();
        Ok(g)
    }

    /// Runs the network on a preprocessed `(H, W, C)` image.
    pub fn forward(&self, image: &Tensor) -> Result<ActivationCache> {
        let (h, w, c) = image.hwc()?;
        let shape = self.spec.input;
        if c != shape.channels
            || shape.height.is_some_and(|eh| eh != h)
            || shape.width.is_some_and(|ew| ew != w)
        {
            return Err(Error::layer(
                GRAPH_INPUT,
                format!("image is {h}x{w}x{c}, graph expects {:?}", shape),
            ));
        }
        let input = image.clone().reshape(vec![h, w, c])?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.spec.layers.len());
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let fetch = |s: Source| -> &Tensor {
                match s {
                    Source::Input => &input,
                    Source::Layer(j) => &outputs[j],
                }
            };
            let a = fetch(self.sources[li][0]);
            let out = match layer.kind {
                LayerKind::Conv => conv_forward(&layer.name, a, self.params[li].as_ref().unwrap(), layer.window.unwrap())?,
                LayerKind::Relu => a.map(|v| v.max(0.0)),
                LayerKind::BatchNormFolded => a.clone(),
                LayerKind::MaxPool | LayerKind::AvgPool => {
                    pool_forward(&layer.name, a, layer.kind, layer.window.unwrap())?
                }
                LayerKind::Add => {
                    let b = fetch(self.sources[li][1]);
                    if a.dims() != b.dims() {
                        return Err(Error::layer(
                            &layer.name,
                            format!("add inputs have shapes {:?} and {:?}", a.dims(), b.dims()),
                        ));
                    }
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.dims().to_vec(), data)?
                }
            };
            debug_assert!(
                !input.is_finite() || out.is_finite(),
                "non-finite output in layer {}",
                layer.name
            );
            outputs.push(out);
        }
        Ok(ActivationCache {
            input,
            outputs,
            index: self.index.clone(),
        })
    }
}

fn conv_forward(name: &str, a: &Tensor, p: &ConvParams, win: Window) -> Result<Tensor> {
    let (h, w, cin) = a.hwc()?;
    if cin != p.in_channels() {
        return Err(Error::layer(name, format!("input has {cin} channels, weight expects {}", p.in_channels())));
    }
    let (oh, ow) = win
        .output_extent(h, w)
        .ok_or_else(|| Error::layer(name, format!("kernel {:?} does not fit a {h}x{w} input", win.kernel)))?;
    let cout = p.out_channels();
    let (kh, kw) = win.kernel;
    let wd = p.weight.data();
    let ad = a.data();
    let mut out = vec![0f32; oh * ow * cout];
    out.par_chunks_mut(ow * cout).enumerate().for_each(|(i, row)| {
        let mut acc = vec![0f64; cout];
        for j in 0..ow {
            let (y0, x0) = win.anchor(i, j);
            match &p.bias {
                Some(b) => acc.iter_mut().zip(b).for_each(|(s, &bv)| *s = bv as f64),
                None => acc.iter_mut().for_each(|s| *s = 0.0),
            }
            for ky in 0..kh {
                let y = y0 + ky as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let x = x0 + kx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let av = &ad[(y as usize * w + x as usize) * cin..][..cin];
                    let base = (ky * kw + kx) * cout * cin;
                    for (co, s) in acc.iter_mut().enumerate() {
                        let wv = &wd[base + co * cin..][..cin];
                        let dot: f64 = av.iter().zip(wv).map(|(&x, &y)| x as f64 * y as f64).sum();
                        *s += dot;
                    }
                }
            }
            for (o, s) in row[j * cout..(j + 1) * cout].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
    });
    Tensor::new(vec![oh, ow, cout], out)
}

fn pool_forward(name: &str, a: &Tensor, kind: LayerKind, win: Window) -> Result<Tensor> {
    let (h, w, c) = a.hwc()?;
    let (oh, ow) = win
        .output_extent(h, w)
        .ok_or_else(|| Error::layer(name, format!("kernel {:?} does not fit a {h}x{w} input", win.kernel)))?;
    let mut out = vec![0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let (y0, x0) = win.anchor(i, j);
            for ch in 0..c {
                let mut max = f32::NEG_INFINITY;
                let mut sum = 0f64;
                let mut count = 0usize;
                for ky in 0..win.kernel.0 {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kernel.1 {
                        let x = x0 + kx as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let v = a.at3(y as usize, x as usize, ch);
                        max = max.max(v);
                        sum += v as f64;
                        count += 1;
                    }
                }
                out[(i * ow + j) * c + ch] = match kind {
                    LayerKind::MaxPool => max,
                    _ => (sum / count as f64) as f32,
                };
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Every layer output of one forward pass, plus the preprocessed input.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    input: Tensor,
    outputs: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ActivationCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        if name == GRAPH_INPUT {
            return Ok(&self.input);
        }
        self.index
            .get(name)
            .map(|&i| &self.outputs[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.outputs[layer]
    }

    pub fn source(&self, s: Source) -> &Tensor {
        match s {
            Source::Input => &self.input,
            Source::Layer(j) => &self.outputs[j],
        }
    }

    /// Number of cached tensors (layers plus the input).
    pub fn len(&self) -> usize {
        self.outputs.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Multiplies every cached activation by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        ActivationCache {
            input: self.input.map(|v| v * factor),
            outputs: self.outputs.iter().map(|t| t.map(|v| v * factor)).collect(),
            index: self.index.clone(),
        }
    }
}

/// Channel mean of a cached `(H, W, C)` map, as an `(H, W)` tensor.
pub fn mean_activation_map(cache: &ActivationCache, layer: &str) -> Result<Tensor> {
    channel_mean(cache.get(layer)?)
}

pub fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    let data = t
        .data()
        .chunks_exact(c)
        .map(|px| (px.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32)
        .collect();
    Tensor::new(vec![h, w], data)
}
