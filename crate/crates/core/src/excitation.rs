//! Top-down probabilistic back-propagation of response peaks.
//!
//! A winning neuron `B(i, j, co)` hands its probability to the neurons of its
//! receptive window in proportion to `max(A, 0) * max(F, 0)`, normalized over
//! the window so each winner's conditional sums to one. Pooling layers behave
//! as per-channel convolutions with uniform positive weights, ReLU and folded
//! batchnorm markers pass probability through untouched, and residual sums
//! split it between their two inputs by non-negative activation.
//!
//! A winner whose window has no positive contribution keeps nothing: its mass
//! is dropped and tallied per layer in [`BackpropDiagnostics`].

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::{ActivationCache, ConvParams, LayerKind, LayerSpec, NetworkGraph, Source};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub y: usize,
    pub x: usize,
    pub response: f32,
}

/// Probability over the neurons of one `(H, W, C)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Probability {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Probability {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Probability {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn shaped_like(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        Ok(Self::zeros(h, w, c))
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn accumulate(&mut self, other: &Probability) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Result of pushing probability through one layer.
#[derive(Debug, Clone)]
pub struct LayerBackprop {
    /// One probability field per layer input.
    pub inputs: Vec<Probability>,
    /// Mass of winners with no positive contribution.
    pub dropped: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackpropDiagnostics {
    /// Seed mass that found no positive channel at the peak.
    pub seed_dropped: f64,
    /// `(layer name, dropped mass)` in the order layers were visited.
    pub dropped: Vec<(String, f64)>,
}

impl BackpropDiagnostics {
    pub fn total_dropped(&self) -> f64 {
        self.seed_dropped + self.dropped.iter().map(|(_, m)| m).sum::<f64>()
    }
}

/// Per-peak probability over the input image, max-normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    /// `(H, W)` at input resolution.
    pub values: Tensor,
    pub peak: Peak,
    /// Total probability reaching the input, before normalization.
    pub mass: f64,
    pub diagnostics: BackpropDiagnostics,
}

/// Local maxima of a 2-D map under a 3x3 window.
///
/// Ties follow a plateau rule: an 8-connected set of equal values is one
/// peak when no member has a strictly larger neighbor, and it is represented
/// by its first cell in raster order. Maps with a side shorter than 3 yield
/// the single global maximum.
pub fn detect_peaks(map: &Tensor) -> Result<Vec<Peak>> {
    let (h, w) = map_2d(map)?;
    if h < 3 || w < 3 {
        let (mut by, mut bx) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                if map.at2(y, x) > map.at2(by, bx) {
                    (by, bx) = (y, x);
                }
            }
        }
        return Ok(vec![Peak {
            y: by,
            x: bx,
            response: map.at2(by, bx),
        }]);
    }

    let mut visited = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut peaks = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if visited[sy * w + sx] {
                continue;
            }
            let value = map.at2(sy, sx);
            let mut is_max = true;
            visited[sy * w + sx] = true;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                for (ny, nx) in neighbors(y, x, h, w) {
                    let v = map.at2(ny, nx);
                    if v > value {
                        is_max = false;
                    } else if v == value && !visited[ny * w + nx] {
                        visited[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            if is_max {
                peaks.push(Peak {
                    y: sy,
                    x: sx,
                    response: value,
                });
            }
        }
    }
    sort_peaks(&mut peaks);
    Ok(peaks)
}

/// Every position strictly above the map mean, strongest first.
pub fn seed_pixels_above_mean(map: &Tensor) -> Result<Vec<Peak>> {
    let (h, w) = map_2d(map)?;
    let mean = map.sum() / (h * w) as f64;
    let mut seeds: Vec<Peak> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| map.at2(y, x) as f64 > mean)
        .map(|(y, x)| Peak {
            y,
            x,
            response: map.at2(y, x),
        })
        .collect();
    sort_peaks(&mut seeds);
    Ok(seeds)
}

fn sort_peaks(peaks: &mut [Peak]) {
    peaks.sort_by(|a, b| b.response.total_cmp(&a.response).then((a.y, a.x).cmp(&(b.y, b.x))));
}

fn map_2d(map: &Tensor) -> Result<(usize, usize)> {
    match map.dims() {
        &[h, w] => Ok((h, w)),
        &[h, w, 1] => Ok((h, w)),
        d => Err(Error::Shape(format!("expected a 2-D map, got {d:?}"))),
    }
}

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1isize..=1)
        .flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then_some((ny as usize, nx as usize))
        })
}

fn check_shape(p: &Probability, t: &Tensor, layer: &str, what: &str) -> Result<()> {
    if t.hwc()? != p.dims() {
        return Err(Error::layer(
            layer,
            format!("{what} has shape {:?}, probability is {:?}", t.dims(), p.dims()),
        ));
    }
    Ok(())
}

/// Pushes `p_out` (over the layer's output) back onto the layer's inputs.
///
/// `inputs` are the layer's input activations from the same forward pass;
/// `output` is its output activation, used only for shape checks.
pub fn backprop_layer(
    p_out: &Probability,
    layer: &LayerSpec,
    inputs: &[&Tensor],
    output: &Tensor,
    params: Option<&ConvParams>,
) -> Result<LayerBackprop> {
    check_shape(p_out, output, &layer.name, "layer output")?;
    if inputs.len() != if layer.kind == LayerKind::Add { 2 } else { 1 } {
        return Err(Error::layer(&layer.name, "wrong number of input activations"));
    }
    match layer.kind {
        LayerKind::Relu | LayerKind::BatchNormFolded => {
            check_shape(p_out, inputs[0], &layer.name, "input activation")?;
            Ok(LayerBackprop {
                inputs: vec![p_out.clone()],
                dropped: 0.0,
            })
        }
        LayerKind::Add => {
            check_shape(p_out, inputs[0], &layer.name, "first input")?;
            check_shape(p_out, inputs[1], &layer.name, "second input")?;
            let mut a_p = p_out.clone();
            let mut b_p = p_out.clone();
            for (k, &p) in p_out.data.iter().enumerate() {
                let a = inputs[0].data()[k].max(0.0) as f64;
                let b = inputs[1].data()[k].max(0.0) as f64;
                let (fa, fb) = if a + b > 0.0 { (a / (a + b), b / (a + b)) } else { (0.5, 0.5) };
                a_p.data[k] = p * fa;
                b_p.data[k] = p * fb;
            }
            Ok(LayerBackprop {
                inputs: vec![a_p, b_p],
                dropped: 0.0,
            })
        }
        LayerKind::Conv => {
            let params = params.ok_or_else(|| Error::layer(&layer.name, "conv layer without parameters"))?;
            conv_backprop(p_out, layer, inputs[0], params)
        }
        LayerKind::MaxPool | LayerKind::AvgPool => pool_backprop(p_out, layer, inputs[0]),
    }
}

fn conv_backprop(p_out: &Probability, layer: &LayerSpec, a: &Tensor, params: &ConvParams) -> Result<LayerBackprop> {
    let win = layer.window.expect("validated conv layer has a window");
    let (h, w, cin) = a.hwc()?;
    if params.in_channels() != cin || params.out_channels() != p_out.channels {
        return Err(Error::layer(&layer.name, "weight shape does not match activations"));
    }
    let (kh, kw) = win.kernel;
    let cout = p_out.channels;
    let wd = params.weight.data();
    let ad = a.data();
    let mut p_in = Probability::zeros(h, w, cin);
    let mut dropped = 0.0;
    let mut contrib = Vec::with_capacity(kh * kw * cin);
    for i in 0..p_out.height {
        for j in 0..p_out.width {
            let (y0, x0) = win.anchor(i, j);
            for co in 0..cout {
                let p = p_out.data[p_out.idx(i, j, co)];
                if p <= 0.0 {
                    continue;
                }
                contrib.clear();
                let mut z = 0.0f64;
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
                        let abase = (y as usize * w + x as usize) * cin;
                        let wbase = ((ky * kw + kx) * cout + co) * cin;
                        for ci in 0..cin {
                            let av = ad[abase + ci];
                            let wv = wd[wbase + ci];
                            if av > 0.0 && wv > 0.0 {
                                let c = av as f64 * wv as f64;
                                z += c;
                                contrib.push((abase + ci, c));
                            }
                        }
                    }
                }
                if z > 0.0 {
                    let scale = p / z;
                    for &(k, c) in &contrib {
                        p_in.data[k] += c * scale;
                    }
                } else {
                    dropped += p;
                }
            }
        }
    }
    Ok(LayerBackprop {
        inputs: vec![p_in],
        dropped,
    })
}

fn pool_backprop(p_out: &Probability, layer: &LayerSpec, a: &Tensor) -> Result<LayerBackprop> {
    let win = layer.window.expect("validated pooling layer has a window");
    let (h, w, c) = a.hwc()?;
    if c != p_out.channels {
        return Err(Error::layer(&layer.name, "pooling changes channel count"));
    }
    let mut p_in = Probability::zeros(h, w, c);
    let mut dropped = 0.0;
    let mut contrib = Vec::with_capacity(win.kernel.0 * win.kernel.1);
    for i in 0..p_out.height {
        for j in 0..p_out.width {
            let (y0, x0) = win.anchor(i, j);
            for ch in 0..c {
                let p = p_out.data[p_out.idx(i, j, ch)];
                if p <= 0.0 {
                    continue;
                }
                contrib.clear();
                let mut z = 0.0f64;
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
                        let av = a.at3(y as usize, x as usize, ch);
                        if av > 0.0 {
                            z += av as f64;
                            contrib.push((p_in.idx(y as usize, x as usize, ch), av as f64));
                        }
                    }
                }
                if z > 0.0 {
                    for &(k, v) in &contrib {
                        p_in.data[k] += p * v / z;
                    }
                } else {
                    dropped += p;
                }
            }
        }
    }
    Ok(LayerBackprop {
        inputs: vec![p_in],
        dropped,
    })
}

/// Seed probability at a spatial position of the start layer, spread across
/// channels by positive activation. Returns the seed and the mass that found
/// no positive channel.
pub fn seed_probability(start: &Tensor, peak: &Peak) -> Result<(Probability, f64)> {
    let (h, w, c) = start.hwc()?;
    if peak.y >= h || peak.x >= w {
        return Err(Error::PeakOutOfBounds {
            y: peak.y,
            x: peak.x,
            height: h,
            width: w,
        });
    }
    let mut p = Probability::zeros(h, w, c);
    let total: f64 = (0..c).map(|ch| start.at3(peak.y, peak.x, ch).max(0.0) as f64).sum();
    if total <= 0.0 {
        return Ok((p, 1.0));
    }
    for ch in 0..c {
        let k = p.idx(peak.y, peak.x, ch);
        p.data[k] = start.at3(peak.y, peak.x, ch).max(0.0) as f64 / total;
    }
    Ok((p, 0.0))
}

/// Back-propagates a peak of the start layer down to the input and returns
/// the per-neuron probability over the input together with diagnostics.
pub fn backprop_to_input(
    graph: &NetworkGraph,
    cache: &ActivationCache,
    peak: &Peak,
) -> Result<(Probability, BackpropDiagnostics)> {
    let start = graph.layer_index(graph.backprop_start())?;
    let (seed, seed_dropped) = seed_probability(cache.output(start), peak)?;
    let mut diagnostics = BackpropDiagnostics {
        seed_dropped,
        dropped: Vec::new(),
    };
    let mut pending: Vec<Option<Probability>> = vec![None; start + 1];
    pending[start] = Some(seed);
    let mut at_input = Probability::shaped_like(cache.input())?;

    for li in (0..=start).rev() {
        let Some(p_out) = pending[li].take() else {
            continue;
        };
        let layer = &graph.layers()[li];
        let sources = graph.sources(li);
        let inputs: Vec<&Tensor> = sources.iter().map(|&s| cache.source(s)).collect();
        let step = backprop_layer(&p_out, layer, &inputs, cache.output(li), graph.params(li))?;
        diagnostics.dropped.push((layer.name.clone(), step.dropped));
        for (src, p_in) in sources.iter().zip(step.inputs) {
            match *src {
                Source::Input => at_input.accumulate(&p_in),
                Source::Layer(j) => match &mut pending[j] {
                    Some(acc) => acc.accumulate(&p_in),
                    slot @ None => *slot = Some(p_in),
                },
            }
        }
    }
    Ok((at_input, diagnostics))
}

/// Probability map of one peak at input resolution, divided by its maximum.
pub fn backprop_peak(graph: &NetworkGraph, cache: &ActivationCache, peak: &Peak) -> Result<ProbabilityMap> {
    let (p, diagnostics) = backprop_to_input(graph, cache, peak)?;
    let spatial: Vec<f64> = p.data.chunks_exact(p.channels).map(|px| px.iter().sum()).collect();
    let mass: f64 = spatial.iter().sum();
    let max = spatial.iter().copied().fold(0.0f64, f64::max);
    let values = spatial
        .iter()
        .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect();
    Ok(ProbabilityMap {
        values: Tensor::new(vec![p.height, p.width], values)?,
        peak: *peak,
        mass,
        diagnostics,
    })
}
