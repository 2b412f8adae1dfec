//! Weight containers and graph text files.
//!
//! Container layout (all integers `u32` little-endian):
//!
//! ```text
//! magic "DASR" | version | tensor-count
//! per tensor: name-length | UTF-8 name | rank | dims[rank] | payload (f32 LE, row-major)
//! ```
//!
//! The graph file is line oriented, one directive or layer per line, `#`
//! starts a comment:
//!
//! ```text
//! input * * 3
//! pixel-scale 0.003921569
//! mean 0.485 0.456 0.406
//! scale 0.229 0.224 0.225
//! tap layer4.0.out
//! backprop layer4.2.out
//! layer conv1 conv in=input weight=conv1.w bias=conv1.b kernel=7x7 stride=2x2 pad=3x3
//! layer relu relu in=conv1
//! layer sum add in=a,b
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, InputShape, LayerKind, LayerSpec, NetworkGraph, Preprocessing, Window, GRAPH_INPUT};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DASR";
pub const VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::UnresolvedWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// SHA-256 over every payload byte, in container order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 8 + n.len() + 4 * t.rank() + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let count = r.u32("tensor count")?;
        let mut c = WeightContainer::new();
        for k in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Data(format!("tensor #{k} name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Truncated(format!("tensor `{name}` too large")))?;
            let data = r.f32s(n, &name)?;
            c.insert(&name, Tensor::new(dims, data)?)?;
        }
        r.finish()?;
        Ok(c)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn word(&mut self, what: &str) -> Result<[u8; 4]> {
        Ok(self.take(4, what)?.try_into().unwrap())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        self.word(what).map(u32::from_le_bytes)
    }

    pub(crate) fn i32(&mut self, what: &str) -> Result<i32> {
        self.word(what).map(i32::from_le_bytes)
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        self.word(what).map(f32::from_le_bytes)
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Truncated(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.word("magic")?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::TrailingData(self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

/// SHA-256 of one tensor's little-endian payload.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<WeightContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightContainer::from_bytes(&bytes)
}

pub fn write_container(path: impl AsRef<Path>, c: &WeightContainer) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: impl AsRef<Path>, weights: &WeightContainer) -> Result<NetworkGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkGraph::build(parse_graph(&text)?, weights)
}

fn parse_pair(v: &str, line: usize, key: &str) -> Result<(usize, usize)> {
    let err = || Error::GraphParse {
        line,
        message: format!("`{key}` expects AxB, got `{v}`"),
    };
    let (a, b) = v.split_once('x').ok_or_else(err)?;
    Ok((a.parse().map_err(|_| err())?, b.parse().map_err(|_| err())?))
}

fn parse_floats(args: &[&str], line: usize) -> Result<Vec<f32>> {
    args.iter()
        .map(|a| {
            a.parse::<f32>().map_err(|_| Error::GraphParse {
                line,
                message: format!("not a number: `{a}`"),
            })
        })
        .collect()
}

/// Parses graph text. Layers are returned in a topological order; listed
/// order is kept wherever it is already valid.
pub fn parse_graph(text: &str) -> Result<GraphSpec> {
    let mut input = None;
    let mut pixel_scale = 1.0 / 255.0;
    let mut mean = None;
    let mut scale = None;
    let mut tap = None;
    let mut start = None;
    let mut layers = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        let perr = |m: String| Error::GraphParse { line, message: m };
        match toks[0] {
            "input" => {
                if toks.len() != 4 {
                    return Err(perr("`input` expects H W C".into()));
                }
                let ext = |t: &str| -> Result<Option<usize>> {
                    if t == "*" {
                        Ok(None)
                    } else {
                        t.parse().map(Some).map_err(|_| perr(format!("bad extent `{t}`")))
                    }
                };
                input = Some(InputShape {
                    height: ext(toks[1])?,
                    width: ext(toks[2])?,
                    channels: toks[3].parse().map_err(|_| perr(format!("bad channel count `{}`", toks[3])))?,
                });
            }
            "pixel-scale" => {
                let v = parse_floats(&toks[1..], line)?;
                if v.len() != 1 {
                    return Err(perr("`pixel-scale` expects one value".into()));
                }
                pixel_scale = v[0];
            }
            "mean" => mean = Some(parse_floats(&toks[1..], line)?),
            "scale" => scale = Some(parse_floats(&toks[1..], line)?),
            "tap" | "backprop" => {
                if toks.len() != 2 {
                    return Err(perr(format!("`{}` expects one layer name", toks[0])));
                }
                if toks[0] == "tap" {
                    tap = Some(toks[1].to_string());
                } else {
                    start = Some(toks[1].to_string());
                }
            }
            "layer" => {
                if toks.len() < 3 {
                    return Err(perr("`layer` expects a name and a kind".into()));
                }
                let kind: LayerKind = toks[2].parse()?;
                let mut spec = LayerSpec {
                    name: toks[1].to_string(),
                    kind,
                    window: None,
                    weight: None,
                    bias: None,
                    inputs: Vec::new(),
                };
                let (mut kernel, mut stride, mut pad) = (None, None, None);
                for kv in &toks[3..] {
                    let (k, v) = kv.split_once('=').ok_or_else(|| perr(format!("expected key=value, got `{kv}`")))?;
                    match k {
                        "in" => spec.inputs = v.split(',').map(str::to_string).collect(),
                        "weight" => spec.weight = Some(v.to_string()),
                        "bias" => spec.bias = Some(v.to_string()),
                        "kernel" => kernel = Some(parse_pair(v, line, k)?),
                        "stride" => stride = Some(parse_pair(v, line, k)?),
                        "pad" => pad = Some(parse_pair(v, line, k)?),
                        other => return Err(perr(format!("unknown layer attribute `{other}`"))),
                    }
                }
                if let Some(k) = kernel {
                    spec.window = Some(Window::new(k, stride.unwrap_or((1, 1)), pad.unwrap_or((0, 0))));
                } else if stride.is_some() || pad.is_some() {
                    return Err(perr("stride/pad given without kernel".into()));
                }
                layers.push(spec);
            }
            other => return Err(perr(format!("unknown directive `{other}`"))),
        }
    }

    let missing = |what: &str| Error::GraphParse {
        line: 0,
        message: format!("missing `{what}` directive"),
    };
    let input = input.ok_or_else(|| missing("input"))?;
    let preprocessing = Preprocessing {
        pixel_scale,
        mean: mean.unwrap_or_else(|| vec![0.0; input.channels]),
        scale: scale.unwrap_or_else(|| vec![1.0; input.channels]),
    };
    Ok(GraphSpec {
        input,
        preprocessing,
        layers: topological_order(layers)?,
        descriptor_tap: tap.ok_or_else(|| missing("tap"))?,
        backprop_start: start.ok_or_else(|| missing("backprop"))?,
    })
}

/// Stable Kahn ordering. Unknown input names are left for graph validation.
fn topological_order(layers: Vec<LayerSpec>) -> Result<Vec<LayerSpec>> {
    let pos: HashMap<&str, usize> = layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let n = layers.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, l) in layers.iter().enumerate() {
        for inp in &l.inputs {
            if let Some(&j) = pos.get(inp.as_str()) {
                if inp != GRAPH_INPUT {
                    indegree[i] += 1;
                    consumers[j].push(i);
                }
            }
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
        return Err(Error::Cycle(layers[stuck].name.clone()));
    }
    let mut slots: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

pub fn serialize_graph(spec: &GraphSpec) -> String {
    let mut s = String::new();
    let ext = |e: Option<usize>| e.map_or("*".to_string(), |v| v.to_string());
    let floats = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    writeln!(s, "input {} {} {}", ext(spec.input.height), ext(spec.input.width), spec.input.channels).unwrap();
    writeln!(s, "pixel-scale {}", spec.preprocessing.pixel_scale).unwrap();
    writeln!(s, "mean {}", floats(&spec.preprocessing.mean)).unwrap();
    writeln!(s, "scale {}", floats(&spec.preprocessing.scale)).unwrap();
    writeln!(s, "tap {}", spec.descriptor_tap).unwrap();
    writeln!(s, "backprop {}", spec.backprop_start).unwrap();
    for l in &spec.layers {
        write!(s, "layer {} {} in={}", l.name, l.kind, l.inputs.join(",")).unwrap();
        if let Some(w) = &l.weight {
            write!(s, " weight={w}").unwrap();
        }
        if let Some(b) = &l.bias {
            write!(s, " bias={b}").unwrap();
        }
        if let Some(w) = l.window {
            write!(
                s,
                " kernel={}x{} stride={}x{} pad={}x{}",
                w.kernel.0, w.kernel.1, w.stride.0, w.stride.1, w.padding.0, w.padding.1
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

/// Shape manifest written next to an exported container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    /// Source model identifier.
    pub source: String,
    pub tensors: Vec<ManifestTensor>,
    /// Which batchnorm was folded into which convolution.
    #[serde(default)]
    pub folding: Vec<FoldRecord>,
    pub preprocessing: Option<Preprocessing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub batchnorm: String,
    pub conv: String,
}

impl ExportManifest {
    pub fn describe(source: &str, c: &WeightContainer, preprocessing: Option<Preprocessing>) -> Self {
        ExportManifest {
            source: source.to_string(),
            tensors: c
                .iter()
                .map(|(name, t)| ManifestTensor {
                    name: name.to_string(),
                    dims: t.dims().to_vec(),
                    sha256: tensor_checksum(t),
                })
                .collect(),
            folding: Vec::new(),
            preprocessing,
        }
    }

    /// Checks that the manifest lists exactly the container's tensors with
    /// matching dims and checksums.
    pub fn verify(&self, c: &WeightContainer) -> Result<()> {
        if self.tensors.len() != c.len() {
            return Err(Error::Data(format!(
                "manifest lists {} tensors, container holds {}",
                self.tensors.len(),
                c.len()
            )));
        }
        for m in &self.tensors {
            let t = c
                .get(&m.name)
                .ok_or_else(|| Error::Data(format!("manifest tensor `{}` missing from container", m.name)))?;
            if t.dims() != m.dims.as_slice() {
                return Err(Error::Data(format!(
                    "tensor `{}` has dims {:?}, manifest says {:?}",
                    m.name,
                    t.dims(),
                    m.dims
                )));
            }
            if tensor_checksum(t) != m.sha256 {
                return Err(Error::Data(format!("tensor `{}` checksum differs from manifest", m.name)));
            }
        }
        Ok(())
    }
}

/// Ready-made graph descriptions with the tensor shapes they expect.
pub mod templates {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// A graph plus the `(name, dims)` of every tensor it references.
    #[derive(Debug, Clone)]
    pub struct Template {
        pub spec: GraphSpec,
        pub tensors: Vec<(String, Vec<usize>)>,
    }

    impl Template {
        /// Container with uniformly random weights in `[-bound, bound)` and
        /// biases in `[0, bias_bound)`.
        pub fn random_weights(&self, seed: u64, bound: f32, bias_bound: f32) -> WeightContainer {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = WeightContainer::new();
            for (name, dims) in &self.tensors {
                let t = if dims.len() == 1 {
                    Tensor::from_fn(dims, |_| rng.random::<f32>() * bias_bound)
                } else {
                    Tensor::from_fn(dims, |_| (rng.random::<f32>() * 2.0 - 1.0) * bound)
                };
                c.insert(name, t).expect("template tensor names are unique");
            }
            c
        }
    }

    struct Builder {
        layers: Vec<LayerSpec>,
        tensors: Vec<(String, Vec<usize>)>,
    }

    impl Builder {
        #[allow(clippy::too_many_arguments)]
        fn conv(&mut self, name: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) {
            let (w, b) = (format!("{name}.w"), format!("{name}.b"));
            self.layers.push(LayerSpec::conv(
                name,
                input,
                &w,
                Some(&b),
                Window::new((k, k), (stride, stride), (pad, pad)),
            ));
            self.tensors.push((w, vec![k, k, cout, cin]));
            self.tensors.push((b, vec![cout]));
        }

        fn relu(&mut self, name: &str, input: &str) {
            self.layers.push(LayerSpec::unary(name, LayerKind::Relu, input));
        }
    }

    const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

    fn imagenet() -> Preprocessing {
        Preprocessing {
            pixel_scale: 1.0 / 255.0,
            mean: IMAGENET_MEAN.to_vec(),
            scale: IMAGENET_STD.to_vec(),
        }
    }

    /// ResNet-50 up to the last bottleneck of stage 4, batchnorm folded.
    ///
    /// Tensor names follow `layerS.B.convN.{w,b}` and `layerS.B.downsample.{w,b}`.
    /// The descriptor tap is the output of the first unit of stage 4.
    pub fn resnet50() -> Template {
        let mut b = Builder {
            layers: Vec::new(),
            tensors: Vec::new(),
        };
        b.conv("conv1", GRAPH_INPUT, 3, 64, 7, 2, 3);
        b.relu("relu", "conv1");
        b.layers.push(LayerSpec::pool(
            "maxpool",
            LayerKind::MaxPool,
            "relu",
            Window::new((3, 3), (2, 2), (1, 1)),
        ));
        let mut prev = "maxpool".to_string();
        let mut cin = 64;
        for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let stage_stride = if stage == 0 { 1 } else { 2 };
            for blk in 0..blocks {
                let p = format!("layer{}.{blk}", stage + 1);
                let stride = if blk == 0 { stage_stride } else { 1 };
                let cout = width * 4;
                b.conv(&format!("{p}.conv1"), &prev, cin, width, 1, 1, 0);
                b.relu(&format!("{p}.relu1"), &format!("{p}.conv1"));
                b.conv(&format!("{p}.conv2"), &format!("{p}.relu1"), width, width, 3, stride, 1);
                b.relu(&format!("{p}.relu2"), &format!("{p}.conv2"));
                b.conv(&format!("{p}.conv3"), &format!("{p}.relu2"), width, cout, 1, 1, 0);
                let shortcut = if blk == 0 {
                    b.conv(&format!("{p}.downsample"), &prev, cin, cout, 1, stride, 0);
                    format!("{p}.downsample")
                } else {
                    prev.clone()
                };
                b.layers.push(LayerSpec::add(&format!("{p}.add"), &format!("{p}.conv3"), &shortcut));
                b.relu(&format!("{p}.out"), &format!("{p}.add"));
                prev = format!("{p}.out");
                cin = cout;
            }
        }
        Template {
            spec: GraphSpec {
                input: InputShape {
                    height: None,
                    width: None,
                    channels: 3,
                },
                preprocessing: imagenet(),
                layers: b.layers,
                descriptor_tap: "layer4.0.out".into(),
                backprop_start: prev,
            },
            tensors: b.tensors,
        }
    }

    /// VGG-16 convolutional trunk up to `relu5_3`.
    pub fn vgg16() -> Template {
        let mut b = Builder {
            layers: Vec::new(),
            tensors: Vec::new(),
        };
        let cfg: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
        let mut prev = GRAPH_INPUT.to_string();
        let mut cin = 3;
        for (bi, block) in cfg.iter().enumerate() {
            if bi > 0 {
                let pool = format!("pool{bi}");
                b.layers.push(LayerSpec::pool(&pool, LayerKind::MaxPool, &prev, Window::new((2, 2), (2, 2), (0, 0))));
                prev = pool;
            }
            for (ci, &cout) in block.iter().enumerate() {
                let conv = format!("conv{}_{}", bi + 1, ci + 1);
                let relu = format!("relu{}_{}", bi + 1, ci + 1);
                b.conv(&conv, &prev, cin, cout, 3, 1, 1);
                b.relu(&relu, &conv);
                prev = relu;
                cin = cout;
            }
        }
        Template {
            spec: GraphSpec {
                input: InputShape {
                    height: None,
                    width: None,
                    channels: 3,
                },
                preprocessing: imagenet(),
                layers: b.layers,
                descriptor_tap: "relu5_1".into(),
                backprop_start: prev,
            },
            tensors: b.tensors,
        }
    }

    /// Small residual network for trying the pipeline without exported weights.
    /// Cumulative stride 4 at the tap, 16 channels.
    pub fn toy() -> Template {
        let mut b = Builder {
            layers: Vec::new(),
            tensors: Vec::new(),
        };
        b.conv("conv1", GRAPH_INPUT, 3, 8, 3, 1, 1);
        b.relu("relu1", "conv1");
        b.layers.push(LayerSpec::pool("pool1", LayerKind::MaxPool, "relu1", Window::new((2, 2), (2, 2), (0, 0))));
        b.conv("conv2", "pool1", 8, 16, 3, 1, 1);
        b.relu("relu2", "conv2");
        b.layers.push(LayerSpec::pool("pool2", LayerKind::AvgPool, "relu2", Window::new((2, 2), (2, 2), (0, 0))));
        b.conv("conv3", "pool2", 16, 16, 3, 1, 1);
        b.layers.push(LayerSpec::add("add3", "conv3", "pool2"));
        b.relu("relu3", "add3");
        b.conv("conv4", "relu3", 16, 16, 3, 1, 1);
        b.relu("relu4", "conv4");
        Template {
            spec: GraphSpec {
                input: InputShape {
                    height: None,
                    width: None,
                    channels: 3,
                },
                preprocessing: Preprocessing {
                    pixel_scale: 1.0 / 255.0,
                    mean: vec![0.0; 3],
                    scale: vec![1.0; 3],
                },
                layers: b.layers,
                descriptor_tap: "relu3".into(),
                backprop_start: "relu4".into(),
            },
            tensors: b.tensors,
        }
    }

    pub fn by_name(name: &str) -> Result<Template> {
        match name {
            "resnet50" => Ok(resnet50()),
            "vgg16" => Ok(vgg16()),
            "toy" => Ok(toy()),
            other => Err(Error::Config(format!("unknown template `{other}` (resnet50, vgg16, toy)"))),
        }
    }
}
