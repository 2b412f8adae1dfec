//! Random tiny networks and brute-force reference implementations.

use dasr::graph::{GraphSpec, InputShape, LayerKind, LayerSpec, NetworkGraph, Preprocessing, Window, GRAPH_INPUT};
use dasr::model_io::WeightContainer;
use dasr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `(h, w, c)` array of f64 used by the reference code.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Field {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Field { h, w, c, v: vec![0.0; h * w * c] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, val: f64) {
        let k = (y * self.w + x) * self.c + c;
        self.v[k] = val;
    }

    pub fn sum(&self) -> f64 {
        self.v.iter().sum()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, c) = t.hwc().unwrap();
        Field {
            h,
            w,
            c,
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// Weights `[ky][kx][co][ci]` flattened like the container layout.
    Conv {
        w: Vec<f64>,
        b: Vec<f64>,
        cout: usize,
    },
    MaxPool,
    AvgPool,
    Relu,
    /// Second input node.
    Add(usize),
}

#[derive(Debug, Clone)]
pub struct OLayer {
    pub op: Op,
    /// Input node; node 0 is the image, node `i + 1` the output of layer `i`.
    pub src: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    pub layers: Vec<OLayer>,
    pub input: Field,
    pub graph: NetworkGraph,
    pub input_tensor: Tensor,
    /// Whether inputs and weights were drawn strictly positive.
    pub positive: bool,
}

fn extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p >= k).then(|| (n + 2 * p - k) / s + 1)
}

/// Random network of one to three layers, spatial size at most 8x8 and at
/// most 4 channels everywhere.
pub fn random_net(seed: u64) -> TinyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = rng.random_bool(0.35);
    let draw = |rng: &mut ChaCha8Rng| -> f32 {
        if positive {
            rng.random_range(0.05f32..1.0)
        } else {
            rng.random_range(-1.0f32..1.0)
        }
    };
    let (h0, w0, c0) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=4));
    let input_tensor = Tensor::from_fn(&[h0, w0, c0], |_| draw(&mut rng));
    let mut shapes = vec![(h0, w0, c0)];
    let mut strides = vec![(1, 1)];
    let mut layers = Vec::new();
    let mut specs = Vec::new();
    let mut weights = WeightContainer::new();
    let n_layers = rng.random_range(1..=3);
    let name = |i: usize| if i == 0 { GRAPH_INPUT.to_string() } else { format!("l{}", i - 1) };

    for li in 0..n_layers {
        let src = li;
        let (h, w, c) = shapes[src];
        let kind = rng.random_range(0..10);
        let kernel = (rng.random_range(1..=3), rng.random_range(1..=3));
        let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
        let pad = (rng.random_range(0..kernel.0), rng.random_range(0..kernel.1));
        let windowed = extent(h, kernel.0, stride.0, pad.0).zip(extent(w, kernel.1, stride.1, pad.1));
        let lname = format!("l{li}");
        // Add needs an earlier node of identical shape that is not the direct input.
        let add_partner = (0..src).rev().find(|&j| shapes[j] == shapes[src] && strides[j] == strides[src]);
        let (op, shape, spec) = match (kind, windowed, add_partner) {
            (0..=4, Some((oh, ow)), _) => {
                let cout = rng.random_range(1..=4);
                let wv: Vec<f32> = (0..kernel.0 * kernel.1 * cout * c).map(|_| draw(&mut rng)).collect();
                let bv: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.2f32..0.2)).collect();
                weights
                    .insert(&format!("{lname}.w"), Tensor::new(vec![kernel.0, kernel.1, cout, c], wv.clone()).unwrap())
                    .unwrap();
                weights.insert(&format!("{lname}.b"), Tensor::new(vec![cout], bv.clone()).unwrap()).unwrap();
                let spec = LayerSpec::conv(
                    &lname,
                    &name(src),
                    &format!("{lname}.w"),
                    Some(&format!("{lname}.b")),
                    Window::new(kernel, stride, pad),
                );
                let op = Op::Conv {
                    w: wv.iter().map(|&x| x as f64).collect(),
                    b: bv.iter().map(|&x| x as f64).collect(),
                    cout,
                };
                (op, (oh, ow, cout), spec)
            }
            (5..=6, Some((oh, ow)), _) => {
                let (op, k) = if kind == 5 { (Op::MaxPool, LayerKind::MaxPool) } else { (Op::AvgPool, LayerKind::AvgPool) };
                (op, (oh, ow, c), LayerSpec::pool(&lname, k, &name(src), Window::new(kernel, stride, pad)))
            }
            (7, _, Some(j)) => (Op::Add(j), (h, w, c), LayerSpec::add(&lname, &name(src), &name(j))),
            _ => (Op::Relu, (h, w, c), LayerSpec::unary(&lname, LayerKind::Relu, &name(src))),
        };
        let mut st = strides[src];
        if matches!(op, Op::Conv { .. } | Op::MaxPool | Op::AvgPool) {
            st = (st.0 * stride.0, st.1 * stride.1);
        }
        strides.push(st);
        layers.push(OLayer {
            op,
            src,
            kernel,
            stride,
            pad,
        });
        specs.push(spec);
        shapes.push(shape);
    }
    let last = format!("l{}", n_layers - 1);
    let spec = GraphSpec {
        input: InputShape {
            height: Some(h0),
            width: Some(w0),
            channels: c0,
        },
        preprocessing: Preprocessing::identity(c0),
        layers: specs,
        descriptor_tap: last.clone(),
        backprop_start: last,
    };
    let graph = NetworkGraph::build(spec, &weights).expect("generated graph is valid");
    TinyNet {
        layers,
        input: Field::from_tensor(&input_tensor),
        graph,
        input_tensor,
        positive,
    }
}

/// Input positions `(y, x)` read by output `(i, j)` with kernel offsets.
fn window(l: &OLayer, i: usize, j: usize, h: usize, w: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for ky in 0..l.kernel.0 {
        for kx in 0..l.kernel.1 {
            let y = (i * l.stride.0 + ky) as isize - l.pad.0 as isize;
            let x = (j * l.stride.1 + kx) as isize - l.pad.1 as isize;
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                out.push((y as usize, x as usize, ky, kx));
            }
        }
    }
    out
}

fn conv_weight(w: &[f64], l: &OLayer, cout: usize, cin: usize, ky: usize, kx: usize, co: usize, ci: usize) -> f64 {
    w[((ky * l.kernel.1 + kx) * cout + co) * cin + ci]
}

/// Naive forward pass; returns every node, the image first.
pub fn forward(net: &TinyNet) -> Vec<Field> {
    let mut nodes = vec![net.input.clone()];
    for l in &net.layers {
        let a = &nodes[l.src];
        let out = match &l.op {
            Op::Relu => Field {
                v: a.v.iter().map(|&x| x.max(0.0)).collect(),
                ..a.clone()
            },
            Op::Add(j) => Field {
                v: a.v.iter().zip(&nodes[*j].v).map(|(x, y)| x + y).collect(),
                ..a.clone()
            },
            Op::Conv { w, b, cout } => {
                let oh = (a.h + 2 * l.pad.0 - l.kernel.0) / l.stride.0 + 1;
                let ow = (a.w + 2 * l.pad.1 - l.kernel.1) / l.stride.1 + 1;
                let mut o = Field::zeros(oh, ow, *cout);
                for i in 0..oh {
                    for j in 0..ow {
                        for co in 0..*cout {
                            let mut s = b[co];
                            for (y, x, ky, kx) in window(l, i, j, a.h, a.w) {
                                for ci in 0..a.c {
                                    s += a.at(y, x, ci) * conv_weight(w, l, *cout, a.c, ky, kx, co, ci);
                                }
                            }
                            o.set(i, j, co, s);
                        }
                    }
                }
                o
            }
            Op::MaxPool | Op::AvgPool => {
                let oh = (a.h + 2 * l.pad.0 - l.kernel.0) / l.stride.0 + 1;
                let ow = (a.w + 2 * l.pad.1 - l.kernel.1) / l.stride.1 + 1;
                let mut o = Field::zeros(oh, ow, a.c);
                for i in 0..oh {
                    for j in 0..ow {
                        let win = window(l, i, j, a.h, a.w);
                        for c in 0..a.c {
                            let vals = win.iter().map(|&(y, x, _, _)| a.at(y, x, c));
                            let v = if matches!(l.op, Op::MaxPool) {
                                vals.fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.sum::<f64>() / win.len() as f64
                            };
                            o.set(i, j, c, v);
                        }
                    }
                }
                o
            }
        };
        nodes.push(out);
    }
    nodes
}

/// Reference back-propagation result.
#[derive(Debug, Clone)]
pub struct OracleBackprop {
    /// Probability over every node; node 0 is the image.
    pub nodes: Vec<Field>,
    /// Per layer, the probability handed to each of its inputs.
    pub steps: Vec<Vec<Field>>,
    /// Dropped mass per layer.
    pub dropped: Vec<f64>,
    pub seed_dropped: f64,
    /// Total probability still in flight after each layer is processed, last layer first.
    pub frontier: Vec<f64>,
}

/// Evaluates the conditional probabilities directly: every input
/// neuron gathers `P(a | b) P(b)` over every output neuron `b` whose window
/// contains it, with `P(a | b) = A+ W+ / Z_b`.
pub fn backprop(net: &TinyNet, acts: &[Field], peak: (usize, usize)) -> OracleBackprop {
    let n = net.layers.len();
    let mut probs: Vec<Field> = acts.iter().map(|a| Field::zeros(a.h, a.w, a.c)).collect();
    let top = &acts[n];
    let z: f64 = (0..top.c).map(|c| top.at(peak.0, peak.1, c).max(0.0)).sum();
    let mut seed_dropped = 0.0;
    if z > 0.0 {
        for c in 0..top.c {
            probs[n].set(peak.0, peak.1, c, top.at(peak.0, peak.1, c).max(0.0) / z);
        }
    } else {
        seed_dropped = 1.0;
    }
    let mut dropped = vec![0.0; n];
    let mut frontier = Vec::new();

    let mut steps: Vec<Vec<Field>> = vec![Vec::new(); n];
    for li in (0..n).rev() {
        let l = &net.layers[li];
        let a = &acts[l.src];
        let p_out = probs[li + 1].clone();
        let out = &acts[li + 1];
        let mut pa = Field::zeros(a.h, a.w, a.c);
        match &l.op {
            Op::Relu => pa.v.clone_from(&p_out.v),
            Op::Add(j) => {
                let bsrc = &acts[*j];
                let mut pb = Field::zeros(a.h, a.w, a.c);
                for k in 0..p_out.v.len() {
                    let (x, y) = (a.v[k].max(0.0), bsrc.v[k].max(0.0));
                    let (fa, fb) = if x + y > 0.0 { (x / (x + y), y / (x + y)) } else { (0.5, 0.5) };
                    pa.v[k] = p_out.v[k] * fa;
                    pb.v[k] = p_out.v[k] * fb;
                }
                steps[li].push(pb);
            }
            Op::Conv { .. } | Op::MaxPool | Op::AvgPool => {
                let weight = |ky: usize, kx: usize, co: usize, ci: usize| -> f64 {
                    match &l.op {
                        Op::Conv { w, cout, .. } => conv_weight(w, l, *cout, a.c, ky, kx, co, ci).max(0.0),
                        _ => (co == ci) as u8 as f64,
                    }
                };
                // Normalizer of every output neuron over its whole window.
                let mut zs = Field::zeros(out.h, out.w, out.c);
                for i in 0..out.h {
                    for j in 0..out.w {
                        for co in 0..out.c {
                            let mut s = 0.0;
                            for (y, x, ky, kx) in window(l, i, j, a.h, a.w) {
                                for ci in 0..a.c {
                                    s += a.at(y, x, ci).max(0.0) * weight(ky, kx, co, ci);
                                }
                            }
                            zs.set(i, j, co, s);
                            if s <= 0.0 {
                                dropped[li] += p_out.at(i, j, co);
                            }
                        }
                    }
                }
                for y in 0..a.h {
                    for x in 0..a.w {
                        for ci in 0..a.c {
                            let mut s = 0.0;
                            for i in 0..out.h {
                                for j in 0..out.w {
                                    let oy = (y + l.pad.0) as isize - (i * l.stride.0) as isize;
                                    let ox = (x + l.pad.1) as isize - (j * l.stride.1) as isize;
                                    if oy < 0 || ox < 0 || oy as usize >= l.kernel.0 || ox as usize >= l.kernel.1 {
                                        continue;
                                    }
                                    for co in 0..out.c {
                                        let zb = zs.at(i, j, co);
                                        if zb > 0.0 {
                                            s += a.at(y, x, ci).max(0.0) * weight(oy as usize, ox as usize, co, ci)
                                                / zb
                                                * p_out.at(i, j, co);
                                        }
                                    }
                                }
                            }
                            pa.set(y, x, ci, s);
                        }
                    }
                }
            }
        }
        steps[li].insert(0, pa);
        let targets: Vec<usize> = match &l.op {
            Op::Add(j) => vec![l.src, *j],
            _ => vec![l.src],
        };
        for (t, f) in targets.iter().zip(&steps[li]) {
            for (acc, v) in probs[*t].v.iter_mut().zip(&f.v) {
                *acc += v;
            }
        }
        // Mass still pending: every node not yet processed, plus the image.
        frontier.push((0..=li).map(|k| probs[k].sum()).sum());
    }
    OracleBackprop {
        nodes: probs,
        steps,
        dropped,
        seed_dropped,
        frontier,
    }
}

/// Brute-force local maxima with the plateau rule via union-find over
/// every pair of cells.
pub fn peaks(map: &[f32], h: usize, w: usize) -> Vec<(usize, usize, f32)> {
    if h < 3 || w < 3 {
        let mut best = 0;
        for k in 1..h * w {
            if map[k] > map[best] {
                best = k;
            }
        }
        return vec![(best / w, best % w, map[best])];
    }
    let n = h * w;
    let adjacent = |a: usize, b: usize| {
        let (ay, ax, by, bx) = ((a / w) as i64, (a % w) as i64, (b / w) as i64, (b % w) as i64);
        a != b && (ay - by).abs() <= 1 && (ax - bx).abs() <= 1
    };
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for a in 0..n {
        for b in 0..n {
            if adjacent(a, b) && map[a] == map[b] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut out = Vec::new();
    for root in 0..n {
        let members: Vec<usize> = (0..n).filter(|&k| find(&mut parent, k) == root).collect();
        if members.is_empty() || members[0] != root {
            continue;
        }
        let higher = members.iter().any(|&m| (0..n).any(|o| adjacent(m, o) && map[o] > map[m]));
        if !higher {
            let first = *members.iter().min().unwrap();
            out.push((first / w, first % w, map[first]));
        }
    }
    out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    out
}

/// Positions strictly above the mean, strongest first.
pub fn seeds(map: &[f32], h: usize, w: usize) -> Vec<(usize, usize, f32)> {
    let mean: f64 = map.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
    let mut out: Vec<(usize, usize, f32)> = (0..h * w)
        .filter(|&k| map[k] as f64 > mean)
        .map(|k| (k / w, k % w, map[k]))
        .collect();
    out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    out
}

/// IoU of half-open boxes `(top, left, bottom, right)` by counting pixels.
pub fn pixel_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
    let inside = |r: (i32, i32, i32, i32), y: i32, x: i32| y >= r.0 && y < r.2 && x >= r.1 && x < r.3;
    let (lo_y, lo_x) = (a.0.min(b.0), a.1.min(b.1));
    let (hi_y, hi_x) = (a.2.max(b.2), a.3.max(b.3));
    let (mut inter, mut uni) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, y, x), inside(b, y, x));
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Greedy suppression over `(score, peak y, peak x, box)`; returns kept indices in keep order.
pub fn nms(regions: &[(f32, usize, usize, (i32, i32, i32, i32))], beta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&regions[a], &regions[b]);
        rb.0.partial_cmp(&ra.0).unwrap().then((ra.1, ra.2).cmp(&(rb.1, rb.2)))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| pixel_iou(regions[k].3, regions[i].3) <= beta) {
            kept.push(i);
        }
    }
    kept
}
