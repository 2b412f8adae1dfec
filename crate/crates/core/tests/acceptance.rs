//! Acceptance suite: one pass/fail line per criterion.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::oracle::{self, Field, OracleBackprop, TinyNet};
use dasr::descriptor::{finalize, fit_whitening};
use dasr::excitation::{backprop_layer, backprop_peak, backprop_to_input, detect_peaks, seed_pixels_above_mean, Peak, Probability};
use dasr::graph::{ActivationCache, Source};
use dasr::region::{fit_ellipse, nms, BBox, EllipseParams, SalientRegion};
use dasr::retrieval::{average_precision, recall_iou_curve, search, InstanceIndex, LocalizationCase};
use dasr::vlad::{self, Codebook, VladModel, VladRotation};
use dasr::{descriptor::Descriptor, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const TINY_NETS: u64 = 200;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn activations(net: &TinyNet, cache: &ActivationCache) -> Vec<Field> {
    let mut acts = vec![Field::from_tensor(cache.input())];
    for i in 0..net.layers.len() {
        acts.push(Field::from_tensor(cache.get(&format!("l{i}")).unwrap()));
    }
    acts
}

fn as_probability(f: &Field) -> Probability {
    Probability {
        height: f.h,
        width: f.w,
        channels: f.c,
        data: f.v.clone(),
    }
}

fn spatial_normalized(f: &Field) -> Vec<f64> {
    let s: Vec<f64> = f.v.chunks(f.c).map(|px| px.iter().sum()).collect();
    let max = s.iter().copied().fold(0.0, f64::max);
    s.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect()
}

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn start_peaks(net: &TinyNet, cache: &ActivationCache) -> Vec<Peak> {
    let top = cache.get(net.graph.backprop_start()).unwrap();
    let (h, w, _) = top.hwc().unwrap();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| Peak { y, x, response: 0.0 })
        .collect()
}

fn each_net_and_peak(mut f: impl FnMut(&TinyNet, &ActivationCache, &Peak, &OracleBackprop) -> Result<(), String>) -> Result<usize, String> {
    let mut cases = 0;
    for seed in 0..TINY_NETS {
        let net = oracle::random_net(seed);
        let cache = net.graph.forward(&net.input_tensor).map_err(|e| format!("net {seed}: {e}"))?;
        let acts = activations(&net, &cache);
        for peak in start_peaks(&net, &cache) {
            let o = oracle::backprop(&net, &acts, (peak.y, peak.x));
            f(&net, &cache, &peak, &o).map_err(|e| format!("net {seed} peak ({}, {}): {e}", peak.y, peak.x))?;
            cases += 1;
        }
    }
    Ok(cases)
}

fn backprop_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut forward_worst: f64 = 0.0;
    for seed in 0..TINY_NETS {
        let net = oracle::random_net(seed);
        let cache = net.graph.forward(&net.input_tensor).unwrap();
        let naive = oracle::forward(&net);
        for (k, f) in activations(&net, &cache).iter().enumerate() {
            forward_worst = forward_worst.max(max_abs_diff(f.v.iter().copied(), naive[k].v.iter().copied()));
        }
    }
    let cases = each_net_and_peak(|net, cache, peak, o| {
        let map = backprop_peak(&net.graph, cache, peak).map_err(|e| e.to_string())?;
        let d = max_abs_diff(map.values.data().iter().map(|&v| v as f64), spatial_normalized(&o.nodes[0]));
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("normalized map differs by {d:e}"))?;
        let (p, _) = backprop_to_input(&net.graph, cache, peak).map_err(|e| e.to_string())?;
        let d = max_abs_diff(p.data.iter().copied(), o.nodes[0].v.iter().copied());
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("input probability differs by {d:e}"))?;
        // Layer by layer from the oracle's own output probability.
        for (li, layer) in net.graph.layers().iter().enumerate() {
            let inputs: Vec<&Tensor> = net.graph.sources(li).iter().map(|&s| cache.source(s)).collect();
            let step = backprop_layer(&as_probability(&o.nodes[li + 1]), layer, &inputs, cache.output(li), net.graph.params(li))
                .map_err(|e| e.to_string())?;
            for (got, want) in step.inputs.iter().zip(&o.steps[li]) {
                let d = max_abs_diff(got.data.iter().copied(), want.v.iter().copied());
                worst = worst.max(d);
                ensure(d <= 1e-6, || format!("layer {} differs by {d:e}", layer.name))?;
            }
        }
        Ok(())
    })?;
    let elapsed = t.elapsed();
    ensure(elapsed <= Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{TINY_NETS} nets, {cases} peaks, max per-pixel error {worst:.1e}, forward max error {forward_worst:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn mass_conservation() -> Outcome {
    let mut conserved_steps = 0;
    let mut lossy_steps = 0;
    let cases = each_net_and_peak(|net, cache, peak, o| {
        let graph = &net.graph;
        let start = graph.layer_index(graph.backprop_start()).unwrap();
        let (seed, seed_dropped) = dasr::excitation::seed_probability(cache.output(start), peak).map_err(|e| e.to_string())?;
        ensure((seed_dropped - o.seed_dropped).abs() <= 1e-12, || "seed dropped mass differs".into())?;
        let mut pending: Vec<Option<Probability>> = vec![None; start + 1];
        pending[start] = Some(seed);
        let mut at_input = Probability::zeros(o.nodes[0].h, o.nodes[0].w, o.nodes[0].c);
        let mut previous = 1.0 - seed_dropped;
        for li in (0..=start).rev() {
            let p_out = pending[li].take().unwrap_or_else(|| Probability::zeros(o.nodes[li + 1].h, o.nodes[li + 1].w, o.nodes[li + 1].c));
            let inputs: Vec<&Tensor> = graph.sources(li).iter().map(|&s| cache.source(s)).collect();
            let step = backprop_layer(&p_out, &graph.layers()[li], &inputs, cache.output(li), graph.params(li)).map_err(|e| e.to_string())?;
            ensure((step.dropped - o.dropped[li]).abs() <= 1e-6, || {
                format!("layer {li} dropped {} vs oracle {}", step.dropped, o.dropped[li])
            })?;
            for (s, p) in graph.sources(li).iter().zip(step.inputs) {
                let slot = match *s {
                    Source::Input => &mut at_input,
                    Source::Layer(j) => pending[j].get_or_insert_with(|| Probability::zeros(p.height, p.width, p.channels)),
                };
                for (a, b) in slot.data.iter_mut().zip(&p.data) {
                    *a += b;
                }
            }
            let total: f64 = at_input.mass() + pending.iter().flatten().map(Probability::mass).sum::<f64>();
            ensure(total <= previous + 1e-9, || format!("mass grew from {previous} to {total} at layer {li}"))?;
            ensure((total - o.frontier[start - li]).abs() <= 1e-6, || "frontier mass differs from oracle".into())?;
            if o.dropped[li] == 0.0 {
                ensure((total - previous).abs() <= 1e-6, || format!("mass not conserved at layer {li}: {previous} -> {total}"))?;
                conserved_steps += 1;
            } else {
                lossy_steps += 1;
            }
            previous = total;
        }
        let (_, diag) = backprop_to_input(graph, cache, peak).map_err(|e| e.to_string())?;
        for (name, d) in &diag.dropped {
            let li = graph.layer_index(name).unwrap();
            ensure((d - o.dropped[li]).abs() <= 1e-6, || format!("diagnostics for {name} differ"))?;
        }
        let map = backprop_peak(graph, cache, peak).map_err(|e| e.to_string())?;
        ensure((map.mass + diag.total_dropped() - 1.0).abs() <= 1e-6, || "arrived plus dropped mass is not 1".into())?;
        Ok(())
    })?;
    ensure(conserved_steps > 0 && lossy_steps > 0, || "fixtures do not cover both regimes".into())?;
    Ok(format!("{cases} peaks, {conserved_steps} lossless layer steps conserved, {lossy_steps} lossy steps matched the oracle"))
}

fn scale_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    let cases = each_net_and_peak(|net, cache, peak, _| {
        let a = backprop_peak(&net.graph, cache, peak).map_err(|e| e.to_string())?;
        let b = backprop_peak(&net.graph, &cache.scaled(7.3), peak).map_err(|e| e.to_string())?;
        let d = max_abs_diff(a.values.data().iter().map(|&v| v as f64), b.values.data().iter().map(|&v| v as f64));
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("scaled map differs by {d:e}"))
    })?;
    // The toy residual network on a synthetic image.
    let (_, graph) = dasr::cli::template_network("toy", 7).unwrap();
    let img = common::synthetic_image(3);
    let pre = dasr::ingest::preprocess_image(&img, &dasr::ingest::PreprocessSpec { long_side: 64 }, &graph.spec().preprocessing).unwrap();
    let cache = graph.forward(&pre.tensor).unwrap();
    let scaled = cache.scaled(7.3);
    let mean = dasr::graph::mean_activation_map(&cache, graph.backprop_start()).unwrap();
    let peaks = seed_pixels_above_mean(&mean).unwrap();
    for p in peaks.iter().take(25) {
        let a = backprop_peak(&graph, &cache, p).unwrap();
        let b = backprop_peak(&graph, &scaled, p).unwrap();
        let d = max_abs_diff(a.values.data().iter().map(|&v| v as f64), b.values.data().iter().map(|&v| v as f64));
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("toy net peak ({}, {}) differs by {d:e}", p.y, p.x))?;
    }
    Ok(format!("{} maps, max difference {worst:.1e}", cases + peaks.len().min(25)))
}

fn random_map(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f32>) {
    let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
    let plateaus = rng.random_bool(0.5);
    let v = (0..h * w)
        .map(|_| if plateaus { rng.random_range(0..4) as f32 } else { rng.random::<f32>() })
        .collect();
    (h, w, v)
}

fn peak_seed_nms_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let as_tuples = |p: Vec<Peak>| p.into_iter().map(|p| (p.y, p.x, p.response)).collect::<Vec<_>>();
    let mut peaks_seen = 0;
    for i in 0..1000 {
        let (h, w, v) = random_map(&mut rng);
        let t = Tensor::new(vec![h, w], v.clone()).unwrap();
        let got = as_tuples(detect_peaks(&t).unwrap());
        let want = oracle::peaks(&v, h, w);
        ensure(got == want, || format!("peaks instance {i} ({h}x{w}): got {got:?}, want {want:?}"))?;
        peaks_seen += got.len();
    }
    for i in 0..1000 {
        let (h, w, v) = random_map(&mut rng);
        let t = Tensor::new(vec![h, w], v.clone()).unwrap();
        let got = as_tuples(seed_pixels_above_mean(&t).unwrap());
        ensure(got == oracle::seeds(&v, h, w), || format!("seed instance {i} differs"))?;
    }
    let mut kept_total = 0;
    let mut grid: Vec<(usize, usize)> = (0..20).flat_map(|y| (0..20).map(move |x| (y, x))).collect();
    for i in 0..1000 {
        let n = rng.random_range(0..=12);
        grid.shuffle(&mut rng);
        let beta = match i % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let raw: Vec<(f32, usize, usize, (i32, i32, i32, i32))> = (0..n)
            .map(|k| {
                let (t, l) = (rng.random_range(0..15), rng.random_range(0..15));
                let (bh, bw) = (rng.random_range(1..9), rng.random_range(1..9));
                let score = rng.random_range(1..5) as f32 / 4.0;
                (score, grid[k].0, grid[k].1, (t, l, t + bh, l + bw))
            })
            .collect();
        let regions: Vec<SalientRegion> = raw
            .iter()
            .map(|&(score, y, x, b)| SalientRegion {
                peak: Peak { y, x, response: score },
                ellipse: EllipseParams::from_moments(y as f64, x as f64, 1.0, 0.0, 1.0, 1),
                bbox: BBox::new(b.0, b.1, b.2, b.3),
                score,
                probability_mass: 1.0,
            })
            .collect();
        let got: Vec<(usize, usize)> = nms(regions, beta).iter().map(|r| (r.peak.y, r.peak.x)).collect();
        let want: Vec<(usize, usize)> = oracle::nms(&raw, beta).iter().map(|&k| (raw[k].1, raw[k].2)).collect();
        ensure(got == want, || format!("nms instance {i} (beta {beta}): got {got:?}, want {want:?}"))?;
        kept_total += got.len();
    }
    Ok(format!("3 x 1000 instances exact ({peaks_seen} peaks, {kept_total} regions kept)"))
}

fn rectangle_map(h: usize, w: usize, top: usize, left: usize, rh: usize, rw: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |k| {
        let (y, x) = (k / w, k % w);
        (y >= top && y < top + rh && x >= left && x < left + rw) as u8 as f32
    })
}

fn rotate90(t: &Tensor) -> Tensor {
    let (h, w) = (t.dims()[0], t.dims()[1]);
    // new[y][x] = old[x][w - 1 - y], shape (w, h)
    Tensor::from_fn(&[w, h], |k| {
        let (y, x) = (k / h, k % h);
        t.at2(x, w - 1 - y)
    })
}

fn ellipse_fixture() -> Outcome {
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for rh in 1..=12 {
        for rw in 1..=12 {
            let map = rectangle_map(18, 22, 2 + rh % 3, 3 + rw % 4, rh, rw);
            let e = fit_ellipse(&map, 0.5).map_err(|e| e.to_string())?;
            ensure(e.mxy == 0.0, || format!("{rh}x{rw}: mxy = {}", e.mxy))?;
            let ratio = e.major / e.minor;
            let want = rh.max(rw) as f64 / rh.min(rw) as f64;
            worst = worst.max((ratio - want).abs());
            ensure((ratio - want).abs() <= 1e-6, || format!("{rh}x{rw}: axis ratio {ratio}, want {want}"))?;
            let r = fit_ellipse(&rotate90(&map), 0.5).map_err(|e| e.to_string())?;
            ensure(r.mxx == e.myy && r.myy == e.mxx && r.mxy == 0.0, || format!("{rh}x{rw}: rotation does not swap moments"))?;
            ensure(r.major == e.major && r.minor == e.minor, || format!("{rh}x{rw}: rotation changes axis lengths"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} rectangles, mxy = 0, max ratio error {worst:.1e}, rotations swap exactly"))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn descriptor_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 16;
    let train: Vec<Vec<f32>> = (0..200).map(|_| (0..d).map(|_| gaussian(&mut rng) as f32).collect()).collect();
    let model = fit_whitening(&train, None).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for _ in 0..500 {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-512i32..=512) as f32 / 64.0).collect();
        let base = finalize(&v, &model).map_err(|e| e.to_string())?;
        let pow2 = 2f32.powi(rng.random_range(-10..=10));
        let odd = (2 * rng.random_range(1..128) + 1) as f32;
        for s in [pow2, odd, pow2 * odd] {
            let scaled: Vec<f32> = v.iter().map(|&x| x * s).collect();
            ensure(v.iter().zip(&scaled).all(|(&x, &y)| x as f64 * s as f64 == y as f64), || "scaled input not exact".into())?;
            ensure(finalize(&scaled, &model).map_err(|e| e.to_string())? == base, || format!("scale {s} changes the output"))?;
            checked += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for &dim in &[4usize, 8, 16, 32] {
        let n = 10 * dim;
        // Known covariance Q diag(lambda) Q^T with a bounded spectrum.
        let g = nalgebra::DMatrix::from_fn(dim, dim, |_, _| gaussian(&mut rng));
        let q = g.qr().q();
        let lambda: Vec<f64> = (0..dim).map(|_| rng.random_range(0.25..4.0)).collect();
        let mix: Vec<f64> = (0..dim * dim).map(|k| q[(k / dim, k % dim)] * lambda[k % dim].sqrt()).collect();
        let shift: Vec<f64> = (0..dim).map(|_| 3.0 * gaussian(&mut rng)).collect();
        let samples: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
                (0..dim)
                    .map(|r| (shift[r] + (0..dim).map(|c| mix[r * dim + c] * z[c]).sum::<f64>()) as f32)
                    .collect()
            })
            .collect();
        let m = fit_whitening(&samples, None).map_err(|e| e.to_string())?;
        let white: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| m.apply(s).unwrap().into_iter().map(|v| v as f64).collect())
            .collect();
        let mean: Vec<f64> = (0..dim).map(|j| white.iter().map(|w| w[j]).sum::<f64>() / n as f64).collect();
        let mut err2 = 0.0;
        for a in 0..dim {
            for b in 0..dim {
                let c = white.iter().map(|w| (w[a] - mean[a]) * (w[b] - mean[b])).sum::<f64>() / n as f64;
                let target = (a == b) as u8 as f64;
                err2 += (c - target).powi(2);
            }
        }
        let rel = err2.sqrt() / (dim as f64).sqrt();
        worst = worst.max(rel);
        ensure(rel <= 0.05, || format!("d = {dim}: whitened covariance error {rel:.4}"))?;
    }
    Ok(format!("{checked} exact scale checks; whitened covariance max relative error {worst:.1e} (d = 4..32, n = 10d)"))
}

/// Step-by-step VLAD reference.
fn vlad_oracle(bag: &[Vec<f32>], centroids: &[Vec<f32>], rotation: Option<&VladRotation>) -> Vec<f64> {
    let d = centroids[0].len();
    let mut acc = vec![0.0f64; centroids.len() * d];
    for v in bag {
        let dists: Vec<f64> = centroids
            .iter()
            .map(|c| c.iter().zip(v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
            .collect();
        let mut best = 0;
        for (k, &dist) in dists.iter().enumerate() {
            if dist < dists[best] {
                best = k;
            }
        }
        for j in 0..d {
            acc[best * d + j] += v[j] as f64 - centroids[best][j] as f64;
        }
    }
    if let Some(r) = rotation {
        let dim = acc.len();
        acc = (0..dim).map(|i| (0..dim).map(|j| r.rows[i * dim + j] as f64 * acc[j]).sum()).collect();
    }
    let powered: Vec<f64> = acc.iter().map(|&z| z.signum() * z.abs().sqrt()).collect();
    let norm = powered.iter().map(|x| x * x).sum::<f64>().sqrt();
    powered.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
}

fn random_bag(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

fn vlad_criteria() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 8;
    let mut worst: f64 = 0.0;
    let mut order_checks = 0;
    for case in 0..200 {
        let k = rng.random_range(1..=4);
        let train = random_bag(&mut rng, 40, d);
        let codebook = vlad::train_codebook(&train, k, case).map_err(|e| e.to_string())?;
        let rotation = if case % 2 == 0 {
            let accs: Vec<Vec<f32>> = (0..12)
                .map(|_| {
                    let bag = random_bag(&mut rng, 6, d);
                    vlad::residual_accumulator(&bag, &codebook).unwrap().into_iter().map(|v| v as f32).collect()
                })
                .collect();
            Some(vlad::train_rotation(&accs).map_err(|e| e.to_string())?)
        } else {
            None
        };
        let model = VladModel {
            codebook: codebook.clone(),
            rotation: rotation.clone(),
        };
        let n = rng.random_range(1..30);
        let mut bag = random_bag(&mut rng, n, d);
        let v = vlad::encode(&bag, &model).map_err(|e| e.to_string())?;
        let want = vlad_oracle(&bag, &codebook.centroids, rotation.as_ref());
        let diff = max_abs_diff(v.values.iter().map(|&x| x as f64), want);
        worst = worst.max(diff);
        ensure(diff <= 1e-6, || format!("case {case}: encode differs from oracle by {diff:e}"))?;
        for _ in 0..3 {
            bag.shuffle(&mut rng);
            ensure(vlad::encode(&bag, &model).map_err(|e| e.to_string())? == v, || format!("case {case}: order changes the vector"))?;
            order_checks += 1;
        }
    }
    let mut symmetric = 0;
    for _ in 0..100 {
        let c: Vec<f32> = (0..d).map(|_| rng.random_range(-64i32..64) as f32 / 16.0).collect();
        let model = VladModel {
            codebook: Codebook {
                centroids: vec![c.clone()],
                seed: 0,
                iterations: 0,
                inertia: 0.0,
            },
            rotation: None,
        };
        let mut bag = Vec::new();
        for _ in 0..rng.random_range(1..6) {
            let r: Vec<f32> = (0..d).map(|_| rng.random_range(-64i32..64) as f32 / 32.0).collect();
            bag.push(c.iter().zip(&r).map(|(a, b)| a + b).collect::<Vec<f32>>());
            bag.push(c.iter().zip(&r).map(|(a, b)| a - b).collect::<Vec<f32>>());
        }
        bag.shuffle(&mut rng);
        let v = vlad::encode(&bag, &model).map_err(|e| e.to_string())?;
        ensure(!v.valid && v.values.iter().all(|&x| x == 0.0), || "symmetric bag is not the zero vector".into())?;
        symmetric += 1;
    }
    Ok(format!(
        "200 encodes within {worst:.1e} of the oracle, {order_checks} permutations exact, {symmetric} symmetric k=1 bags zero"
    ))
}

fn metrics() -> Outcome {
    let ranking = ["a", "b", "c", "d", "e"];
    let relevant = ["a", "c"].iter().map(|s| s.to_string()).collect();
    let ap = average_precision(ranking, &relevant, Some(5));
    ensure((ap - 0.833_333_333_333).abs() <= 1e-6, || format!("fixture AP {ap}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (t, l) = (rng.random_range(0..20), rng.random_range(0..20));
        BBox::new(t, l, t + rng.random_range(1..12), l + rng.random_range(1..12))
    };
    for i in 0..1000 {
        let cases: Vec<LocalizationCase> = (0..rng.random_range(1..8))
            .map(|_| LocalizationCase {
                truth: rand_box(&mut rng),
                detections: (0..rng.random_range(0..5)).map(|_| rand_box(&mut rng)).collect(),
            })
            .collect();
        let curve = recall_iou_curve(&cases, &grid);
        ensure(curve.windows(2).all(|w| w[1].1 <= w[0].1), || format!("curve {i} increases: {curve:?}"))?;
    }

    let unit = |rng: &mut ChaCha8Rng| {
        let mut v: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        dasr::linalg::l2_normalize(&mut v);
        v
    };
    let mut records = Vec::new();
    for img in 0..20 {
        for region in 0..3 {
            records.push(Descriptor {
                image_id: format!("img{img:02}"),
                region_id: region,
                bbox: BBox::new(0, 0, 4, 4),
                score: 1.0,
                vector: unit(&mut rng),
                normalized: true,
            });
        }
    }
    let index = InstanceIndex::from_store(dasr::descriptor::DescriptorStore {
        dim: 16,
        normalized: true,
        records: records.clone(),
    })
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for r in &records {
        let list = search("q", &r.vector, &index).map_err(|e| e.to_string())?;
        let top = &list.hits[0];
        ensure(top.image_id == r.image_id && top.region_id == r.region_id, || format!("self query {} ranks {}", r.image_id, top.image_id))?;
        worst = worst.max((top.score as f64 - 1.0).abs());
        ensure((top.score - 1.0).abs() <= 1e-6, || format!("self score {}", top.score))?;
    }
    Ok(format!("AP fixture {ap:.6}, 1000 monotone curves, {} self queries first (|score - 1| <= {worst:.1e})", records.len()))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dasr")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`dasr {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn full_run(root: &Path, images: &Path, workers: &str) -> Result<(), String> {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let img = images.to_string_lossy().into_owned();
    run_cli(&["toy-net", "--out-dir", &p("net"), "--seed", "7"])?;
    let net = [String::from("--weights"), p("net/toy.dasr"), "--graph".into(), p("net/toy.graph"), "--long-side".into(), "64".into()];
    let net: Vec<&str> = net.iter().map(String::as_str).collect();
    let mut extract = vec!["extract", "--images", &img, "--out", "raw"];
    extract.extend(&net);
    extract.extend(["--workers", workers]);
    let raw = p("raw.store");
    extract[4] = &raw;
    run_cli(&extract)?;
    run_cli(&["train-whiten", "--store", &p("raw.store"), "--out", &p("whiten.dasr")])?;
    run_cli(&["index", "--store", &p("raw.store"), "--whiten", &p("whiten.dasr"), "--out", &p("index.store")])?;
    std::fs::write(
        root.join("queries.txt"),
        format!("q0 {img}/img00.png\nq1 {img}/img03.png 8,8,30,40\nq2 {img}/img07.png 0 0 20 20\n"),
    )
    .map_err(|e| e.to_string())?;
    let mut s = vec!["search", "--index", "", "--whiten", "", "--queries", "", "--topk", "5", "--out", ""];
    let (index, whiten, queries, results) = (p("index.store"), p("whiten.dasr"), p("queries.txt"), p("results.txt"));
    s[2] = &index;
    s[4] = &whiten;
    s[6] = &queries;
    s[10] = &results;
    s.extend(&net);
    run_cli(&s)?;
    run_cli(&["train-vlad", "--store", &p("index.store"), "--k", "4", "--seed", "11", "--out", &p("vlad.dasr")])?;
    run_cli(&["encode", "--store", &p("index.store"), "--vlad", &p("vlad.dasr"), "--out", &p("vlad.store")])?;
    run_cli(&["search-images", "--vectors", &p("vlad.store"), "--all", "--out", &p("image-results.txt")])?;
    Ok(())
}

fn end_to_end_determinism() -> Outcome {
    let corpus = tempfile::tempdir().map_err(|e| e.to_string())?;
    common::write_corpus(corpus.path(), 10);
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    full_run(a.path(), corpus.path(), "1")?;
    full_run(b.path(), corpus.path(), "4")?;
    let artifacts = [
        "raw.store",
        "raw.store.regions.txt",
        "raw.store.manifest.json",
        "whiten.dasr",
        "index.store",
        "index.store.manifest.json",
        "results.txt",
        "vlad.dasr",
        "vlad.store",
        "image-results.txt",
    ];
    for name in artifacts {
        let x = std::fs::read(a.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    let store = dasr::descriptor::DescriptorStore::read(a.path().join("raw.store")).map_err(|e| e.to_string())?;
    let results = std::fs::read_to_string(a.path().join("results.txt")).map_err(|e| e.to_string())?;
    ensure(!store.records.is_empty() && results.lines().count() > 3, || "pipeline produced no output".into())?;
    Ok(format!(
        "10 images, {} regions; {} artifacts byte-identical across runs with 1 and 4 workers",
        store.records.len(),
        artifacts.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("backprop oracle equivalence", backprop_oracle_equivalence),
        ("mass conservation", mass_conservation),
        ("scale invariance", scale_invariance),
        ("peak, seed and NMS oracles", peak_seed_nms_oracles),
        ("ellipse rectangle fixture", ellipse_fixture),
        ("descriptor pipeline", descriptor_pipeline),
        ("VLAD", vlad_criteria),
        ("metrics", metrics),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
