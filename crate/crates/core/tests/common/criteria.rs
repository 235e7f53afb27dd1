//! Oracles and whole-criterion checks shared by the test suites and the
//! acceptance harness. Every check panics on the first violation.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use runet::loss::{self, LossConfig};
use runet::metrics;
use runet::morphology::label_components;
use runet::net::{build_default_spec, Network, RfVariant};
use runet::ops::{self, ConvParams};
use runet::preprocess::{self, OTSU_BINS};
use runet::roi::{self, BBox3, Level};
use runet::{Shape, Spacing, Tape, TensorId, Triple, Volume};

use super::*;

/// Direct nested-loop cross-correlation.
pub fn conv_oracle(x: &Volume, w: &Volume, bias: &[f32], p: &ConvParams) -> Volume {
    let s = x.shape();
    let od = p.output_dims(s.dims()).unwrap();
    let mut out = Volume::zeros(Shape::new(s.n, p.out_channels, od[0], od[1], od[2]));
    for n in 0..s.n {
        for oc in 0..p.out_channels {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut acc = bias.get(oc).copied().unwrap_or(0.0) as f64;
                        for ic in 0..s.c {
                            for kz in 0..p.kernel[0] {
                                for ky in 0..p.kernel[1] {
                                    for kx in 0..p.kernel[2] {
                                        let iz = (oz * p.stride[0] + kz * p.dilation[0]) as isize - p.padding[0] as isize;
                                        let iy = (oy * p.stride[1] + ky * p.dilation[1]) as isize - p.padding[1] as isize;
                                        let ix = (ox * p.stride[2] + kx * p.dilation[2]) as isize - p.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= s.d as isize || iy >= s.h as isize || ix >= s.w as isize {
                                            continue;
                                        }
                                        acc += x.get(n, ic, iz as usize, iy as usize, ix as usize) as f64
                                            * w.get(oc, ic, kz, ky, kx) as f64;
                                    }
                                }
                            }
                        }
                        out.set(n, oc, oz, oy, ox, acc as f32);
                    }
                }
            }
        }
    }
    out
}

/// Gradient check harness: the tape builds `op` on leaves `inputs`, the loss is
/// `sum(weights * output)`. Every input that requires a gradient is checked
/// along a random direction and at its largest-gradient coordinates.
pub fn gradcheck(
    name: &str,
    inputs: Vec<(Volume, bool)>,
    op: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId,
    seed: u64,
) {
    let mut r = rng(seed);
    let eval = |vals: &[Volume]| -> (Tape, Vec<TensorId>, TensorId) {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = vals.iter().zip(&inputs).map(|(v, (_, g))| t.leaf(v.clone(), *g)).collect();
        let out = op(&mut t, &ids);
        (t, ids, out)
    };
    let values: Vec<Volume> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (t0, _, out0) = eval(&values);
    let weights = random_volume(t0.value(out0).shape(), &mut r);
    let loss_of = |vals: &[Volume]| -> f64 {
        let (t, _, out) = eval(vals);
        t.value(out).data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut t = Tape::new();
    let ids: Vec<TensorId> = values.iter().zip(&inputs).map(|(v, (_, g))| t.leaf(v.clone(), *g)).collect();
    let out = op(&mut t, &ids);
    let w = t.constant(weights.clone());
    let prod = t.mul(out, w).unwrap();
    let loss = t.sum(prod).unwrap();
    let grads = t.backward(loss).unwrap();

    for (k, (_, needs)) in inputs.iter().enumerate() {
        if !needs {
            continue;
        }
        let g = grads.get(ids[k]).unwrap_or_else(|| panic!("{name}: no gradient for input {k}"));
        let dir = random_volume(values[k].shape(), &mut r);
        let analytic: f64 = g.data().iter().zip(dir.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let numeric = directional_fd(&values[k], dir.data(), 1e-3, &|v| {
            let mut vals = values.clone();
            vals[k] = v.clone();
            loss_of(&vals)
        });
        let rel = relative_error(analytic, numeric);
        assert!(rel < 1e-2, "{name} input {k}: directional analytic {analytic} numeric {numeric} rel {rel}");
        for i in top_k(g.data(), 4) {
            let mut e = vec![0.0f32; values[k].len()];
            e[i] = 1.0;
            let numeric = directional_fd(&values[k], &e, 1e-3, &|v| {
                let mut vals = values.clone();
                vals[k] = v.clone();
                loss_of(&vals)
            });
            let rel = relative_error(g.data()[i] as f64, numeric);
            assert!(rel < 1e-2, "{name} input {k}[{i}]: analytic {} numeric {numeric} rel {rel}", g.data()[i]);
        }
    }
}

pub fn conv3d_matches_nested_loop_oracle() {
    let mut r = rng(11);
    let x = random_volume(Shape::new(1, 2, 4, 6, 6), &mut r);
    let configs = [
        ConvParams::same(2, 3, [3, 3, 3], [1, 1, 1]),
        ConvParams::same(2, 3, [1, 3, 3], [1, 2, 2]),
        ConvParams::same(2, 4, [3, 3, 3], [1, 2, 2]),
        ConvParams::pointwise(2, 5),
        ConvParams {
            kernel: [2, 3, 2],
            stride: [2, 1, 2],
            dilation: [1, 1, 2],
            padding: [0, 1, 1],
            in_channels: 2,
            out_channels: 3,
        },
    ];
    for p in configs {
        let w = random_volume(p.weight_shape(), &mut r);
        let b: Vec<f32> = (0..p.out_channels).map(|i| i as f32 * 0.1 - 0.2).collect();
        let fast = ops::conv3d(&x, &w, &b, &p).unwrap();
        let slow = conv_oracle(&x, &w, &b, &p);
        assert_eq!(fast.shape(), slow.shape());
        let diff = fast.max_abs_diff(&slow);
        assert!(diff < 1e-5, "{p:?}: max abs diff {diff}");
    }
}

pub fn gradcheck_conv3d() {
    let mut r = rng(21);
    let p = ConvParams::same(2, 3, [3, 3, 3], [1, 2, 2]);
    let x = random_volume(Shape::new(1, 2, 3, 5, 5), &mut r);
    let w = random_volume(p.weight_shape(), &mut r);
    let b = runet::tape::vector(vec![0.1, -0.2, 0.3]);
    gradcheck("conv3d", vec![(x, true), (w, true), (b, true)], &|t, ids| t.conv3d(ids[0], ids[1], Some(ids[2]), p).unwrap(), 1);
}

pub fn gradcheck_strided_and_pointwise_conv() {
    let mut r = rng(22);
    let p = ConvParams {
        kernel: [2, 3, 3],
        stride: [2, 2, 1],
        dilation: [1, 1, 2],
        padding: [1, 1, 2],
        in_channels: 2,
        out_channels: 2,
    };
    let x = random_volume(Shape::new(1, 2, 4, 6, 5), &mut r);
    let w = random_volume(p.weight_shape(), &mut r);
    gradcheck("strided conv", vec![(x, true), (w, true)], &|t, ids| t.conv3d(ids[0], ids[1], None, p).unwrap(), 2);
    let q = ConvParams::pointwise(3, 2);
    let x = random_volume(Shape::new(1, 3, 2, 3, 3), &mut r);
    let w = random_volume(q.weight_shape(), &mut r);
    gradcheck("pointwise conv", vec![(x, true), (w, true)], &|t, ids| t.conv3d(ids[0], ids[1], None, q).unwrap(), 3);
}

pub fn gradcheck_maxpool() {
    let mut r = rng(23);
    let x = random_volume(Shape::new(1, 2, 4, 4, 4), &mut r);
    gradcheck("maxpool", vec![(x, true)], &|t, ids| t.maxpool3d(ids[0], [2, 2, 2], [2, 2, 2]).unwrap(), 4);
}

pub fn gradcheck_upconv() {
    let mut r = rng(24);
    let x = random_volume(Shape::new(1, 3, 2, 2, 3), &mut r);
    let w = random_volume(Shape::new(3, 2, 2, 2, 2), &mut r);
    gradcheck("upconv", vec![(x, true), (w, true)], &|t, ids| t.upconv3d(ids[0], ids[1], [2, 2, 2]).unwrap(), 5);
}

pub fn gradcheck_instance_norm() {
    let mut r = rng(25);
    let x = random_volume(Shape::new(1, 2, 2, 3, 4), &mut r);
    let g = runet::tape::vector(vec![1.3, 0.7]);
    let b = runet::tape::vector(vec![0.1, -0.4]);
    gradcheck("instance_norm", vec![(x, true), (g, true), (b, true)], &|t, ids| {
        t.instance_norm(ids[0], ids[1], ids[2], ops::DEFAULT_EPS).unwrap()
    }, 6);
}

pub fn gradcheck_elementwise() {
    let mut r = rng(26);
    let shape = Shape::new(1, 2, 2, 3, 3);
    let a = random_volume(shape, &mut r);
    let b = random_volume(shape, &mut r).map(|v| v.abs() + 0.5);
    gradcheck("relu", vec![(a.clone(), true)], &|t, ids| t.relu(ids[0]).unwrap(), 7);
    gradcheck("sigmoid", vec![(a.clone(), true)], &|t, ids| t.sigmoid(ids[0]).unwrap(), 8);
    gradcheck("add", vec![(a.clone(), true), (b.clone(), true)], &|t, ids| t.add(ids[0], ids[1]).unwrap(), 9);
    gradcheck("sub", vec![(a.clone(), true), (b.clone(), true)], &|t, ids| t.sub(ids[0], ids[1]).unwrap(), 10);
    gradcheck("mul", vec![(a.clone(), true), (b.clone(), true)], &|t, ids| t.mul(ids[0], ids[1]).unwrap(), 11);
    gradcheck("div", vec![(a.clone(), true), (b.clone(), true)], &|t, ids| t.div(ids[0], ids[1]).unwrap(), 12);
    gradcheck("scale+offset", vec![(a.clone(), true)], &|t, ids| {
        let s = t.scale(ids[0], -2.5).unwrap();
        t.offset(s, 0.75).unwrap()
    }, 13);
    gradcheck("crop", vec![(a, true)], &|t, ids| t.crop(ids[0], [1, 0, 1], [1, 2, 2]).unwrap(), 14);
}

/// Breadth-first 26-connected flood fill; components in raster order of
/// their first voxel, each as a sorted voxel list.
pub fn flood_fill(v: &Volume) -> Vec<Vec<Triple>> {
    let [d, h, w] = v.dims();
    let mut seen = vec![false; d * h * w];
    let mut comps = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if v.at([z, y, x]) == 0.0 || seen[i] {
                    continue;
                }
                seen[i] = true;
                let mut comp = Vec::new();
                let mut q = VecDeque::from([[z, y, x]]);
                while let Some(p) = q.pop_front() {
                    comp.push(p);
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let n = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                                if n.iter().zip([d, h, w]).any(|(&c, e)| c < 0 || c >= e as i64) {
                                    continue;
                                }
                                let n = n.map(|c| c as usize);
                                let j = (n[0] * h + n[1]) * w + n[2];
                                if v.at(n) != 0.0 && !seen[j] {
                                    seen[j] = true;
                                    q.push_back(n);
                                }
                            }
                        }
                    }
                }
                comp.sort();
                comps.push(comp);
            }
        }
    }
    comps
}

pub fn components_match_flood_fill_exactly() {
    let mut r = rng(10);
    for (trial, p) in [0.05, 0.15, 0.3, 0.5].into_iter().cycle().take(24).enumerate() {
        let dims = [r.random_range(1..8), r.random_range(1..10), r.random_range(1..10)];
        let v = random_binary(Shape::spatial(dims), p, &mut r);
        let lab = label_components(&v);
        let oracle = flood_fill(&v);
        assert_eq!(lab.components.len(), oracle.len(), "trial {trial}");
        let mut by_label: HashMap<u32, Vec<Triple>> = HashMap::new();
        for (i, &l) in lab.labels.iter().enumerate() {
            if l != 0 {
                by_label.entry(l).or_default().push([i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]);
            }
        }
        for (k, comp) in oracle.iter().enumerate() {
            let mut got = by_label.remove(&(k as u32 + 1)).unwrap();
            got.sort();
            assert_eq!(&got, comp, "trial {trial} component {k}");
            assert_eq!(lab.components[k].voxels, comp.len());
        }
    }
}

pub fn pyramid_scaling_is_exact_and_invertible() {
    let strides = [[2, 2, 2], [1, 2, 2]];
    let cum = [2, 4, 4];
    let mut r = rng(12);
    for _ in 0..1000 {
        let extent = [r.random_range(1..30), r.random_range(1..60), r.random_range(1..60)];
        let start = extent.map(|e| r.random_range(0..e));
        let size = [0, 1, 2].map(|a| r.random_range(1..=extent[a] - start[a]));
        let margin = r.random_range(0..3);
        let p = roi::build_pyramid(BBox3::new(Level::III, start, size), strides, margin, extent).unwrap();
        let (l3, l2, l1) = (p.levels[0], p.levels[1], p.levels[2]);
        assert!(l3.fits(extent));
        for a in 0..3 {
            assert_eq!(l1.size[a], l3.size[a] * cum[a]);
            assert_eq!(l1.start[a], l3.start[a] * cum[a]);
            assert_eq!(l1.size[a] / cum[a], l3.size[a]);
            assert_eq!(l1.size[a] % cum[a], 0);
        }
        assert_eq!(l2.unscaled(strides[0], Level::III), Some(l3));
        assert_eq!(l1.unscaled(strides[1], Level::II), Some(l2));
    }
}

pub fn cube(dims: [usize; 3], start: [usize; 3], size: [usize; 3]) -> Volume {
    let mut v = Volume::zeros(Shape::spatial(dims));
    for z in start[0]..start[0] + size[0] {
        for y in start[1]..start[1] + size[1] {
            for x in start[2]..start[2] + size[2] {
                v.set(0, 0, z, y, x, 1.0);
            }
        }
    }
    v
}

/// Surface by definition, distances by exhaustive pairing.
pub fn brute_asd(p: &Volume, g: &Volume, spacing: Spacing) -> f64 {
    let surface = |v: &Volume| -> Vec<[f64; 3]> {
        let [d, h, w] = v.dims();
        let fg = |z: i64, y: i64, x: i64| {
            z >= 0 && y >= 0 && x >= 0 && z < d as i64 && y < h as i64 && x < w as i64 && v.at([z as usize, y as usize, x as usize]) != 0.0
        };
        let mut out = Vec::new();
        for p in v.nonzero_coords() {
            let [z, y, x] = p.map(|c| c as i64);
            let faces = [(z - 1, y, x), (z + 1, y, x), (z, y - 1, x), (z, y + 1, x), (z, y, x - 1), (z, y, x + 1)];
            if faces.iter().any(|&(a, b, c)| !fg(a, b, c)) {
                out.push([0, 1, 2].map(|a| p[a] as f64 * spacing[a]));
            }
        }
        out
    };
    let (sp, sg) = (surface(p), surface(g));
    let nearest = |a: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = sp.iter().map(|a| nearest(a, &sg)).sum::<f64>() + sg.iter().map(|a| nearest(a, &sp)).sum::<f64>();
    total / (sp.len() + sg.len()) as f64
}

/// Best threshold bin by direct between-class variance over every split.
pub fn exhaustive_otsu_bin(v: &Volume) -> usize {
    let (min, max) = v.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let width = (max - min) / OTSU_BINS as f32;
    let bins: Vec<usize> = v.data().iter().map(|&x| preprocess::histogram_bin(x, min, width)).collect();
    let mut best = (f64::NEG_INFINITY, 0);
    for t in 0..OTSU_BINS - 1 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo = bins.iter().filter(|&&b| b <= t).map(|&b| b as f64).collect::<Vec<_>>();
            let hi = bins.iter().filter(|&&b| b > t).map(|&b| b as f64).collect::<Vec<_>>();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let n = bins.len() as f64;
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let (m0, m1) = (lo.iter().sum::<f64>() / lo.len() as f64, hi.iter().sum::<f64>() / hi.len() as f64);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.0 * (1.0 + 1e-12) {
            best = (between, t);
        }
    }
    best.1
}

pub fn asd_matches_brute_force() {
    let a = cube([8, 8, 8], [1, 1, 1], [3, 3, 3]);
    let b = cube([8, 8, 8], [3, 1, 1], [3, 3, 3]);
    let got = metrics::asd(&a, &b, [1.0; 3]).unwrap();
    assert!((got - brute_asd(&a, &b, [1.0; 3])).abs() < 1e-6);
    assert!(got > 0.0);

    let mut r = rng(71);
    for trial in 0..25 {
        let dims = [r.random_range(2..=16), r.random_range(2..=16), r.random_range(2..=16)];
        let spacing = [r.random_range(0.5..4.0), r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
        let g = random_binary(Shape::spatial(dims), 0.2, &mut r);
        let p = random_binary(Shape::spatial(dims), 0.2, &mut r);
        if g.count_nonzero() == 0 || metrics::recall(&p, &g).unwrap() == 0.0 {
            continue;
        }
        let got = metrics::asd(&p, &g, spacing).unwrap();
        let want = brute_asd(&p, &g, spacing);
        assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
    }
}

pub fn otsu_matches_exhaustive_search() {
    let half = Volume::from_vec(Shape::spatial([2, 4, 4]), (0..32).map(|i| if i % 2 == 0 { 0.0 } else { 255.0 }).collect()).unwrap();
    let o = preprocess::otsu_threshold(&half).unwrap();
    assert!(o.threshold > 0.0 && o.threshold < 255.0);
    assert_eq!(o.bin, exhaustive_otsu_bin(&half));
    assert!(half.data().iter().all(|&v| o.is_foreground(v) == (v == 255.0)));

    let mut r = rng(74);
    for _ in 0..10 {
        let lo = Normal::new(20.0f32, 6.0).unwrap();
        let hi = Normal::new(r.random_range(60.0f32..120.0), 10.0).unwrap();
        let frac = r.random_range(0.2..0.7);
        let data: Vec<f32> = (0..2000).map(|_| if r.random_bool(frac) { hi.sample(&mut r) } else { lo.sample(&mut r) }).collect();
        let v = Volume::from_vec(Shape::spatial([10, 10, 20]), data).unwrap();
        let o = preprocess::otsu_threshold(&v).unwrap();
        assert_eq!(o.bin, exhaustive_otsu_bin(&v));
        assert!(!o.degenerate);

        let c = r.random_range(-50.0f32..50.0);
        let shifted = preprocess::otsu_threshold(&v.map(|x| x + c)).unwrap();
        assert!((shifted.threshold - (o.threshold + c)).abs() <= o.bin_width * 1.001);
    }
    let flat = preprocess::otsu_threshold(&Volume::full(Shape::spatial([3, 3, 3]), 7.0)).unwrap();
    assert!(flat.degenerate);
    assert_eq!(flat.threshold, 7.0);
}

pub const EPS: f32 = 1e-4;

pub fn dice_oracle(p: &[f32], g: &[f32], eps: f64) -> f64 {
    let pg: f64 = p.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
    let sp: f64 = p.iter().map(|&a| a as f64).sum();
    let sg: f64 = g.iter().map(|&a| a as f64).sum();
    1.0 - (2.0 * pg + eps) / (sp + sg + eps)
}

pub fn taped_dice(p: &Volume, g: &Volume) -> (f64, Volume) {
    let mut t = Tape::new();
    let pi = t.param(p.clone());
    let gi = t.constant(g.clone());
    let l = loss::dice_loss(&mut t, pi, gi, EPS).unwrap();
    let v = t.value(l).item().unwrap() as f64;
    let grads = t.backward(l).unwrap();
    (v, grads.get(pi).unwrap().clone())
}

/// Local loss of the full network on a fixed image, RoI and annotation.
pub fn local_forward(net: &Network, image: &Volume) -> (Tape, runet::net::Bound, runet::TensorId, runet::net::DecoderOutput) {
    let mut t = Tape::new();
    let b = net.bind(&mut t, true);
    let x = t.constant(image.clone());
    let f = net.encoder_forward(&mut t, &b, x).unwrap();
    let c1 = t.crop(f.f1, [0, 4, 4], [4, 8, 8]).unwrap();
    let c2 = t.crop(f.f2, [0, 2, 2], [4, 4, 4]).unwrap();
    let c3 = t.crop(f.f3, [0, 1, 1], [2, 2, 2]).unwrap();
    let out = net.decoder_forward(&mut t, &b, [c1, c2, c3]).unwrap();
    (t, b, x, out)
}

pub fn local_objective(net: &Network, image: &Volume, region_gt: &Volume) -> (Tape, runet::net::Bound, runet::TensorId) {
    let (mut t, b, _, out) = local_forward(net, image);
    let rg = t.constant(region_gt.clone());
    let cg = t.constant(loss::make_contour_labels(region_gt));
    let (lr, lc) = loss::local_loss(&mut t, out.region, out.contour, rg, cg, EPS).unwrap();
    let total = loss::total_loss(&mut t, None, Some((lr, lc)), None, &LossConfig::default()).unwrap();
    (t, b, total)
}

pub fn closed_form_gradient_matches_autodiff_and_differences() {
    let mut r = rng(50);
    let mut worst_auto = 0.0f64;
    for _ in 0..20 {
        let shape = Shape::spatial([4, 4, 4]);
        let p = random_unit(shape, &mut r);
        let g = random_binary(shape, 0.3, &mut r);
        let closed = loss::dice_grad(&p, &g, EPS).unwrap();
        let (v, auto) = taped_dice(&p, &g);
        assert!((v - dice_oracle(p.data(), g.data(), EPS as f64)).abs() < 1e-6);
        worst_auto = worst_auto.max(closed.max_abs_diff(&auto) as f64);
        for k in 0..p.len() {
            let mut a = p.data().to_vec();
            let mut b = p.data().to_vec();
            a[k] += 1e-3;
            b[k] -= 1e-3;
            let fd = (dice_oracle(&a, g.data(), 1e-4) - dice_oracle(&b, g.data(), 1e-4)) / 2e-3;
            assert!((fd - closed.data()[k] as f64).abs() < 1e-4, "voxel {k}: fd {fd} closed {}", closed.data()[k]);
        }
    }
    assert!(worst_auto < 1e-5, "closed vs autodiff {worst_auto}");
}

pub fn full_network_gradient_matches_differences() {
    let mut r = rng(55);
    let net = Network::new(build_default_spec(RfVariant::Rf64)).unwrap();
    let image = random_volume(Shape::spatial([4, 16, 16]), &mut r);
    let mut gt = Volume::zeros(Shape::spatial([4, 8, 8]));
    for z in 1..3 {
        for y in 2..6 {
            for x in 1..6 {
                gt.set(0, 0, z, y, x, 1.0);
            }
        }
    }
    let (t, b, l) = local_objective(&net, &image, &gt);
    let grads = t.backward(l).unwrap();
    // Loss re-evaluated in f64 from the f32 outputs so the difference quotient
    // is not dominated by rounding of the scalar.
    let contour_gt = loss::make_contour_labels(&gt);
    let cfg = LossConfig::default();
    let eval = |n: &Network| -> f64 {
        let (t, _, _, out) = local_forward(n, &image);
        let r = loss::dice_value(t.value(out.region), &gt, EPS).unwrap();
        let c = loss::dice_value(t.value(out.contour), &contour_gt, EPS).unwrap();
        r + cfg.lambda_c as f64 * c
    };
    let base = eval(&net);
    assert!((base - t.value(l).item().unwrap() as f64).abs() < 1e-5);
    let mut checked = 0;
    let mut nulls = 0;
    let mut unused = 0;
    for (k, p) in net.params().iter().enumerate() {
        let Some(g) = grads.get(b.ids()[k]) else {
            assert!(p.name.starts_with("Locator"), "{} received no gradient", p.name);
            unused += 1;
            continue;
        };
        let shifted = |dir: &dyn Fn(usize) -> f64, h: f64| {
            let mut n = net.clone();
            for (j, v) in n.params_mut()[k].value.data_mut().iter_mut().enumerate() {
                *v += (h * dir(j)) as f32;
            }
            eval(&n)
        };
        let central = |dir: &dyn Fn(usize) -> f64| (shifted(dir, 1e-3) - shifted(dir, -1e-3)) / 2e-3;
        let norm = g.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm < 1e-6 {
            // Biases feeding instance norm are cancelled by the mean subtraction.
            let numeric = central(&|_| 1.0 / (g.len() as f64).sqrt());
            assert!(numeric.abs() < 1e-4, "{}: expected null gradient, numeric {numeric}", p.name);
            nulls += 1;
            continue;
        }
        // Directional derivative along the unit gradient equals its norm.
        let numeric = central(&|j| g.data()[j] as f64 / norm);
        let rel = relative_error(norm, numeric);
        assert!(rel < 1e-2, "{}: |g| {norm} numeric {numeric} rel {rel}", p.name);
        // Single entries are sums of mixed-sign voxel terms, so ReLU kinks and
        // f32 rounding weigh more on them; guard against gross per-entry errors.
        let i = top_k(g.data(), 1)[0];
        let numeric = central(&|j| (j == i) as u8 as f64);
        let rel = relative_error(g.data()[i] as f64, numeric);
        assert!(rel < 3e-2, "{}[{i}]: analytic {} numeric {numeric} rel {rel}", p.name, g.data()[i]);
        checked += 1;
    }
    assert_eq!(checked + nulls + unused, net.params().len());
    let conv_biases = net.params().iter().filter(|p| p.name.contains(".conv") && p.name.ends_with(".bias")).count();
    assert_eq!(nulls, conv_biases);
}

/// Every differentiable op against central differences.
pub fn op_gradients() {
    gradcheck_conv3d();
    gradcheck_strided_and_pointwise_conv();
    gradcheck_maxpool();
    gradcheck_upconv();
    gradcheck_instance_norm();
    gradcheck_elementwise();
}
