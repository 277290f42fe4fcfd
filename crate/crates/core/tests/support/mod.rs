//! Independent oracles shared by the integration tests and the acceptance
//! suite: nested-loop conv/pool, finite-difference gradient checks,
//! augmentation algebra and metric identities.
#![allow(dead_code, clippy::needless_range_loop)]

use jewelcap::augment::{apply_augmentation, apply_params, rotate_quarter, AugmentKind, AugmentParams, AugmentSpec, Image};
use jewelcap::captioner::{random_input, CaptionerModel, ModelConfig, Task};
use jewelcap::layers::{
    conv2d, dense, embedding, gru_step, lstm_step, maxpool2d, softmax_cross_entropy, BoundParams, CellKind, CellVars,
    LayerParams,
};
use jewelcap::metrics::ConfusionMatrix;
use jewelcap::tensor::{finite_diff_check, Graph, Tensor, Var};
use jewelcap::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_EPSILON: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Nested-loop oracles

/// Direct cross-correlation over `C×H×W`; skips padded taps.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kn, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; kn * oh * ow];
    for o in 0..kn {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let xx = (ox * stride + j) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += kd[((o * c + ci) * kh + i) * kw + j] * xd[(ci * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![kn, oh, ow], out).unwrap()
}

pub fn naive_maxpool(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for i in 0..window {
                    for j in 0..window {
                        m = m.max(x.data()[(ci * h + oy * stride + i) * w + ox * stride + j]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

/// Runs `cases` random conv and pool cases (up to 3×16×16) against the
/// oracles. Returns the first mismatch.
pub fn conv_pool_oracle_cases(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let c = r.gen_range(1..=3);
        let h = r.gen_range(3..=16);
        let w = r.gen_range(3..=16);
        let kn = r.gen_range(1..=4);
        let kh = r.gen_range(1..=3.min(h));
        let kw = r.gen_range(1..=3.min(w));
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let x = random_tensor(&mut r, &[c, h, w], -1.0, 1.0);
        let k = random_tensor(&mut r, &[kn, c, kh, kw], -1.0, 1.0);
        let b = random_tensor(&mut r, &[kn], -1.0, 1.0);

        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = conv2d(&mut g, xv, kv, bv, stride, pad).map_err(|e| format!("case {case}: {e}"))?;
        let expected = naive_conv(&x, &k, &b, stride, pad);
        if g.value(y) != &expected {
            return Err(format!("conv case {case}: {c}x{h}x{w} k{kh}x{kw} s{stride} p{pad} differs"));
        }

        let window = r.gen_range(1..=3.min(h).min(w));
        let pstride = r.gen_range(1..=window);
        let p = maxpool2d(&mut g, xv, window, pstride).map_err(|e| format!("case {case}: {e}"))?;
        if g.value(p) != &naive_maxpool(&x, window, pstride) {
            return Err(format!("maxpool case {case}: {c}x{h}x{w} window {window} stride {pstride} differs"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checks

/// `sum(out ⊙ R)` for a fixed random `R`, so every output coordinate gets
/// a distinct weight.
fn project(g: &mut Graph, out: Var, seed: u64) -> jewelcap::Result<Var> {
    let r = random_tensor(&mut rng(seed), g.shape(out), -1.0, 1.0);
    let rv = g.constant(r);
    let m = g.mul(out, rv)?;
    g.sum(m)
}

fn cell_from(g: &mut Graph, params: &LayerParams, kind: CellKind, swap: Option<(&str, Var)>) -> jewelcap::Result<CellVars> {
    let vars = params
        .tensors
        .iter()
        .map(|(name, t)| {
            let v = match swap {
                Some((s, v)) if s == name => v,
                _ => g.constant(t.clone()),
            };
            (format!("{}.{name}", params.name), v)
        })
        .collect();
    CellVars::from_bound(&BoundParams::from_vars(vars), &params.name, kind)
}

/// Worst finite-difference error per layer and argument.
pub fn layer_gradient_errors(seed: u64) -> jewelcap::Result<Vec<(String, f64)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, err: f64| out.push((name.to_string(), err));

    // conv2d, batched input with padding and stride
    for (stride, pad) in [(1, 1), (2, 0)] {
        let x = random_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let k = random_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2], -1.0, 1.0);
        let e = finite_diff_check(
            |g, v| {
                let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
                let y = conv2d(g, v, kv, bv, stride, pad)?;
                project(g, y, 1)
            },
            &x,
            FD_EPSILON,
        )?;
        record(&format!("conv2d input s{stride} p{pad}"), e);
        let e = finite_diff_check(
            |g, v| {
                let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                let y = conv2d(g, xv, v, bv, stride, pad)?;
                project(g, y, 1)
            },
            &k,
            FD_EPSILON,
        )?;
        record(&format!("conv2d kernels s{stride} p{pad}"), e);
        let e = finite_diff_check(
            |g, v| {
                let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
                let y = conv2d(g, xv, kv, v, stride, pad)?;
                project(g, y, 1)
            },
            &b,
            FD_EPSILON,
        )?;
        record(&format!("conv2d bias s{stride} p{pad}"), e);
    }

    // maxpool: a shuffled grid keeps values well separated
    let mut vals: Vec<f64> = (0..2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    let x = Tensor::new(vec![2, 6, 6], vals).unwrap();
    for (window, stride) in [(2, 2), (3, 1)] {
        let e = finite_diff_check(
            |g, v| {
                let y = maxpool2d(g, v, window, stride)?;
                project(g, y, 2)
            },
            &x,
            FD_EPSILON,
        )?;
        record(&format!("maxpool2d w{window} s{stride}"), e);
    }

    // dense
    let x = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let b = random_tensor(&mut r, &[5], -1.0, 1.0);
    let args = [x.clone(), w.clone(), b.clone()];
    for (i, label) in ["dense x", "dense weight", "dense bias"].iter().enumerate() {
        let e = finite_diff_check(
            |g, v| {
                let mut vs: Vec<Var> = args.iter().map(|t| g.constant(t.clone())).collect();
                vs[i] = v;
                let y = dense(g, vs[0], vs[1], vs[2])?;
                project(g, y, 3)
            },
            &args[i],
            FD_EPSILON,
        )?;
        record(label, e);
    }

    // embedding, with a repeated id
    let table = random_tensor(&mut r, &[6, 4], -1.0, 1.0);
    let e = finite_diff_check(
        |g, v| {
            let y = embedding(g, &[1, 3, 3, 0], v)?;
            project(g, y, 4)
        },
        &table,
        FD_EPSILON,
    )?;
    record("embedding table", e);

    // recurrent steps: inputs, state and every gate tensor
    for kind in [CellKind::Gru, CellKind::Lstm] {
        let params = LayerParams::recurrent("cell", kind, 3, 4, &mut r);
        let x = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let h = random_tensor(&mut r, &[2, 4], -1.0, 1.0);
        let c = random_tensor(&mut r, &[2, 4], -1.0, 1.0);
        let step = |g: &mut Graph, cell: &CellVars, x: Var, h: Var, c: Var| -> jewelcap::Result<Var> {
            match kind {
                CellKind::Gru => {
                    let h2 = gru_step(g, x, h, cell)?;
                    project(g, h2, 5)
                }
                CellKind::Lstm => {
                    let (h2, c2) = lstm_step(g, x, h, c, cell)?;
                    let a = project(g, h2, 5)?;
                    let b = project(g, c2, 6)?;
                    g.add(a, b)
                }
            }
        };
        let label = kind.label().to_lowercase();
        let state = [x.clone(), h.clone(), c.clone()];
        let names = ["x", "h", "c"];
        let used = if kind == CellKind::Gru { 2 } else { 3 };
        for i in 0..used {
            let e = finite_diff_check(
                |g, v| {
                    let cell = cell_from(g, &params, kind, None)?;
                    let mut vs: Vec<Var> = state.iter().map(|t| g.constant(t.clone())).collect();
                    vs[i] = v;
                    step(g, &cell, vs[0], vs[1], vs[2])
                },
                &state[i],
                FD_EPSILON,
            )?;
            record(&format!("{label}_step {}", names[i]), e);
        }
        for (name, t) in &params.tensors {
            let e = finite_diff_check(
                |g, v| {
                    let cell = cell_from(g, &params, kind, Some((name, v)))?;
                    let vs: Vec<Var> = state.iter().map(|t| g.constant(t.clone())).collect();
                    step(g, &cell, vs[0], vs[1], vs[2])
                },
                t,
                FD_EPSILON,
            )?;
            record(&format!("{label}_step {name}"), e);
        }
    }

    // softmax cross-entropy, with and without an ignored class
    let logits = random_tensor(&mut r, &[4, 6], -3.0, 3.0);
    for ignore in [None, Some(0)] {
        let e = finite_diff_check(
            |g, v| softmax_cross_entropy(g, v, &[1, 5, 0, 2], ignore),
            &logits,
            FD_EPSILON,
        )?;
        record(&format!("softmax_cross_entropy ignore={ignore:?}"), e);
    }
    Ok(out)
}

/// Six-token vocabulary: four control tokens plus two words.
pub fn miniature_vocab() -> Vocab {
    Vocab::build(&["ring", "silver ring"], 6).unwrap()
}

pub fn miniature_config(task: Task, decoder: CellKind) -> ModelConfig {
    let mut c = ModelConfig::new(task, decoder, 8, miniature_vocab());
    c.image_size = 8;
    c.embed_dim = 4;
    c.seed = 17;
    c
}

/// Finite-difference check of every parameter tensor of an 8×8 model
/// (neurons 8, V = 6); large tensors are probed on an even stride of at
/// most `probes` coordinates. Returns the worst error and its tensor.
pub fn miniature_model_error(task: Task, decoder: CellKind, probes: usize) -> jewelcap::Result<(f64, String)> {
    let config = miniature_config(task, decoder);
    let model = CaptionerModel::build(config.clone())?;
    let mut r = rng(23);
    let inputs: Vec<Vec<f64>> = (0..2).map(|_| random_input(&config, &mut r)).collect();
    let targets: Vec<Vec<usize>> = match task {
        Task::Captioning => vec![
            config.vocab.encode("silver ring")?,
            config.vocab.encode("ring")?,
        ],
        Task::Classification => vec![vec![1], vec![3]],
    };
    let in_refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let t_refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let (_, grads) = model.loss_and_grads(&in_refs, &t_refs)?;

    let mut worst = (0.0f64, String::new());
    for (name, _) in config.parameter_shapes() {
        let analytic = &grads[&name];
        let len = analytic.len();
        let step = len.div_ceil(probes).max(1);
        for i in (0..len).step_by(step) {
            let mut probe = model.clone();
            let at = |m: &mut CaptionerModel, delta: f64| -> jewelcap::Result<f64> {
                let t = m.params_mut().get_mut(&name).expect("named parameter");
                t.data_mut()[i] += delta;
                m.batch_loss(&in_refs, &t_refs)
            };
            let up = at(&mut probe, FD_EPSILON)?;
            let down = at(&mut probe, -2.0 * FD_EPSILON)?;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Augmentation algebra

pub fn random_image(r: &mut ChaCha8Rng) -> Image {
    let w = r.gen_range(1..=12);
    let h = if r.gen_bool(0.5) { w } else { r.gen_range(1..=12) };
    let pixels = (0..w * h * 3).map(|_| r.gen::<f64>()).collect();
    Image::new(w, h, pixels).unwrap()
}

/// Group laws bit-exact, plus shape and range preservation for every
/// transform kind, on `count` random images.
pub fn augmentation_algebra(count: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..count {
        let img = random_image(&mut r);
        let mut rot = img.clone();
        for _ in 0..4 {
            rot = rotate_quarter(&rot);
        }
        if rot != img {
            return Err(format!("image {n}: rotate90^4 is not the identity"));
        }
        for (flip, name) in [(AugmentParams::Hflip, "hflip"), (AugmentParams::Vflip, "vflip")] {
            if apply_params(&apply_params(&img, &flip), &flip) != img {
                return Err(format!("image {n}: {name}^2 is not the identity"));
            }
        }
        for kind in AugmentKind::ALL {
            let spec = AugmentSpec { kind, seed: r.gen() };
            let out = apply_augmentation(&img, &spec);
            if (out.width(), out.height()) != (img.width(), img.height()) {
                return Err(format!("image {n}: {kind:?} changed the shape"));
            }
            if out.pixels().iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(format!("image {n}: {kind:?} left [0, 1]"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

/// Checks per-class F1 against the harmonic mean of precision and recall,
/// with both recomputed from raw counts, on `count` random matrices.
/// Returns the largest F1 deviation.
pub fn metric_identities(count: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..count {
        let n = r.gen_range(2..=6);
        let counts: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let empty_row = r.gen_bool(0.1);
                (0..n).map(|_| if empty_row { 0 } else { r.gen_range(0..40) }).collect()
            })
            .collect();
        let m = ConfusionMatrix::from_counts(counts.clone()).map_err(|e| e.to_string())?;
        for k in 0..n {
            let tp = counts[k][k] as f64;
            let col: usize = (0..n).map(|i| counts[i][k]).sum();
            let row: usize = counts[k].iter().sum();
            let p = if col == 0 { 0.0 } else { tp / col as f64 };
            let rc = if row == 0 { 0.0 } else { tp / row as f64 };
            let (mp, mr, mf) = m.class_scores(k);
            if (mp - p).abs() > 1e-15 || (mr - rc).abs() > 1e-15 {
                return Err(format!("case {case} class {k}: precision/recall disagree with counts"));
            }
            let harmonic = if p > 0.0 && rc > 0.0 { 2.0 / (1.0 / p + 1.0 / rc) } else { 0.0 };
            worst = worst.max((mf - harmonic).abs());
        }
        let trace: usize = (0..n).map(|i| counts[i][i]).sum();
        let total: usize = counts.iter().flatten().sum();
        let ccr = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        if m.ccr() != ccr {
            return Err(format!("case {case}: CCR {} differs from trace/total {ccr}", m.ccr()));
        }
    }
    Ok(worst)
}

/// `[[3,1],[0,4]]`: class 0 has precision 1, recall 3/4, F1 6/7.
pub fn hand_confusion_oracle() -> bool {
    let m = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![0, 4]]).unwrap();
    let (p, r, f) = m.class_scores(0);
    p == 1.0 && r == 0.75 && f == 6.0 / 7.0
}
