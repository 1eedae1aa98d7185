//! Finite-difference gradient suite over every differentiable operator.
//!
//! Piecewise-linear operators are checked at tie-free points: inputs are
//! drawn from a distinct dyadic grid and structuring-element values from a
//! finer grid below its spacing, so every window maximum is unique by a
//! margin larger than the difference step and the central differences are
//! exact. Smooth operators take their numeric gradients from independent
//! f64 forward passes in [`reference`], which must also agree with the f32
//! forward value. Composite layers keep their activation offsets far below
//! the signal so only smooth paths are active.

pub mod reference;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_grad, relative_error, Graph, Var, GRAD_FLOOR};
use crate::data::LabelMap;
use crate::error::Result;
use crate::haar::MhwBlock;
use crate::nn::{ActivationKernel, ActivationKind, Aspp, ConvSpec, Ctx, ParamStore};
use crate::tensor::{Shape, Tensor};

use reference::Map;

pub const OPS: [&str; 10] = [
    "dilate2d",
    "erode2d",
    "morph_activation",
    "morph_upsample",
    "haar_forward",
    "mhw_fuse",
    "conv2d",
    "batchnorm2d",
    "aspp",
    "cross_entropy",
];

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Allowed `|L32 - L64| / (1 + |L64|)` between the operator and its
/// reference forward pass.
pub const FORWARD_TOLERANCE: f64 = 1e-5;
const FAR_BELOW: f32 = -1e3;
/// Difference step on the f64 reference.
const REFERENCE_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub cases: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            cases: 100,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Worst disagreement seen for one operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub case: usize,
    pub input: String,
    pub index: usize,
    pub analytic: f32,
    pub numeric: f32,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub coordinates: usize,
    pub worst: Option<Worst>,
    pub tolerance: f64,
    /// Worst forward disagreement with the f64 reference, if the operator
    /// has one.
    pub forward_error: Option<f64>,
}

impl OpReport {
    pub fn max_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.error)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
            && self.forward_error.is_none_or(|e| e <= FORWARD_TOLERANCE)
    }
}

impl fmt::Display for OpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<17} {} cases={} coords={} max_rel_err={:.3e}",
            self.op,
            if self.passed() { "ok  " } else { "FAIL" },
            self.cases,
            self.coordinates,
            self.max_error()
        )?;
        if let Some(e) = self.forward_error {
            write!(f, " forward_err={e:.1e}")?;
        }
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                " case={} input={} index={} analytic={:e} numeric={:e}",
                w.case, w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

type Eval = Box<dyn FnMut(&[Tensor], bool) -> Result<(f64, Vec<Option<Tensor>>)>>;
type Reference = Box<dyn Fn(&[Map]) -> f64>;

struct Problem {
    names: Vec<String>,
    inputs: Vec<Tensor>,
    eps: f32,
    eval: Eval,
    /// Output weights of the scalar loss.
    weights: Vec<Tensor>,
    reference: Option<Reference>,
}

/// Reference inputs looked up by problem input name.
struct Args<'a> {
    names: &'a [String],
    xs: &'a [Map],
}

impl Args<'_> {
    fn get(&self, name: &str) -> &Map {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no input {name}"));
        &self.xs[i]
    }

    fn values(&self, name: &str) -> &[f64] {
        &self.get(name).data
    }
}

impl Problem {
    fn with_reference<F>(mut self, forward: F) -> Self
    where
        F: Fn(&Args<'_>) -> Vec<Map> + 'static,
    {
        let names = self.names.clone();
        let ws = self.weights.clone();
        self.reference = Some(Box::new(move |xs| {
            reference::weighted(&forward(&Args { names: &names, xs }), &ws)
        }));
        self
    }
}

/// `sum_i <w_i, y_i>` accumulated in f64.
fn weighted_total(g: &Graph, ys: &[Var], ws: &[Tensor]) -> f64 {
    ys.iter()
        .zip(ws)
        .map(|(&y, w)| {
            g.value(y)
                .data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
        })
        .sum()
}

fn backprop_weighted(g: &mut Graph, ys: &[Var], ws: &[Tensor]) -> Result<()> {
    let mut total: Option<Var> = None;
    for (&y, w) in ys.iter().zip(ws) {
        let s = g.weighted_sum(y, w)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    g.backward(total.expect("at least one output"))
}

fn output_weights(shapes: &[Shape], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|&s| Tensor::uniform(s, -1.0, 1.0, rng))
        .collect()
}

/// Problem over plain graph operators. `build` maps input leaves to
/// outputs.
fn graph_problem<B>(
    names: &[&str],
    inputs: Vec<Tensor>,
    eps: f32,
    rng: &mut ChaCha8Rng,
    build: B,
) -> Result<Problem>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>> + 'static,
{
    let shapes = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        build(&mut g, &vars)?
            .iter()
            .map(|&y| g.shape(y))
            .collect::<Vec<_>>()
    };
    let ws = output_weights(&shapes, rng);
    let weights = ws.clone();
    let eval = move |xs: &[Tensor], want: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), want)).collect();
        let ys = build(&mut g, &vars)?;
        let total = weighted_total(&g, &ys, &ws);
        if !want {
            return Ok((total, Vec::new()));
        }
        backprop_weighted(&mut g, &ys, &ws)?;
        Ok((total, vars.iter().map(|&v| g.grad(v).cloned()).collect()))
    };
    Ok(Problem {
        names: names.iter().map(|s| s.to_string()).collect(),
        inputs,
        eps,
        eval: Box::new(eval),
        weights,
        reference: None,
    })
}

/// Problem over a layer: data inputs first, then every trainable
/// parameter of `store`.
fn layer_problem<F>(
    data: Vec<(&str, Tensor)>,
    store: ParamStore,
    eps: f32,
    rng: &mut ChaCha8Rng,
    forward: F,
) -> Result<Problem>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Vec<Var>> + 'static,
{
    let ids: Vec<_> = store.trainable_ids().collect();
    let nd = data.len();
    let mut names: Vec<String> = data.iter().map(|(n, _)| n.to_string()).collect();
    names.extend(ids.iter().map(|&id| store.name(id).to_string()));
    let mut inputs: Vec<Tensor> = data.into_iter().map(|(_, t)| t).collect();
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));

    let run = move |xs: &[Tensor],
                    want: bool,
                    ws: Option<&[Tensor]>|
          -> Result<(Vec<Shape>, f64, Vec<Option<Tensor>>)> {
        let mut st = store.clone();
        for (&id, t) in ids.iter().zip(&xs[nd..]) {
            st.set(id, t.clone())?;
        }
        let mut ctx = Ctx::new(&mut st, true);
        let vars: Vec<Var> = xs[..nd]
            .iter()
            .map(|t| ctx.graph.leaf(t.clone(), want))
            .collect();
        let ys = forward(&mut ctx, &vars)?;
        let shapes = ys.iter().map(|&y| ctx.graph.shape(y)).collect();
        let Some(ws) = ws else {
            return Ok((shapes, 0.0, Vec::new()));
        };
        let total = weighted_total(&ctx.graph, &ys, ws);
        if !want {
            return Ok((shapes, total, Vec::new()));
        }
        backprop_weighted(&mut ctx.graph, &ys, ws)?;
        let mut grads: Vec<Option<Tensor>> =
            vars.iter().map(|&v| ctx.graph.grad(v).cloned()).collect();
        let by_id = ctx.grads();
        grads.extend(ids.iter().map(|id| {
            by_id
                .iter()
                .find(|(i, _)| i == id)
                .and_then(|(_, g)| g.clone())
        }));
        Ok((shapes, total, grads))
    };
    let (shapes, _, _) = run(&inputs, false, None)?;
    let ws = output_weights(&shapes, rng);
    let weights = ws.clone();
    let eval = move |xs: &[Tensor], want: bool| {
        let (_, total, grads) = run(xs, want, Some(&ws))?;
        Ok((total, grads))
    };
    Ok(Problem {
        names,
        inputs,
        eps,
        eval: Box::new(eval),
        weights,
        reference: None,
    })
}

/// Distinct values `step * (perm - numel / 2)`.
fn distinct_grid(shape: Shape, step: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.numel();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let half = (n / 2) as f32;
    Tensor::from_parts(
        shape,
        perm.into_iter().map(|p| step * (p as f32 - half)).collect(),
    )
}

/// Per channel, `k * k` distinct values `j / 16` for `j` in `0..16`.
fn fine_se(channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(k * k <= 16);
    let mut v = Vec::with_capacity(channels * k * k);
    for _ in 0..channels {
        let mut js: Vec<usize> = (0..16).collect();
        js.shuffle(rng);
        v.extend(js[..k * k].iter().map(|&j| j as f32 / 16.0));
    }
    Tensor::from_parts(Shape::new(1, channels, k, k), v)
}

fn small_shape(rng: &mut ChaCha8Rng, c_max: usize, lo: usize, hi: usize) -> Shape {
    Shape::new(
        rng.random_range(1..=2),
        rng.random_range(1..=c_max),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    )
}

// Integer grid (step 1) against structuring elements on a 1/16 grid: window
// candidates differ by at least 1/16 and steps of 1/256 never reorder them.
const MORPH_EPS: f32 = 1.0 / 256.0;

fn morph_problem(rng: &mut ChaCha8Rng, erode: bool) -> Result<Problem> {
    let k = rng.random_range(2..=3);
    let s = small_shape(rng, 3, k, 7);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..k);
    let f = distinct_grid(s, 1.0, rng);
    let se = fine_se(s.c, k, rng);
    graph_problem(&["f", "se"], vec![f, se], MORPH_EPS, rng, move |g, v| {
        Ok(vec![if erode {
            g.erode2d(v[0], v[1], stride, padding)?
        } else {
            g.dilate2d(v[0], v[1], stride, padding)?
        }])
    })
}

fn activation_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let s = small_shape(rng, 3, 3, 6);
    let f = distinct_grid(s, 1.0, rng);
    let se = fine_se(s.c, 3, rng);
    // offsets on the half-grid never tie with a dilation value
    let h0 = Tensor::from_parts(
        Shape::new(1, s.c, 1, 1),
        (0..s.c)
            .map(|_| {
                rng.random_range(-(s.numel() as i32) / 2..s.numel() as i32 / 2) as f32 + 1.0 / 32.0
            })
            .collect(),
    );
    graph_problem(
        &["f", "h0", "se"],
        vec![f, h0, se],
        MORPH_EPS,
        rng,
        |g, v| Ok(vec![g.morph_activation(v[0], v[1], v[2])?]),
    )
}

fn upsample_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let factor = rng.random_range(2..=3);
    let k = rng.random_range(factor..=3);
    let s = small_shape(rng, 3, 1, 4);
    let f = distinct_grid(s, 1.0, rng);
    let se = fine_se(s.c, k, rng);
    graph_problem(&["f", "se"], vec![f, se], MORPH_EPS, rng, move |g, v| {
        Ok(vec![g.morph_upsample(v[0], v[1], factor)?])
    })
}

fn haar_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let s = small_shape(rng, 3, 1, 7);
    let f = distinct_grid(s, 1.0, rng);
    graph_problem(&["f"], vec![f], MORPH_EPS, rng, |g, v| {
        let (a, d) = g.haar_forward(v[0])?;
        Ok(vec![a, d])
    })
}

/// Pushes every activation offset of `store` far below the signal.
fn silence_offsets(store: &mut ParamStore) -> Result<()> {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).ends_with(".h0"))
        .collect();
    for id in ids {
        let shape = store.get(id).shape();
        store.set(id, Tensor::full(shape, FAR_BELOW))?;
    }
    Ok(())
}

fn randomize_weights(store: &mut ParamStore, scale: f32, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store
        .trainable_ids()
        .filter(|&id| !store.name(id).ends_with(".h0"))
        .collect();
    for id in ids {
        let shape = store.get(id).shape();
        store.set(id, Tensor::uniform(shape, -scale, scale, rng))?;
    }
    Ok(())
}

fn mhw_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let cr = rng.random_range(1..=2);
    let cd = rng.random_range(1..=2);
    let n = rng.random_range(1..=2);
    let h = 2 * rng.random_range(1..=3);
    let w = 2 * rng.random_range(1..=3);
    let mut store = ParamStore::new();
    let block = MhwBlock::new(
        &mut store,
        "mhw",
        cr,
        cd,
        ActivationKind::Morph(ActivationKernel::Delta),
        rng,
    );
    randomize_weights(&mut store, 0.05, rng)?;
    silence_offsets(&mut store)?;
    // distinct grid of spacing 1/4 keeps every 2x2 maximum unique beyond
    // the step below
    let rgb = distinct_grid(Shape::new(n, cr, h, w), 0.25, rng);
    let depth = distinct_grid(Shape::new(n, cd, h, w), 0.25, rng);
    let p = layer_problem(
        vec![("rgb", rgb), ("depth", depth)],
        store,
        1.0 / 16.0,
        rng,
        move |ctx, v| {
            let (r, d) = block.forward(ctx, v[0], v[1])?;
            Ok(vec![r, d])
        },
    )?;
    Ok(p.with_reference(|a| {
        let (approx_rgb, details_rgb) = reference::haar(a.get("rgb"));
        let (approx_d, details_d) = reference::haar(a.get("depth"));
        let phi = reference::concat(&[details_rgb, details_d]);
        let gate = |name: &str| {
            let w = |p: &str| a.get(&format!("mhw.{name}.{p}"));
            let spec = ConvSpec::default();
            let h = reference::conv(&phi, w("fc1.weight"), &w("fc1.bias").data, spec);
            let h = reference::offset_max(&h, &w("act.h0").data);
            reference::sigmoid(&reference::conv(
                &h,
                w("fc2.weight"),
                &w("fc2.bias").data,
                spec,
            ))
        };
        vec![
            reference::mul(&approx_rgb, &gate("gate_rgb")),
            reference::mul(&approx_d, &gate("gate_d")),
        ]
    }))
}

/// Convolution, batch normalisation and activation of the block `name`.
fn conv_bn_act(a: &Args<'_>, name: &str, x: &Map, spec: ConvSpec) -> Map {
    let w = |p: &str| a.values(&format!("{name}.{p}"));
    let y = reference::conv(
        x,
        a.get(&format!("{name}.conv.weight")),
        w("conv.bias"),
        spec,
    );
    let y = reference::batchnorm(&y, w("bn.gamma"), w("bn.beta"));
    reference::offset_max(&y, w("act.h0"))
}

fn conv_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let k = rng.random_range(1..=3);
    let dilation = rng.random_range(1..=2);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=dilation * (k - 1));
    let reach = dilation * (k - 1) + 1;
    let s = small_shape(rng, 3, reach.max(2), reach.max(2) + 3);
    let cout = rng.random_range(1..=3);
    let x = Tensor::uniform(s, -1.0, 1.0, rng);
    let w = Tensor::uniform(Shape::new(cout, s.c, k, k), -1.0, 1.0, rng);
    let b = Tensor::uniform(Shape::new(1, cout, 1, 1), -1.0, 1.0, rng);
    let spec = ConvSpec {
        stride,
        padding,
        dilation,
    };
    let p = graph_problem(
        &["x", "weight", "bias"],
        vec![x, w, b],
        0.25,
        rng,
        move |g, v| Ok(vec![g.conv2d(v[0], v[1], Some(v[2]), spec)?]),
    )?;
    Ok(p.with_reference(move |a| {
        vec![reference::conv(
            a.get("x"),
            a.get("weight"),
            a.values("bias"),
            spec,
        )]
    }))
}

fn batchnorm_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let s = Shape::new(
        rng.random_range(2..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(2..=4),
    );
    // batch normalisation curves with 1 / std; keep every channel spread
    // out so the step stays small against it
    let x = loop {
        let x = Tensor::uniform(s, -2.0, 2.0, rng);
        if channel_std(&x).iter().all(|&sd| sd >= 0.5) {
            break x;
        }
    };
    let gamma = Tensor::uniform(Shape::new(1, s.c, 1, 1), 0.5, 1.5, rng);
    let beta = Tensor::uniform(Shape::new(1, s.c, 1, 1), -1.0, 1.0, rng);
    let p = graph_problem(
        &["x", "gamma", "beta"],
        vec![x, gamma, beta],
        0.05,
        rng,
        |g, v| Ok(vec![g.batchnorm_train(v[0], v[1], v[2])?.0]),
    )?;
    Ok(p.with_reference(|a| {
        vec![reference::batchnorm(
            a.get("x"),
            a.values("gamma"),
            a.values("beta"),
        )]
    }))
}

fn channel_std(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    (0..s.c)
        .map(|c| {
            let v: Vec<f64> = (0..s.n)
                .flat_map(|n| x.plane(n, c).iter().map(|&a| a as f64))
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .collect()
}

fn aspp_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let cin = rng.random_range(1..=2);
    let width = rng.random_range(1..=2);
    let s = Shape::new(2, cin, rng.random_range(3..=4), rng.random_range(3..=4));
    let mut store = ParamStore::new();
    let aspp = Aspp::new(
        &mut store,
        "aspp",
        cin,
        width,
        &[1, 2],
        ActivationKind::Morph(ActivationKernel::Delta),
        rng,
    );
    randomize_weights(&mut store, 1.0, rng)?;
    // conv weights and batch-norm scales away from zero and samples offset
    // per channel, so every batch norm (the two-sample one of the pooling
    // branch included) sees a clear spread
    let ids: Vec<_> = store
        .trainable_ids()
        .filter(|&id| {
            store.name(id).ends_with("conv.weight") || store.name(id).ends_with("bn.gamma")
        })
        .collect();
    for id in ids {
        let shape = store.get(id).shape();
        let w = (0..shape.numel())
            .map(|_| rng.random_range(0.5f32..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        store.set(id, Tensor::new(shape, w)?)?;
    }
    silence_offsets(&mut store)?;
    let mut x = Tensor::uniform(s, -0.5, 0.5, rng);
    let offsets = [1.0f32, 0.25];
    for n in 0..2 {
        let sign = if n == 0 { 1.0 } else { -1.0 };
        for c in 0..cin {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = x.at(n, c, h, w) + sign * offsets[c];
                    x.set(n, c, h, w, v);
                }
            }
        }
    }
    let p = layer_problem(vec![("x", x)], store, 0.05, rng, move |ctx, v| {
        Ok(vec![aspp.forward(ctx, v[0])?])
    })?;
    Ok(p.with_reference(|a| {
        let x = a.get("x");
        let mut branches = vec![conv_bn_act(a, "aspp.b0", x, ConvSpec::default())];
        for (i, r) in [1, 2].into_iter().enumerate() {
            branches.push(conv_bn_act(
                a,
                &format!("aspp.b{}", i + 1),
                x,
                ConvSpec::same(3, r),
            ));
        }
        let (pooled, expand) = reference::pooled(x);
        branches.push(expand(&conv_bn_act(
            a,
            "aspp.pool",
            &pooled,
            ConvSpec::default(),
        )));
        vec![conv_bn_act(
            a,
            "aspp.project",
            &reference::concat(&branches),
            ConvSpec::default(),
        )]
    }))
}

fn cross_entropy_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let k = rng.random_range(2..=4);
    let (n, h, w) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let logits = Tensor::uniform(Shape::new(n, k, h, w), -2.0, 2.0, rng);
    let labels = LabelMap::batched(
        n,
        h,
        w,
        (0..n * h * w)
            .map(|_| rng.random_range(0..k as u32))
            .collect(),
    )?;
    let oracle_labels = labels.clone();
    let p = graph_problem(&["logits"], vec![logits], 0.05, rng, move |g, v| {
        Ok(vec![g.cross_entropy(v[0], &labels, None)?])
    })?;
    Ok(p.with_reference(move |a| {
        let l = reference::cross_entropy(a.get("logits"), &oracle_labels);
        vec![Map {
            shape: Shape::scalar(),
            data: vec![l],
        }]
    }))
}

fn make_problem(op: &str, rng: &mut ChaCha8Rng) -> Result<Problem> {
    match op {
        "dilate2d" => morph_problem(rng, false),
        "erode2d" => morph_problem(rng, true),
        "morph_activation" => activation_problem(rng),
        "morph_upsample" => upsample_problem(rng),
        "haar_forward" => haar_problem(rng),
        "mhw_fuse" => mhw_problem(rng),
        "conv2d" => conv_problem(rng),
        "batchnorm2d" => batchnorm_problem(rng),
        "aspp" => aspp_problem(rng),
        "cross_entropy" => cross_entropy_problem(rng),
        other => unreachable!("unknown operator {other}"),
    }
}

/// Richardson-extrapolated central differences of the reference.
fn reference_grad(reference: &Reference, xs: &[Map]) -> Vec<Tensor> {
    let mut probe = xs.to_vec();
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let grad = (0..x.data.len())
                .map(|j| {
                    let mut diff = |h: f64| {
                        probe[i].data[j] = x.data[j] + h;
                        let hi = reference(&probe);
                        probe[i].data[j] = x.data[j] - h;
                        let lo = reference(&probe);
                        probe[i].data[j] = x.data[j];
                        (hi - lo) / (2.0 * h)
                    };
                    let (coarse, fine) = (diff(REFERENCE_EPS), diff(REFERENCE_EPS / 2.0));
                    ((4.0 * fine - coarse) / 3.0) as f32
                })
                .collect();
            Tensor::from_parts(x.shape, grad)
        })
        .collect()
}

/// Runs `cfg.cases` seeded cases of one operator.
pub fn check_op(op: &'static str, cfg: &SuiteConfig) -> Result<OpReport> {
    let stream = OPS.iter().position(|&o| o == op).expect("known operator") as u64;
    let mut report = OpReport {
        op,
        cases: 0,
        coordinates: 0,
        worst: None,
        tolerance: cfg.tolerance,
        forward_error: None,
    };
    for case in 0..cfg.cases {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(case as u64));
        rng.set_stream(stream);
        let mut p = make_problem(op, &mut rng)?;
        let (total, analytic) = (p.eval)(&p.inputs, true)?;
        let numerics = match &p.reference {
            Some(reference) => {
                let xs: Vec<Map> = p.inputs.iter().map(Map::from).collect();
                let exact = reference(&xs);
                let err = (total - exact).abs() / (1.0 + exact.abs());
                report.forward_error = Some(report.forward_error.unwrap_or(0.0).max(err));
                reference_grad(reference, &xs)
            }
            None => {
                let mut numerics = Vec::with_capacity(p.inputs.len());
                for i in 0..p.inputs.len() {
                    let mut inputs = p.inputs.clone();
                    let mut f = |x: &Tensor| {
                        inputs[i] = x.clone();
                        Ok((p.eval)(&inputs, false)?.0)
                    };
                    let coarse = finite_diff_grad(&mut f, &p.inputs[i], p.eps)?;
                    let fine = finite_diff_grad(&mut f, &p.inputs[i], p.eps / 2.0)?;
                    numerics.push(fine.zip_map(&coarse, |a, b| (4.0 * a - b) / 3.0)?);
                }
                numerics
            }
        };
        let zeros: Vec<Tensor> = p.inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let analytic: Vec<&Tensor> = analytic
            .iter()
            .zip(&zeros)
            .map(|(a, z)| a.as_ref().unwrap_or(z))
            .collect();
        let scale = analytic
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0f64, |m, &a| m.max(a.abs() as f64));
        let floor = GRAD_FLOOR * scale;
        for (i, (a, numeric)) in analytic.iter().zip(&numerics).enumerate() {
            let name = &p.names[i];
            for (index, (&av, &nv)) in a.data().iter().zip(numeric.data()).enumerate() {
                let error = relative_error(av, nv, floor);
                report.coordinates += 1;
                if report.worst.as_ref().is_none_or(|w| error > w.error) {
                    report.worst = Some(Worst {
                        case,
                        input: name.clone(),
                        index,
                        analytic: av,
                        numeric: nv,
                        error,
                    });
                }
            }
        }
        report.cases += 1;
    }
    Ok(report)
}

/// Every operator in [`OPS`] order.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    OPS.iter().map(|&op| check_op(op, cfg)).collect()
}
