//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftquant::fixedpoint::{quantize_tensor, QuantParams};
use shiftquant::graph::{BnParams, ConvLayer, Graph, Node, Op};
use shiftquant::modelio::{load_model, read_tensor};
use shiftquant::nnops::{
    conv2d_real, run_unified_module_int, ConvAttrs, FusionCase, QuantizedConv,
};
use shiftquant::{Error, QuantizedTensor, Tensor};

pub const BITS: u32 = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: Vec<usize>, amp: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-amp..=amp)).collect()).unwrap()
}

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    t.map(|v| v as f32)
}

/// Candidate fractional bits for a tensor whose largest magnitude is
/// `max_abs`, in search order. Coded from the window definition without the
/// library's helpers.
pub fn oracle_candidates(max_abs: f64, bits: u32, tau: u32) -> Vec<i32> {
    let target = max_abs + 1.0;
    let mut k = 0i32;
    while 2f64.powi(k) < target {
        k += 1;
    }
    let hi = k + 1;
    (hi - tau as i32..=hi)
        .map(|i| bits as i32 - 1 - i)
        .collect()
}

fn max_abs(data: &[f64]) -> f64 {
    data.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn pick(rng: &mut ChaCha8Rng, v: &[i32]) -> i32 {
    v[rng.gen_range(0..v.len())]
}

/// Random convolution geometry within 8×8×16.
pub struct Geometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub attrs: ConvAttrs,
}

pub fn random_geometry(rng: &mut ChaCha8Rng) -> Geometry {
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let mut k = [1, 3][rng.gen_range(0..2)];
    let padding = rng.gen_range(0..=k / 2);
    if h + 2 * padding < k || w + 2 * padding < k {
        k = 1;
    }
    Geometry {
        batch: rng.gen_range(1..=2),
        cin: rng.gen_range(1..=16),
        cout: rng.gen_range(1..=16),
        h,
        w,
        k,
        attrs: ConvAttrs::new(rng.gen_range(1..=2), padding).unwrap(),
    }
}

pub fn random_case(rng: &mut ChaCha8Rng) -> FusionCase {
    FusionCase::ALL[rng.gen_range(0..FusionCase::ALL.len())]
}

fn amplitude(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    2f64.powi(rng.gen_range(lo..=hi)) * rng.gen_range(0.5..1.0)
}

/// A fully quantized module ready for execution.
pub struct ModuleInstance {
    pub case: FusionCase,
    pub x: QuantizedTensor,
    pub conv: QuantizedConv,
    pub shortcut: Option<QuantizedTensor>,
    pub out: QuantParams,
}

/// Random module with every format drawn from its search window.
pub fn random_module(rng: &mut ChaCha8Rng, case: FusionCase) -> ModuleInstance {
    let g = random_geometry(rng);
    let x_amp = amplitude(rng, -2, 4);
    let x_real = uniform(rng, vec![g.batch, g.cin, g.h, g.w], x_amp);
    let w_amp = amplitude(rng, -4, 1);
    let w_real = uniform(rng, vec![g.cout, g.cin, g.k, g.k], w_amp);
    let b_amp = amplitude(rng, -3, 3);
    let b_real = uniform(rng, vec![g.cout], b_amp);

    let x_signed = rng.gen_bool(0.5);
    let x_real = if x_signed {
        x_real
    } else {
        x_real.map(|v| v.abs())
    };
    let n_x = pick(rng, &oracle_candidates(max_abs(x_real.data()), BITS, 4));
    let x = quantize_tensor(&x_real, QuantParams::new(n_x, BITS, x_signed).unwrap()).unwrap();
    let n_w = pick(rng, &oracle_candidates(max_abs(w_real.data()), BITS, 4));
    let n_b = pick(rng, &oracle_candidates(max_abs(b_real.data()), BITS, 4));
    let conv = QuantizedConv {
        weight: quantize_tensor(&w_real, QuantParams::signed(n_w, BITS).unwrap()).unwrap(),
        bias: quantize_tensor(&b_real, QuantParams::signed(n_b, BITS).unwrap()).unwrap(),
        attrs: g.attrs,
    };

    let mut y = conv2d_real(
        &x.to_real(),
        &conv.weight.to_real(),
        &conv.bias.to_real().into_data(),
        g.attrs,
    )
    .unwrap();
    let shortcut = case.has_residual().then(|| {
        let s_amp = amplitude(rng, -2, 4);
        let s_real = uniform(rng, y.dims().to_vec(), s_amp);
        let signed = rng.gen_bool(0.5);
        let s_real = if signed {
            s_real
        } else {
            s_real.map(|v| v.abs())
        };
        let n_s = pick(rng, &oracle_candidates(max_abs(s_real.data()), BITS, 4));
        let s = quantize_tensor(&s_real, QuantParams::new(n_s, BITS, signed).unwrap()).unwrap();
        for (v, r) in y.data_mut().iter_mut().zip(s.to_real().data()) {
            *v += r;
        }
        s
    });
    let n_o = pick(rng, &oracle_candidates(max_abs(y.data()), BITS, 4));
    ModuleInstance {
        case,
        x,
        conv,
        shortcut,
        out: case.output_params(n_o, BITS).unwrap(),
    }
}

/// A module calibration problem with a float reference.
pub struct CalibInstance {
    pub case: FusionCase,
    pub conv: ConvLayer,
    pub inputs: Vec<QuantizedTensor>,
    pub shortcuts: Option<Vec<QuantizedTensor>>,
    pub reference: Vec<Tensor<f64>>,
}

pub fn random_calib_instance(
    rng: &mut ChaCha8Rng,
    case: FusionCase,
    samples: usize,
) -> CalibInstance {
    let g = random_geometry(rng);
    let w_amp = amplitude(rng, -4, 1);
    let w = to_f32(&uniform(rng, vec![g.cout, g.cin, g.k, g.k], w_amp));
    let b_amp = amplitude(rng, -3, 2);
    let b = to_f32(&uniform(rng, vec![g.cout], b_amp));
    let conv = ConvLayer::new(w, b.into_data(), g.attrs).unwrap();
    let x_amp = amplitude(rng, -1, 3);
    let s_amp = amplitude(rng, -1, 3);
    let n_x = pick(rng, &oracle_candidates(x_amp, BITS, 2));
    let n_s = pick(rng, &oracle_candidates(s_amp, BITS, 2));
    let (mut inputs, mut shortcuts, mut reference) = (vec![], vec![], vec![]);
    for _ in 0..samples {
        let x = uniform(rng, vec![1, g.cin, g.h, g.w], x_amp);
        let mut y = conv.forward(&x).unwrap();
        inputs.push(quantize_tensor(&x, QuantParams::signed(n_x, BITS).unwrap()).unwrap());
        if case.has_residual() {
            let s = uniform(rng, y.dims().to_vec(), s_amp);
            for (v, r) in y.data_mut().iter_mut().zip(s.data()) {
                *v += r;
            }
            shortcuts.push(quantize_tensor(&s, QuantParams::signed(n_s, BITS).unwrap()).unwrap());
        }
        if case.has_relu() {
            y = y.map(|v| v.max(0.0));
        }
        reference.push(y);
    }
    CalibInstance {
        case,
        conv,
        inputs,
        shortcuts: case.has_residual().then_some(shortcuts),
        reference,
    }
}

/// Sum over samples of the L2 distance, coded independently.
fn oracle_l2(reference: &Tensor<f64>, q: &QuantizedTensor) -> f64 {
    let scale = 2f64.powi(-q.frac_bits());
    let mut sum = 0.0;
    for (r, &v) in reference.data().iter().zip(q.ints().data()) {
        let d = r - f64::from(v) * scale;
        sum += d * d;
    }
    sum.sqrt()
}

/// Error of one (N_w, N_b, N_o) triple, executed on the integer engine.
/// Infinite when the accumulator overflows.
pub fn oracle_triple_error(inst: &CalibInstance, n_w: i32, n_b: i32, n_o: i32) -> f64 {
    let bias = Tensor::new(vec![inst.conv.bias.len()], inst.conv.bias.clone()).unwrap();
    let qconv = QuantizedConv {
        weight: quantize_tensor(&inst.conv.weight, QuantParams::signed(n_w, BITS).unwrap())
            .unwrap(),
        bias: quantize_tensor(&bias, QuantParams::signed(n_b, BITS).unwrap()).unwrap(),
        attrs: inst.conv.attrs,
    };
    let out = inst.case.output_params(n_o, BITS).unwrap();
    let mut total = 0.0;
    for (i, x) in inst.inputs.iter().enumerate() {
        let s = inst.shortcuts.as_ref().map(|s| &s[i]);
        match run_unified_module_int(inst.case, x, &qconv, s, out) {
            Ok(q) => total += oracle_l2(&inst.reference[i], &q),
            Err(Error::Overflow { .. }) => return f64::INFINITY,
            Err(e) => panic!("unexpected engine error: {e}"),
        }
    }
    total
}

pub struct OracleWindows {
    pub w: Vec<i32>,
    pub b: Vec<i32>,
    pub o: Vec<i32>,
}

pub fn oracle_windows(inst: &CalibInstance, tau: u32) -> OracleWindows {
    let w: Vec<f64> = inst.conv.weight.data().iter().map(|&v| v.into()).collect();
    let b: Vec<f64> = inst.conv.bias.iter().map(|&v| v.into()).collect();
    let o = inst
        .reference
        .iter()
        .fold(0.0f64, |m, t| m.max(max_abs(t.data())));
    OracleWindows {
        w: oracle_candidates(max_abs(&w), BITS, tau),
        b: oracle_candidates(max_abs(&b), BITS, tau),
        o: oracle_candidates(o, BITS, tau),
    }
}

/// Exhaustive enumeration; first strict minimizer in (W, B, O) order.
pub fn exhaustive_search(inst: &CalibInstance, tau: u32) -> ((i32, i32, i32), f64, usize) {
    let win = oracle_windows(inst, tau);
    let mut best = None;
    let mut best_err = f64::INFINITY;
    let mut count = 0;
    for &n_w in &win.w {
        for &n_b in &win.b {
            for &n_o in &win.o {
                count += 1;
                let e = oracle_triple_error(inst, n_w, n_b, n_o);
                if e < best_err {
                    best_err = e;
                    best = Some((n_w, n_b, n_o));
                }
            }
        }
    }
    (best.expect("some executable candidate"), best_err, count)
}

pub fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BnParams {
    let mut v = |lo: f32, hi: f32| (0..c).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
    let gamma = v(0.3, 2.0)
        .into_iter()
        .zip(v(0.0, 1.0))
        .map(|(g, s)| if s < 0.2 { -g } else { g })
        .collect();
    BnParams {
        gamma,
        beta: v(-1.0, 1.0),
        mean: v(-1.0, 1.0),
        var: v(0.05, 2.0),
        eps: 1e-5,
    }
}

fn random_conv_layer(rng: &mut ChaCha8Rng, g: &Geometry) -> ConvLayer {
    let w = to_f32(&uniform(rng, vec![g.cout, g.cin, g.k, g.k], 0.5));
    let b = to_f32(&uniform(rng, vec![g.cout], 0.5));
    ConvLayer::new(w, b.into_data(), g.attrs).unwrap()
}

/// input → conv → bn → output, conv possibly padded.
pub fn random_conv_bn(rng: &mut ChaCha8Rng) -> Graph {
    let g = random_geometry(rng);
    let conv = random_conv_layer(rng, &g);
    Graph::new(vec![
        Node::new(
            "x",
            Op::Input {
                dims: [g.cin, g.h, g.w],
            },
            vec![],
        ),
        Node::new("conv", Op::Conv(conv), vec![0]),
        Node::new("bn", Op::BatchNorm(random_bn(rng, g.cout)), vec![1]),
        Node::new("y", Op::Output, vec![2]),
    ])
    .unwrap()
}

/// input → bn → conv → output, conv unpadded.
pub fn random_bn_conv(rng: &mut ChaCha8Rng) -> Graph {
    let mut g = random_geometry(rng);
    g.attrs = ConvAttrs::new(g.attrs.stride, 0).unwrap();
    if g.h < g.k || g.w < g.k {
        g.k = 1;
    }
    let conv = random_conv_layer(rng, &g);
    Graph::new(vec![
        Node::new(
            "x",
            Op::Input {
                dims: [g.cin, g.h, g.w],
            },
            vec![],
        ),
        Node::new("bn", Op::BatchNorm(random_bn(rng, g.cin)), vec![0]),
        Node::new("conv", Op::Conv(conv), vec![1]),
        Node::new("y", Op::Output, vec![2]),
    ])
    .unwrap()
}

/// max |a − b| / max |b|.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = max_abs(b.data());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Scripted ResNet-style graph: stem conv+bn+relu, `identity` basic blocks,
/// optionally one downsampling block with a 1×1 projection, and a 1×1 head.
pub fn resnet(identity: usize, projection: bool, seed: u64) -> Graph {
    let mut rng = rng(seed);
    let mut nodes: Vec<Node> = vec![Node::new("x", Op::Input { dims: [3, 8, 8] }, vec![])];
    let mut c = 4;
    let push = |nodes: &mut Vec<Node>, name: String, op: Op, inputs: Vec<usize>| {
        nodes.push(Node::new(name, op, inputs));
        nodes.len() - 1
    };
    let conv = |rng: &mut ChaCha8Rng, cout, cin, k, stride, pad| {
        let g = Geometry {
            batch: 1,
            cin,
            cout,
            h: 0,
            w: 0,
            k,
            attrs: ConvAttrs::new(stride, pad).unwrap(),
        };
        Op::Conv(random_conv_layer(rng, &g))
    };
    let stem = push(
        &mut nodes,
        "stem".into(),
        conv(&mut rng, c, 3, 3, 1, 1),
        vec![0],
    );
    let bn = push(
        &mut nodes,
        "stem.bn".into(),
        Op::BatchNorm(random_bn(&mut rng, c)),
        vec![stem],
    );
    let mut cur = push(&mut nodes, "stem.relu".into(), Op::Relu, vec![bn]);
    let blocks = identity + usize::from(projection);
    for b in 0..blocks {
        let down = projection && b == 1.min(blocks - 1);
        let (cout, stride) = if down { (2 * c, 2) } else { (c, 1) };
        let p = format!("block{b}");
        let c1 = push(
            &mut nodes,
            format!("{p}.conv1"),
            conv(&mut rng, cout, c, 3, stride, 1),
            vec![cur],
        );
        let b1 = push(
            &mut nodes,
            format!("{p}.bn1"),
            Op::BatchNorm(random_bn(&mut rng, cout)),
            vec![c1],
        );
        let r1 = push(&mut nodes, format!("{p}.relu1"), Op::Relu, vec![b1]);
        let c2 = push(
            &mut nodes,
            format!("{p}.conv2"),
            conv(&mut rng, cout, cout, 3, 1, 1),
            vec![r1],
        );
        let b2 = push(
            &mut nodes,
            format!("{p}.bn2"),
            Op::BatchNorm(random_bn(&mut rng, cout)),
            vec![c2],
        );
        let short = if down {
            let pc = push(
                &mut nodes,
                format!("{p}.proj"),
                conv(&mut rng, cout, c, 1, 2, 0),
                vec![cur],
            );
            push(
                &mut nodes,
                format!("{p}.proj_bn"),
                Op::BatchNorm(random_bn(&mut rng, cout)),
                vec![pc],
            )
        } else {
            cur
        };
        let add = push(&mut nodes, format!("{p}.add"), Op::Add, vec![b2, short]);
        cur = push(&mut nodes, format!("{p}.relu2"), Op::Relu, vec![add]);
        c = cout;
    }
    let head = push(
        &mut nodes,
        "head".into(),
        conv(&mut rng, 5, c, 1, 1, 0),
        vec![cur],
    );
    push(&mut nodes, "y".into(), Op::Output, vec![head]);
    Graph::new(nodes).unwrap()
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toycnn")
}

pub fn fixture_model() -> Graph {
    let d = fixture_dir();
    load_model(d.join("model.json"), d.join("model.bin")).unwrap()
}

pub fn fixture_f32(name: &str) -> Tensor<f32> {
    read_tensor(fixture_dir().join(name))
        .unwrap()
        .into_f32()
        .unwrap()
}

pub fn fixture_labels() -> Vec<i32> {
    read_tensor(fixture_dir().join("test_y.sqt"))
        .unwrap()
        .into_i32()
        .unwrap()
        .into_data()
}

/// Top-1 accuracy of [N, classes, 1, 1] logits.
pub fn top1<T: Copy + PartialOrd>(logits: &Tensor<T>, labels: &[i32]) -> f64 {
    let n = logits.dims()[0];
    let classes = logits.len() / n;
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as i32 == label
        })
        .count();
    hits as f64 / n as f64
}

/// Bare basic block: conv → relu → conv → add(identity) → relu.
pub fn basic_block(seed: u64) -> Graph {
    let mut rng = rng(seed);
    let g = Geometry {
        batch: 1,
        cin: 4,
        cout: 4,
        h: 0,
        w: 0,
        k: 3,
        attrs: ConvAttrs::new(1, 1).unwrap(),
    };
    let c1 = random_conv_layer(&mut rng, &g);
    let c2 = random_conv_layer(&mut rng, &g);
    Graph::new(vec![
        Node::new("x", Op::Input { dims: [4, 6, 6] }, vec![]),
        Node::new("conv1", Op::Conv(c1), vec![0]),
        Node::new("relu1", Op::Relu, vec![1]),
        Node::new("conv2", Op::Conv(c2), vec![2]),
        Node::new("add", Op::Add, vec![3, 0]),
        Node::new("relu2", Op::Relu, vec![4]),
        Node::new("y", Op::Output, vec![5]),
    ])
    .unwrap()
}
