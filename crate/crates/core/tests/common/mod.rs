#![allow(dead_code)]

use msnet::blocks::{attach_combined, BlockSpec, NetworkPorts};
use msnet::data::{gen_context_shapes, Sample};
use msnet::graph::{
    forward, topo_schedule, Feed, Graph, GraphBuilder, GraphOutputs, GradGate, NodeId, Op, ParamStore, Role,
};
use msnet::tensor::{Mode, Tensor4};
use msnet::RngStream;

pub fn sample(seed: u64) -> Sample {
    gen_context_shapes(64, 1, seed).unwrap().samples.remove(0)
}

/// Block-level order from a direct simulation of the dependency rules:
/// Slave block `l` needs Slave `l-1`; Master block `L` needs Master `L-1`
/// and Slave blocks `L..min(L+p-1, blocks)`. Ready blocks run lowest index
/// first, Slave before Master.
pub fn block_order_oracle(blocks: usize, p: usize) -> Vec<String> {
    let two = p > 0;
    let mut done_s = 0;
    let mut done_m = 0;
    let mut order = Vec::new();
    while done_m < blocks {
        let s_ready = two && done_s < blocks;
        let next_m = done_m + 1;
        let m_ready = !two || done_s >= (next_m + p - 1).min(blocks);
        // candidates keyed by (block, role)
        let s_key = s_ready.then_some((done_s + 1, 0));
        let m_key = m_ready.then_some((next_m, 1));
        let pick = match (s_key, m_key) {
            (Some(s), Some(m)) => s.min(m),
            (Some(s), None) => s,
            (None, Some(m)) => m,
            (None, None) => unreachable!("dependency rules always leave a ready block"),
        };
        if pick.1 == 0 {
            done_s += 1;
            order.push(format!("S{done_s}"));
        } else {
            done_m += 1;
            order.push(format!("M{done_m}"));
        }
    }
    order
}

/// `out = conv3x3(x) + b` on a 2×2 single-channel map with zero padding,
/// written tap by tap: every pixel of a 2×2 map is in every 3×3 window.
pub fn conv3_2x2(k: &[f64; 9], b: f64, x: [f64; 4]) -> [f64; 4] {
    let kk = |r: usize, c: usize| k[r * 3 + c];
    let [x00, x01, x10, x11] = x;
    [
        kk(1, 1) * x00 + kk(1, 2) * x01 + kk(2, 1) * x10 + kk(2, 2) * x11 + b,
        kk(1, 0) * x00 + kk(1, 1) * x01 + kk(2, 0) * x10 + kk(2, 1) * x11 + b,
        kk(0, 1) * x00 + kk(0, 2) * x01 + kk(1, 1) * x10 + kk(1, 2) * x11 + b,
        kk(0, 0) * x00 + kk(0, 1) * x01 + kk(1, 0) * x10 + kk(1, 1) * x11 + b,
    ]
}

pub fn relu4(v: [f64; 4]) -> [f64; 4] {
    v.map(|a| a.max(0.0))
}

pub fn affine4(w: f64, b: f64, v: [f64; 4]) -> [f64; 4] {
    v.map(|a| w * a + b)
}

pub fn add4(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

pub const X: [f64; 4] = [1.0, -2.0, 3.0, 0.5];
pub const K1: [f64; 9] = [0.2, -0.1, 0.4, 0.3, 0.5, -0.6, 0.1, 0.7, -0.2];
pub const K2: [f64; 9] = [-0.3, 0.2, 0.1, 0.6, 0.9, -0.4, 0.5, -0.2, 0.3];
pub const B1: f64 = 0.05;
pub const B2: f64 = -0.1;

/// `F(x)` of the hand-set 3×3 block, by hand.
pub fn f_block(x: [f64; 4]) -> [f64; 4] {
    relu4(conv3_2x2(&K2, B2, relu4(conv3_2x2(&K1, B1, x))))
}

/// Scalar-weighted 1×1 block (`relu(w2 * relu(w1 x + b1) + b2)`).
pub fn f_scalar(w1: f64, b1: f64, w2: f64, b2: f64, x: [f64; 4]) -> [f64; 4] {
    relu4(affine4(w2, b2, relu4(affine4(w1, b1, x))))
}

fn spec(l: usize, kernel: usize) -> BlockSpec {
    BlockSpec {
        block_index: l,
        conv_count: 2,
        in_channels: 1,
        out_channels: 1,
        kernel_size: kernel,
        has_dropout: false,
        dropout_rate: 0.0,
    }
}

/// Single-network chain of `blocks` 1-channel blocks on a 2×2 input without
/// pooling; block `blocks` uses 3×3 kernels, earlier ones 1×1. The last
/// block takes `n` forward skips. With `p > 0` a Slave chain of the same
/// length is added and the Master's block 1 takes `p` backward skips.
pub fn tiny_graph(blocks: usize, n: usize, p: usize) -> Graph {
    let mut b = GraphBuilder::new();
    let input = b.input(1, 2, 2).unwrap();
    let mut slave_net = None;
    if p > 0 {
        let mut s = NetworkPorts::new(Role::Slave, 0);
        let mut x = input;
        for l in 1..=blocks {
            s.inputs.push(x);
            let k = if l == blocks { 3 } else { 1 };
            x = attach_combined(&mut b, &mut s, None, &spec(l, k), 0, 0, blocks).unwrap().0;
        }
        b.push(Op::Score, vec![x], Role::Slave, None, "S.score").unwrap();
        slave_net = Some(s);
    }
    let mut m = NetworkPorts::new(Role::Master, 0);
    let mut x = input;
    for l in 1..=blocks {
        m.inputs.push(x);
        let k = if l == blocks { 3 } else { 1 };
        let nl = if l == blocks { n } else { 0 };
        let pl = if l == 1 { p } else { 0 };
        x = attach_combined(&mut b, &mut m, slave_net.as_ref(), &spec(l, k), nl, pl, blocks)
            .unwrap()
            .0;
    }
    let score = b.push(Op::Score, vec![x], Role::Master, None, "M.score").unwrap();
    let loss = b.push(Op::Loss, vec![score], Role::Master, None, "M.loss").unwrap();
    b.finish(
        GraphOutputs {
            master_score: score,
            master_loss: loss,
            slave_score: None,
            slave_loss: None,
        },
        GradGate::Open,
    )
    .unwrap()
}

pub fn set(store: &mut ParamStore, name: &str, weights: &[f64], bias: f64) {
    let p = store.by_name_mut(name).unwrap_or_else(|| panic!("no slot {name}"));
    assert_eq!(p.weights.len(), weights.len(), "{name}");
    p.weights.copy_from_slice(weights);
    p.bias[0] = bias;
}

pub fn node_value(graph: &Graph, store: &ParamStore, node: NodeId) -> [f64; 4] {
    let plan = topo_schedule(graph).unwrap();
    let image = Tensor4::from_vec(1, 1, 2, 2, X.to_vec()).unwrap();
    let feed = Feed {
        image: &image,
        labels: None,
    };
    let mut rng = RngStream::new(0, "eq");
    let tape = forward(graph, &plan, &feed, store, Mode::Eval, &mut rng).unwrap();
    tape.value(node).unwrap().data().try_into().unwrap()
}

pub fn max_diff(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Graph value vs hand evaluation for the four skip equations; returns
/// `(label, max abs difference)` per equation.
pub fn equation_cases() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    // y_1 = F(x_1) + W_1 x_1
    let g = tiny_graph(1, 1, 0);
    let mut s = ParamStore::zeros(g.slots());
    set(&mut s, "M.b1.conv1", &K1, B1);
    set(&mut s, "M.b1.conv2", &K2, B2);
    set(&mut s, "M.b1.W1", &[0.7], -0.25);
    let got = node_value(&g, &s, g.block_output(Role::Master, 1).unwrap());
    let want = add4(f_block(X), affine4(0.7, -0.25, X));
    out.push(("forward skip N=1", max_diff(got, want)));

    // y_3 = F(x_3) + W_3 x_3 + W_2 x_2 + W_1 x_1
    let g = tiny_graph(3, 3, 0);
    let mut s = ParamStore::zeros(g.slots());
    set(&mut s, "M.b1.conv1", &[1.5], 0.2);
    set(&mut s, "M.b1.conv2", &[-0.5], 1.0);
    set(&mut s, "M.b2.conv1", &[0.8], -0.3);
    set(&mut s, "M.b2.conv2", &[1.2], 0.1);
    set(&mut s, "M.b3.conv1", &K1, B1);
    set(&mut s, "M.b3.conv2", &K2, B2);
    set(&mut s, "M.b3.W3", &[0.4], 0.01);
    set(&mut s, "M.b3.W2", &[-0.9], 0.02);
    set(&mut s, "M.b3.W1", &[0.6], -0.03);
    let got = node_value(&g, &s, g.block_output(Role::Master, 3).unwrap());
    let x1 = X;
    let x2 = f_scalar(1.5, 0.2, -0.5, 1.0, x1);
    let x3 = f_scalar(0.8, -0.3, 1.2, 0.1, x2);
    let want = add4(
        add4(add4(f_block(x3), affine4(0.4, 0.01, x3)), affine4(-0.9, 0.02, x2)),
        affine4(0.6, -0.03, x1),
    );
    out.push(("forward skips N=3", max_diff(got, want)));

    // y_1^m = F(x_1 + U_1 y_1^s + U_2 y_2^s)
    let g = tiny_graph(2, 0, 2);
    let mut s = ParamStore::zeros(g.slots());
    for role in ["S", "M"] {
        set(&mut s, &format!("{role}.b1.conv1"), &[1.1], 0.3);
        set(&mut s, &format!("{role}.b1.conv2"), &[0.9], -0.2);
        set(&mut s, &format!("{role}.b2.conv1"), &K2, 0.1);
        set(&mut s, &format!("{role}.b2.conv2"), &K1, -0.05);
    }
    // keep the Master's own path distinct from the Slave's
    set(&mut s, "M.b1.conv1", &[-0.7], 0.4);
    set(&mut s, "M.b1.U1", &[0.5], 0.1);
    set(&mut s, "M.b1.U2", &[-0.8], 0.2);
    let got = node_value(&g, &s, g.block_output(Role::Master, 1).unwrap());
    let ys1 = f_scalar(1.1, 0.3, 0.9, -0.2, X);
    let ys2 = relu4(conv3_2x2(&K1, -0.05, relu4(conv3_2x2(&K2, 0.1, ys1))));
    let fused = add4(add4(X, affine4(0.5, 0.1, ys1)), affine4(-0.8, 0.2, ys2));
    let want = f_scalar(-0.7, 0.4, 0.9, -0.2, fused);
    out.push(("backward skips P=2", max_diff(got, want)));

    // y_1^m = F(x_1 + U_1 y_1^s) + W_1 x_1
    let g = tiny_graph(1, 1, 1);
    let mut s = ParamStore::zeros(g.slots());
    set(&mut s, "S.b1.conv1", &K2, 0.2);
    set(&mut s, "S.b1.conv2", &K1, 0.0);
    set(&mut s, "M.b1.conv1", &K1, B1);
    set(&mut s, "M.b1.conv2", &K2, B2);
    set(&mut s, "M.b1.U1", &[0.3], -0.1);
    set(&mut s, "M.b1.W1", &[-0.6], 0.15);
    let got = node_value(&g, &s, g.block_output(Role::Master, 1).unwrap());
    let ys = relu4(conv3_2x2(&K1, 0.0, relu4(conv3_2x2(&K2, 0.2, X))));
    let want = add4(f_block(add4(X, affine4(0.3, -0.1, ys))), affine4(-0.6, 0.15, X));
    out.push(("combined N=1 P=1", max_diff(got, want)));

    out
}

/// Confusion and metrics from raw pixel pairs, recomputed from scratch.
pub struct BruteMetrics {
    pub confusion: Vec<Vec<u64>>,
    pub pa: f64,
    pub ca: f64,
    pub iu: f64,
}

pub fn brute_metrics(k: usize, pairs: &[(u8, u8)]) -> Option<BruteMetrics> {
    let pairs: Vec<(usize, usize)> = pairs
        .iter()
        .filter(|(_, g)| *g != 255)
        .map(|&(p, g)| (p as usize, g as usize))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for &(p, g) in &pairs {
        confusion[g][p] += 1;
    }
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    let pa = correct as f64 / pairs.len() as f64;
    let (mut ca_terms, mut iu_terms) = (Vec::new(), Vec::new());
    for c in 0..k {
        let gt = pairs.iter().filter(|(_, g)| *g == c).count();
        let pr = pairs.iter().filter(|(p, _)| *p == c).count();
        let both = pairs.iter().filter(|(p, g)| *p == c && *g == c).count();
        if gt > 0 {
            ca_terms.push(both as f64 / gt as f64);
        }
        if gt + pr > 0 {
            iu_terms.push(both as f64 / (gt + pr - both) as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(BruteMetrics {
        confusion,
        pa,
        ca: mean(&ca_terms),
        iu: mean(&iu_terms),
    })
}
