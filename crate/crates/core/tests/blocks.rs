mod common;

use common::{f_block, max_diff, node_value, set, tiny_graph, X};
use msnet::graph::{OpKind, Role};
use msnet::ParamStore;

#[test]
fn skip_equations_match_hand_evaluation() {
    for (name, diff) in common::equation_cases() {
        assert!(diff < 1e-12, "{name}: {diff:e}");
    }
}

#[test]
fn hand_evaluation_is_not_vacuous() {
    // the closed forms depend on every hand-set transform
    let base = f_block(X);
    assert!(base.iter().any(|&v| v > 0.0));
    assert!(max_diff(base, common::add4(base, common::affine4(0.7, -0.25, X))) > 0.1);
}

#[test]
fn zero_weights_leave_only_bias() {
    let g = tiny_graph(1, 0, 0);
    let mut s = ParamStore::zeros(g.slots());
    set(&mut s, "M.b1.conv1", &[0.0; 9], 0.4);
    set(&mut s, "M.b1.conv2", &[0.0; 9], 0.25);
    let y = node_value(&g, &s, g.block_output(Role::Master, 1).unwrap());
    assert_eq!(y, [0.25; 4]);
}

#[test]
fn zero_transforms_give_plain_block() {
    for (n, p) in [(1, 0), (0, 1), (1, 1)] {
        let g = tiny_graph(1, n, p);
        let mut s = ParamStore::zeros(g.slots());
        set(&mut s, "M.b1.conv1", &common::K1, common::B1);
        set(&mut s, "M.b1.conv2", &common::K2, common::B2);
        if p > 0 {
            set(&mut s, "S.b1.conv1", &common::K2, 0.3);
            set(&mut s, "S.b1.conv2", &common::K1, 0.3);
        }
        let y = node_value(&g, &s, g.block_output(Role::Master, 1).unwrap());
        assert!(max_diff(y, f_block(X)) < 1e-12, "N={n} P={p}: {y:?}");
    }
}

#[test]
fn each_attachment_gets_fresh_slots() {
    let g = tiny_graph(3, 3, 0);
    let names: Vec<&str> = g.slots().iter().map(|s| s.name.as_str()).collect();
    for w in ["M.b3.W1", "M.b3.W2", "M.b3.W3"] {
        assert_eq!(names.iter().filter(|&&n| n == w).count(), 1);
    }
    let adds = g.nodes().iter().filter(|n| n.op.kind() == OpKind::Add).count();
    assert_eq!(adds, 3);
}
