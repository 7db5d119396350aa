//! Finite-difference validation of every backward rule on the tape and of
//! the composite layers. Central differences with h = 1e-5 in f64; analytic
//! gradients must match to 1e-4 relative error.

use unlearn_core::nn::{
    self, cross_attention, init_cross_attention, init_linear, init_norm, init_self_attention,
    self_attention, Graph, ParamStore,
};
use unlearn_core::rng::Rng;
use unlearn_core::tape::{Tape, Var};
use unlearn_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        // Both effectively zero: treat as matching.
        return 0.0;
    }
    (a - b).abs() / scale
}

/// Check d(root)/d(inputs) for a tape-built scalar function.
fn check_inputs(
    label: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.value(root).numel(), 1, "{label}: root must be scalar");
    let grads = tape.backward(root);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let r = build(&mut t, &vs);
        t.value(r).item()
    };

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            assert!(
                err < TOL,
                "{label}: input {i} element {j}: analytic {a} vs numeric {numeric} (rel {err})"
            );
        }
    }
}

/// Check d(root)/d(param) for every parameter a graph-built loss touches.
fn check_params(label: &str, store: &ParamStore, build: impl Fn(&mut Graph<'_>) -> Var) {
    let mut g = Graph::new(store);
    let root = build(&mut g);
    let (by_name, _) = g.backward(root);

    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new(s);
        let r = build(&mut g);
        g.value(r).item()
    };

    for name in store.names() {
        let param = store.get(name);
        let analytic = by_name.get(name);
        for j in 0..param.numel() {
            let mut plus = store.clone();
            plus.get_mut(name).data_mut()[j] += H;
            let mut minus = store.clone();
            minus.get_mut(name).data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.map_or(0.0, |t| t.data()[j]);
            let err = relative_error(a, numeric);
            assert!(
                err < TOL,
                "{label}: param {name}[{j}]: analytic {a} vs numeric {numeric} (rel {err})"
            );
        }
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(rng, 1.0, shape)
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);

    check_inputs("add", &[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let sq = t.mul(s, s);
        t.mean(sq)
    });
    check_inputs("sub", &[a.clone(), b.clone()], |t, v| {
        let s = t.sub(v[0], v[1]);
        let sq = t.mul(s, s);
        t.mean(sq)
    });
    check_inputs("mul", &[a.clone(), b.clone()], |t, v| {
        let s = t.mul(v[0], v[1]);
        t.mean(s)
    });
    check_inputs("scale", &[a.clone()], |t, v| {
        let s = t.scale(v[0], -2.5);
        let sq = t.mul(s, s);
        t.mean(sq)
    });
    check_inputs("sum", &[a.clone()], |t, v| {
        let sq = t.mul(v[0], v[0]);
        t.sum(sq)
    });
}


#[test]
fn broadcast_ops() {
    let mut rng = Rng::new(2);
    let a = randn(&mut rng, &[3, 4]);
    let row = randn(&mut rng, &[4]);
    check_inputs("add_row", &[a.clone(), row], |t, v| {
        let s = t.add_row(v[0], v[1]);
        let sq = t.mul(s, s);
        t.mean(sq)
    });

    let x = randn(&mut rng, &[3, 2, 2]);
    let chan = randn(&mut rng, &[3]);
    check_inputs("add_chan", &[x, chan], |t, v| {
        let s = t.add_chan(v[0], v[1]);
        let sq = t.mul(s, s);
        t.mean(sq)
    });
}

#[test]
fn matmul_ops() {
    let mut rng = Rng::new(3);
    let a = randn(&mut rng, &[3, 5]);
    let b = randn(&mut rng, &[5, 4]);
    check_inputs("matmul", &[a.clone(), b], |t, v| {
        let p = t.matmul(v[0], v[1]);
        let sq = t.mul(p, p);
        t.mean(sq)
    });

    let bt = randn(&mut rng, &[4, 5]);
    check_inputs("matmul_nt", &[a.clone(), bt], |t, v| {
        let p = t.matmul_nt(v[0], v[1]);
        let sq = t.mul(p, p);
        t.mean(sq)
    });

    check_inputs("transpose", &[a], |t, v| {
        let p = t.transpose(v[0]);
        let sq = t.mul(p, p);
        t.mean(sq)
    });
}

#[test]
fn shape_ops() {
    let mut rng = Rng::new(4);
    let a = randn(&mut rng, &[4, 3]);
    check_inputs("row_select", &[a.clone()], |t, v| {
        let r = t.row_select(v[0], 2);
        let sq = t.mul(r, r);
        t.mean(sq)
    });
    check_inputs("slice_rows", &[a.clone()], |t, v| {
        let r = t.slice_rows(v[0], 1, 2);
        let sq = t.mul(r, r);
        t.mean(sq)
    });
    check_inputs("slice_cols", &[a.clone()], |t, v| {
        let r = t.slice_cols(v[0], 1, 2);
        let sq = t.mul(r, r);
        t.mean(sq)
    });
    check_inputs("reshape", &[a.clone()], |t, v| {
        let r = t.reshape(v[0], &[2, 6]);
        let sq = t.mul(r, r);
        t.mean(sq)
    });

    let b = randn(&mut rng, &[2, 3]);
    check_inputs("concat_rows", &[a.clone(), b], |t, v| {
        let r = t.concat_rows(&[v[0], v[1]]);
        let sq = t.mul(r, r);
        t.mean(sq)
    });
    let c = randn(&mut rng, &[4, 2]);
    check_inputs("concat_cols", &[a, c], |t, v| {
        let r = t.concat_cols(&[v[0], v[1]]);
        let sq = t.mul(r, r);
        t.mean(sq)
    });
}

#[test]
fn reduction_and_scalar_ops() {
    let mut rng = Rng::new(5);
    let a = randn(&mut rng, &[3, 4]);
    check_inputs("row_means", &[a.clone()], |t, v| {
        let m = t.row_means(v[0]);
        let sq = t.mul(m, m);
        t.mean(sq)
    });
    // sqrt needs positive inputs.
    let pos = a.map(|v| v * v + 0.5);
    check_inputs("sqrt", &[pos], |t, v| {
        let s = t.sqrt(v[0]);
        t.mean(s)
    });
    check_inputs("exp", &[a.clone()], |t, v| {
        let e = t.exp(v[0]);
        t.mean(e)
    });
}

#[test]
fn activation_ops() {
    let mut rng = Rng::new(6);
    let a = randn(&mut rng, &[3, 4]);
    for (label, f) in [
        ("sigmoid", 0usize),
        ("silu", 1),
        ("gelu", 2),
    ] {
        let fi = f;
        check_inputs(label, &[a.clone()], move |t, v| {
            let y = match fi {
                0 => t.sigmoid(v[0]),
                1 => t.silu(v[0]),
                _ => t.gelu(v[0]),
            };
            let sq = t.mul(y, y);
            t.mean(sq)
        });
    }
}

#[test]
fn normalization_ops() {
    let mut rng = Rng::new(7);
    let a = randn(&mut rng, &[3, 6]);
    let gamma = randn(&mut rng, &[6]).map(|v| v * 0.3 + 1.0);
    let beta = randn(&mut rng, &[6]);
    check_inputs("layer_norm", &[a.clone(), gamma, beta], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]);
        let sq = t.mul(y, y);
        t.mean(sq)
    });

    let x = randn(&mut rng, &[4, 3, 3]);
    let g = randn(&mut rng, &[4]).map(|v| v * 0.3 + 1.0);
    let b = randn(&mut rng, &[4]);
    check_inputs("group_norm", &[x, g, b], |t, v| {
        let y = t.group_norm(v[0], v[1], v[2], 2);
        let sq = t.mul(y, y);
        t.mean(sq)
    });

    check_inputs("softmax_rows", &[a.clone()], |t, v| {
        let y = t.softmax_rows(v[0]);
        let sq = t.mul(y, y);
        t.mean(sq)
    });
    check_inputs("l2_normalize_rows", &[a], |t, v| {
        let y = t.l2_normalize_rows(v[0]);
        let sq = t.mul(y, y);
        t.mean(sq)
    });
}

#[test]
fn conv_and_spatial_ops() {
    let mut rng = Rng::new(8);
    let x = randn(&mut rng, &[2, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    check_inputs("conv2d_s1", &[x.clone(), w.clone()], |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1);
        let sq = t.mul(y, y);
        t.mean(sq)
    });
    check_inputs("conv2d_s2", &[x.clone(), w], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1);
        let sq = t.mul(y, y);
        t.mean(sq)
    });
    let small = randn(&mut rng, &[2, 3, 3]);
    check_inputs("upsample2x", &[small], |t, v| {
        let y = t.upsample2x(v[0]);
        let sq = t.mul(y, y);
        t.mean(sq)
    });
}

#[test]
fn embedding_and_loss_ops() {
    let mut rng = Rng::new(9);
    let table = randn(&mut rng, &[6, 4]);
    check_inputs("gather", &[table], |t, v| {
        let y = t.gather(v[0], &[1, 3, 1, 5]);
        let sq = t.mul(y, y);
        t.mean(sq)
    });

    let logits = randn(&mut rng, &[4, 4]);
    check_inputs("ce_diag", &[logits.clone()], |t, v| t.cross_entropy_diag(v[0]));
    check_inputs("ce_rows", &[logits], |t, v| {
        t.cross_entropy_rows(v[0], &[2, 0, 3, 1])
    });

    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    check_inputs("mse", &[a, b], |t, v| t.mse(v[0], v[1]));
}

#[test]
fn self_attention_params() {
    let mut rng = Rng::new(10);
    let d = 8;
    let s = 5;
    let mut store = ParamStore::new();
    init_self_attention(&mut store, &mut rng, "attn", d);
    let x = randn(&mut rng, &[s, d]);
    let mask = Tensor::new(vec![0.0, 0.0, 0.0, -1e9, -1e9], &[s]);
    check_params("self_attention", &store, move |g| {
        let xv = g.leaf(x.clone());
        let y = self_attention(g, "attn", xv, 2, Some(&mask));
        let sq = g.tape.mul(y, y);
        g.tape.mean(sq)
    });
}

#[test]
fn cross_attention_params_and_context() {
    let mut rng = Rng::new(11);
    let (c, dctx) = (4, 6);
    let mut store = ParamStore::new();
    init_cross_attention(&mut store, &mut rng, "xattn", c, dctx);
    let x = randn(&mut rng, &[c, 3, 3]);
    let ctx = randn(&mut rng, &[1, dctx]);

    // Parameter gradients.
    let x2 = x.clone();
    let ctx2 = ctx.clone();
    check_params("cross_attention", &store, move |g| {
        let xv = g.leaf(x2.clone());
        let cv = g.leaf(ctx2.clone());
        let y = cross_attention(g, "xattn", xv, cv, 2);
        let sq = g.tape.mul(y, y);
        g.tape.mean(sq)
    });

    // Gradient with respect to the context token (the pathway unlearning
    // relies on).
    let store2 = store.clone();
    check_inputs("cross_attention_ctx", &[ctx, x], |t, v| {
        // Rebuild via a graph around this tape is awkward; emulate the same
        // computation directly against the bound store instead.
        let mut g_store = ParamStore::new();
        for (name, tensor) in store2.iter() {
            g_store.insert(name, tensor.clone());
        }
        // Manual forward mirroring nn::cross_attention with leaves.
        let c = 4usize;
        let (h, w) = (3usize, 3usize);
        let gamma = t.leaf(g_store.get("xattn.norm.gamma").clone());
        let beta = t.leaf(g_store.get("xattn.norm.beta").clone());
        let normed = t.group_norm(v[1], gamma, beta, 2);
        let flat = t.reshape(normed, &[c, h * w]);
        let tokens = t.transpose(flat);
        let wq = t.leaf(g_store.get("xattn.q.w").clone());
        let bq = t.leaf(g_store.get("xattn.q.b").clone());
        let q0 = t.matmul(tokens, wq);
        let q = t.add_row(q0, bq);
        let wk = t.leaf(g_store.get("xattn.k.w").clone());
        let bk = t.leaf(g_store.get("xattn.k.b").clone());
        let k0 = t.matmul(v[0], wk);
        let k = t.add_row(k0, bk);
        let wv = t.leaf(g_store.get("xattn.v.w").clone());
        let bv = t.leaf(g_store.get("xattn.v.b").clone());
        let val0 = t.matmul(v[0], wv);
        let val = t.add_row(val0, bv);
        let scores = t.matmul_nt(q, k);
        let scores = t.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = t.softmax_rows(scores);
        let mix = t.matmul(attn, val);
        let wo = t.leaf(g_store.get("xattn.o.w").clone());
        let bo = t.leaf(g_store.get("xattn.o.b").clone());
        let out0 = t.matmul(mix, wo);
        let out = t.add_row(out0, bo);
        let back = t.transpose(out);
        let spatial = t.reshape(back, &[c, h, w]);
        let y = t.add(v[1], spatial);
        let sq = t.mul(y, y);
        t.mean(sq)
    });
}

#[test]
fn linear_and_norm_layers() {
    let mut rng = Rng::new(12);
    let mut store = ParamStore::new();
    init_linear(&mut store, &mut rng, "lin", 5, 3);
    init_norm(&mut store, "ln", 3);
    let x = randn(&mut rng, &[4, 5]);
    check_params("linear+layer_norm", &store, move |g| {
        let xv = g.leaf(x.clone());
        let y = nn::linear(g, "lin", xv);
        let y = nn::layer_norm(g, "ln", y);
        let act = g.tape.gelu(y);
        let sq = g.tape.mul(act, act);
        g.tape.mean(sq)
    });
}
