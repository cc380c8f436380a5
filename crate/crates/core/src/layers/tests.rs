use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::Activation;
use crate::error::Error;
use crate::tensor::{Gradients, Padding};

const C: &str = "test";

fn rn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs `f` on a fresh tape and returns the value of its output.
fn run(params: &[Tensor<f64>], x: &Tensor<f64>, f: impl FnOnce(&mut Ctx<'_, f64>, Var) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let mut cx = Ctx::new(&mut g, params);
    let out = f(&mut cx, xv).unwrap();
    g.value(out).clone()
}

#[test]
fn single_position_attention_returns_projected_value() {
    let mut l = Layout::new();
    let att = Attention::new(&mut l, "a", 8, 2, 4, C);
    let p = l.materialize::<f64>(1);
    let x = rn(&[1, 8], 2);
    let out = run(&p, &x, |cx, x| att.forward(cx, x, x, None, false));
    let expected = run(&p, &x, |cx, x| {
        let v = att.v.forward(cx, x)?;
        att.o.forward(cx, v)
    });
    assert!(max_abs_diff(&out, &expected) < 1e-12);
}

#[test]
fn uniform_scores_average_the_values() {
    let mut l = Layout::new();
    let att = Attention::new(&mut l, "a", 4, 1, 4, C);
    let mut p = l.materialize::<f64>(3);
    p[att.q.w.0] = Tensor::zeros(vec![4, 4]);
    let x = rn(&[5, 4], 4);
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let mut cx = Ctx::new(&mut g, &p);
    let (_, w) = att.forward_with_weights(&mut cx, xv, xv, None, false).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn causal_first_row_sees_only_itself() {
    let mut l = Layout::new();
    let att = Attention::new(&mut l, "a", 8, 2, 4, C);
    let p = l.materialize::<f64>(5);
    let x = rn(&[4, 8], 6);
    let mut g = Graph::new();
    let xv = g.variable(x);
    let mut cx = Ctx::new(&mut g, &p);
    let (_, w) = att.forward_with_weights(&mut cx, xv, xv, None, true).unwrap();
    let w = g.value(w);
    for h in 0..2 {
        assert_eq!(w.at(&[h, 0, 0]), 1.0);
        for j in 1..4 {
            assert_eq!(w.at(&[h, 0, j]), 0.0);
        }
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(w.at(&[h, i, j]), 0.0);
            }
        }
    }
}

#[test]
fn causal_cross_attention_is_rejected() {
    let mut l = Layout::new();
    let att = Attention::new(&mut l, "a", 4, 1, 4, C);
    let p = l.materialize::<f64>(1);
    let mut g = Graph::new();
    let a = g.variable(rn(&[3, 4], 1));
    let b = g.variable(rn(&[3, 4], 2));
    let mut cx = Ctx::new(&mut g, &p);
    assert!(matches!(att.forward(&mut cx, a, b, None, true), Err(Error::Contract(_))));
}

#[test]
fn relative_bias_shape_and_count() {
    let mut l = Layout::new();
    let rb = RelativeBias::new(&mut l, "rb", 3, true, C);
    let p = l.materialize::<f64>(1);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &p);
    let b = rb.forward(&mut cx, 5, 7).unwrap();
    assert_eq!(g.shape(b), &[3, 5, 7]);
    assert_eq!(g.multiply_count(), 0);
    assert_eq!(g.value(b).at(&[1, 2, 2]), p[0].at(&[0, 1]));
}

#[test]
fn ffn_parameter_counts() {
    let mut l = Layout::new();
    Ffn::new(&mut l, "f", 768, 3072, Activation::Relu, C);
    assert_eq!(l.count(), 4_718_592);
    let mut l = Layout::new();
    GluFfn::new(&mut l, "g", 768, 3072, C);
    assert_eq!(l.count(), 7_077_888);
}

#[test]
fn glu_with_unit_gate_equals_gelu_ffn() {
    let mut lg = Layout::new();
    let mut glu = GluFfn::new(&mut lg, "f", 6, 10, C);
    glu.unit_gate = true;
    let pg = lg.materialize::<f64>(7);
    let mut lf = Layout::new();
    let ffn = Ffn::new(&mut lf, "f", 6, 10, Activation::Gelu, C);
    let pf: Vec<_> = lf.specs().iter().map(|s| pg[lg.find(&s.name).unwrap().0].clone()).collect();
    let x = rn(&[4, 6], 8);
    let a = run(&pg, &x, |cx, x| glu.forward(cx, x));
    let b = run(&pf, &x, |cx, x| ffn.forward(cx, x));
    assert_eq!(a, b);
}

#[test]
fn single_expert_moe_equals_ffn() {
    let mut l = Layout::new();
    let moe = MoeFfn::new(&mut l, "m", 6, 12, 1, 1.0, Activation::Relu, C);
    let p = l.materialize::<f64>(9);
    let x = rn(&[5, 6], 10);
    let a = run(&p, &x, |cx, x| Ok(moe.forward(cx, x)?.out));
    let b = run(&p, &x, |cx, x| moe.experts[0].forward(cx, x));
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn identical_experts_scale_by_router_probability() {
    let mut l = Layout::new();
    let moe = MoeFfn::new(&mut l, "m", 6, 12, 4, 4.0, Activation::Relu, C);
    let mut p = l.materialize::<f64>(11);
    for e in 1..4 {
        p[moe.experts[e].wi.w.0] = p[moe.experts[0].wi.w.0].clone();
        p[moe.experts[e].wo.w.0] = p[moe.experts[0].wo.w.0].clone();
    }
    p[moe.router.w.0] = Tensor::zeros(vec![6, 4]);
    let x = rn(&[8, 6], 12);
    let a = run(&p, &x, |cx, x| Ok(moe.forward(cx, x)?.out));
    let b = run(&p, &x, |cx, x| moe.experts[0].forward(cx, x));
    let b = b.map(|v| v * 0.25);
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn routing_counts_cover_every_token() {
    let mut l = Layout::new();
    let moe = MoeFfn::new(&mut l, "m", 6, 12, 4, 1.0, Activation::Relu, C);
    let p = l.materialize::<f64>(13);
    let mut g = Graph::new();
    let x = g.variable(rn(&[8, 6], 14));
    let mut cx = Ctx::new(&mut g, &p);
    let out = moe.forward(&mut cx, x).unwrap();
    let r = &out.routing;
    assert_eq!(r.routed.iter().sum::<usize>(), 8);
    assert_eq!(r.capacity, 2);
    assert_eq!(r.kept.iter().filter(|&&k| k).count(), r.routed.iter().map(|&c| c.min(2)).sum::<usize>());
    let y = g.value(out.out);
    for (t, &k) in r.kept.iter().enumerate() {
        if !k {
            assert!(y.row(t).iter().all(|&v| v == 0.0));
        }
    }
    assert!(g.value(out.aux).item() >= 1.0 - 1e-12);
}

#[test]
fn moe_count_depends_only_on_shapes() {
    let mut l = Layout::new();
    let moe = MoeFfn::new(&mut l, "m", 6, 12, 4, 1.25, Activation::Relu, C);
    let counts: Vec<u64> = (0..4)
        .map(|seed| {
            let p = l.materialize::<f64>(seed);
            let mut g = Graph::new();
            let x = g.variable(rn(&[8, 6], seed + 100));
            let mut cx = Ctx::new(&mut g, &p);
            moe.forward(&mut cx, x).unwrap();
            g.multiply_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
    let (n, d, f, e) = (8u64, 6u64, 12u64, 4u64);
    let cap = 3u64;
    assert_eq!(counts[0], n * d * e + 2 * n * e + e * cap * (2 * d * f + f) + n * d + n * e + 2 * e);
}

#[test]
fn kernel_attention_single_position_and_convex_hull() {
    let mut l = Layout::new();
    let att = KernelAttention::new(&mut l, "k", 8, 2, 4, C);
    let mut p = l.materialize::<f64>(15);
    // positive inputs and q/k weights keep every feature strictly positive
    for w in [att.q.w, att.k.w] {
        p[w.0] = p[w.0].map(f64::abs);
    }
    let x = rn(&[1, 8], 16).map(f64::abs);
    let a = run(&p, &x, |cx, x| att.mix(cx, x, x, false));
    let v = run(&p, &x, |cx, x| att.v.forward(cx, x));
    for (y, v) in a.data().iter().zip(v.data()) {
        assert!((y - v).abs() <= 1e-5 * (1.0 + v.abs()));
    }

    let x = rn(&[6, 8], 17);
    let a = run(&p, &x, |cx, x| att.mix(cx, x, x, true));
    let v = run(&p, &x, |cx, x| att.v.forward(cx, x));
    for i in 0..6 {
        for c in 0..8 {
            let col: Vec<f64> = (0..=i).map(|j| v.at(&[j, c])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let y = a.at(&[i, c]);
            assert!(y >= lo.min(0.0) - 1e-5 && y <= hi.max(0.0) + 1e-5, "row {i} col {c}");
        }
    }
}

#[test]
fn kernel_attention_count_is_linear_in_length() {
    let mut l = Layout::new();
    let att = KernelAttention::new(&mut l, "k", 8, 2, 4, C);
    let p = l.materialize::<f64>(18);
    let count = |n: usize| {
        let mut g = Graph::new();
        let x = g.variable(rn(&[n, 8], 19));
        let mut cx = Ctx::new(&mut g, &p);
        att.forward(&mut cx, x, x, false).unwrap();
        g.multiply_count()
    };
    let (c1, c2, c4) = (count(64), count(128), count(256));
    assert_eq!(c4 - c2, 2 * (c2 - c1));
}

#[test]
fn mos_single_component_is_softmax_head() {
    let mut l = Layout::new();
    let mos = MosHead::new(&mut l, "mos", 8, 11, 1, C);
    let p = l.materialize::<f64>(20);
    let h = rn(&[3, 8], 21);
    let a = run(&p, &h, |cx, h| mos.forward(cx, h));
    let b = run(&p, &h, |cx, h| {
        let c = mos.projections[0].forward(cx, h)?;
        let c = cx.g.tanh(c);
        let c = cx.g.scale(c, 1.0 / 8f64.sqrt());
        let e = cx.p(mos.embedding);
        let logits = cx.g.matmul_t(c, e)?;
        let sm = cx.g.softmax(logits, 1)?;
        Ok(cx.g.log(sm))
    });
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn mos_rows_are_distributions() {
    let mut l = Layout::new();
    let mos = MosHead::new(&mut l, "mos", 8, 11, 4, C);
    let p = l.materialize::<f64>(22);
    let probs = run(&p, &rn(&[5, 8], 23), |cx, h| mos.probs(cx, h));
    for i in 0..5 {
        let s: f64 = probs.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(probs.row(i).iter().all(|&v| v > 0.0));
    }
}

#[test]
fn conv_kernels_sum_to_one() {
    for dynamic in [false, true] {
        let mut l = Layout::new();
        let blk = ConvBlock::new(&mut l, "c", 8, 2, 7, dynamic, C);
        let p = l.materialize::<f64>(24);
        let k = run(&p, &rn(&[5, 8], 25), |cx, x| {
            let u = blk.glu.forward(cx, x)?;
            blk.kernel_weights(cx, u)
        });
        for row in k.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn width_one_conv_is_position_wise() {
    let mut l = Layout::new();
    let blk = ConvBlock::new(&mut l, "c", 8, 2, 1, false, C);
    let p = l.materialize::<f64>(26);
    let x = rn(&[6, 8], 27);
    let y = run(&p, &x, |cx, x| blk.forward(cx, x, Padding::Causal));
    for i in 0..6 {
        let xi = Tensor::new(vec![1, 8], x.row(i).to_vec()).unwrap();
        let yi = run(&p, &xi, |cx, x| blk.forward(cx, x, Padding::Causal));
        let diff = y.row(i).iter().zip(yi.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn dynamic_conv_matches_static_on_constant_input() {
    let mut ls = Layout::new();
    let st = ConvBlock::new(&mut ls, "c", 8, 2, 3, false, C);
    let mut ld = Layout::new();
    let dy = ConvBlock::new(&mut ld, "c", 8, 2, 3, true, C);
    let pd = ld.materialize::<f64>(28);
    let row = rn(&[1, 8], 29);
    let x = Tensor::new(vec![5, 8], row.data().repeat(5)).unwrap();
    // the dynamic logits at any position, which are identical on a constant input
    let logits = run(&pd, &x, |cx, x| {
        let u = dy.glu.forward(cx, x)?;
        match &dy.kernel {
            ConvKernel::Dynamic(proj) => proj.forward(cx, u),
            ConvKernel::Static(_) => unreachable!(),
        }
    });
    let mut ps = Vec::new();
    for s in ls.specs() {
        if s.name == "c.kernel" {
            ps.push(Tensor::new(vec![2, 3], logits.row(0).to_vec()).unwrap());
        } else {
            ps.push(pd[ld.find(&s.name).unwrap().0].clone());
        }
    }
    let a = run(&pd, &x, |cx, x| dy.forward(cx, x, Padding::Same));
    let b = run(&ps, &x, |cx, x| st.forward(cx, x, Padding::Same));
    assert_eq!(a, b);
}

#[test]
fn causal_conv_ignores_future_positions() {
    let mut l = Layout::new();
    let blk = ConvBlock::new(&mut l, "c", 8, 2, 7, true, C);
    let p = l.materialize::<f64>(30);
    let x = rn(&[6, 8], 31);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[4 * 8..] {
        *v += 3.0;
    }
    let a = run(&p, &x, |cx, x| blk.forward(cx, x, Padding::Causal));
    let b = run(&p, &x2, |cx, x| blk.forward(cx, x, Padding::Causal));
    assert_eq!(&a.data()[..4 * 8], &b.data()[..4 * 8]);
    assert_ne!(&a.data()[4 * 8..], &b.data()[4 * 8..]);
}

#[test]
fn et_decoder_branch_is_causal() {
    let mut l = Layout::new();
    let br = EtDecoderBranch::new(&mut l, "b", 8, 16, C);
    let p = l.materialize::<f64>(32);
    let x = rn(&[6, 8], 33);
    let mut x2 = x.clone();
    x2.data_mut()[5 * 8] += 1.0;
    let a = run(&p, &x, |cx, x| br.forward(cx, x));
    let b = run(&p, &x2, |cx, x| br.forward(cx, x));
    assert_eq!(a.shape(), &[6, 8]);
    assert_eq!(&a.data()[..5 * 8], &b.data()[..5 * 8]);
}

#[test]
fn et_encoder_branch_shapes() {
    let mut l = Layout::new();
    let br = EtEncoderBranch::new(&mut l, "b", 8, 16, C);
    let p = l.materialize::<f64>(34);
    let y = run(&p, &rn(&[5, 8], 35), |cx, x| br.forward(cx, x));
    assert_eq!(y.shape(), &[5, 8]);
    // right half is zero padding
    for i in 0..5 {
        assert!(y.row(i)[4..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn token_mixer_rejects_wrong_length() {
    let mut l = Layout::new();
    let tm = TokenMixer::new(&mut l, "t", 6, 3, C);
    let p = l.materialize::<f64>(36);
    let mut g = Graph::new();
    let x = g.variable(rn(&[5, 4], 37));
    let mut cx = Ctx::new(&mut g, &p);
    assert!(matches!(tm.forward(&mut cx, x), Err(Error::Contract(_))));
}

#[test]
fn token_mixer_with_zero_weights_is_zero_and_mixes_otherwise() {
    let mut l = Layout::new();
    let tm = TokenMixer::new(&mut l, "t", 6, 3, C);
    let mut p = l.materialize::<f64>(38);
    let x = rn(&[6, 4], 39);
    let y = run(&p, &x, |cx, x| tm.forward(cx, x));
    assert_eq!(y.shape(), &[6, 4]);
    // perturbing the last position moves the first output row
    let mut x2 = x.clone();
    x2.data_mut()[5 * 4] += 1.0;
    let y2 = run(&p, &x2, |cx, x| tm.forward(cx, x));
    assert_ne!(y.row(0), y2.row(0));
    p[tm.w1.w.0] = Tensor::zeros(vec![6, 3]);
    let y = run(&p, &x, |cx, x| tm.forward(cx, x));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

/// Tape gradients of `sum(block(x) ⊙ R)` with respect to every parameter,
/// compared entrywise against central differences.
fn param_fd(
    layout: &Layout,
    seed: u64,
    x: &Tensor<f64>,
    f: &dyn Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> f64 {
    const H: f64 = 1e-5;
    let params = layout.materialize::<f64>(seed);
    let shape = run(&params, x, f).shape().to_vec();
    let r = Tensor::<f64>::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7));
    let loss = |ps: &[Tensor<f64>]| -> (f64, Gradients<f64>) {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let mut cx = Ctx::new(&mut g, ps);
        let y = f(&mut cx, xv).unwrap();
        let rv = g.constant(r.clone());
        let m = g.mul(y, rv).unwrap();
        let l = g.sum_all(m);
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), grads)
    };
    let (_, grads) = loss(&params);
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.param(i).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        for j in 0..p.numel().min(6) {
            let mut plus = params.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = params.clone();
            minus[i].data_mut()[j] -= H;
            let num = (loss(&plus).0 - loss(&minus).0) / (2.0 * H);
            let a = analytic.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-4));
        }
    }
    worst
}

#[test]
fn block_gradients_match_finite_differences() {
    let x = rn(&[5, 8], 40);
    let checks: Vec<(&str, Box<dyn Fn(&mut Layout) -> Box<dyn Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>>>)> = vec![
        (
            "attention",
            Box::new(|l| {
                let a = Attention::new(l, "a", 8, 2, 4, C);
                let rb = RelativeBias::new(l, "rb", 2, false, C);
                Box::new(move |cx, x| {
                    let b = rb.forward(cx, 5, 5)?;
                    a.forward(cx, x, x, Some(b), true)
                })
            }),
        ),
        (
            "kernel_attention",
            Box::new(|l| {
                let a = KernelAttention::new(l, "a", 8, 2, 4, C);
                Box::new(move |cx, x| a.forward(cx, x, x, true))
            }),
        ),
        (
            "glu_ffn",
            Box::new(|l| {
                let f = GluFfn::new(l, "g", 8, 12, C);
                Box::new(move |cx, x| f.forward(cx, x))
            }),
        ),
        (
            "moe",
            Box::new(|l| {
                let m = MoeFfn::new(l, "m", 8, 12, 2, 1.0, Activation::Gelu, C);
                Box::new(move |cx, x| {
                    let o = m.forward(cx, x)?;
                    let a = cx.g.reshape(o.aux, &[1, 1])?;
                    let s = cx.g.add(o.out, a)?;
                    Ok(s)
                })
            }),
        ),
        (
            "lconv",
            Box::new(|l| {
                let c = ConvBlock::new(l, "c", 8, 2, 3, false, C);
                Box::new(move |cx, x| c.forward(cx, x, Padding::Same))
            }),
        ),
        (
            "dconv",
            Box::new(|l| {
                let c = ConvBlock::new(l, "c", 8, 2, 3, true, C);
                Box::new(move |cx, x| c.forward(cx, x, Padding::Causal))
            }),
        ),
        (
            "mos",
            Box::new(|l| {
                let m = MosHead::new(l, "m", 8, 7, 3, C);
                Box::new(move |cx, x| m.forward(cx, x))
            }),
        ),
        (
            "token_mixer",
            Box::new(|l| {
                let t = TokenMixer::new(l, "t", 5, 3, C);
                Box::new(move |cx, x| t.forward(cx, x))
            }),
        ),
        (
            "et_decoder_branch",
            Box::new(|l| {
                let b = EtDecoderBranch::new(l, "b", 8, 12, C);
                Box::new(move |cx, x| b.forward(cx, x))
            }),
        ),
        (
            "norm",
            Box::new(|l| {
                let n = RmsNorm::new(l, "n", 8, C);
                Box::new(move |cx, x| n.forward(cx, x))
            }),
        ),
    ];
    for (name, build) in checks {
        let mut l = Layout::new();
        let f = build(&mut l);
        let err = param_fd(&l, 41, &x, &*f);
        assert!(err < 1e-4, "{name}: rel err {err:e}");
    }
}
