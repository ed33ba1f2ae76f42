mod common;

use std::collections::BTreeMap;

use afss::decoder::{
    clka_block, fuse_support_query, lka_attention, lka_kernel_sizes, lka_support, load_checkpoint, mask_to_target,
    msag_gate, predict_mask, save_checkpoint, seg_loss, Decoder, DecoderConfig, Graph,
};
use afss::metrics::Mask;
use afss::spectral::{PrototypeSet, Provenance};
use afss::tensorkit::{
    add, batchnorm2d, conv2d, grad_check, mul, relu, sigmoid, BatchNorm, BnMode, ConvSpec, GradCheckOptions, Tape,
    Tensor,
};
use common::rng;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)).unwrap()
}

fn small_config(seed: u64) -> DecoderConfig {
    DecoderConfig {
        level_channels: vec![2, 3, 3, 4],
        lka_kernel: 7,
        lka_dilation: 2,
        atrous_rates: vec![1, 2],
        gate_channels: 2,
        seed,
        ..Default::default()
    }
}

/// Decoder whose batch norm affine terms and running statistics are random
/// too, so no parameter sits at a special value.
fn randomized(cfg: DecoderConfig, seed: u64) -> Decoder<f64> {
    let mut d = Decoder::<f64>::new(cfg).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for (name, t) in d.params.iter_mut() {
        if name.ends_with(".gamma") {
            *t = Tensor::from_fn(t.shape(), |_| r.random_range(0.5..1.5)).unwrap();
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            *t = Tensor::from_fn(t.shape(), |_| r.random_range(-0.5..0.5)).unwrap();
        }
    }
    for run in d.running.values_mut() {
        run.mean.iter_mut().for_each(|m| *m = r.random_range(-0.3..0.3));
        run.var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
    }
    d
}

fn episode(cfg: &DecoderConfig, sizes: &[usize], seed: u64) -> (PrototypeSet, Vec<Tensor<f64>>) {
    let pyramid: Vec<Tensor<f64>> = cfg
        .level_channels
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(l, (&c, &s))| random(&[1, c, s, s], seed * 10 + l as u64))
        .collect();
    let mut r = rng(seed + 77);
    let levels = cfg
        .level_channels
        .iter()
        .map(|&c| (0..c).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    (
        PrototypeSet {
            levels,
            provenance: Provenance::Spectral,
        },
        pyramid,
    )
}

#[test]
fn fusion_selecting_query_plane_is_relu_of_query() {
    let m = 3;
    let fq = random(&[1, m, 4, 5], 1);
    let w = Tensor::from_fn(&[m, m, 2, 1, 1], |i| {
        let (o, c, dpt) = (i / (2 * m), (i / 2) % m, i % 2);
        if o == c && dpt == 1 {
            1.0
        } else {
            0.0
        }
    })
    .unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::zeros(&[1, m, 1, 1]).unwrap());
    let q = tape.constant(fq.clone());
    let wv = tape.constant(w);
    let f = fuse_support_query(&mut tape, p, q, wv, None).unwrap();
    assert_eq!(tape.value(f), &relu(&fq));
}

#[test]
fn averaging_fusion_of_matching_planes_is_relu_of_query() {
    let m = 2;
    let proto = [0.7, -0.4];
    let fq = Tensor::from_fn(&[1, m, 3, 3], |i| proto[i / 9]).unwrap();
    let w = Tensor::from_fn(&[m, m, 2, 1, 1], |i| if i / (2 * m) == (i / 2) % m { 0.5 } else { 0.0 }).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, m, 1, 1], proto.to_vec()).unwrap());
    let q = tape.constant(fq.clone());
    let wv = tape.constant(w);
    let f = fuse_support_query(&mut tape, p, q, wv, None).unwrap();
    assert!(tape.value(f).max_abs_diff(&relu(&fq)) < 1e-15);
}

#[test]
fn fusion_matches_naive_3d_convolution() {
    let (m, h, w) = (3, 4, 5);
    let fq = random(&[1, m, h, w], 2);
    let proto = random(&[1, m, 1, 1], 3);
    let wt = random(&[m, m, 2, 1, 1], 4);
    let bias = random(&[m], 5);
    let mut tape = Tape::new();
    let (p, q, wv, bv) = (
        tape.constant(proto.clone()),
        tape.constant(fq.clone()),
        tape.constant(wt.clone()),
        tape.constant(bias.clone()),
    );
    let f = fuse_support_query(&mut tape, p, q, wv, Some(bv)).unwrap();
    let got = tape.value(f);
    for o in 0..m {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data()[o];
                for c in 0..m {
                    acc += wt.at(&[o, c, 0, 0, 0]) * proto.data()[c];
                    acc += wt.at(&[o, c, 1, 0, 0]) * fq.at(&[0, c, y, x]);
                }
                assert!((got.at(&[0, o, y, x]) - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fusion_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    let q = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
    let w = tape.constant(Tensor::zeros(&[3, 3, 2, 1, 1]).unwrap());
    assert!(fuse_support_query(&mut tape, p, q, w, None).is_err());
}

/// Parameters of a single LKA block named `x`.
fn lka_params(
    m: usize,
    k: usize,
    d: usize,
    fill: impl Fn(&str, &[usize]) -> Tensor<f64>,
) -> BTreeMap<String, Tensor<f64>> {
    let (dw, dwd) = lka_kernel_sizes(k, d);
    let mut p = BTreeMap::new();
    for (name, shape) in [
        ("x.lka.dw.weight", vec![m, 1, dw, dw]),
        ("x.lka.dwd.weight", vec![m, 1, dwd, dwd]),
        ("x.lka.pw.weight", vec![m, m, 1, 1]),
    ] {
        p.insert(name.to_string(), fill(name, &shape));
    }
    p
}

fn run_lka(params: &BTreeMap<String, Tensor<f64>>, f: &Tensor<f64>, k: usize, d: usize, clka: bool) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
        .collect();
    let running = BTreeMap::new();
    let fv = tape.constant(f.clone());
    let mut g = Graph::new(&mut tape, vars, &running, BnMode::Infer);
    let out = if clka {
        clka_block(&mut g, "x", fv, k, d).unwrap()
    } else {
        lka_attention(&mut g, "x", fv, k, d).unwrap()
    };
    drop(g);
    tape.value(out).clone()
}

fn impulse(shape: &[usize]) -> Tensor<f64> {
    let (o, i, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    Tensor::from_fn(shape, |idx| {
        let (oc, ic, y, x) = (idx / (i * kh * kw), (idx / (kh * kw)) % i, (idx / kw) % kh, idx % kw);
        let same_channel = i == 1 || oc == ic;
        if same_channel && y == kh / 2 && x == kw / 2 && (i == 1 || o == i) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

#[test]
fn identity_kernels_give_identity_attention() {
    let f = random(&[1, 3, 9, 9], 6);
    let p = lka_params(3, 21, 3, |_, s| impulse(s));
    assert_eq!(run_lka(&p, &f, 21, 3, false), f);
    // attention of an all-ones map is then all ones and the block is the identity
    let ones = Tensor::ones(&[1, 3, 9, 9]).unwrap();
    assert_eq!(run_lka(&p, &ones, 21, 3, true), ones);
}

#[test]
fn zero_input_gives_zero_attention() {
    let p = lka_params(2, 13, 2, |n, s| random(s, n.len() as u64));
    let z = Tensor::zeros(&[1, 2, 8, 8]).unwrap();
    assert!(run_lka(&p, &z, 13, 2, false).data().iter().all(|v| *v == 0.0));
    assert!(run_lka(&p, &z, 13, 2, true).data().iter().all(|v| *v == 0.0));
}

fn support_extent(t: &Tensor<f64>) -> (usize, usize) {
    let (_, _, h, w) = t.dims4().unwrap();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if t.at(&[0, 0, y, x]) != 0.0 {
                r0 = r0.min(y);
                r1 = r1.max(y);
                c0 = c0.min(x);
                c1 = c1.max(x);
            }
        }
    }
    (r1 - r0 + 1, c1 - c0 + 1)
}

#[test]
fn impulse_response_spans_the_decomposed_kernel() {
    for k in [7, 13, 21] {
        for d in [2, 3, 4] {
            let expect = lka_support(k, d);
            let (dw, dwd) = lka_kernel_sizes(k, d);
            assert_eq!(expect, (2 * d - 1) + d * (dwd - 1));
            assert!(dw % 2 == 1 && dwd % 2 == 1 && dwd >= k.div_ceil(d));
            let n = expect + 6;
            let f = Tensor::from_fn(&[1, 1, n, n], |i| if i == (n / 2) * n + n / 2 { 1.0 } else { 0.0 }).unwrap();
            let p = lka_params(1, k, d, |_, s| Tensor::ones(s).unwrap());
            assert_eq!(
                support_extent(&run_lka(&p, &f, k, d, false)),
                (expect, expect),
                "K={k} d={d}"
            );
        }
    }
    assert_eq!(lka_support(21, 3), 23);
}

#[test]
fn clka_matches_independent_composition() {
    let (m, k, d) = (3, 13, 3);
    let f = random(&[1, m, 10, 10], 8);
    let p = lka_params(m, k, d, |n, s| random(s, 100 + n.len() as u64));
    let (dw, dwd) = lka_kernel_sizes(k, d);
    let a = conv2d(
        &f,
        &p["x.lka.dw.weight"],
        None,
        &ConvSpec::same(dw, 1).unwrap().with_groups(m),
    )
    .unwrap();
    let a = conv2d(
        &a,
        &p["x.lka.dwd.weight"],
        None,
        &ConvSpec::same(dwd, d).unwrap().with_groups(m),
    )
    .unwrap();
    let a = conv2d(&a, &p["x.lka.pw.weight"], None, &ConvSpec::pointwise()).unwrap();
    let expect = Tensor::new(
        f.shape().to_vec(),
        a.data().iter().zip(f.data()).map(|(x, y)| x * y).collect(),
    )
    .unwrap();
    assert!(run_lka(&p, &f, k, d, true).max_abs_diff(&expect) < 1e-12);
}

fn gate_params(
    ce: usize,
    cd: usize,
    g: usize,
    rates: &[usize],
    seed: u64,
) -> (
    BTreeMap<String, Tensor<f64>>,
    BTreeMap<String, afss::decoder::Running<f64>>,
) {
    let mut p = BTreeMap::new();
    let mut running = BTreeMap::new();
    let mut s = seed;
    let mut next = |shape: &[usize]| {
        s += 1;
        random(shape, s)
    };
    p.insert("x.gate.ce.weight".into(), next(&[g, ce, 1, 1]));
    p.insert("x.gate.cd.weight".into(), next(&[g, cd, 1, 1]));
    for &r in rates {
        p.insert(format!("x.gate.at{r}.weight"), next(&[g, g, 3, 3]));
    }
    p.insert("x.gate.c.weight".into(), next(&[1, g, 1, 1]));
    for (bn, c) in [("x.gate.ce_bn", g), ("x.gate.cd_bn", g), ("x.gate.c_bn", 1)] {
        p.insert(format!("{bn}.gamma"), next(&[c]).map(|v| 1.0 + 0.3 * v));
        p.insert(format!("{bn}.beta"), next(&[c]).map(|v| 0.2 * v));
        running.insert(
            bn.to_string(),
            afss::decoder::Running {
                mean: next(&[c]).map(|v| 0.1 * v).into_data(),
                var: next(&[c]).map(|v| 1.0 + 0.5 * v.abs()).into_data(),
            },
        );
    }
    (p, running)
}

fn run_gate(
    p: &BTreeMap<String, Tensor<f64>>,
    running: &BTreeMap<String, afss::decoder::Running<f64>>,
    xe: &Tensor<f64>,
    xd: &Tensor<f64>,
    rates: &[usize],
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = p.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))).collect();
    let (e, d) = (tape.constant(xe.clone()), tape.constant(xd.clone()));
    let mut g = Graph::new(&mut tape, vars, running, BnMode::Infer);
    let out = msag_gate(&mut g, "x", e, d, rates).unwrap();
    drop(g);
    tape.value(out).clone()
}

#[test]
fn gate_at_zero_halves_the_decoder_features() {
    let rates = [1, 2, 3];
    let (mut p, running) = gate_params(3, 4, 2, &rates, 10);
    p.insert("x.gate.c.weight".into(), Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    p.insert("x.gate.c_bn.beta".into(), Tensor::zeros(&[1]).unwrap());
    let mut running = running;
    running.get_mut("x.gate.c_bn").unwrap().mean = vec![0.0];
    let xe = random(&[1, 3, 6, 6], 11);
    let xd = random(&[1, 4, 6, 6], 12);
    let out = run_gate(&p, &running, &xe, &xd, &rates);
    assert!(out.max_abs_diff(&xd.map(|v| 0.5 * v)) < 1e-15);
    let zero = Tensor::zeros(&[1, 4, 6, 6]).unwrap();
    assert!(run_gate(&p, &running, &xe, &zero, &rates)
        .data()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn gate_matches_step_by_step_composition() {
    let rates = [1, 2, 3];
    let (p, running) = gate_params(3, 4, 5, &rates, 20);
    let xe = random(&[1, 3, 7, 7], 21);
    let xd = random(&[1, 4, 7, 7], 22);
    let bn = |x: &Tensor<f64>, name: &str| {
        let mut b = BatchNorm::<f64>::new(x.dims4().unwrap().1);
        b.gamma = p[&format!("{name}.gamma")].data().to_vec();
        b.beta = p[&format!("{name}.beta")].data().to_vec();
        b.running_mean = Some(running[name].mean.clone());
        b.running_var = Some(running[name].var.clone());
        batchnorm2d(x, &mut b, BnMode::Infer).unwrap()
    };
    let pw = ConvSpec::pointwise();
    let e = bn(&conv2d(&xe, &p["x.gate.ce.weight"], None, &pw).unwrap(), "x.gate.ce_bn");
    let d = bn(&conv2d(&xd, &p["x.gate.cd.weight"], None, &pw).unwrap(), "x.gate.cd_bn");
    let s = relu(&add(&e, &d).unwrap());
    let mut q = conv2d(&s, &p["x.gate.at1.weight"], None, &ConvSpec::same(3, 1).unwrap()).unwrap();
    for r in [2, 3] {
        let y = conv2d(
            &s,
            &p[&format!("x.gate.at{r}.weight")],
            None,
            &ConvSpec::same(3, r).unwrap(),
        )
        .unwrap();
        q = add(&q, &y).unwrap();
    }
    let gate = sigmoid(&bn(
        &conv2d(&q, &p["x.gate.c.weight"], None, &pw).unwrap(),
        "x.gate.c_bn",
    ));
    let expect = mul(&xd, &gate).unwrap();
    let got = run_gate(&p, &running, &xe, &xd, &rates);
    assert!(got.max_abs_diff(&expect) < 1e-12);
    for (o, x) in got.data().iter().zip(xd.data()) {
        assert!(o.abs() <= x.abs());
    }
}

#[test]
fn gate_rejects_spatial_mismatch() {
    let rates = [1];
    let (p, running) = gate_params(2, 2, 2, &rates, 30);
    let mut tape = Tape::new();
    let vars = p.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))).collect();
    let e = tape.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap());
    let d = tape.constant(Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap());
    let mut g = Graph::new(&mut tape, vars, &running, BnMode::Infer);
    assert!(msag_gate(&mut g, "x", e, d, &rates).is_err());
}

#[test]
fn zero_pyramid_gives_zero_logits() {
    let cfg = small_config(1);
    let d = Decoder::<f64>::new(cfg.clone()).unwrap();
    let pyramid: Vec<Tensor<f64>> = cfg
        .level_channels
        .iter()
        .zip([8, 6, 4, 2])
        .map(|(&c, s)| Tensor::zeros(&[1, c, s, s]).unwrap())
        .collect();
    let protos = PrototypeSet {
        levels: cfg.level_channels.iter().map(|&c| vec![0.0; c]).collect(),
        provenance: Provenance::Spectral,
    };
    for mode in [BnMode::Infer, BnMode::Train] {
        let mut tape = Tape::new();
        let pass = d.forward(&mut tape, &protos, &pyramid, mode).unwrap();
        assert!(tape.value(pass.logits).data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn resnet_geometry_shape_contract() {
    let cfg = DecoderConfig {
        level_channels: vec![4, 4, 6, 6],
        gate_channels: 4,
        ..Default::default()
    };
    let d = Decoder::<f32>::new(cfg.clone()).unwrap();
    let (protos, pyramid) = episode(&cfg, &[100, 50, 25, 13], 3);
    let pyramid: Vec<Tensor<f32>> = pyramid.iter().map(|t| t.cast()).collect();
    let logits = d.logits(&protos, &pyramid).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 100, 100]);
    assert!(logits.all_finite());
}

#[test]
fn decoder_rejects_bad_pyramids() {
    let cfg = small_config(0);
    let d = Decoder::<f64>::new(cfg.clone()).unwrap();
    let (protos, pyramid) = episode(&cfg, &[8, 6, 4, 2], 0);
    assert!(d.logits(&protos, &pyramid[..3]).is_err());
    let (protos2, pyramid2) = episode(&cfg, &[8, 6, 6, 2], 0);
    assert!(d.logits(&protos2, &pyramid2).is_err());
    let mut bad = protos.clone();
    bad.levels[1].push(0.0);
    assert!(d.logits(&bad, &pyramid).is_err());
    let mut three = cfg;
    three.level_channels.pop();
    assert!(Decoder::<f64>::new(three).is_err());
}

#[test]
fn decoder_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (use_clka, use_msag) in [(true, true), (false, false)] {
            let cfg = DecoderConfig {
                use_clka,
                use_msag,
                ..small_config(seed)
            };
            let d = randomized(cfg.clone(), seed);
            let (protos, pyramid) = episode(&cfg, &[8, 6, 4, 2], seed);
            let target = Tensor::from_fn(&[1, 1, 8, 8], |i| {
                (i * 7 + seed as usize).is_multiple_of(3) as u8 as f64
            })
            .unwrap();
            let names = d.param_names();
            let values: Vec<Tensor<f64>> = names.iter().map(|n| d.params[n].clone()).collect();
            let report = grad_check(
                &values,
                |tape, vars| {
                    let vars = names.iter().cloned().zip(vars.iter().copied()).collect();
                    let pass = d.forward_with(tape, vars, &protos, &pyramid, BnMode::Train)?;
                    Ok(seg_loss(tape, pass.logits, &target)?.total)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.max_relative_error < 1e-6,
                "seed {seed} clka={use_clka} msag={use_msag}: {}",
                report.max_relative_error
            );
        }
    }
}

#[test]
fn ablation_configurations_share_the_output_shape() {
    for use_clka in [true, false] {
        for use_msag in [true, false] {
            let cfg = DecoderConfig {
                use_clka,
                use_msag,
                ..small_config(4)
            };
            let d = Decoder::<f64>::new(cfg.clone()).unwrap();
            let (protos, pyramid) = episode(&cfg, &[8, 6, 4, 2], 4);
            assert_eq!(d.logits(&protos, &pyramid).unwrap().shape(), &[1, 1, 8, 8]);
        }
    }
}

#[test]
fn same_seed_same_logits() {
    let cfg = small_config(9);
    let (protos, pyramid) = episode(&cfg, &[8, 6, 4, 2], 9);
    let pyramid: Vec<Tensor<f32>> = pyramid.iter().map(|t| t.cast()).collect();
    let a = Decoder::<f32>::new(cfg.clone())
        .unwrap()
        .logits(&protos, &pyramid)
        .unwrap();
    let b = Decoder::<f32>::new(cfg).unwrap().logits(&protos, &pyramid).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let cfg = small_config(5);
    let d = randomized(cfg.clone(), 5).cast::<f32>();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &d).unwrap();
    let back: Decoder<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.params, d.params);
    assert_eq!(back.running, d.running);
    let (protos, pyramid) = episode(&cfg, &[8, 6, 4, 2], 5);
    let pyramid: Vec<Tensor<f32>> = pyramid.iter().map(|t| t.cast()).collect();
    assert_eq!(
        back.logits(&protos, &pyramid).unwrap(),
        d.logits(&protos, &pyramid).unwrap()
    );
}

#[test]
fn predict_mask_examples() {
    let pos = Tensor::<f32>::full(&[1, 1, 4, 4], 10.0).unwrap();
    assert!(predict_mask(&pos, 0.5, 8, 8).unwrap().data().iter().all(|m| *m));
    let zero = Tensor::<f32>::zeros(&[1, 1, 4, 4]).unwrap();
    assert!(predict_mask(&zero, 0.5, 8, 8).unwrap().is_empty());
    let mixed = random(&[1, 1, 6, 6], 40);
    let m = predict_mask(&mixed, 0.5, 6, 6).unwrap();
    for (p, z) in m.data().iter().zip(mixed.data()) {
        assert_eq!(*p, *z > 0.0);
    }
}

#[test]
fn loss_examples() {
    let gt = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64).unwrap();
    let mut tape = Tape::new();
    let perfect = tape.constant(gt.map(|y| if y > 0.5 { 20.0 } else { -20.0 }));
    let l = seg_loss(&mut tape, perfect, &gt).unwrap();
    assert!(tape.value(l.total).data()[0] < 1e-6);
    let zeros = tape.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
    let l = seg_loss(&mut tape, zeros, &gt).unwrap();
    assert!((l.bce - 2f64.ln()).abs() < 1e-15);
    assert!(seg_loss(&mut tape, zeros, &gt.map(|v| v * 0.5)).is_err());
}

#[test]
fn loss_matches_naive_sums() {
    let z = random(&[1, 1, 5, 5], 50).map(|v| 4.0 * v);
    let gt = Tensor::from_fn(&[1, 1, 5, 5], |i| (i % 4 == 1) as u8 as f64).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = seg_loss(&mut tape, zv, &gt).unwrap();
    let (mut bce, mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0, 0.0);
    for (&zi, &yi) in z.data().iter().zip(gt.data()) {
        let p = 1.0 / (1.0 + (-zi).exp());
        bce -= yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
        inter += p * yi;
        ps += p;
        ys += yi;
    }
    bce /= 25.0;
    let dice = 1.0 - (2.0 * inter + 1.0) / (ps + ys + 1.0);
    assert!((l.bce - bce).abs() < 1e-12);
    assert!((l.dice - dice).abs() < 1e-12);
    assert!((tape.value(l.total).data()[0] - bce - dice).abs() < 1e-12);
}

#[test]
fn mask_targets_sample_cell_centers() {
    let m = Mask::from_fn(8, 8, |r, c| r < 4 && c >= 6);
    let t: Tensor<f32> = mask_to_target(&m, 4, 4).unwrap();
    let expect = [0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0.];
    assert_eq!(t.data(), &expect);
}
