//! Architecture contracts: the layer-by-layer shape plan at full width, and
//! finite-difference gradient checks for every differentiable operation the
//! network graph uses.

use std::sync::Arc;

use dptta_core::dict::Dictionary;
use dptta_core::net::{build_forward, init_params, merge_param_grads, NetConfig};
use dptta_core::tensor::{grad_check, BufId, ParamSet, Tape};

fn decay_dictionary(k: usize, len: usize) -> Dictionary {
    let mut atoms = Vec::with_capacity(k * len);
    for j in 0..k {
        let rate = 30.0 + 40.0 * j as f64;
        let raw: Vec<f64> = (0..len).map(|i| (-(i as f64) / rate).exp()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        atoms.extend(raw.iter().map(|&v| (v / norm) as f32));
    }
    Dictionary::new(atoms, k, len, 1.0, [3u8; 32]).unwrap()
}

/// Deterministic pseudo-random filler, no external generator needed.
fn lcg_values(n: usize, mut state: u64, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 40) as f64 / (1u64 << 24) as f64 - 0.5) * scale
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Shape plan at full width
// ---------------------------------------------------------------------------

#[test]
fn full_width_forward_matches_the_layer_plan() {
    let cfg = NetConfig::default();
    assert_eq!(cfg.width_mult, 1.0);
    let params = init_params(&cfg, 0).unwrap();
    let dict = decay_dictionary(64, 900);

    let mut tape = Tape::<f32>::new();
    let x: Vec<f32> = lcg_values(2 * 900, 7, 1.0).iter().map(|&v| v as f32).collect();
    let xb = tape.leaf(x, [2, 1, 30, 30]).unwrap();
    let atoms = Arc::new(dict.atoms().to_vec());
    let g = build_forward(&mut tape, &params, &cfg, xb, &atoms).unwrap();

    let want: &[(&str, [usize; 4])] = &[
        ("enc.res1", [2, 128, 30, 30]),
        ("enc.pool", [2, 128, 15, 15]),
        ("enc.latent", [2, 128, 15, 15]),
        ("reg.pool", [2, 128, 8, 8]),
        ("reg.final", [2, 1, 8, 8]),
        ("reg.code", [2, 64, 1, 1]),
        ("fuse.recon", [2, 900, 1, 1]),
        ("dec.upsample", [2, 128, 30, 30]),
        ("dec.features", [2, 16, 30, 30]),
        ("dec.concat", [2, 32, 30, 30]),
        ("dec.out", [2, 1, 30, 30]),
    ];
    assert_eq!(g.probes.len(), want.len(), "probe count changed");
    for ((name, shape), (wname, wshape)) in g.probes.iter().zip(want) {
        assert_eq!(name, wname, "stage order changed");
        assert_eq!(shape, wshape, "stage {name} produced {shape:?}");
    }
    assert_eq!(tape.shape(g.denoised), [2, 1, 30, 30]);
    assert_eq!(tape.shape(g.code), [2, 64, 1, 1]);
    assert_eq!(tape.shape(g.dict_recon), [2, 900, 1, 1]);
}

#[test]
fn parameter_set_matches_width_scaling() {
    // Full width: the two dilated encoder convs are 1->32 and 32->64, the
    // fused decoder tail runs 128->32->16, and the head regresses 64 codes
    // from an 8x8 map.
    let cfg = NetConfig::default();
    let params = init_params(&cfg, 1).unwrap();
    let dims = |name: &str| params.by_name(name).unwrap().dims.clone();
    assert_eq!(dims("enc.dconv1.w"), vec![32, 1, 3, 3]);
    assert_eq!(dims("enc.dconv2.w"), vec![64, 32, 3, 3]);
    assert_eq!(dims("enc.res1.conv1.w"), vec![128, 64, 1, 1]);
    assert_eq!(dims("dec.dconv1.w"), vec![32, 128, 3, 3]);
    assert_eq!(dims("dec.dconv2.w"), vec![16, 32, 3, 3]);
    assert_eq!(dims("dec.final.w"), vec![1, 32, 3, 3]);
    assert_eq!(dims("reg.final.w"), vec![1, 128, 3, 3]);
    assert_eq!(dims("reg.fc.w"), vec![64, 64]);

    // Quarter width scales every internal channel count.
    let desk = init_params(&NetConfig::desk(), 1).unwrap();
    let ddims = |name: &str| desk.by_name(name).unwrap().dims.clone();
    assert_eq!(ddims("enc.dconv1.w"), vec![8, 1, 3, 3]);
    assert_eq!(ddims("enc.res1.conv1.w"), vec![32, 16, 1, 1]);
    assert_eq!(ddims("dec.final.w"), vec![1, 8, 3, 3]);
    assert_eq!(ddims("reg.fc.w"), vec![64, 64], "code length is width-independent");
}

// ---------------------------------------------------------------------------
// Per-operation gradient checks (f64 tapes against central differences)
// ---------------------------------------------------------------------------

/// Checks one micro-graph: a single parameter tensor, an op chain built by
/// `graph`, and a squared loss against a fixed target.
fn check_op(
    dims: Vec<usize>,
    shape: [usize; 4],
    graph: impl Fn(&mut Tape<f64>, BufId) -> BufId,
    seed: u64,
) {
    let mut ps = ParamSet::<f64>::new();
    ps.add("w", dims.clone(), lcg_values(dims.iter().product(), seed, 2.0))
        .unwrap();

    let eval = |ps: &ParamSet<f64>, grads: Option<&mut ParamSet<f64>>| {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(0, &ps.get(0).data, shape).unwrap();
        let out = graph(&mut tape, w);
        let os = tape.shape(out);
        let target = tape
            .leaf(lcg_values(os.iter().product(), seed ^ 0xabcd, 1.5), os)
            .unwrap();
        let loss = tape.sq_loss(out, target, 1.0).unwrap();
        if let Some(gs) = grads {
            tape.backward(loss).unwrap();
            for (slot, g) in merge_param_grads(1, tape.param_grads()) {
                gs.get_mut(slot).grad.copy_from_slice(&g);
            }
        }
        Ok(tape.scalar(loss))
    };

    let report = grad_check(
        &mut ps,
        |p| eval(p, None),
        |p| {
            let snap = p.clone();
            let mut tmp = p.clone();
            let v = eval(&snap, Some(&mut tmp))?;
            for (i, q) in tmp.iter().enumerate() {
                p.get_mut(i).grad.copy_from_slice(&q.grad);
            }
            Ok(v)
        },
        1e-4,
        40,
        seed,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-6,
        "max rel err {} over {} coords",
        report.max_rel_err,
        report.checked
    );
}

#[test]
fn conv_gradients_are_exact() {
    // Plain, dilated, and ReLU-fused convolutions, via both the weight and
    // an upstream activation.
    check_op(vec![2, 3, 3, 3], [2, 3, 3, 3], |t, w| {
        let x = t.leaf(lcg_values(3 * 36, 11, 1.0), [1, 3, 6, 6]).unwrap();
        let b = t.leaf(vec![0.1, -0.2], [2, 1, 1, 1]).unwrap();
        t.conv2d(x, w, b, 1, false).unwrap()
    }, 21);
    check_op(vec![1, 2, 3, 3], [1, 2, 3, 3], |t, w| {
        let x = t.leaf(lcg_values(2 * 64, 12, 1.0), [1, 2, 8, 8]).unwrap();
        let b = t.leaf(vec![0.05], [1, 1, 1, 1]).unwrap();
        t.conv2d(x, w, b, 2, true).unwrap()
    }, 22);
    check_op(vec![1, 2, 6, 6], [1, 2, 6, 6], |t, x| {
        let w = t.leaf(lcg_values(3 * 2 * 9, 13, 1.0), [3, 2, 3, 3]).unwrap();
        let b = t.leaf(vec![0.0, 0.1, -0.1], [3, 1, 1, 1]).unwrap();
        t.conv2d(x, w, b, 1, false).unwrap()
    }, 23);
}

#[test]
fn pool_and_upsample_gradients_are_exact() {
    check_op(vec![1, 2, 6, 6], [1, 2, 6, 6], |t, x| t.maxpool2(x).unwrap(), 31);
    check_op(vec![1, 2, 5, 5], [1, 2, 5, 5], |t, x| t.maxpool2_ceil(x).unwrap(), 32);
    check_op(vec![1, 3, 4, 4], [1, 3, 4, 4], |t, x| t.upsample2(x).unwrap(), 33);
}

#[test]
fn residual_style_composite_gradients_are_exact() {
    // add + relu + fan-out: the same buffer feeds two branches.
    check_op(vec![1, 2, 4, 4], [1, 2, 4, 4], |t, x| {
        let r = t.relu(x).unwrap();
        let s = t.add(r, x).unwrap();
        t.relu(s).unwrap()
    }, 41);
    check_op(vec![1, 2, 3, 3], [1, 2, 3, 3], |t, x| {
        let other = t.leaf(lcg_values(2 * 9, 14, 1.0), [1, 2, 3, 3]).unwrap();
        t.concat_c(x, other).unwrap()
    }, 42);
    check_op(vec![1, 2, 3, 3], [1, 2, 3, 3], |t, x| {
        let other = t.leaf(lcg_values(3 * 9, 15, 1.0), [1, 3, 3, 3]).unwrap();
        t.concat_c(other, x).unwrap()
    }, 43);
}

#[test]
fn head_op_gradients_are_exact() {
    check_op(vec![2, 6], [2, 6, 1, 1], |t, w| {
        let x = t.leaf(lcg_values(3 * 6, 16, 1.0), [3, 6, 1, 1]).unwrap();
        let b = t.leaf(vec![0.1, -0.3], [2, 1, 1, 1]).unwrap();
        t.fc(x, w, b).unwrap()
    }, 51);
    check_op(vec![2, 4], [2, 4, 1, 1], |t, x| {
        let mat = Arc::new(lcg_values(4 * 10, 17, 1.0));
        t.matmul_const(x, mat, 10).unwrap()
    }, 52);
    check_op(vec![2, 8], [2, 8, 1, 1], |t, x| t.first_diff(x).unwrap(), 53);
    check_op(vec![1, 2, 2, 3], [1, 2, 2, 3], |t, x| {
        t.reshape(x, [1, 12, 1, 1]).unwrap()
    }, 54);
    check_op(vec![2, 5], [2, 5, 1, 1], |t, x| {
        let other = t.leaf(lcg_values(10, 18, 1.0), [2, 5, 1, 1]).unwrap();
        let l = t.abs_loss(x, other, 0.1).unwrap();
        // A scalar loss is itself a valid graph output for the checker.
        l
    }, 55);
}
