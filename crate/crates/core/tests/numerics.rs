use fastpitch::numerics::nn::{init_rng, MultiHeadAttention};
use fastpitch::numerics::{grad_check, Graph, Mode, ParamStore, Tape, Tensor, Var};
use fastpitch::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    t.with_requires_grad(true)
}

/// Hand-written cross-correlation with explicit zero padding.
fn conv_oracle(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
    let t = x.len();
    let k = w.len();
    let pad = (k / 2) as isize;
    let c_out = b.len();
    (0..t)
        .map(|tau| {
            (0..c_out)
                .map(|o| {
                    let mut s = b[o];
                    for (j, wj) in w.iter().enumerate() {
                        let src = tau as isize + j as isize - pad;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for (i, xi) in x[src as usize].iter().enumerate() {
                            s += xi * wj[i][o];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

#[test]
fn conv1d_hand_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, -1.0]).unwrap());
    let b = tape.constant(Tensor::vector(vec![0.0]));
    let y = tape.conv1d(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[-2.0, -2.0, 2.0]);
}

#[test]
fn conv1d_zero_weights_annihilate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[9, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 4, 5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.conv1d(x, w, Some(b)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv1d_kernel_one_identity_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random(&mut rng, &[6, 3]);
    let mut eye = Tensor::zeros(&[1, 3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(eye);
    let y = tape.conv1d(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
}

#[test]
fn conv1d_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, ci, co, k) = (7, 3, 4, 5);
    let x = random(&mut rng, &[t, ci]);
    let w = random(&mut rng, &[k, ci, co]);
    let b = random(&mut rng, &[co]);
    let xr: Vec<Vec<f64>> = x.data().chunks(ci).map(<[f64]>::to_vec).collect();
    let wr: Vec<Vec<Vec<f64>>> = w
        .data()
        .chunks(ci * co)
        .map(|tap| tap.chunks(co).map(<[f64]>::to_vec).collect())
        .collect();
    let want = conv_oracle(&xr, &wr, b.data());
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.conv1d(xv, wv, Some(bv)).unwrap();
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((tape.value(y).get2(r, c) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_channel_mismatch_is_shape_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let w = tape.constant(Tensor::zeros(&[3, 3, 1]));
    assert!(matches!(tape.conv1d(x, w, None), Err(Error::Shape { .. })));
}

proptest! {
    #[test]
    fn conv1d_preserves_length(t in 1usize..=64, half in 0usize..4) {
        let k = 2 * half + 1;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[t, 2], 0.5));
        let w = tape.constant(Tensor::full(&[k, 2, 3], 0.1));
        let y = tape.conv1d(x, w, None).unwrap();
        prop_assert_eq!(tape.shape(y), &[t, 3]);
    }
}

#[test]
fn layer_norm_examples() {
    let ln = |row: Vec<f64>, gain: f64, offset: f64, eps: f64| {
        let c = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, c, row).unwrap());
        let g = tape.constant(Tensor::full(&[c], gain));
        let b = tape.constant(Tensor::full(&[c], offset));
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        tape.value(y).data().to_vec()
    };
    let y = ln(vec![1.0, 2.0, 3.0], 1.0, 0.0, 0.0);
    for (got, want) in y.iter().zip([-1.2247, 0.0, 1.2247]) {
        assert!((got - want).abs() < 1e-4);
    }
    let y = ln(vec![5.0, 5.0, 5.0], 1.0, 0.0, 1e-5);
    assert!(y.iter().all(|v| v.abs() < 1e-9));
    let y = ln(vec![0.3, -2.0, 7.0], 0.0, 0.25, 1e-5);
    assert!(y.iter().all(|&v| v == 0.25));
}

fn attention_setup(seed: u64, d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "attn", d, heads).unwrap();
    (store, mha)
}

#[test]
fn attention_single_position_returns_value_projection() {
    let (store, mha) = attention_setup(4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random(&mut rng, &[1, 8]).with_requires_grad(false);
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.tape.constant(input);
    let (out, weights) = mha.forward_with_weights(&mut g, x, None, 0.0).unwrap();
    for w in &weights {
        assert_eq!(g.tape.value(*w).data(), &[1.0]);
    }
    let v = mha.value.forward(&mut g, x).unwrap();
    let expect = mha.output.forward(&mut g, v).unwrap();
    assert_eq!(g.tape.value(out).data(), g.tape.value(expect).data());
}

#[test]
fn attention_zero_input_zero_bias_is_zero() {
    let (mut store, mha) = attention_setup(6, 8, 2);
    for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
        let n = store.get(lin.bias).numel();
        store.set(lin.bias, vec![0.0; n]).unwrap();
    }
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.tape.constant(Tensor::zeros(&[5, 8]));
    let out = mha.forward(&mut g, x, None, 0.0).unwrap();
    assert!(g.tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..20 {
        let (store, mha) = attention_setup(seed, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t = rng.gen_range(2..10);
        let input = random(&mut rng, &[t, 12]).with_requires_grad(false);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.tape.constant(input);
        let (_, weights) = mha.forward_with_weights(&mut g, x, None, 0.0).unwrap();
        for w in weights {
            for r in 0..t {
                let s: f64 = g.tape.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn masked_keys_get_zero_weight() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 50.0, 2.0, 0.0, 9.0, 0.0]).unwrap());
    let y = tape.softmax_rows(x, Some(&[true, false, true])).unwrap();
    let v = tape.value(y);
    assert_eq!(v.get2(0, 1), 0.0);
    assert_eq!(v.get2(1, 1), 0.0);
    assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

/// Each primitive's backward pass against central differences on random
/// inputs in [−1, 1].
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> fastpitch::Result<Var>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, v[0])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "add_row",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "mul_const+mul_rows+scale",
            vec![vec![3, 2]],
            Box::new(|t, v| {
                let y = t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0].into())?;
                let y = t.mul_rows(y, vec![1.0, 0.0, 2.0].into())?;
                let y = t.scale(y, -0.7);
                let y = t.mul(y, v[0])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "matmul_nt",
            vec![vec![3, 4], vec![5, 4]],
            Box::new(|t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "relu",
            vec![vec![4, 4]],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                let y = t.mul(y, v[0])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "conv1d",
            vec![vec![6, 3], vec![3, 3, 2], vec![2]],
            Box::new(|t, v| {
                let y = t.conv1d(v[0], v[1], Some(v[2]))?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = t.constant(Tensor::matrix(3, 5, (0..15).map(|i| (i as f64).sin()).collect())?);
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "softmax",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0], Some(&[true, true, false, true]))?;
                let w = t.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).cos()).collect())?);
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "slice+concat",
            vec![vec![3, 6]],
            Box::new(|t, v| {
                let a = t.slice_cols(v[0], 0, 2)?;
                let b = t.slice_cols(v[0], 3, 3)?;
                let y = t.concat_cols(&[b, a])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "gather_rows",
            vec![vec![3, 2]],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], vec![2, 0, 0, 1, 2].into())?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "reshape+mse",
            vec![vec![2, 3]],
            Box::new(|t, v| {
                let y = t.reshape(v[0], vec![3, 2])?;
                let target = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0])?;
                t.mse(y, &target, Some(&[1.0, 0.0, 1.0]))
            }),
        ),
        (
            "lin_comb",
            vec![vec![2, 2], vec![2, 2]],
            Box::new(|t, v| {
                let y = t.lin_comb(&[(v[0], 0.3), (v[1], -1.2)])?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
        ),
    ];
    for (seed, (name, shapes, f)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 1000);
        let mut params: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let report = grad_check(&*f, &mut params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn two_layer_conv_stack_mse_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random(&mut rng, &[8, 3]).with_requires_grad(false);
    let target = random(&mut rng, &[8, 2]).with_requires_grad(false);
    let mut params = vec![
        random(&mut rng, &[3, 3, 5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[3, 5, 2]),
        random(&mut rng, &[2]),
    ];
    let report = grad_check(
        |t, v| {
            let xin = t.constant(x.clone());
            let h = t.conv1d(xin, v[0], Some(v[1]))?;
            let h = t.relu(h);
            let y = t.conv1d(h, v[2], Some(v[3]))?;
            t.mse(y, &target, None)
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(params.iter().all(|p| p.grad().is_some()));
}

#[test]
fn backward_populates_every_reachable_leaf() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true));
    let c = tape.constant(Tensor::vector(vec![5.0, 6.0]));
    let y = tape.mul(a, b).unwrap();
    let y = tape.add(y, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
    assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    assert!(g.get(c).is_none());
}
