use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn new_rejects_bad_shape_and_nan() {
    assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::<f32>::new([1], vec![f32::NAN]).is_err());
    assert!(Tensor::<f32>::new([1], vec![f32::INFINITY]).is_err());
}

#[test]
fn matmul_identity_and_hand_cases() {
    let i = Tensor::<f32>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(i.matmul(&b).unwrap(), b);
    let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0]]);
    let c = Tensor::from_rows(&[&[3.0], &[4.0]]);
    assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor::<f64>(&mut rng, &[5, 7]);
    let b = rand_tensor::<f64>(&mut rng, &[7, 3]);
    let fast = a.matmul(&b).unwrap();
    for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-6);
    }
    let a32: Tensor<f32> = a.cast();
    let b32: Tensor<f32> = b.cast();
    let fast32 = a32.matmul(&b32).unwrap();
    for (x, y) in fast32.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((*x as f64 - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::<f32>::zeros([2, 3]);
    assert!(matches!(a.matmul(&a), Err(crate::Error::Shape(_))));
}

#[test]
fn matmul_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor::<f32>(&mut rng, &[4, 6]);
    assert_eq!(Tensor::eye(4).matmul(&a).unwrap(), a);
    assert_eq!(a.matmul(&Tensor::eye(6)).unwrap(), a);
}

#[test]
fn softmax_examples() {
    let t = Tensor::<f64>::new([2], vec![0.0, 0.0]).unwrap();
    assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);
    let t = Tensor::<f32>::new([2], vec![1000.0, 1000.0]).unwrap();
    assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);
    let t = Tensor::<f64>::new([2], vec![0.0, 3f64.ln()]).unwrap();
    let s = t.softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-12);
    assert!((s.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_along_leading_axis() {
    let t = Tensor::<f64>::from_rows(&[&[0.0, 1.0], &[3f64.ln(), 1.0]]);
    let s = t.softmax(0).unwrap();
    assert!((s.at(0, 0) - 0.25).abs() < 1e-12);
    assert!((s.at(1, 0) - 0.75).abs() < 1e-12);
    assert!((s.at(0, 1) - 0.5).abs() < 1e-12);
    assert!(t.softmax(2).is_err());
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::<f64>::full([3], 1.0);
    let zero = Tensor::<f64>::zeros([3]);
    let x = Tensor::<f64>::new([1, 3], vec![5.0, 5.0, 5.0]).unwrap();
    assert_eq!(x.layer_norm(&one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0, 0.0]);

    let x = Tensor::<f64>::new([1, 2], vec![1.0, 3.0]).unwrap();
    let y = x
        .layer_norm(&Tensor::full([2], 1.0), &Tensor::zeros([2]), 1e-12)
        .unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

    let x = Tensor::<f64>::new([2, 3], vec![1.0, -2.0, 7.0, 0.5, 0.25, 9.0]).unwrap();
    let b = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
    let y = x.layer_norm(&Tensor::zeros([3]), &b, 1e-5).unwrap();
    for r in 0..2 {
        assert_eq!(y.row(r), b.data());
    }
}

#[test]
fn gelu_examples() {
    let t = Tensor::<f64>::new([3], vec![0.0, 10.0, 1.0]).unwrap().gelu();
    assert_eq!(t.data()[0], 0.0);
    assert!((t.data()[1] - 10.0).abs() < 1e-3);
    assert!((t.data()[2] - 0.8412).abs() < 1e-4);
}

fn identity_attention(tape: &mut Tape<f64>, d: usize) -> AttentionParams {
    let mut eye = || tape.constant(Tensor::eye(d));
    let (wq, wk, wv, wo) = (eye(), eye(), eye(), eye());
    let mut zero = || tape.constant(Tensor::zeros([d]));
    let (bq, bk, bv, bo) = (zero(), zero(), zero(), zero());
    AttentionParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

#[test]
fn attention_single_token_returns_value() {
    let mut tape = Tape::<f64>::new();
    let p = identity_attention(&mut tape, 4);
    let q = tape.constant(Tensor::new([1, 4], vec![0.3, -0.1, 2.0, 1.0]).unwrap());
    let kv = tape.constant(Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = tape.attention(q, kv, &p, 2).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn attention_uniform_keys_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let p = identity_attention(&mut tape, 4);
    let q = tape.constant(rand_tensor(&mut rng, &[3, 4]));
    let row = [0.2, -0.7, 0.1, 0.9];
    let kv = tape.constant(Tensor::from_rows(&[&row, &row, &row, &row, &row]));
    let (_, weights) = tape.attention_with_weights(q, kv, &p, 2).unwrap();
    for w in weights {
        for v in tape.value(w).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }
}

fn attention_oracle(
    q_src: &Tensor<f64>,
    kv_src: &Tensor<f64>,
    w: &[Tensor<f64>; 8],
    heads: usize,
) -> Vec<f64> {
    let proj = |x: &Tensor<f64>, wm: &Tensor<f64>, b: &Tensor<f64>| -> Vec<Vec<f64>> {
        let (r, c) = x.dims2().unwrap();
        let o = wm.cols();
        (0..r)
            .map(|i| {
                (0..o)
                    .map(|j| b.data()[j] + (0..c).map(|p| x.at(i, p) * wm.at(p, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let q = proj(q_src, &w[0], &w[1]);
    let k = proj(kv_src, &w[2], &w[3]);
    let v = proj(kv_src, &w[4], &w[5]);
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                merged[i][c] = exps.iter().zip(&v).map(|(e, vj)| e / z * vj[c]).sum();
            }
        }
    }
    let m = Tensor::new([q.len(), d], merged.concat()).unwrap();
    proj(&m, &w[6], &w[7]).concat()
}

#[test]
fn attention_matches_per_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q_src = rand_tensor::<f64>(&mut rng, &[3, 8]);
    let kv_src = rand_tensor::<f64>(&mut rng, &[5, 8]);
    let w: [Tensor<f64>; 8] = std::array::from_fn(|i| {
        if i % 2 == 0 {
            rand_tensor(&mut rng, &[8, 8])
        } else {
            rand_tensor(&mut rng, &[8])
        }
    });
    let mut tape = Tape::<f64>::new();
    let v: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
    let p = AttentionParams {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    };
    let q = tape.constant(q_src.clone());
    let kv = tape.constant(kv_src.clone());
    let out = tape.attention(q, kv, &p, 2).unwrap();
    assert_eq!(tape.value(out).shape(), &[3, 8]);
    let oracle = attention_oracle(&q_src, &kv_src, &w, 2);
    for (a, b) in tape.value(out).data().iter().zip(oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut tape = Tape::<f64>::new();
    let p = identity_attention(&mut tape, 4);
    let x = tape.constant(Tensor::zeros([2, 4]));
    assert!(tape.attention(x, x, &p, 3).is_err());
}

#[test]
fn backward_linear_and_square() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(), true);
    let x = tape.constant(Tensor::new([3], vec![4.0, 5.0, 6.0]).unwrap());
    let wx = tape.mul(w, x).unwrap();
    let loss = tape.sum(wx);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    assert!(g.get(x).is_none());

    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
    let unused = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
    let loss = tape.sum_squares(w);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(g.get_or_zeros(&tape, unused).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::zeros([2]), true);
    assert!(tape.backward(w).is_err());
}

#[test]
fn constants_are_not_recorded() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::full([2, 2], 1.0));
    let b = tape.matmul(a, a).unwrap();
    assert!(!tape.requires_grad(b));
}

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
{
    let r = check_gradients(name, inputs, H, TOL, f).unwrap();
    assert!(r.passed(), "{name}: rel error {}", r.max_rel_error);
}

// Reduces any output to a scalar through fixed random weights so every
// output element contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

#[test]
fn finite_difference_elementary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor::<f64>(&mut rng, &[3, 4]);
    let b = rand_tensor::<f64>(&mut rng, &[4, 2]);
    let c = rand_tensor::<f64>(&mut rng, &[3, 4]);
    let bias = rand_tensor::<f64>(&mut rng, &[4]);

    assert_grad("matmul", &[a.clone(), b.clone()], |t, v| {
        let o = t.matmul(v[0], v[1])?;
        weighted_sum(t, o, 1)
    });
    assert_grad("matmul_nt", &[a.clone(), c.clone()], |t, v| {
        let o = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, o, 2)
    });
    assert_grad("add/sub/mul", &[a.clone(), c.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let m = t.mul(s, d)?;
        weighted_sum(t, m, 3)
    });
    assert_grad("add_bias/scale", &[a.clone(), bias.clone()], |t, v| {
        let o = t.add_bias(v[0], v[1])?;
        let o = t.scale(o, -1.7);
        weighted_sum(t, o, 4)
    });
    assert_grad("transpose/reshape", &[a.clone()], |t, v| {
        let o = t.transpose(v[0])?;
        let o = t.reshape(o, &[2, 6])?;
        weighted_sum(t, o, 5)
    });
    assert_grad("slice/concat", &[a.clone(), c.clone()], |t, v| {
        let s = t.slice_cols(v[0], 1, 3)?;
        let cc = t.concat_cols(&[s, v[1]])?;
        let r = t.concat_rows(&[v[0], v[1]])?;
        let x = weighted_sum(t, cc, 6)?;
        let y = weighted_sum(t, r, 7)?;
        t.add(x, y)
    });
    assert_grad("gather_rows", &[a.clone()], |t, v| {
        let o = t.gather_rows(v[0], &[2, 0, 2])?;
        weighted_sum(t, o, 8)
    });
    assert_grad("softmax", &[a.clone()], |t, v| {
        let r = t.softmax(v[0], 1)?;
        let c = t.softmax(v[0], 0)?;
        let x = weighted_sum(t, r, 9)?;
        let y = weighted_sum(t, c, 10)?;
        t.add(x, y)
    });
    assert_grad("gelu", &[a.clone()], |t, v| {
        let o = t.gelu(v[0]);
        weighted_sum(t, o, 11)
    });
    let gain = rand_tensor::<f64>(&mut rng, &[4]);
    assert_grad("layer_norm", &[a.clone(), gain, bias.clone()], |t, v| {
        let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, o, 12)
    });
    assert_grad("mean_rows/sum_squares", &[a.clone()], |t, v| {
        let m = t.mean_rows(v[0])?;
        let x = weighted_sum(t, m, 13)?;
        let s = t.sum_squares(v[0]);
        t.add(x, s)
    });
    assert_grad("sum_abs", &[a.clone()], |t, v| Ok(t.sum_abs(v[0])));
    let logits = rand_tensor::<f64>(&mut rng, &[1, 3]);
    assert_grad("cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], 2));
}

#[test]
fn finite_difference_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inputs = vec![
        rand_tensor::<f64>(&mut rng, &[3, 4]),
        rand_tensor::<f64>(&mut rng, &[5, 4]),
    ];
    for i in 0..8 {
        let shape: &[usize] = if i % 2 == 0 { &[4, 4] } else { &[4] };
        inputs.push(rand_tensor(&mut rng, shape));
    }
    assert_grad("cross attention", &inputs, |t, v| {
        let p = AttentionParams {
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
        };
        let o = t.attention(v[0], v[1], &p, 2)?;
        weighted_sum(t, o, 14)
    });
}

mod props {
    use proptest::prelude::*;

    use super::super::Tensor;

    proptest! {
        #[test]
        fn softmax_sums_to_one(data in proptest::collection::vec(-80.0f32..80.0, 1..40)) {
            let n = data.len();
            let s = Tensor::new([n], data).unwrap().softmax(0).unwrap();
            let total: f64 = s.data().iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn ops_are_deterministic(seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = super::rand_tensor::<f32>(&mut rng, &[6, 5]);
            let b = super::rand_tensor::<f32>(&mut rng, &[5, 4]);
            let x = a.matmul(&b).unwrap().softmax(1).unwrap().gelu();
            let y = a.matmul(&b).unwrap().softmax(1).unwrap().gelu();
            prop_assert_eq!(x.data(), y.data());
        }
    }
}
