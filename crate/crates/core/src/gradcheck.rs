//! Finite-difference verification of every differentiable op and of the
//! composed prediction objective, all in 64-bit.

use rand::Rng as _;

use crate::encoders::{patchify, tokenize_text, EncoderConfig, ImageTensor};
use crate::error::Result;
use crate::masking::{sample_masks, MaskConfig};
use crate::model::{self, CrossAttnConfig, ModelConfig, ModelInput, PredictorConfig};
use crate::numerics::gradcheck::ZERO_FLOOR;
use crate::numerics::{check_gradients, AttentionParams, GradCheck, Tape, Tensor, Var};
use crate::params::{Graph, ParamStore};
use crate::rng::{self, Rng};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("finite")
}

// Contracts an arbitrary output with fixed random weights.
fn project(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = t.value(out).shape().to_vec();
    let w = t.constant(rand_tensor(&mut rng::derive(seed, &[]), &shape));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

/// Central differences over every element of every trainable tensor in
/// `store`, against reverse-mode gradients of `f`.
pub fn check_store_gradients<F>(
    name: &str,
    store: &ParamStore<f64>,
    h: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (pname, analytic) in &grads {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for e in 0..analytic.numel() {
            let orig = store.value(pname)?.data()[e];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(pname)?.value.data_mut()[e] = v;
                let mut g = Graph::no_grad(&probe);
                let out = f(&mut g)?;
                Ok(g.value(out).item())
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            probe.get_mut(pname)?.value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(ZERO_FLOOR);
        worst = worst.max(diff2.sqrt() / scale);
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

fn suite_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            max_text_len: 12,
            frozen: true,
        },
        fusion: CrossAttnConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            mlp_ratio: 2,
            image_dim: 8,
            text_dim: 8,
        },
        predictor: PredictorConfig {
            depth: 1,
            heads: 2,
            width: 8,
            mlp_ratio: 2,
        },
        ..Default::default()
    }
}

/// Composed objective on a tiny model: gradients with respect to the online
/// fusion module and the predictor.
pub fn check_prediction_objective() -> Result<GradCheck> {
    let cfg = suite_model();
    let mut r = rng::derive(0x6c70, &[]);
    let store: ParamStore<f64> = model::init_model(&cfg, &mut r)?;
    let img = ImageTensor::new(12, 12, (0..3 * 144).map(|_| r.gen_range(0.0..=1.0)).collect())?;
    let patches = patchify(&img, 4)?.cast::<f64>();
    let ids = tokenize_text(b"red sq", 12);
    let masks = sample_masks((3, 3), &MaskConfig::default(), &mut r)?;
    let input = ModelInput {
        patches: &patches,
        grid: (3, 3),
        ids: &ids,
    };
    check_store_gradients("loss_LP (composed)", &store, STEP, TOLERANCE, |g| {
        Ok(model::example_loss(g, &cfg, &input, &input, &masks)?.0)
    })
}

/// Every elementary op, attention, and the composed objective.
pub fn run_suite() -> Result<Vec<GradCheck>> {
    let mut r = rng::derive(0x67c, &[]);
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[4, 2]);
    let c = rand_tensor(&mut r, &[3, 4]);
    let bias = rand_tensor(&mut r, &[4]);
    let gain = rand_tensor(&mut r, &[4]);
    let logits = rand_tensor(&mut r, &[1, 3]);
    let check = |name: &str, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        check_gradients(name, inputs, STEP, TOLERANCE, f)
    };

    let mut out = vec![
        check("matmul", &[a.clone(), b.clone()], &|t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, 1)
        })?,
        check("matmul_nt", &[a.clone(), c.clone()], &|t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            project(t, o, 2)
        })?,
        check("add/sub/mul", &[a.clone(), c.clone()], &|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            project(t, m, 3)
        })?,
        check("add_bias/scale", &[a.clone(), bias.clone()], &|t, v| {
            let o = t.add_bias(v[0], v[1])?;
            let o = t.scale(o, 0.7);
            project(t, o, 4)
        })?,
        check("transpose/reshape", &[a.clone()], &|t, v| {
            let o = t.transpose(v[0])?;
            let o = t.reshape(o, &[6, 2])?;
            project(t, o, 5)
        })?,
        check("slice/concat", &[a.clone(), c.clone()], &|t, v| {
            let s = t.slice_cols(v[0], 1, 3)?;
            let cc = t.concat_cols(&[s, v[1]])?;
            let rr = t.concat_rows(&[cc, cc])?;
            project(t, rr, 6)
        })?,
        check("gather_rows", &[a.clone()], &|t, v| {
            let o = t.gather_rows(v[0], &[1, 1, 0])?;
            project(t, o, 7)
        })?,
        check("softmax", &[a.clone()], &|t, v| {
            let o = t.softmax(v[0], 1)?;
            project(t, o, 8)
        })?,
        check("layer_norm", &[a.clone(), gain, bias.clone()], &|t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(t, o, 9)
        })?,
        check("gelu", &[a.clone()], &|t, v| {
            let o = t.gelu(v[0]);
            project(t, o, 10)
        })?,
        check("sum/mean_rows/sum_squares/sum_abs", &[a.clone()], &|t, v| {
            let m = t.mean_rows(v[0])?;
            let m = project(t, m, 11)?;
            let s = t.sum_squares(v[0]);
            let q = t.sum_abs(v[0]);
            let u = t.sum(v[0]);
            let x = t.add(m, s)?;
            let y = t.add(q, u)?;
            t.add(x, y)
        })?,
        check("cross_entropy", &[logits], &|t, v| t.cross_entropy(v[0], 1))?,
    ];

    let mut attn_inputs = vec![rand_tensor(&mut r, &[3, 8]), rand_tensor(&mut r, &[5, 8])];
    for i in 0..8 {
        let shape: &[usize] = if i % 2 == 0 { &[8, 8] } else { &[8] };
        attn_inputs.push(rand_tensor(&mut r, shape));
    }
    out.push(check("attention", &attn_inputs, &|t, v| {
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
        project(t, o, 12)
    })?);

    out.push(check_prediction_objective()?);
    Ok(out)
}
