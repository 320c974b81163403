use jrm::gradcheck::check;
use jrm::rng::SeedStream;
use jrm::tensor::{AttnLayout, Tape, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeedStream::new(seed))
}

#[test]
fn matmul_gradient() {
    let r = check(&[randn(&[5, 7], 1), randn(&[7, 3], 2)], EPS, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn sigmoid_gradient() {
    let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
    let r = check(&[x], EPS, |t, v| {
        let s = t.sigmoid(v[0])?;
        t.sum(s)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn pointwise_gradients() {
    let x = Tensor::vector(vec![0.3, 1.7, 0.9, 2.5]);
    let y = Tensor::vector(vec![-0.4, 1.1, 0.5, -2.0]);
    let r = check(&[x, y], EPS, |t, v| {
        let a = t.softplus(v[1])?;
        let b = t.tanh(v[1])?;
        let c = t.gelu(v[1])?;
        let d = t.log(v[0])?;
        let e = t.exp(v[1])?;
        let f = t.sqrt(v[0])?;
        let g = t.div(a, v[0])?;
        let h = t.mul(b, c)?;
        let i = t.sub(d, e)?;
        let j = t.add_scalar(f, 0.5)?;
        let k = t.scale(j, -1.3)?;
        let parts = [g, h, i, k];
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p)?;
        }
        let sq = t.mul(acc, acc)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn scalar_broadcast_gradient() {
    let r = check(&[randn(&[3, 4], 3), Tensor::scalar(0.7)], EPS, |t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.div(a, v[1])?;
        let c = t.add(b, v[1])?;
        let d = t.mul(c, a)?;
        t.mean(d)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_ce_gradient() {
    let targets = [3usize, 0, 9, 4];
    let r = check(&[randn(&[4, 10], 4)], EPS, |t, v| t.softmax_ce(v[0], &targets)).unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn layer_norm_gradient() {
    let r = check(
        &[randn(&[3, 8], 5), randn(&[8], 6), randn(&[8], 7), randn(&[3, 8], 8)],
        EPS,
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = t.mul(y, v[3])?;
            t.sum(w)
        },
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn row_manipulation_gradients() {
    let r = check(&[randn(&[4, 3], 9), randn(&[3], 10), randn(&[2, 3], 11)], EPS, |t, v| {
        let b = t.expand_rows(v[1], 4)?;
        let x = t.add(v[0], b)?;
        let cat = t.concat_rows(&[x, v[2]])?;
        let sel = t.select_rows(cat, &[5, 0, 0, 2, 4])?;
        let cols = t.select_cols(sel, &[2, 0, 2])?;
        let re = t.reshape(cols, &[3, 5])?;
        let sq = t.mul(re, re)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

fn attention_check(causal: bool) {
    let layout = AttnLayout {
        seqs: 2,
        len: 4,
        heads: 2,
        causal,
    };
    let r = check(
        &[randn(&[8, 6], 12), randn(&[8, 6], 13), randn(&[8, 6], 14), randn(&[8, 6], 15)],
        EPS,
        |t, v| {
            let y = t.attention(v[0], v[1], v[2], layout)?;
            let w = t.mul(y, v[3])?;
            t.sum(w)
        },
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "causal={causal}: {r:?}");
}

#[test]
fn attention_gradient() {
    attention_check(false);
    attention_check(true);
}

#[test]
fn attention_shared_input_gradient() {
    let layout = AttnLayout {
        seqs: 1,
        len: 5,
        heads: 1,
        causal: false,
    };
    let r = check(&[randn(&[5, 4], 16)], EPS, |t, v| {
        let y = t.attention(v[0], v[0], v[0], layout)?;
        let s = t.mul(y, y)?;
        t.sum(s)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

fn mlp(t: &mut Tape, v: &[Var]) -> jrm::tensor::Result<Var> {
    let h = t.matmul(v[0], v[1])?;
    let b1 = t.expand_rows(v[2], 6)?;
    let h = t.add(h, b1)?;
    let h = t.gelu(h)?;
    let o = t.matmul(h, v[3])?;
    let b2 = t.expand_rows(v[4], 6)?;
    let o = t.add(o, b2)?;
    t.softmax_ce(o, &[0, 1, 2, 3, 4, 0])
}

#[test]
fn two_layer_mlp_gradient() {
    let inputs = [
        randn(&[6, 5], 20),
        randn(&[5, 8], 21),
        randn(&[8], 22),
        randn(&[8, 5], 23),
        randn(&[5], 24),
    ];
    let r = check(&inputs, EPS, mlp).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn same_inputs_bit_identical_gradients() {
    let inputs = [
        randn(&[6, 5], 20),
        randn(&[5, 8], 21),
        randn(&[8], 22),
        randn(&[8, 5], 23),
        randn(&[5], 24),
    ];
    let run = || {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.param(x)).collect();
        let l = mlp(&mut t, &vars).unwrap();
        t.backward(l).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| t.grad(v).unwrap()).collect();
        (t.item(l).to_bits(), grads)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Random chains of ops drawn from the whole vocabulary.
    #[test]
    fn random_compositions_pass_gradcheck(seed in 0u64..10_000, ops in prop::collection::vec(0u8..8, 1..6)) {
        let a = randn(&[3, 4], seed);
        let w = randn(&[4, 4], seed + 1);
        let g = randn(&[4], seed + 2);
        let r = check(&[a, w, g], EPS, |t, v| {
            let mut x = v[0];
            for &op in &ops {
                x = match op {
                    0 => t.matmul(x, v[1])?,
                    1 => t.tanh(x)?,
                    2 => t.sigmoid(x)?,
                    3 => t.gelu(x)?,
                    4 => { let b = t.expand_rows(v[2], 3)?; t.add(x, b)? }
                    5 => { let z = t.constant(&Tensor::zeros(&[4])); t.layer_norm(x, v[2], z, 1e-5)? }
                    6 => t.softplus(x)?,
                    _ => t.mul(x, x)?,
                };
            }
            let s = t.mul(x, x)?;
            t.sum(s)
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-4, "{:?} {:?}", ops, r);
    }
}
