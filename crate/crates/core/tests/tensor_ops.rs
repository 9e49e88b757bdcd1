mod common;

use common::{rand_image, rand_tensor};
use deiqt::tensor::{grad_check, ParamSet};
use deiqt::vit_encoder::{mhsa, AttentionParams};
use deiqt::{DeiqtModel, ModelConfig, Rng, Tape, Tensor};
use proptest::prelude::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let eye = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::from_f64([2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(eye.matmul(&b).unwrap(), b);
    let a = Tensor::<f64>::from_f64([1, 2], &[1.0, 2.0]).unwrap();
    let c = Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap();
    assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(11);
    let mut shapes = vec![(5, 7, 3)];
    while shapes.len() < 20 {
        shapes.push((1 + rng.below(17), 1 + rng.below(17), 1 + rng.below(17)));
    }
    for (m, k, n) in shapes {
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let want = naive_matmul(a.data(), b.data(), m, k, n);

        let got = a.matmul(&b).unwrap();
        let err64 = got.data().iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err64 <= 1e-12, "{m}x{k}x{n}: {err64}");

        let got32 = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap();
        let err32 = got32
            .data()
            .iter()
            .zip(&want)
            .map(|(&x, y)| (x as f64 - y).abs())
            .fold(0.0, f64::max);
        assert!(err32 <= 1e-4, "{m}x{k}x{n} f32: {err32}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([3, 2], &[0.0, 0.0, 2f64.ln(), 0.0, 1000.0, 0.0]).unwrap());
    let y = tape.softmax(x);
    let v = tape.value(y).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert!((v[2] - 2.0 / 3.0).abs() < 1e-15 && (v[3] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(&v[4..], &[1.0, 0.0]);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let gain = tape.constant(Tensor::full([3], 1.0));
    let bias = tape.constant(Tensor::zeros([3]));
    let x = tape.constant(Tensor::from_f64([1, 3], &[1.0, 1.0, 1.0]).unwrap());
    let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let gain = tape.constant(Tensor::full([2], 1.0));
    let bias = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(Tensor::from_f64([1, 2], &[1.0, 3.0]).unwrap());
    let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9, "{v:?}");
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([3], &[0.0, 10.0, -10.0]).unwrap());
    let y = tape.gelu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!(v[2].abs() < 1e-6);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([3], &[0.3, -2.0, 5.0]).unwrap().with_requires_grad(true));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap().with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

/// `f = Σ gelu(xA) ⊙ c`, `g = Σ softmax(LN(xB)) ⊙ c`.
fn objective(tape: &mut Tape<f64>, x: deiqt::Var, consts: &[Tensor<f64>], alpha: f64, beta: f64) -> deiqt::Var {
    let a = tape.constant(consts[0].clone());
    let b = tape.constant(consts[1].clone());
    let c = tape.constant(consts[2].clone());
    let gain = tape.constant(Tensor::full([4], 1.3));
    let bias = tape.constant(Tensor::full([4], 0.1));
    let h = tape.matmul(x, a).unwrap();
    let h = tape.gelu(h);
    let h = tape.mul(h, c).unwrap();
    let f = tape.sum(h);
    let k = tape.matmul(x, b).unwrap();
    let k = tape.layer_norm(k, gain, bias, 1e-6).unwrap();
    let k = tape.softmax(k);
    let k = tape.mul(k, c).unwrap();
    let g = tape.sum(k);
    let f = tape.scale(f, alpha);
    let g = tape.scale(g, beta);
    tape.add(f, g).unwrap()
}

#[test]
fn backward_is_linear() {
    let mut rng = Rng::new(5);
    for _ in 0..10 {
        let x0 = rand_tensor(&[3, 5], &mut rng).with_requires_grad(true);
        let consts = [rand_tensor(&[5, 4], &mut rng), rand_tensor(&[5, 4], &mut rng), rand_tensor(&[3, 4], &mut rng)];
        let (alpha, beta) = (rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0));
        let grad = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l = objective(&mut tape, x, &consts, a, b);
            tape.backward(l).unwrap().get(x).unwrap().data().to_vec()
        };
        let combined = grad(alpha, beta);
        let (gf, gg) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..combined.len() {
            let want = alpha * gf[i] + beta * gg[i];
            assert!((combined[i] - want).abs() <= 1e-10, "{} vs {want}", combined[i]);
        }
    }
}

#[test]
fn mhsa_block_gradient_check() {
    let mut rng = Rng::new(21);
    let d = 8;
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(&[8, d], &mut rng));
    params.insert("c", rand_tensor(&[8, d], &mut rng));
    for part in ["q", "k", "v", "out"] {
        params.insert(format!("attn.{part}.weight"), rand_tensor(&[d, d], &mut rng).map(|v| v * 0.5));
        params.insert(format!("attn.{part}.bias"), rand_tensor(&[d], &mut rng).map(|v| v * 0.1));
    }
    let report = grad_check(&params, 1e-4, |tape, b| {
        let attn = AttentionParams::bind(b, "attn")?;
        let (out, _) = mhsa(tape, b.get("x")?, &attn, 2, 1)?;
        let weighted = tape.mul(out, b.get("c")?)?;
        Ok(tape.sum(weighted))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn full_toy_model_gradient_check() {
    let cfg = ModelConfig::toy();
    let model = DeiqtModel::<f64>::init(cfg.clone(), &mut Rng::new(2)).unwrap();
    let mut rng = Rng::new(102);
    let imgs = [rand_image(&cfg, &mut rng), rand_image(&cfg, &mut rng)];
    let patches = model.patch_batch(&[&imgs[0], &imgs[1]]).unwrap();
    let report = grad_check(model.params(), 1e-4, |tape, bound| {
        let pv = tape.constant(patches.clone());
        let pass = model.forward(tape, bound.clone(), pv, 2)?;
        tape.smooth_l1(pass.decoder.score, &[0.3, 0.9], 1.0)
    })
    .unwrap();
    assert_eq!(report.elements, model.params().numel());
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

proptest! {
    #[test]
    fn softmax_slices_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = v.len() / cols;
        prop_assume!(rows > 0);
        let data = v[..rows * cols].to_vec();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_centers_rows(v in prop::collection::vec(-100.0f64..100.0, 6)) {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::full([3], 1.0));
        let bias = tape.constant(Tensor::zeros([3]));
        let x = tape.constant(Tensor::new(vec![2, 3], v).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        for row in tape.value(y).data().chunks(3) {
            prop_assert!(row.iter().sum::<f64>().abs() / 3.0 <= 1e-6);
        }
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
