mod common;

use common::{fill, rand_image, toy_model};
use deiqt::data::{gen_synthetic_dataset, DistortionKind};
use deiqt::metrics::{
    attention_map, attention_map_from_weights, cls_grad_stats, evaluate, panel_cosine, plcc, srcc, EvalReport,
};
use deiqt::training::{fit, OptimizerState, TrainConfig};
use deiqt::{DeiqtModel, Error, ModelConfig, Rng, Variant};
use proptest::prelude::*;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Rank of each element by counting smaller elements; inputs are distinct.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter().map(|a| 1.0 + x.iter().filter(|b| *b < a).count() as f64).collect()
}

#[test]
fn srcc_matches_brute_force_on_all_small_permutations() {
    for n in 2..=6 {
        let label: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 1.0).collect();
        for perm in permutations(n) {
            let pred: Vec<f64> = perm.iter().map(|&i| (i as f64).powi(3) + 0.5).collect();
            let (rp, rl) = (brute_ranks(&pred), brute_ranks(&label));
            let d2: f64 = rp.iter().zip(&rl).map(|(a, b)| (a - b) * (a - b)).sum();
            let nf = n as f64;
            let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            assert_eq!(srcc(&pred, &label).unwrap(), want, "{perm:?}");
        }
    }
}

#[test]
fn worked_examples() {
    assert!((srcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.982).abs() <= 1e-3);
}

#[test]
fn leaked_labels_and_constant_models() {
    let labels = [0.1, 0.5, 0.2, 0.9];
    let r = EvalReport::from_pairs(labels.iter().map(|&l| (l, l)).collect()).unwrap();
    assert_eq!((r.srcc, r.plcc), (1.0, 1.0));

    let m = gen_synthetic_dataset(2, 3, &[DistortionKind::WhiteNoise], 12, &Rng::new(1)).unwrap();
    let mut model = toy_model(1);
    fill(model.params_mut(), "head.fc2.weight", 0.0);
    assert!(matches!(evaluate(&model, &m, 2, 0), Err(Error::Degenerate(_))));

    let one = gen_synthetic_dataset(1, 2, &[DistortionKind::WhiteNoise], 12, &Rng::new(1)).unwrap();
    let one = deiqt::data::Manifest::new(one.samples()[..1].to_vec(), "single").unwrap();
    assert!(matches!(evaluate(&toy_model(1), &one, 1, 0), Err(Error::Degenerate(_))));
}

#[test]
fn evaluation_is_deterministic_and_untrained_models_are_near_chance() {
    let m = gen_synthetic_dataset(5, 5, &DistortionKind::ALL, 16, &Rng::new(2)).unwrap();
    assert_eq!(m.len(), 100);
    let model = toy_model(3);
    let a = evaluate(&model, &m, 1, 7).unwrap();
    let b = evaluate(&model, &m, 1, 7).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    let ten = evaluate(&model, &m, 10, 7).unwrap();
    assert!(ten.srcc.abs() < 0.5, "{}", ten.summary_line());
}

#[test]
fn panel_matrix_matches_direct_cosines() {
    let m = gen_synthetic_dataset(2, 2, &DistortionKind::ALL, 12, &Rng::new(4)).unwrap();
    let model = DeiqtModel::<f64>::init_with_std(ModelConfig::toy(), 0.3, &mut Rng::new(5)).unwrap();
    let diag = panel_cosine(&model, &m).unwrap();
    let l = diag.size();
    let mut want = vec![vec![0.0; l]; l];
    for s in m.samples() {
        let img = s.image.load().unwrap();
        let q = model.predict(&img.to_tensor()).unwrap().quality_embeddings;
        for i in 0..l {
            for j in 0..l {
                let (a, b) = (q.row(i), q.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                want[i][j] += dot / (na * nb) / m.len() as f64;
            }
        }
    }
    for i in 0..l {
        assert!((diag.matrix[i][i] - 1.0).abs() <= 1e-6);
        for j in 0..l {
            assert_eq!(diag.matrix[i][j], diag.matrix[j][i]);
            assert!((diag.matrix[i][j] - want[i][j]).abs() <= 1e-10);
        }
    }
    assert_eq!(diag.spread.len(), m.len());

    let mut zero = model.clone();
    fill(zero.params_mut(), "decoder.panel", 0.0);
    let diag = panel_cosine(&zero, &m).unwrap();
    assert!(diag.matrix.iter().flatten().all(|v| (v - 1.0).abs() <= 1e-5));
}

#[test]
fn gradient_histograms_conserve_mass() {
    let m = gen_synthetic_dataset(3, 2, &[DistortionKind::GaussianBlur], 12, &Rng::new(6)).unwrap();
    let mut model = toy_model(7);
    let cfg = TrainConfig {
        epochs: 1,
        crops_per_image: 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut st = OptimizerState::new(model.params(), &cfg);
    let log = fit(&mut model, &m, &cfg, &mut st).unwrap();
    let h = cls_grad_stats(&log, 16).unwrap();
    assert_eq!(h.steps.len(), log.records.len());
    assert_eq!(h.edges.len(), 17);
    for s in &h.steps {
        assert_eq!(s.counts.iter().sum::<usize>(), 16);
    }
    assert_eq!(h.to_text().lines().count(), 1 + log.records.len());
}

#[test]
fn attention_map_contract() {
    let model = DeiqtModel::<f64>::init_with_std(ModelConfig::toy(), 0.5, &mut Rng::new(8)).unwrap();
    let cfg = model.config().clone();
    let img = rand_image(&cfg, &mut Rng::new(9));
    let pred = model.predict(&img).unwrap();
    let w = &pred.attention_maps[0];
    for row in w.data().chunks(cfg.num_patches()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let image = deiqt::data::Image::new(
        3,
        12,
        12,
        img.data().iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let map = attention_map(&model, &image).unwrap();
    assert_eq!(map.shape(), &[12, 12]);
    assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(map.data().iter().copied().fold(0.0, f64::max), 1.0);
    let again = attention_map_from_weights(w, cfg.grid(), cfg.patch_size).unwrap();
    assert!(again.max_abs_diff(&map) <= 1e-6);

    let enc = DeiqtModel::<f64>::init(
        ModelConfig {
            variant: Variant::EncoderOnly,
            ..ModelConfig::toy()
        },
        &mut Rng::new(8),
    )
    .unwrap();
    assert!(matches!(attention_map(&enc, &image), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn srcc_ignores_monotone_relabeling(v in prop::collection::vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let label: Vec<f64> = v.iter().map(|_| rng.uniform()).collect();
        prop_assume!(label.iter().any(|&l| l != label[0]) && v.iter().any(|&p| p != v[0]));
        let base = srcc(&v, &label).unwrap();
        let warped: Vec<f64> = v.iter().map(|x| x.exp() * 3.0 + x).collect();
        prop_assert!((srcc(&warped, &label).unwrap() - base).abs() <= 1e-10);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn plcc_ignores_positive_affine_maps(v in prop::collection::vec(-10.0f64..10.0, 3..30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let label: Vec<f64> = v.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.1).collect();
        prop_assume!(v.iter().any(|&p| (p - v[0]).abs() > 1e-6));
        let base = plcc(&v, &label).unwrap();
        let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        prop_assert!((plcc(&moved, &label).unwrap() - base).abs() <= 1e-10);
        prop_assert!((plcc(&moved, &v).unwrap() - 1.0).abs() <= 1e-10);
    }
}
