#![allow(dead_code)]

use deiqt::tensor::ParamSet;
use deiqt::{DeiqtModel, ModelConfig, Rng, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

pub fn rand_image(cfg: &ModelConfig, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn([cfg.channels, cfg.crop_size, cfg.crop_size], |_| rng.uniform())
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn linear(x: &Mat, params: &ParamSet<f64>, prefix: &str) -> Mat {
    let w = params.get(&format!("{prefix}.weight")).unwrap();
    let b = params.get(&format!("{prefix}.bias")).unwrap();
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fin);
            (0..fout)
                .map(|o| {
                    let mut s = b.data()[o];
                    for i in 0..fin {
                        s += row[i] * w.data()[i * fout + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, params: &ParamSet<f64>, prefix: &str) -> Mat {
    let g = params.get(&format!("{prefix}.gain")).unwrap().data();
    let b = params.get(&format!("{prefix}.bias")).unwrap().data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp(x: &Mat, params: &ParamSet<f64>, prefix: &str) -> Mat {
    let h = linear(x, params, &format!("{prefix}.fc1"));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(&h, params, &format!("{prefix}.fc2"))
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// One attention layer written as explicit loops: per head, the score
/// matrix, its softmax, and the weighted value sum, then `W_L`.
/// Returns the output and the per-head `[L][N]` weights.
pub fn naive_attention(queries: &Mat, memory: &Mat, params: &ParamSet<f64>, prefix: &str, heads: usize) -> (Mat, Vec<Mat>) {
    let q = linear(queries, params, &format!("{prefix}.q"));
    let k = linear(memory, params, &format!("{prefix}.k"));
    let v = linear(memory, params, &format!("{prefix}.v"));
    let d = q[0].len();
    let hd = d / heads;
    let mut cat = vec![vec![0.0; d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut wh = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in cols.clone() {
                cat[i][c] = p.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum();
            }
            wh.push(p);
        }
        weights.push(wh);
    }
    (linear(&cat, params, &format!("{prefix}.out")), weights)
}

pub fn toy_model(seed: u64) -> DeiqtModel<f64> {
    DeiqtModel::init(ModelConfig::toy(), &mut Rng::new(seed)).unwrap()
}

/// Overwrites every element of `name` with `value`.
pub fn fill(params: &mut ParamSet<f64>, name: &str, value: f64) {
    for v in params.get_mut(name).unwrap().data_mut() {
        *v = value;
    }
}
