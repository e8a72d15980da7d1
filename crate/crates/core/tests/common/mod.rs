#![allow(dead_code)]

use statex::arch::{Family, Model, ModelConfig};
use statex::numerics::{seeded_normal, Rng, Tensor};

pub fn config(family: Family, layers: usize, d: usize, heads: usize, dk: usize, dv: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        family,
        n_layers: layers,
        d_model: d,
        n_heads: heads,
        d_key: dk,
        d_value: dv,
        vocab,
        ffn_ratio: 2.0,
        delimiter_token: 0,
        delta_activation: Default::default(),
        tie_embeddings: false,
        key_shift: false,
        layer_overrides: vec![],
    }
}

/// A model whose every tensor is drawn with enough spread that all paths
/// carry signal: projections N(0, std), norm scales near 1, decay rates in
/// [0.5, 2].
pub fn randomized(config: ModelConfig, seed: u64, std: f64) -> Model<f64> {
    let mut m = Model::<f64>::init(config, seed).unwrap();
    let root = Rng::new(seed ^ 0x5eed);
    for (name, t) in m.params.iter_mut() {
        let mut rng = root.stream(name);
        let leaf = name.rsplit('.').next().unwrap();
        let shape = t.shape().to_vec();
        *t = match leaf {
            "norm" | "out_norm" | "final_norm" => seeded_normal(&mut rng, &shape, 0.1).unwrap().map(|x| 1.0 + x),
            "a" => Tensor::from_vec(&shape, (0..t.len()).map(|_| rng.uniform_range(0.5, 2.0)).collect()).unwrap(),
            "dt_bias" => seeded_normal(&mut rng, &shape, 0.5).unwrap().map(|x| x - 1.0),
            "d_skip" | "b_r" => seeded_normal(&mut rng, &shape, 0.5).unwrap(),
            _ => seeded_normal(&mut rng, &shape, std).unwrap(),
        };
    }
    m
}

pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed).stream("tokens");
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

pub fn input(t: usize, d: usize, seed: u64) -> Tensor<f64> {
    seeded_normal(&mut Rng::new(seed).stream("input"), &[t, d], 1.0).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
