use std::time::Instant;
use v4d_core::autodiff::Graph;
use v4d_core::model::{forward, init_params, insert_params, ModelConfig};
use v4d_core::morphology::make_elements;
use v4d_core::losses::{compound, LossWeights};

fn main() {
    let dims = [32usize, 64, 64];
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|i| ((i * 2654435761usize) % 1000) as f32 / 1000.0).collect();
    let model_cfg = ModelConfig::default();
    let params = init_params(&model_cfg, 1).unwrap();
    let set = make_elements();
    let w = LossWeights::default_for(n);

    // forward only, no smoothing (mu=0), no rec
    let cfg0 = ModelConfig { mu: 0, ..model_cfg.clone() };
    let t = Instant::now();
    for _ in 0..3 {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&dims, data.clone(), false).unwrap();
        let hp = insert_params(&mut g, &params, false).unwrap();
        let _ = forward(&mut g, &hp, &cfg0, x, &set, false).unwrap();
    }
    println!("fwd seg-only mu=0:      {:.3}s", t.elapsed().as_secs_f64() / 3.0);

    let t = Instant::now();
    for _ in 0..3 {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&dims, data.clone(), false).unwrap();
        let hp = insert_params(&mut g, &params, false).unwrap();
        let _ = forward(&mut g, &hp, &cfg0, x, &set, true).unwrap();
    }
    println!("fwd both-dec mu=0:      {:.3}s", t.elapsed().as_secs_f64() / 3.0);

    let t = Instant::now();
    for _ in 0..3 {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&dims, data.clone(), false).unwrap();
        let hp = insert_params(&mut g, &params, false).unwrap();
        let _ = forward(&mut g, &hp, &model_cfg, x, &set, true).unwrap();
    }
    println!("fwd both-dec mu=3:      {:.3}s", t.elapsed().as_secs_f64() / 3.0);

    // full forward+backward
    let t = Instant::now();
    for _ in 0..3 {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&dims, data.clone(), false).unwrap();
        let hp = insert_params(&mut g, &params, true).unwrap();
        let out = forward(&mut g, &hp, &model_cfg, x, &set, true).unwrap();
        let (loss, _) = compound(&mut g, x, out.s_bar, out.s, out.i_rec.unwrap(), &w).unwrap();
        g.backward(loss).unwrap();
    }
    println!("fwd+bwd mu=3 + loss:    {:.3}s", t.elapsed().as_secs_f64() / 3.0);
}
