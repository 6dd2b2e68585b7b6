use std::time::Instant;
use v4d_core::model::{init_params, ModelConfig};
use v4d_core::pipeline::{StaticTrainer, TrainConfig};
use v4d_core::losses::LossWeights;
use v4d_core::volume::{Movie4D, Volume3D};

fn main() {
    let dims = (32usize, 64, 64);
    let n = dims.0 * dims.1 * dims.2;
    let data: Vec<f32> = (0..n).map(|i| ((i * 2654435761usize) % 1000) as f32 / 1000.0).collect();
    let vol = Volume3D::new(dims, data).unwrap();
    let movie = Movie4D::new(vec![vol], 10.0).unwrap();
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        steps_static: 5,
        weights: LossWeights::default_for(n),
        ..TrainConfig::default()
    };
    let params = init_params(&model_cfg, 1).unwrap();
    println!("params: {} scalars", params.num_scalars());
    let mut tr = StaticTrainer::new(&movie, &model_cfg, &cfg).unwrap();
    let t0 = Instant::now();
    for i in 0..5 {
        let t1 = Instant::now();
        let terms = tr.step().unwrap();
        println!("step {i}: {:.3}s loss {:.4}", t1.elapsed().as_secs_f64(), terms.total);
    }
    println!("total 5 steps: {:.3}s", t0.elapsed().as_secs_f64());
}
