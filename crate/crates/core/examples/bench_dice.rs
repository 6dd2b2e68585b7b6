use std::time::Instant;
use v4d_core::losses::LossWeights;
use v4d_core::model::{forward_volume, ModelConfig};
use v4d_core::phantom::{dice_bool, generate, PhantomSpec, RadiusProfile, VesselSpec};
use v4d_core::pipeline::{StaticTrainer, TrainConfig};
use v4d_core::volume::normalize;

fn arg(name: &str, default: f64) -> f64 {
    std::env::args()
        .skip_while(|a| a != name)
        .nth(1)
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let noiseless = std::env::args().any(|a| a == "--noiseless");
    let lam1 = arg("--lam1", 1.0);
    let lam2 = arg("--lam2", 1.0);
    let lam3n = arg("--lam3n", 0.0001); // lambda3 * N
    let lam6 = arg("--lam6", 0.01);
    let lr = arg("--lr", 1e-3);
    let steps = arg("--steps", 800.0) as usize;
    let spec = PhantomSpec {
        dims: (16, 32, 64, 64),
        frame_rate_hz: 20.0,
        voxel_size_um: [3.0, 1.0, 1.0],
        vessels: vec![VesselSpec {
            centerline: vec![[0.0, 32.0, 32.0], [31.0, 32.0, 32.0]],
            radius_um: RadiusProfile::Constant(5.0),
        }],
        events: vec![],
        photon_rate_scale: 0.5,
        depth_attenuation_um: (31.0 * 3.0) / (10.0f64).ln(),
        magnification: 1.0,
        noiseless,
        seed: 5,
        origin_depth_um: 0.0,
    };
    let (movie, truth) = generate(&spec).unwrap();
    let (movie, _) = normalize(&movie).unwrap();
    let n = 32 * 64 * 64;
    let model_cfg = ModelConfig::default();
    let weights = LossWeights {
        lambda1: lam1,
        lambda2: lam2,
        lambda3: lam3n / n as f64,
        lambda6: lam6,
        ..LossWeights::default()
    };
    println!("weights: {weights:?}");
    let cfg = TrainConfig {
        learning_rate: lr,
        steps_static: steps,
        weights,
        seed: 3,
        ..TrainConfig::default()
    };
    
    let mut tr = StaticTrainer::new(&movie, &model_cfg, &cfg).unwrap();
    let truth_mask = &truth.mask.frames[0];
    let t0 = Instant::now();
    for step in 0..steps {
        let terms = tr.step().unwrap();
        if step % 50 == 0 || step == steps - 1 {
            let seg = forward_volume(&tr.params, &model_cfg, tr.collapsed(), false).unwrap();
            let d = dice_bool(&seg.binary, truth_mask);
            let fg: usize = seg.binary.iter().filter(|&&b| b).count();
            let smax = seg.s.data.iter().cloned().fold(0.0f32, f32::max);
            println!(
                "step {step:4}  loss {:8.4}  ac {:.4} rank {:.4} me {:.4}  dice {d:.3}  fg {fg:6}  smax {smax:.3}  [{:.0}s]",
                terms.total, terms.ac, terms.rank, terms.me, t0.elapsed().as_secs_f64()
            );
            if d > 0.93 {
                println!("early exit at dice {d:.3}");
                break;
            }
        }
    }
}
