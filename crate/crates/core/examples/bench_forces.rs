use v4d_core::autodiff::Graph;
use v4d_core::losses::{self, LossWeights};
use v4d_core::model::{forward, insert_params, ModelConfig};
use v4d_core::morphology::make_elements;
use v4d_core::phantom::{generate, PhantomSpec, RadiusProfile, VesselSpec};
use v4d_core::pipeline::{StaticTrainer, TrainConfig};
use v4d_core::volume::{normalize, time_collapse};

fn main() {
    let spec = PhantomSpec {
        dims: (4, 32, 64, 64),
        frame_rate_hz: 20.0,
        voxel_size_um: [3.0, 1.0, 1.0],
        vessels: vec![VesselSpec {
            centerline: vec![[0.0, 32.0, 32.0], [31.0, 32.0, 32.0]],
            radius_um: RadiusProfile::Constant(5.0),
        }],
        events: vec![],
        photon_rate_scale: 0.5,
        depth_attenuation_um: 40.0,
        magnification: 1.0,
        noiseless: true,
        seed: 5,
        origin_depth_um: 0.0,
    };
    let (movie, _) = generate(&spec).unwrap();
    let (movie, _) = normalize(&movie).unwrap();
    let collapsed = time_collapse(&movie);
    let n = collapsed.len();
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        steps_static: 100,
        weights: LossWeights::default_for(n),
        seed: 3,
        ..TrainConfig::default()
    };
    let set = make_elements();

    let mut tr = StaticTrainer::new(&movie, &model_cfg, &cfg).unwrap();
    for step in 0..40 {
        if step % 5 == 0 {
            // per-term gradient on the seg-head bias (uniform pressure probe)
            let term_names = ["ac", "rank", "tight", "rec", "mv", "me"];
            let mut grads = Vec::new();
            let mut smean = 0.0;
            for k in 0..6 {
                let mut w = LossWeights {
                    lambda1: 0.0,
                    lambda2: 0.0,
                    lambda3: 0.0,
                    lambda4: 0.0,
                    lambda5: 0.0,
                    lambda6: 0.0,
                    ..LossWeights::default()
                };
                match k {
                    0 => w.lambda1 = 1.0,
                    1 => w.lambda2 = 1.0,
                    2 => w.lambda3 = cfg.weights.lambda3,
                    3 => w.lambda4 = 1.0,
                    4 => w.lambda5 = 1.0,
                    _ => w.lambda6 = 1.0,
                }
                let mut g: Graph<f32> = Graph::new();
                let t = g
                    .leaf(&[32, 64, 64], collapsed.data.clone(), false)
                    .unwrap();
                let hp = insert_params(&mut g, &tr.params, true).unwrap();
                let out = forward(&mut g, &hp, &model_cfg, t, &set, true).unwrap();
                let (loss, _) =
                    losses::compound(&mut g, t, out.s_bar, out.s, out.i_rec.unwrap(), &w)
                        .unwrap();
                g.backward(loss).unwrap();
                let b = hp.handles["dec_seg.final.b"];
                grads.push(g.grad(b).unwrap()[0]);
                if k == 0 {
                    smean = g.values(out.s_bar).iter().map(|&v| v as f64).sum::<f64>()
                        / n as f64;
                }
            }
            print!("step {step:3}  s_bar_mean {smean:.4}  d/d bias: ");
            for (name, g) in term_names.iter().zip(&grads) {
                print!("{name} {g:+.2e}  ");
            }
            println!();
        }
        tr.step().unwrap();
    }
}
