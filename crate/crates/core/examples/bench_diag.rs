use v4d_core::losses::LossWeights;
use v4d_core::model::{forward_volume, ModelConfig};
use v4d_core::phantom::{generate, PhantomSpec, RadiusProfile, VesselSpec};
use v4d_core::pipeline::{StaticTrainer, TrainConfig};
use v4d_core::volume::normalize;

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
    let n = 32 * 64 * 64;
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        steps_static: 100,
        weights: LossWeights { lambda3: 0.5 / n as f64, ..LossWeights::default() },
        seed: 3,
        ..TrainConfig::default()
    };
    let mut tr = StaticTrainer::new(&movie, &model_cfg, &cfg).unwrap();
    for step in 0..60 {
        let terms = tr.step().unwrap();
        if step % 10 == 0 {
            let seg = forward_volume(&tr.params, &model_cfg, tr.collapsed(), true).unwrap();
            let stats = |v: &[f32]| {
                let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
                format!("[{lo:.4},{mean:.4},{hi:.4}]")
            };
            let p = &tr.params.entries;
            let bias = p["dec_seg.final.b"].values[0];
            let wmag: f32 = p["dec_seg.final.w"].values.iter().map(|v| v.abs()).sum::<f32>()
                / p["dec_seg.final.w"].values.len() as f32;
            let scale0 = stats(&p["dec_seg.up2.affine.scale"].values);
            println!(
                "step {step:3} loss {:7.3} rec {:6.4} | s_bar {} s {} i_rec {} | head b {bias:+.3} |w| {wmag:.4} up2.scale {scale0}",
                terms.total,
                terms.rec,
                stats(&seg.s_bar.data),
                stats(&seg.s.data),
                stats(&seg.i_rec.as_ref().unwrap().data),
            );
        }
    }
}
