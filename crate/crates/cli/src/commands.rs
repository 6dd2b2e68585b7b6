//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::{AnalyzeCommand, Command, ConfigArgs};

use v4d_core::analysis::{
    avg_neighbor_correlation, detect_onsets, diameter_ratio, lowpass_traces,
    onset_depth_ordering, pearson_matrix, vessel_trace, DepthCutoff, OnsetKind, TraceMatrix,
};
use v4d_core::phantom::{default_roi, generate, PhantomSpec};
use v4d_core::pipeline::{
    load_checkpoint, save_checkpoint, segment_movie, train_static, train_temporal,
    PipelineError, SegmentOptions, TemporalParams,
};
use v4d_core::volume::{
    downsample_to_rate, load_rois, load_v4d, normalize, save_rois, save_v4d, save_volume,
    Movie4D, RoiFile, Volume3D,
};

pub struct CliError {
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit_code: 2 }
    }
    fn data(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit_code: 3 }
    }
}

type CliResult = Result<(), CliError>;

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::data(e.to_string())
}

fn pipeline_err(e: PipelineError) -> CliError {
    let exit_code = match &e {
        PipelineError::Divergence { .. } => 4,
        _ => 3,
    };
    CliError { message: e.to_string(), exit_code }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::data(format!("write {}: {e}", path.display())))
}

struct Resolved {
    cfg: RunConfig,
    out_dir: PathBuf,
}

fn resolve(args: &ConfigArgs, threads: usize) -> Result<Resolved, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(CliError::usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
        cfg.apply_seed();
    }
    if let Some(out) = &args.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    if cfg.threads.is_none() {
        cfg.threads = Some(threads);
    }
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| CliError::usage("no output directory: set paths.out_dir or pass --out"))?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("create {}: {e}", out_dir.display())))?;
    Ok(Resolved { cfg, out_dir })
}

fn echo_config(r: &Resolved) -> CliResult {
    write_file(&r.out_dir.join("resolved_config.json"), r.cfg.resolved_json())
}

fn load_movie(path: &Path) -> Result<Movie4D, CliError> {
    load_v4d(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_anchor(path: &Path) -> Result<Volume3D, CliError> {
    let movie = load_movie(path)?;
    Ok(movie.frames.into_iter().next().expect("movies are non-empty"))
}

fn input_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.paths.input.clone())
        .ok_or_else(|| CliError::usage("no input movie: set paths.input or pass --in"))
}

fn roi_file(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<RoiFile, CliError> {
    let path = flag
        .clone()
        .or_else(|| cfg.paths.roi.clone())
        .ok_or_else(|| CliError::usage("no ROI file: set paths.roi or pass --roi"))?;
    let rois = load_rois(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if rois.vessels.is_empty() {
        return Err(CliError::data(format!("{}: no vessels annotated", path.display())));
    }
    Ok(rois)
}

pub fn dispatch(command: Command, threads: usize) -> CliResult {
    match command {
        Command::Phantom { spec, out } => cmd_phantom(&spec, &out),
        Command::Preprocess { input, target_hz, out, no_downsample } => {
            cmd_preprocess(&input, target_hz, &out, no_downsample)
        }
        Command::TrainStatic { cfg, input } => cmd_train_static(&cfg, &input, threads),
        Command::TrainTemporal { cfg, input, anchor, checkpoint } => {
            cmd_train_temporal(&cfg, &input, &anchor, &checkpoint, threads)
        }
        Command::Segment { cfg, checkpoint, input, out, skeletons } => {
            cmd_segment(&cfg, &checkpoint, &input, &out, skeletons, threads)
        }
        Command::Analyze { what } => cmd_analyze(what, threads),
        Command::Selftest => cmd_selftest(),
    }
}

fn cmd_phantom(spec_path: &Path, out: &Path) -> CliResult {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::data(format!("{}: {e}", spec_path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: PhantomSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::usage(format!("phantom spec {}: key path `{}`: {}", spec_path.display(), e.path(), e.inner()))
    })?;
    fs::create_dir_all(out).map_err(data_err)?;
    let (movie, truth) = generate(&spec).map_err(data_err)?;
    save_v4d(&movie, out.join("noisy.v4d")).map_err(data_err)?;
    save_v4d(&truth.mask, out.join("mask.v4d")).map_err(data_err)?;
    write_file(&out.join("truth_radius.csv"), truth.radius_csv())?;
    write_file(&out.join("truth_onsets.csv"), truth.onsets_csv())?;
    let rois = RoiFile {
        vessels: (0..spec.vessels.len()).map(|v| default_roi(&spec, v, 2)).collect(),
    };
    save_rois(&rois, out.join("rois.json")).map_err(data_err)?;
    println!(
        "phantom: {} frames of {:?} -> {}",
        movie.num_frames(),
        movie.dims(),
        out.display()
    );
    Ok(())
}

fn cmd_preprocess(input: &Path, target_hz: f32, out: &Path, no_downsample: bool) -> CliResult {
    let movie = load_movie(input)?;
    let (movie, record) = normalize(&movie).map_err(data_err)?;
    let movie = if no_downsample {
        movie
    } else {
        downsample_to_rate(&movie, target_hz).map_err(data_err)?
    };
    save_v4d(&movie, out).map_err(data_err)?;
    println!(
        "preprocess: mean {:.6} std {:.6}, {} frames at {} Hz -> {}",
        record.mean,
        record.std,
        movie.num_frames(),
        movie.frame_rate_hz,
        out.display()
    );
    Ok(())
}

fn loss_csv(losses: &[v4d_core::losses::LossTerms]) -> String {
    let mut out = String::from(v4d_core::losses::LossTerms::CSV_HEADER);
    out.push('\n');
    for (step, t) in losses.iter().enumerate() {
        out.push_str(&t.csv_row(step));
        out.push('\n');
    }
    out
}

fn cmd_train_static(args: &ConfigArgs, input: &Option<PathBuf>, threads: usize) -> CliResult {
    let r = resolve(args, threads)?;
    echo_config(&r)?;
    let movie = load_movie(&input_path(input, &r.cfg)?)?;
    let out = train_static(&movie, &r.cfg.model, &r.cfg.train).map_err(pipeline_err)?;
    save_checkpoint(&out.params, r.out_dir.join("checkpoint.v4dp")).map_err(pipeline_err)?;
    save_volume(&out.seg.s, r.out_dir.join("s_static.v4d")).map_err(data_err)?;
    save_volume(&out.anchor, r.out_dir.join("k_anchor.v4d")).map_err(data_err)?;
    write_file(&r.out_dir.join("loss_static.csv"), loss_csv(&out.losses))?;
    let last = out.losses.last().map(|t| t.total).unwrap_or(f64::NAN);
    println!(
        "train-static: {} steps, final loss {last:.6} -> {}",
        out.losses.len(),
        r.out_dir.display()
    );
    Ok(())
}

fn cmd_train_temporal(
    args: &ConfigArgs,
    input: &Option<PathBuf>,
    anchor: &Path,
    checkpoint: &Path,
    threads: usize,
) -> CliResult {
    let r = resolve(args, threads)?;
    echo_config(&r)?;
    let movie = load_movie(&input_path(input, &r.cfg)?)?;
    let anchor = load_anchor(anchor)?;
    let init = load_checkpoint(checkpoint).map_err(pipeline_err)?;
    let out =
        train_temporal(&movie, &anchor, &init, &r.cfg.model, &r.cfg.train).map_err(pipeline_err)?;
    match &out.params {
        TemporalParams::Shared(p) => {
            save_checkpoint(p, r.out_dir.join("checkpoint_t.v4dp")).map_err(pipeline_err)?;
        }
        TemporalParams::PerFrame(ps) => {
            for (t, p) in ps.iter().enumerate() {
                save_checkpoint(p, r.out_dir.join(format!("checkpoint_t_f{t}.v4dp")))
                    .map_err(pipeline_err)?;
            }
        }
    }
    write_file(&r.out_dir.join("loss_temporal.csv"), loss_csv(&out.losses))?;
    let last = out.losses.last().map(|t| t.total).unwrap_or(f64::NAN);
    println!(
        "train-temporal: {} steps, final loss {last:.6} -> {}",
        out.losses.len(),
        r.out_dir.display()
    );
    Ok(())
}

fn cmd_segment(
    args: &ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    skeletons: bool,
    threads: usize,
) -> CliResult {
    let r = resolve(args, threads)?;
    let movie = load_movie(input)?;
    let params = load_checkpoint(checkpoint).map_err(pipeline_err)?;
    let opts = SegmentOptions {
        z_smooth: r.cfg.segment.z_smooth.unwrap_or(true),
        skeletons: skeletons || r.cfg.segment.skeletons,
        skeleton_cfg: r.cfg.train.skeleton,
        threads: r.cfg.threads.unwrap_or(threads),
    };
    let (seg, skel) =
        segment_movie(&movie, &TemporalParams::Shared(params), &r.cfg.model, &opts)
            .map_err(pipeline_err)?;
    save_v4d(&seg, out).map_err(data_err)?;
    if let Some(skel) = skel {
        let skel_path = out.with_extension("skeletons.v4d");
        save_v4d(&skel, &skel_path).map_err(data_err)?;
        println!("segment: skeletons -> {}", skel_path.display());
    }
    println!("segment: {} frames -> {}", seg.num_frames(), out.display());
    Ok(())
}

fn traces_for(
    seg: &Movie4D,
    intensity: Option<&Movie4D>,
    rois: &RoiFile,
) -> Result<Vec<TraceMatrix>, CliError> {
    rois.vessels
        .iter()
        .map(|roi| {
            roi.validate(seg.dims()).map_err(data_err)?;
            vessel_trace(seg, intensity, roi).map_err(data_err)
        })
        .collect()
}

fn cmd_analyze(what: AnalyzeCommand, threads: usize) -> CliResult {
    match what {
        AnalyzeCommand::Traces { cfg, seg, intensity, roi } => {
            let r = resolve(&cfg, threads)?;
            let seg = load_movie(&seg)?;
            let intensity = intensity.as_deref().map(load_movie).transpose()?;
            let rois = roi_file(&roi, &r.cfg)?;
            for tr in traces_for(&seg, intensity.as_ref(), &rois)? {
                let base = r.out_dir.join(format!("traces_vessel{}", tr.vessel_id));
                write_file(&base.with_extension("csv"), tr.to_csv())?;
                if r.cfg.analysis.svg {
                    let svg = v4d_core::plots::traces_svg(
                        &tr,
                        &format!("vessel {} traces", tr.vessel_id),
                    );
                    write_file(&base.with_extension("svg"), svg)?;
                }
                println!(
                    "traces: vessel {} ({} slices x {} frames)",
                    tr.vessel_id,
                    tr.num_slices(),
                    tr.num_frames()
                );
            }
            Ok(())
        }
        AnalyzeCommand::Correlation { cfg, seg, roi } => {
            let r = resolve(&cfg, threads)?;
            let seg = load_movie(&seg)?;
            let rois = roi_file(&roi, &r.cfg)?;
            for tr in traces_for(&seg, None, &rois)? {
                let report = pearson_matrix(&tr).map_err(data_err)?;
                let base = r.out_dir.join(format!("correlation_vessel{}", tr.vessel_id));
                write_file(&base.with_extension("csv"), report.to_csv())?;
                if r.cfg.analysis.svg {
                    let svg = v4d_core::plots::correlation_svg(
                        &report,
                        &format!("vessel {} slice correlation", tr.vessel_id),
                    );
                    write_file(&base.with_extension("svg"), svg)?;
                }

                // neighbourhood-average table over the configured grid
                let mut table = String::from("z_max_um,n,avg_pearson\n");
                for zm in &r.cfg.analysis.z_max_um {
                    let cutoff = match zm {
                        Some(um) => DepthCutoff::Microns(*um),
                        None => DepthCutoff::Max,
                    };
                    for &n in &r.cfg.analysis.neighbor_counts {
                        let label = zm.map_or("max".to_string(), |v| v.to_string());
                        match avg_neighbor_correlation(&tr, cutoff, n) {
                            Ok(v) => table.push_str(&format!("{label},{n},{v}\n")),
                            Err(_) => table.push_str(&format!("{label},{n},nan\n")),
                        }
                    }
                }
                write_file(
                    &r.out_dir.join(format!("correlation_avg_vessel{}.csv", tr.vessel_id)),
                    table,
                )?;
                println!("correlation: vessel {}", tr.vessel_id);
            }
            Ok(())
        }
        AnalyzeCommand::Lowpass { cfg, seg, roi, cutoff_hz } => {
            let r = resolve(&cfg, threads)?;
            let seg = load_movie(&seg)?;
            let rois = roi_file(&roi, &r.cfg)?;
            let cutoff = cutoff_hz.unwrap_or(r.cfg.analysis.cutoff_hz);
            for tr in traces_for(&seg, None, &rois)? {
                let filtered = lowpass_traces(&tr, cutoff).map_err(data_err)?;
                let base = r.out_dir.join(format!("traces_lowpass_vessel{}", tr.vessel_id));
                write_file(&base.with_extension("csv"), filtered.to_csv())?;
                if r.cfg.analysis.svg {
                    let svg = v4d_core::plots::traces_svg(
                        &filtered,
                        &format!("vessel {} low-passed ({cutoff} Hz)", tr.vessel_id),
                    );
                    write_file(&base.with_extension("svg"), svg)?;
                }
                println!("lowpass: vessel {} at {cutoff} Hz", tr.vessel_id);
            }
            Ok(())
        }
        AnalyzeCommand::Onsets { cfg, seg, roi, kind } => {
            let r = resolve(&cfg, threads)?;
            let seg = load_movie(&seg)?;
            let rois = roi_file(&roi, &r.cfg)?;
            let kinds: Vec<OnsetKind> = match kind.as_str() {
                "dilation" => vec![OnsetKind::Dilation],
                "constriction" => vec![OnsetKind::Constriction],
                "both" => vec![OnsetKind::Dilation, OnsetKind::Constriction],
                other => {
                    return Err(CliError::usage(format!(
                        "--kind must be dilation, constriction, or both; got {other}"
                    )))
                }
            };
            for tr in traces_for(&seg, None, &rois)? {
                let filtered = lowpass_traces(&tr, r.cfg.analysis.cutoff_hz).map_err(data_err)?;
                let mut merged = v4d_core::analysis::OnsetTable::default();
                for k in &kinds {
                    let mut table =
                        detect_onsets(&filtered, *k, &r.cfg.analysis.onset).map_err(data_err)?;
                    for e in &mut table.events {
                        e.event_id += merged.events.len();
                    }
                    merged.events.extend(table.events);
                }
                let base = r.out_dir.join(format!("onsets_vessel{}", tr.vessel_id));
                write_file(&base.with_extension("csv"), merged.to_csv(&filtered.z_depths_um))?;
                if r.cfg.analysis.svg {
                    let svg = v4d_core::plots::onsets_svg(
                        &merged,
                        &filtered.z_depths_um,
                        &format!("vessel {} onsets", tr.vessel_id),
                    );
                    write_file(&base.with_extension("svg"), svg)?;
                }
                // depth-ordering summary per event
                let mut summary = String::from("event_id,kind,spearman_depth_onset\n");
                for e in &merged.events {
                    let kind = match e.kind {
                        OnsetKind::Dilation => "dilation",
                        OnsetKind::Constriction => "constriction",
                    };
                    match onset_depth_ordering(&e.onsets_s, &filtered.z_depths_um) {
                        Ok(rho) => summary.push_str(&format!("{},{},{}\n", e.event_id, kind, rho)),
                        Err(_) => summary.push_str(&format!("{},{},nan\n", e.event_id, kind)),
                    }
                }
                write_file(
                    &r.out_dir.join(format!("onset_ordering_vessel{}.csv", tr.vessel_id)),
                    summary,
                )?;
                println!("onsets: vessel {} ({} events)", tr.vessel_id, merged.events.len());
            }
            Ok(())
        }
        AnalyzeCommand::Diameter { cfg, seg_x1, roi_x1, seg_x2, roi_x2 } => {
            let r = resolve(&cfg, threads)?;
            let m1 = load_movie(&seg_x1)?;
            let m2 = load_movie(&seg_x2)?;
            let r1 = load_rois(&roi_x1).map_err(data_err)?;
            let r2 = load_rois(&roi_x2).map_err(data_err)?;
            let summary = diameter_ratio(
                &m1,
                &r1.vessels,
                &m2,
                &r2.vessels,
                r.cfg.analysis.threshold,
            )
            .map_err(data_err)?;
            write_file(&r.out_dir.join("diameter_ratio.csv"), summary.to_csv())?;
            println!(
                "diameter: ratio {:.4} +- {:.4} over {} vessels",
                summary.mean,
                summary.std,
                summary.per_vessel.len()
            );
            Ok(())
        }
    }
}

fn cmd_selftest() -> CliResult {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use v4d_core::autodiff::{grad_check, Graph};
    use v4d_core::morphology as morph;
    use v4d_core::skeleton::{classical_skeleton, skeletonize, SkeletonConfig};

    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{}  {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let set = morph::make_elements();
    let mut rng = ChaCha8Rng::seed_from_u64(0x54d4);
    // morphology equivalence on random binaries
    let mut morph_ok = true;
    for seed in 0..50u64 {
        let bits: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.5)).collect();
        let vol = morph::BinaryVolume::new((8, 8, 8), bits);
        let mut g: Graph<f32> = Graph::new();
        let t = g.leaf(&[8, 8, 8], vol.to_f32(), false).unwrap();
        let si = morph::si(&mut g, t, &set).unwrap();
        let is = morph::is_(&mut g, t, &set).unwrap();
        let er = morph::erosion(&mut g, t, &set).unwrap();
        let di = morph::dilation(&mut g, t, &set).unwrap();
        let op = morph::open(&mut g, t, &set).unwrap();
        morph_ok &= g.values(si) == morph::binary_si(&vol, &set).to_f32()
            && g.values(is) == morph::binary_is(&vol, &set).to_f32()
            && g.values(er) == morph::binary_erosion_all(&vol, &set).to_f32()
            && g.values(di) == morph::binary_dilation_all(&vol, &set).to_f32()
            && g.values(op) == morph::binary_open_all(&vol, &set).to_f32();
        if !morph_ok {
            eprintln!("  first failure at seed {seed}");
            break;
        }
    }
    check("morphology matches classical binary oracles (50 random volumes)", morph_ok);

    // skeleton equivalence
    let mut skel_ok = true;
    for _ in 0..20 {
        let bits: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.5)).collect();
        let vol = morph::BinaryVolume::new((8, 8, 8), bits);
        let mut g: Graph<f32> = Graph::new();
        let t = g.leaf(&[8, 8, 8], vol.to_f32(), false).unwrap();
        let cfg = SkeletonConfig { n: 5, pre_threshold: None };
        let k = skeletonize(&mut g, t, &set, &cfg).unwrap();
        skel_ok &= g.values(k) == classical_skeleton(&vol, &set, 5).to_f32();
        if !skel_ok {
            break;
        }
    }
    check("skeleton layer matches classical recursion (20 random volumes)", skel_ok);

    // gradient spot checks in f64
    let x0: Vec<f64> = (0..27).map(|i| 0.05 + 0.9 * ((i * 7 % 13) as f64 / 13.0)).collect();
    let sig = grad_check::<f64>(
        |g, x| {
            let s = g.sigmoid(x);
            g.mean(s)
        },
        &[3, 3, 3],
        &x0,
        1e-4,
        1e-6,
    );
    check("gradient: sigmoid/mean", sig.pass);
    let morph_grad = grad_check::<f64>(
        |g, x| {
            let set = morph::make_elements();
            let s = morph::si(g, x, &set).unwrap();
            g.mean(s)
        },
        &[3, 3, 3],
        &x0,
        1e-4,
        1e-5,
    );
    check("gradient: SI morphological layer", morph_grad.pass);
    let skel_grad = grad_check::<f64>(
        |g, x| {
            let set = morph::make_elements();
            let cfg = SkeletonConfig { n: 2, pre_threshold: None };
            let k = skeletonize(g, x, &set, &cfg).unwrap();
            g.mean(k)
        },
        &[3, 3, 3],
        &x0,
        1e-4,
        1e-5,
    );
    check("gradient: skeleton layer (n=2)", skel_grad.pass);

    if failures > 0 {
        return Err(CliError::data(format!("selftest: {failures} suite(s) failed")));
    }
    println!("selftest: all suites passed");
    Ok(())
}
