//! Command-line surface: dataset synthesis, two-phase training, one-pass
//! extraction, registration, metric sweeps and the gradient-check suite.

use clap::{Parser, Subcommand, ValueEnum};
use dh3d::cloud::{apply_transform, center_cloud, random_sample};
use dh3d::config::PipelineConfig;
use dh3d::detect_eval::{relative_repeatability, select_keypoints, KeypointSet};
use dh3d::io;
use dh3d::net::ModelParams;
use dh3d::registration::{
    match_descriptors, ransac_register, registration_success, rte_rre, MatchMode,
};
use dh3d::retrieval::{recall_at_n, DbEntry, DescriptorDatabase, Query};
use dh3d::synth::synth_dataset;
use dh3d::trainer::{params_digest, train_global, train_local, TrainRecord};
use dh3d::{Error, PointCloud, Result, RigidTransform};
use nalgebra::Vector3;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dh3d", version, about = "Hierarchical 3D descriptor toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset with planted positions.
    Synth {
        /// number of scenes
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// points per scene
        #[arg(long, default_value_t = 1024)]
        points: usize,
        /// scenes per place cluster (perturbed views of one geometry)
        #[arg(long, default_value_t = 1)]
        cluster_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output directory for .dhpc files and manifest.csv
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Phase 1: train encoder and detector on synthetic pairs.
    TrainLocal {
        #[arg(long)]
        config: Option<PathBuf>,
        /// directory of .dhpc clouds (manifest.csv optional)
        #[arg(long)]
        data_dir: PathBuf,
        /// output model file
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: train the global head; encoder and detector stay frozen.
    TrainGlobal {
        #[arg(long)]
        config: Option<PathBuf>,
        /// directory with .dhpc clouds and manifest.csv (planted positions)
        #[arg(long)]
        data_dir: PathBuf,
        /// phase-1 model file (required)
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One forward pass: descriptors, saliency, keypoints, global descriptor.
    Extract {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        /// keypoints to select
        #[arg(long)]
        keypoints: Option<usize>,
        /// non-maximum-suppression radius in meters (0 = pure top-m)
        #[arg(long)]
        nms: Option<f64>,
        /// output prefix; writes <prefix>.desc.csv, .saliency.csv,
        /// .keypoints.csv, .global.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Register two clouds: keypoints, mutual matching, RANSAC.
    Register {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cloud_a: PathBuf,
        #[arg(long)]
        cloud_b: PathBuf,
        #[arg(long)]
        keypoints: Option<usize>,
        #[arg(long)]
        nms: Option<f64>,
        #[arg(long)]
        inlier_thresh: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// ground truth "yaw_deg,tx,ty,tz" for error reporting
        #[arg(long)]
        truth: Option<String>,
    },
    /// Metric sweeps over noise, rotation and downsampling.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        /// noise sigma sweep values (meters)
        #[arg(long, value_delimiter = ',', default_value = "0.0")]
        noise: Vec<f64>,
        /// yaw rotation sweep values (degrees)
        #[arg(long, value_delimiter = ',', default_value = "0.0")]
        rotation: Vec<f64>,
        /// downsample factors alpha; keeps n/alpha points
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        downsample: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// 64-bit finite-difference verification of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Repeatability,
    Registration,
    Retrieval,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            count,
            points,
            cluster_size,
            seed,
            out_dir,
        } => cmd_synth(count, points, cluster_size, seed, &out_dir),
        Cmd::TrainLocal {
            config,
            data_dir,
            out,
        } => cmd_train_local(config.as_deref(), &data_dir, &out),
        Cmd::TrainGlobal {
            config,
            data_dir,
            model,
            out,
        } => cmd_train_global(config.as_deref(), &data_dir, &model, &out),
        Cmd::Extract {
            config,
            model,
            cloud,
            keypoints,
            nms,
            out,
        } => cmd_extract(config.as_deref(), &model, &cloud, keypoints, nms, out.as_deref()),
        Cmd::Register {
            config,
            model,
            cloud_a,
            cloud_b,
            keypoints,
            nms,
            inlier_thresh,
            max_iter,
            seed,
            truth,
        } => cmd_register(
            config.as_deref(),
            &model,
            &cloud_a,
            &cloud_b,
            keypoints,
            nms,
            inlier_thresh,
            max_iter,
            seed,
            truth.as_deref(),
        ),
        Cmd::Eval {
            config,
            model,
            data_dir,
            task,
            noise,
            rotation,
            downsample,
            seed,
        } => cmd_eval(
            config.as_deref(),
            &model,
            &data_dir,
            task,
            &noise,
            &rotation,
            &downsample,
            seed,
        ),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn init_model(cfg: &PipelineConfig) -> Result<ModelParams<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    ModelParams::init(&cfg.model_spec(), &mut rng)
}

fn load_trained(cfg: &PipelineConfig, path: &Path) -> Result<ModelParams<f32>> {
    let mut model = init_model(cfg)?;
    io::load_model(path, &mut model)?;
    Ok(model)
}

/// Scene manifest row: id, cloud file, planted 2D position, cluster.
struct ManifestRow {
    id: String,
    file: String,
    position: [f64; 2],
    cluster: usize,
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.display().to_string(),
            offset: lineno as u64,
            detail: format!("expected 'id,file,x,y,cluster', got '{line}'"),
        };
        if parts.len() != 5 {
            return Err(bad());
        }
        rows.push(ManifestRow {
            id: parts[0].to_string(),
            file: parts[1].to_string(),
            position: [
                parts[2].parse().map_err(|_| bad())?,
                parts[3].parse().map_err(|_| bad())?,
            ],
            cluster: parts[4].parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "manifest {} lists no scenes",
            path.display()
        )));
    }
    Ok(rows)
}

fn load_clouds(dir: &Path) -> Result<Vec<PointCloud>> {
    // prefer the manifest order; fall back to sorted *.dhpc
    if dir.join("manifest.csv").exists() {
        let rows = read_manifest(dir)?;
        return rows
            .iter()
            .map(|r| io::read_cloud(&dir.join(&r.file)))
            .collect();
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dhpc"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "no .dhpc clouds in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| io::read_cloud(p)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_synth(
    count: usize,
    points: usize,
    cluster_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let dataset = synth_dataset(count, points, cluster_size, seed)?;
    let mut manifest = String::from("id,file,x,y,cluster\n");
    for (cloud, record) in &dataset {
        let file = format!("{}.dhpc", record.id);
        io::write_dhpc(&out_dir.join(&file), cloud)?;
        writeln!(
            manifest,
            "{},{},{},{},{}",
            record.id, file, record.position[0], record.position[1], record.cluster
        )
        .expect("string write");
    }
    write_text(&out_dir.join("manifest.csv"), &manifest)?;
    println!("scenes,points,out_dir");
    println!("{},{},{}", dataset.len(), points, out_dir.display());
    Ok(())
}

fn print_history(history: &[TrainRecord]) {
    println!("step,lr,loss");
    for r in history {
        println!("{},{},{}", r.step, r.lr, r.loss);
    }
}

fn cmd_train_local(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let clouds = load_clouds(data_dir)?;
    let mut model = init_model(&cfg)?;
    let history = train_local(
        &mut model,
        &clouds,
        &cfg.training,
        &cfg.loss_config::<f32>(),
    )?;
    io::write_model(out, &model)?;
    print_history(&history);
    Ok(())
}

fn cmd_train_global(
    config: Option<&Path>,
    data_dir: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    if !model_path.exists() {
        return Err(Error::Config(format!(
            "phase-1 model {} not found; run train-local first",
            model_path.display()
        )));
    }
    let rows = read_manifest(data_dir)?;
    let scenes = rows
        .iter()
        .map(|r| {
            let cloud = io::read_cloud(&data_dir.join(&r.file))?;
            Ok((
                cloud,
                dh3d::synth::SceneRecord {
                    id: r.id.clone(),
                    position: r.position,
                    cluster: r.cluster,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = load_trained(&cfg, model_path)?;
    let enc_before = params_digest(&model, "encoder.");
    let det_before = params_digest(&model, "detector.");
    let history = train_global(
        &mut model,
        &scenes,
        &cfg.training,
        &cfg.loss_config::<f32>(),
    )?;
    let enc_after = params_digest(&model, "encoder.");
    let det_after = params_digest(&model, "detector.");
    io::write_model(out, &model)?;
    println!("# encoder_digest_before,{enc_before:016x}");
    println!("# encoder_digest_after,{enc_after:016x}");
    println!("# detector_digest_before,{det_before:016x}");
    println!("# detector_digest_after,{det_after:016x}");
    println!(
        "# frozen,{}",
        enc_before == enc_after && det_before == det_after
    );
    print_history(&history);
    if enc_before != enc_after || det_before != det_after {
        return Err(Error::numeric(
            "freeze contract",
            "encoder or detector changed during phase 2".to_string(),
        ));
    }
    Ok(())
}

/// One forward pass over a (pre-centered) cloud: per-point descriptors,
/// saliency, keypoints, and the global descriptor.
struct Extraction {
    descriptors: Array2<f32>,
    saliency: Array1<f32>,
    keypoints: KeypointSet,
    global: Array1<f32>,
}

fn extract_one(
    model: &ModelParams<f32>,
    cloud: &PointCloud,
    m: usize,
    nms: f64,
) -> Result<Extraction> {
    if cloud.len() < model.encoder.min_points() {
        return Err(Error::DegenerateBatch(format!(
            "cloud has {} points; the encoder needs at least {}",
            cloud.len(),
            model.encoder.min_points()
        )));
    }
    let enc = model.encoder.forward(cloud)?;
    let det = model.detector.forward(&enc.psi)?;
    let saliency = det.saliency.index_axis(Axis(1), 0).to_owned();
    let keypoints = select_keypoints(&saliency, cloud, m.min(cloud.len()), nms)?;
    let glob = model.global.forward(cloud, &enc.x)?;
    Ok(Extraction {
        descriptors: enc.x,
        saliency,
        keypoints,
        global: glob.descriptor,
    })
}

fn csv_matrix(m: &Array2<f32>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn cmd_extract(
    config: Option<&Path>,
    model_path: &Path,
    cloud_path: &Path,
    keypoints: Option<usize>,
    nms: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_trained(&cfg, model_path)?;
    let raw = io::read_cloud(cloud_path)?;
    let (cloud, _) = center_cloud(&raw);
    let m = keypoints.unwrap_or(cfg.eval.keypoints);
    let r = nms.unwrap_or(cfg.eval.nms_radius);
    let ex = extract_one(&model, &cloud, m, r)?;
    if let Some(prefix) = out {
        let base = prefix.display();
        write_text(
            &PathBuf::from(format!("{base}.desc.csv")),
            &csv_matrix(&ex.descriptors),
        )?;
        let mut sal = String::from("index,saliency\n");
        for (i, v) in ex.saliency.iter().enumerate() {
            writeln!(sal, "{i},{v}").expect("string write");
        }
        write_text(&PathBuf::from(format!("{base}.saliency.csv")), &sal)?;
        let mut kp = String::from("index,score\n");
        for (i, s) in ex.keypoints.indices.iter().zip(&ex.keypoints.scores) {
            writeln!(kp, "{i},{s}").expect("string write");
        }
        write_text(&PathBuf::from(format!("{base}.keypoints.csv")), &kp)?;
        let cells: Vec<String> = ex.global.iter().map(|v| format!("{v}")).collect();
        write_text(
            &PathBuf::from(format!("{base}.global.csv")),
            &format!("{}\n", cells.join(",")),
        )?;
    }
    println!("points,desc_dim,keypoints,global_dim,truncated");
    println!(
        "{},{},{},{},{}",
        cloud.len(),
        ex.descriptors.ncols(),
        ex.keypoints.indices.len(),
        ex.global.len(),
        ex.keypoints.truncated
    );
    Ok(())
}

fn parse_truth(s: &str) -> Result<RigidTransform> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad truth component '{p}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::invalid("truth must be 'yaw_deg,tx,ty,tz'"));
    }
    let mut t = RigidTransform::yaw(parts[0]);
    t.translation = Vector3::new(parts[1], parts[2], parts[3]);
    Ok(t)
}

/// Keypoint clouds and their descriptors for matching.
fn keypoint_features(
    cloud: &PointCloud,
    ex: &Extraction,
) -> Result<(PointCloud, Array2<f32>)> {
    let pts: Vec<[f64; 3]> = ex.keypoints.indices.iter().map(|&i| cloud.points[i]).collect();
    let desc = ex.descriptors.select(Axis(0), &ex.keypoints.indices);
    Ok((PointCloud::new(pts)?, desc))
}

#[allow(clippy::too_many_arguments)]
fn cmd_register(
    config: Option<&Path>,
    model_path: &Path,
    path_a: &Path,
    path_b: &Path,
    keypoints: Option<usize>,
    nms: Option<f64>,
    inlier_thresh: Option<f64>,
    max_iter: Option<usize>,
    seed: Option<u64>,
    truth: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_trained(&cfg, model_path)?;
    let truth = truth.map(parse_truth).transpose()?;
    let m = keypoints.unwrap_or(cfg.eval.keypoints);
    let r = nms.unwrap_or(cfg.eval.nms_radius);
    let raw_a = io::read_cloud(path_a)?;
    let raw_b = io::read_cloud(path_b)?;
    let (cloud_a, ca) = center_cloud(&raw_a);
    let (cloud_b, cb) = center_cloud(&raw_b);
    let ex_a = extract_one(&model, &cloud_a, m, r)?;
    let ex_b = extract_one(&model, &cloud_b, m, r)?;
    let (kp_a, desc_a) = keypoint_features(&cloud_a, &ex_a)?;
    let (kp_b, desc_b) = keypoint_features(&cloud_b, &ex_b)?;
    let matches = match_descriptors(&desc_a, &desc_b, MatchMode::Mutual)?;
    let result = ransac_register(
        &matches,
        &kp_a,
        &kp_b,
        inlier_thresh.unwrap_or(cfg.eval.inlier_thresh),
        max_iter.unwrap_or(cfg.eval.ransac_max_iter),
        seed.unwrap_or(cfg.eval.ransac_seed),
    )?;
    // lift the centered-frame estimate back to the raw frames:
    // raw_b = T_raw(raw_a) with T_raw = translate(cb) . T_centered . translate(-ca)
    let t = &result.transform;
    let mut t_raw = t.clone();
    t_raw.translation = t.translation + Vector3::new(cb[0], cb[1], cb[2])
        - t.rotation * Vector3::new(ca[0], ca[1], ca[2]);
    println!("matches,inliers,iterations,converged,rte,rre,success");
    let (rte, rre, success) = match &truth {
        Some(gt) => {
            let (rte, rre) = rte_rre(&t_raw, gt);
            (
                format!("{rte}"),
                format!("{rre}"),
                format!("{}", registration_success(rte, rre)),
            )
        }
        None => (String::new(), String::new(), String::new()),
    };
    println!(
        "{},{},{},{},{rte},{rre},{success}",
        matches.len(),
        result.inliers,
        result.iterations,
        result.converged
    );
    Ok(())
}

/// A perturbed view of a centered cloud: yaw by exactly `rotation_deg`,
/// Gaussian noise, then keep n/alpha points. Returns the re-centered view
/// and the transform mapping the input onto it.
fn perturb_view(
    cloud: &PointCloud,
    rotation_deg: f64,
    sigma: f64,
    alpha: f64,
    seed: u64,
) -> Result<(PointCloud, RigidTransform)> {
    if alpha < 1.0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    let t = RigidTransform::yaw(rotation_deg);
    let mut view = apply_transform(cloud, &t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|_| Error::invalid("bad sigma"))?;
        for p in &mut view.points {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    if alpha > 1.0 {
        let keep = ((cloud.len() as f64 / alpha).round() as usize).max(1);
        let (sampled, _) = random_sample(&view, keep, seed.wrapping_add(1))?;
        view = sampled;
    }
    let (centered, c) = center_cloud(&view);
    let mut t_final = t;
    t_final.translation -= Vector3::new(c[0], c[1], c[2]);
    Ok((centered, t_final))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<&Path>,
    model_path: &Path,
    data_dir: &Path,
    task: EvalTask,
    noise: &[f64],
    rotation: &[f64],
    downsample: &[f64],
    seed: u64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_trained(&cfg, model_path)?;
    let rows = read_manifest(data_dir)?;
    let clouds: Vec<(PointCloud, [f64; 2])> = rows
        .iter()
        .map(|r| {
            let raw = io::read_cloud(&data_dir.join(&r.file))?;
            let (centered, _) = center_cloud(&raw);
            Ok((centered, r.position))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = cfg.eval.keypoints;
    let nms = cfg.eval.nms_radius;

    // the database side of retrieval is sweep-independent
    let db = if matches!(task, EvalTask::Retrieval) {
        let mut db = DescriptorDatabase::new();
        for (i, (cloud, pos)) in clouds.iter().enumerate() {
            let ex = extract_one(&model, cloud, m, nms)?;
            db.push(DbEntry {
                descriptor: ex.global.mapv(f64::from),
                position: *pos,
                id: rows[i].id.clone(),
            })?;
        }
        Some(db)
    } else {
        None
    };

    match task {
        EvalTask::Repeatability => println!("noise,rotation,downsample,repeatability"),
        EvalTask::Registration => {
            println!("noise,rotation,downsample,success_rate,mean_rte,mean_rre")
        }
        EvalTask::Retrieval => println!("noise,rotation,downsample,recall_at_1"),
    }

    for &sig in noise {
        for &rot in rotation {
            for &alpha in downsample {
                let mut queries = Vec::new();
                let mut rep_sum = 0.0;
                let mut rte_sum = 0.0;
                let mut rre_sum = 0.0;
                let mut successes = 0usize;
                let mut count = 0usize;
                for (i, (cloud, pos)) in clouds.iter().enumerate() {
                    let pair_seed = seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add(i as u64);
                    let (view, t) = perturb_view(cloud, rot, sig, alpha, pair_seed)?;
                    match task {
                        EvalTask::Repeatability => {
                            let ex1 = extract_one(&model, cloud, m, nms)?;
                            let ex2 = extract_one(&model, &view, m, nms)?;
                            rep_sum += relative_repeatability(
                                &ex1.keypoints,
                                cloud,
                                &ex2.keypoints,
                                &view,
                                &t,
                                cfg.eval.repeat_radius,
                            )?;
                        }
                        EvalTask::Registration => {
                            let ex1 = extract_one(&model, cloud, m, nms)?;
                            let ex2 = extract_one(&model, &view, m, nms)?;
                            let (kp1, d1) = keypoint_features(cloud, &ex1)?;
                            let (kp2, d2) = keypoint_features(&view, &ex2)?;
                            let matches = match_descriptors(&d1, &d2, MatchMode::Mutual)?;
                            let res = ransac_register(
                                &matches,
                                &kp1,
                                &kp2,
                                cfg.eval.inlier_thresh,
                                cfg.eval.ransac_max_iter,
                                cfg.eval.ransac_seed.wrapping_add(i as u64),
                            )?;
                            let (rte, rre) = rte_rre(&res.transform, &t);
                            rte_sum += rte;
                            rre_sum += rre;
                            if registration_success(rte, rre) {
                                successes += 1;
                            }
                        }
                        EvalTask::Retrieval => {
                            let ex = extract_one(&model, &view, m, nms)?;
                            queries.push(Query {
                                descriptor: ex.global.mapv(f64::from),
                                position: *pos,
                            });
                        }
                    }
                    count += 1;
                }
                match task {
                    EvalTask::Repeatability => {
                        println!("{sig},{rot},{alpha},{}", rep_sum / count as f64)
                    }
                    EvalTask::Registration => println!(
                        "{sig},{rot},{alpha},{},{},{}",
                        successes as f64 / count as f64,
                        rte_sum / count as f64,
                        rre_sum / count as f64
                    ),
                    EvalTask::Retrieval => {
                        let recall = recall_at_n(
                            &queries,
                            db.as_ref().expect("retrieval db"),
                            1,
                            cfg.eval.positive_radius,
                        )?;
                        println!("{sig},{rot},{alpha},{recall}");
                    }
                }
            }
        }
    }
    std::io::stdout().flush().ok();
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let reports = dh3d::gradcheck::run_all(seed)?;
    println!("block,scalars,max_rel_err,status");
    let mut failures = 0usize;
    for r in &reports {
        let status = if r.pass() { "pass" } else { "FAIL" };
        println!("{},{},{:.3e},{}", r.name, r.scalars, r.max_rel_err, status);
        if !r.pass() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::numeric(
            "gradcheck",
            format!("{failures} blocks above tolerance {}", dh3d::gradcheck::TOLERANCE),
        ));
    }
    Ok(())
}
