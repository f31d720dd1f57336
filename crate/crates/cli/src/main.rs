use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use ghaar::compressed::{CompressedModel, OpCounter, StorageMode, StorageReport};
use ghaar::detect::{detect_image, detections_csv};
use ghaar::image::Image;
use ghaar::pipeline::{DataSplit, PipelineConfig};
use ghaar::synth::{DatasetManifest, Scene};
use ghaar::train::{fit, window_metrics, Dataset};
use ghaar::windows::final_windows;
use ghaar::Error;

#[derive(Parser)]
#[command(name = "ghaar", version, about = "Generalized-Haar detection networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline settings (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train, held-out and test splits with their manifests.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write the model file and training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data; scenes are generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train without the filter constraint.
        #[arg(long)]
        unconstrained: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window-level errors on the held-out split and detection scores on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect objects in PPM images, writing one CSV per image.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a copy of each image with the detections drawn.
        #[arg(long)]
        annotate: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Throughput, multiply counts and window pruning on generated test scenes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        images: usize,
    },
    /// Print the layers, reduced space and storage of a model file.
    InspectModel {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::SizeLimit { .. } => 2,
        Error::Data(_) | Error::Generation(_) | Error::EmptyPyramid { .. } | Error::Dimension(_) | Error::Io(_) => 3,
        Error::Format { .. } => 4,
        Error::Training(_) => 1,
    }
}

fn load_config(common: &Common) -> ghaar::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn scenes(cfg: &PipelineConfig, data: Option<&Path>, split: DataSplit) -> ghaar::Result<Vec<Scene>> {
    match data {
        Some(dir) => {
            let manifest = DatasetManifest::read(&DatasetManifest::manifest_path(dir, split.name()))?;
            manifest.load_scenes(dir)
        }
        None => cfg.scenes(split),
    }
}

fn load_model(cfg: &PipelineConfig, path: &Path) -> ghaar::Result<CompressedModel> {
    let model = CompressedModel::read(path)?;
    if model.spec().arch.input_size != cfg.arch.input_size {
        return Err(Error::Config(format!(
            "model expects {}px windows, configuration uses {}px",
            model.spec().arch.input_size,
            cfg.arch.input_size
        )));
    }
    Ok(model)
}

fn run(command: Command) -> ghaar::Result<()> {
    match command {
        Command::GenData { common, out } => gen_data(&load_config(&common)?, &out),
        Command::Train {
            common,
            data,
            unconstrained,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if unconstrained {
                cfg.train.constrain = false;
            }
            train(&cfg, data.as_deref(), &out)
        }
        Command::Eval { common, model, data } => {
            let cfg = load_config(&common)?;
            eval(&cfg, &load_model(&cfg, &model)?, data.as_deref())
        }
        Command::Detect {
            common,
            model,
            out,
            annotate,
            images,
        } => {
            let cfg = load_config(&common)?;
            detect(&cfg, &load_model(&cfg, &model)?, &images, &out, annotate)
        }
        Command::Bench { common, model, images } => {
            let mut cfg = load_config(&common)?;
            cfg.data.test_images = images;
            bench(&cfg, &load_model(&cfg, &model)?)
        }
        Command::InspectModel { model } => inspect(&CompressedModel::read(&model)?),
    }
}

fn gen_data(cfg: &PipelineConfig, out: &Path) -> ghaar::Result<()> {
    for split in [DataSplit::Train, DataSplit::HeldOut, DataSplit::Test] {
        let scenes = cfg.scenes(split)?;
        let m = DatasetManifest::write(out, split.name(), cfg.seed, &scenes)?;
        println!("{}: {} images", split.name(), m.entries.len());
    }
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn train(cfg: &PipelineConfig, data: Option<&Path>, out: &Path) -> ghaar::Result<()> {
    let spec = cfg.network_spec()?;
    let train = scenes(cfg, data, DataSplit::Train)?;
    let held = scenes(cfg, data, DataSplit::HeldOut)?;
    let dataset: Dataset = cfg.dataset(&train, &held)?;
    info!(
        "{} training and {} held-out windows from {} + {} scenes",
        dataset.train.len(),
        dataset.held_out.len(),
        train.len(),
        held.len()
    );
    let start = Instant::now();
    let result = fit(&dataset, &spec, &cfg.train)?;
    let model = match &result.space {
        Some(space) => CompressedModel::from_params(&spec, &result.params, space)?,
        None => CompressedModel::dense_from_params(&spec, &result.params)?,
    };
    fs::create_dir_all(out)?;
    model.write(&out.join("model.ghnw"))?;
    fs::write(out.join("train_log.csv"), result.log.to_csv())?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    for row in result.log.rows.iter().rev().take(2).rev() {
        println!(
            "{} er_cla {:.4} er_loc {:.5}",
            row.split.as_str(),
            row.er_cla,
            row.er_loc
        );
    }
    println!("model written to {}", out.join("model.ghnw").display());
    Ok(())
}

fn eval(cfg: &PipelineConfig, model: &CompressedModel, data: Option<&Path>) -> ghaar::Result<()> {
    let held = scenes(cfg, data, DataSplit::HeldOut)?;
    let samples = cfg.samples(&held, DataSplit::HeldOut)?;
    let mut counter = OpCounter::new();
    let m = window_metrics(&samples, |x| model.infer(x, &mut counter))?;
    println!(
        "windows: n {} fp {} fn {} er_cla {:.4} er_loc {:.5}",
        m.n, m.fp, m.fn_, m.er_cla, m.er_loc
    );
    let test = scenes(cfg, data, DataSplit::Test)?;
    let e = cfg.evaluate_model(model, &test)?;
    let r = &e.report;
    println!(
        "detection: images {} tp {} fp {} fn {} precision {:.4} recall {:.4} er_cla {:.6} er_loc {:.5}",
        test.len(),
        r.tp,
        r.fp,
        r.fn_,
        r.precision(),
        r.recall(),
        r.er_cla,
        r.er_loc
    );
    for b in &r.buckets {
        println!(
            "  depth [{:.2}, {:.2}): tp {} fp {} fn {} precision {:.4} recall {:.4}",
            b.z_min,
            b.z_max,
            b.tp,
            b.fp,
            b.fn_,
            b.precision(),
            b.recall()
        );
    }
    Ok(())
}

const BOX_COLORS: [[u8; 3]; 3] = [[255, 255, 255], [255, 40, 40], [40, 255, 40]];

fn detect(cfg: &PipelineConfig, model: &CompressedModel, images: &[PathBuf], out: &Path, annotate: bool) -> ghaar::Result<()> {
    let w = cfg.window_config()?;
    let geometry = cfg.geometry.geometry()?;
    fs::create_dir_all(out)?;
    for path in images {
        let mut image = Image::read_ppm(path)?;
        let (dets, stats) = detect_image(&image, model, geometry.as_ref().map(|(c, r)| (c, r)), &w, &cfg.detect)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?;
        fs::write(out.join(format!("{stem}.csv")), detections_csv(&dets))?;
        if annotate {
            for d in &dets {
                image.draw_box(d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, BOX_COLORS[d.label % BOX_COLORS.len()]);
            }
            image.write_ppm(&out.join(format!("{stem}_det.ppm")))?;
        }
        println!("{stem}: {} detections from {} windows", dets.len(), stats.windows);
    }
    Ok(())
}

fn bench(cfg: &PipelineConfig, model: &CompressedModel) -> ghaar::Result<()> {
    let w = cfg.window_config()?;
    let geometry = cfg.geometry.geometry()?;
    let test = cfg.scenes(DataSplit::Test)?;
    if test.is_empty() {
        return Err(Error::Usage("bench needs at least one image".into()));
    }
    let (width, height) = (cfg.synth.width, cfg.synth.height);
    let sparse = final_windows(width, height, geometry.as_ref().map(|(c, r)| (c, r)), &w)?;
    println!(
        "windows: |U_s| {} |U_f| {} kept {:.3}",
        sparse.sliding,
        sparse.windows.len(),
        sparse.keep_ratio()
    );

    let mut windows = 0;
    let mut counter = OpCounter::new();
    let start = Instant::now();
    for s in &test {
        let (_, stats) = detect_image(&s.image, model, geometry.as_ref().map(|(c, r)| (c, r)), &w, &cfg.detect)?;
        windows += stats.windows;
        merge_ops(&mut counter, &stats.ops);
    }
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} images, {} windows in {:.2}s: {:.1} windows/s, {:.3}s per image",
        test.len(),
        windows,
        secs,
        windows as f64 / secs,
        secs / test.len() as f64
    );

    let patch = test[0].image.crop(0, 0, w.ws)?.to_tensor();
    let mut fast = OpCounter::new();
    model.infer(&patch, &mut fast)?;
    let mut dense = OpCounter::new();
    model.infer_dense(&patch, &mut dense)?;
    println!("per window: {} multiplies fast, {} dense", fast.multiplies, dense.multiplies);
    println!("{:<10} {:>10} {:>10} {:>10}", "layer", "steps", "mul/step", "dense");
    for l in &fast.layers {
        let d = dense.layer(&l.name).map(|d| d.multiplies_per_step()).unwrap_or(f64::NAN);
        println!(
            "{:<10} {:>10} {:>10.2} {:>10.2}",
            l.name,
            l.steps,
            l.multiplies_per_step(),
            d
        );
    }
    println!("total multiplies over the run: {}", counter.multiplies);
    Ok(())
}

fn merge_ops(into: &mut OpCounter, from: &OpCounter) {
    into.multiplies += from.multiplies;
    into.additions += from.additions;
}

fn inspect(model: &CompressedModel) -> ghaar::Result<()> {
    let spec = model.spec();
    let constrained = model.mode() == StorageMode::Haar;
    println!(
        "input {}x{}x{}, {} classes, {} storage",
        spec.arch.in_channels,
        spec.arch.input_size,
        spec.arch.input_size,
        spec.classes(),
        if constrained { "haar" } else { "dense" }
    );
    match model.space() {
        Some(space) => println!("Nr {} (filters {:?})", space.selected().len(), space.selected()),
        None => println!("Nr -"),
    }
    let report = StorageReport::for_spec(spec, constrained);
    println!(
        "{:<10} {:>5} {:>8} {:>12} {:>12} {:>8}",
        "layer", "m", "kernels", "dense B", "stored B", "bias B"
    );
    for l in &report.layers {
        println!(
            "{:<10} {:>5} {:>8} {:>12} {:>12} {:>8}",
            l.name, l.kernel_size, l.kernels, l.traditional_bytes, l.ghaar_bytes, l.bias_bytes
        );
    }
    println!(
        "kernel payload: {} B dense, {} B stored, ratio {:.3}",
        report.traditional_bytes(),
        report.ghaar_bytes(),
        report.ratio()
    );
    if constrained {
        println!("constrained layers ratio {:.3}", report.constrained_ratio());
    }
    println!("file size {} B", model.encode().len());
    Ok(())
}
