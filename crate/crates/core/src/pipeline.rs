//! Whole-pipeline settings read from one TOML file, and the steps shared by
//! the command line and the end-to-end tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressed::CompressedModel;
use crate::detect::{evaluate, refine_detections, score_windows, DetectConfig, Detection, DistanceBands, EvalReport, ImageResult};
use crate::error::{Error, Result};
use crate::nn::{ArchConfig, NetworkSpec};
use crate::synth::{extract_all, generate_scenes, SampleConfig, Scene, SynthConfig};
use crate::train::{Dataset, TrainConfig, TrainSample};
use crate::windows::{CameraModel, GeometryConfig, SceneRanges, WindowConfig};

/// Scene counts of the generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub held_out_images: usize,
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_images: 2000,
            held_out_images: 200,
            test_images: 100,
        }
    }
}

/// Scene split; each draws from its own seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSplit {
    Train,
    HeldOut,
    Test,
}

impl DataSplit {
    pub fn name(self) -> &'static str {
        match self {
            DataSplit::Train => "train",
            DataSplit::HeldOut => "held_out",
            DataSplit::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            DataSplit::Train => 0x7261_696e,
            DataSplit::HeldOut => 0x686f_6c64,
            DataSplit::Test => 0x7465_7374,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of the generated data; training has its own in `[train]`.
    pub seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub geometry: GeometryConfig,
    pub synth: SynthConfig,
    pub samples: SampleConfig,
    pub detect: DetectConfig,
    pub data: DataConfig,
}

impl Default for PipelineConfig {
    /// The synthetic road-like scene: a 320x240 camera looking along the
    /// depth axis, objects 1.5 units tall spread 12 units across and 3 deep.
    fn default() -> Self {
        let cam = CameraModel::new(300.0, 300.0, 160.0, 120.0, 0.0, 0.0, 0.0).expect("valid camera");
        let ranges = SceneRanges {
            x3d_min: -6.0,
            x3d_max: 6.0,
            y3d_min: -1.0,
            y3d_max: 2.0,
            d3d: 1.5,
        };
        PipelineConfig {
            seed: 0,
            arch: ArchConfig {
                trunk: [8, 16, 32, 32],
                head: [32, 32, 16],
                ..ArchConfig::default()
            },
            train: TrainConfig::default(),
            geometry: GeometryConfig::with_camera(&cam, &ranges, &WindowConfig::default()),
            synth: SynthConfig::default(),
            samples: SampleConfig::default(),
            detect: DetectConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network_spec()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.detect.validate()?;
        let w = self.window_config()?;
        self.geometry.geometry()?;
        if self.arch.input_size != w.ws {
            return Err(Error::config(format!(
                "network input {} differs from window size {}",
                self.arch.input_size, w.ws
            )));
        }
        if self.arch.in_channels != 3 {
            return Err(Error::config("the image pipeline needs three input channels"));
        }
        if self.arch.classes != 3 {
            return Err(Error::config("synthetic scenes have two object classes plus background"));
        }
        if self.synth.width < w.ws || self.synth.height < w.ws {
            return Err(Error::config("scenes are smaller than one window"));
        }
        if !(self.samples.rs_lo > 0.0 && self.samples.rs_lo <= self.samples.rs_hi && self.samples.rs_hi <= 1.0) {
            return Err(Error::config("positive size band must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.arch.clone())
    }

    pub fn window_config(&self) -> Result<WindowConfig> {
        self.geometry.window_config()
    }

    /// Camera and scene ranges; scene generation needs both.
    pub fn scene_geometry(&self) -> Result<(CameraModel, SceneRanges)> {
        self.geometry
            .geometry()?
            .ok_or_else(|| Error::config("scene generation needs the camera terms m11..m34"))
    }

    pub fn scenes(&self, split: DataSplit) -> Result<Vec<Scene>> {
        let (cam, ranges) = self.scene_geometry()?;
        let count = match split {
            DataSplit::Train => self.data.train_images,
            DataSplit::HeldOut => self.data.held_out_images,
            DataSplit::Test => self.data.test_images,
        };
        generate_scenes(&self.synth, &cam, &ranges, self.seed ^ split.stream(), 0, count)
    }

    /// Labelled training windows of a set of scenes.
    pub fn samples(&self, scenes: &[Scene], split: DataSplit) -> Result<Vec<TrainSample>> {
        extract_all(scenes, &self.window_config()?, &self.samples, self.seed ^ split.stream())
    }

    pub fn dataset(&self, train: &[Scene], held_out: &[Scene]) -> Result<Dataset> {
        Ok(Dataset {
            train: self.samples(train, DataSplit::Train)?,
            held_out: self.samples(held_out, DataSplit::HeldOut)?,
        })
    }

    /// Detects on every scene and scores against its ground truth. The
    /// classification error is normalized by the number of windows run.
    pub fn evaluate_model(&self, model: &CompressedModel, scenes: &[Scene]) -> Result<DetectionEval> {
        let scored = self.score_scenes(model, scenes, self.detect.score_threshold)?;
        let report = self.report(&scored, scenes, &self.detect)?;
        Ok(DetectionEval {
            report,
            windows: scored.windows,
            multiplies: scored.multiplies,
        })
    }

    /// Runs the model once over every scene, keeping object windows that
    /// score at least `min_score`.
    pub fn score_scenes(&self, model: &CompressedModel, scenes: &[Scene], min_score: f64) -> Result<ScoredScenes> {
        let w = self.window_config()?;
        let geometry = self.geometry.geometry()?;
        let mut out = ScoredScenes {
            scenes: Vec::with_capacity(scenes.len()),
            windows: 0,
            multiplies: 0,
        };
        for s in scenes {
            let (scored, stats) = score_windows(&s.image, model, geometry.as_ref().map(|(c, r)| (c, r)), &w, min_score)?;
            out.windows += stats.windows;
            out.multiplies += stats.ops.multiplies;
            out.scenes.push(scored);
        }
        Ok(out)
    }

    /// Refines scored windows under `detect` and evaluates them.
    pub fn report(&self, scored: &ScoredScenes, scenes: &[Scene], detect: &DetectConfig) -> Result<EvalReport> {
        detect.validate()?;
        if scored.scenes.len() != scenes.len() {
            return Err(Error::data(format!(
                "{} scored scenes for {} ground truths",
                scored.scenes.len(),
                scenes.len()
            )));
        }
        let results: Vec<ImageResult> = scored
            .scenes
            .iter()
            .zip(scenes)
            .map(|(d, s)| ImageResult {
                detections: refine_detections(d, detect),
                truth: s.objects.clone(),
            })
            .collect();
        let w = self.window_config()?;
        let geometry = self.geometry.geometry()?;
        let bands = geometry.as_ref().map(|(cam, r)| DistanceBands {
            camera: cam,
            d3d: r.d3d,
            edges: depth_edges(cam, r, &self.synth),
        });
        evaluate(&results, scored.windows.max(1), detect.eval_iou, w.ws, bands.as_ref())
    }

    /// Picks the score threshold among `candidates` that maximizes the
    /// smaller of precision and recall on `scenes`; ties go to the lower
    /// threshold.
    pub fn calibrate_threshold(
        &self,
        model: &CompressedModel,
        scenes: &[Scene],
        candidates: &[f64],
    ) -> Result<(f64, EvalReport)> {
        let lowest = candidates
            .iter()
            .copied()
            .reduce(f64::min)
            .ok_or_else(|| Error::config("no candidate thresholds"))?;
        let scored = self.score_scenes(model, scenes, lowest)?;
        let mut best: Option<(f64, EvalReport)> = None;
        for &t in candidates {
            let cfg = DetectConfig {
                score_threshold: t,
                ..self.detect
            };
            let r = self.report(&scored, scenes, &cfg)?;
            let better = match &best {
                None => true,
                Some((bt, br)) => {
                    let (a, b) = (r.precision().min(r.recall()), br.precision().min(br.recall()));
                    a > b || (a == b && t < *bt)
                }
            };
            if better {
                best = Some((t, r));
            }
        }
        Ok(best.expect("at least one candidate"))
    }
}

/// Unrefined detections of a set of scenes plus the work it took.
#[derive(Clone, Debug)]
pub struct ScoredScenes {
    pub scenes: Vec<Vec<Detection>>,
    pub windows: usize,
    pub multiplies: u64,
}

/// Detection scores plus the work it took.
#[derive(Clone, Debug)]
pub struct DetectionEval {
    pub report: EvalReport,
    pub windows: usize,
    pub multiplies: u64,
}

/// Three depth buckets spanning the generated object sizes.
fn depth_edges(cam: &CameraModel, r: &SceneRanges, synth: &SynthConfig) -> Vec<f64> {
    let near = cam.m11 * r.d3d / synth.d2d_max - cam.m34;
    let far = cam.m11 * r.d3d / synth.d2d_min - cam.m34;
    let step = (far - near) / 3.0;
    vec![near - 1e-9, near + step, near + 2.0 * step, far + 1e-9]
}
