//! End-to-end experiments: render, separate, estimate, design, evaluate.
//!
//! Every stage writes its products under the output directory, and the
//! evaluation tables can be recomputed from those files alone. Runs are
//! deterministic given the configuration and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_atomic, BinReader, BinWriter};
use crate::enhance::{design_binaural, enhance, read_filter, write_filter, DesignParams, Ear, MwfSolution, RESIDUAL_TOLERANCE};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{self, channel_snr, output_snr, CellSummary, ScatterPoint, SnrRecord};
use crate::par;
use crate::room::{render, Device, Point, RenderConfig, RenderedScene, Room, sum_mixture, Scene, Source};
use crate::separation::{separate, separation_snr, IvaConfig, Method, SeparationFilter, SeparationReport, SeparationResult};
use crate::signal::MultichannelSignal;
use crate::speech::speech_like;
use crate::stats::{estimate_spectra, ReirWindow, SpatialStats};
use crate::stft::{stft, StftConfig, WindowKind};
use crate::wav::{read_wav, write_wav, WavEncoding};

/// Dry signal of one source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SignalSource {
    /// Bundled speech-like generator, seeded from the scene seed.
    #[default]
    SpeechLike,
    /// First channel of a WAV file, relative to the scene file; truncated to the clip length.
    Wav { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub position: Point,
    #[serde(default)]
    pub signal: SignalSource,
}

/// A named microphone subset, by global microphone index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub name: String,
    pub mics: Vec<usize>,
}

fn default_speed() -> f64 {
    343.0
}

fn default_rate() -> u32 {
    16000
}

/// Scene description as stored in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub room: Room,
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    pub sources: Vec<SourceSpec>,
    pub devices: Vec<Device>,
    #[serde(default)]
    pub noise_level_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub array_configs: Vec<ArrayConfig>,
    #[serde(default)]
    pub render: RenderConfig,
}

impl SceneFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &json_bytes(self)?)
    }

    pub fn array_mics(&self, name: &str) -> Result<&[usize]> {
        self.array_configs
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.mics.as_slice())
            .ok_or_else(|| Error::Config(format!("scene has no array configuration '{name}'")))
    }

    /// Build the scene with `len`-sample source signals; WAV paths resolve against `base_dir`.
    pub fn to_scene(&self, len: usize, base_dir: &Path) -> Result<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sources = Vec::with_capacity(self.sources.len());
        for (n, spec) in self.sources.iter().enumerate() {
            let seed = rng.next_u64();
            let signal = match &spec.signal {
                SignalSource::SpeechLike => speech_like(len, self.sample_rate, seed),
                SignalSource::Wav { path } => {
                    let wav = read_wav(base_dir.join(path))?;
                    if wav.sample_rate() != self.sample_rate {
                        return Err(Error::Config(format!(
                            "source {n}: {} is at {} Hz, scene is at {} Hz",
                            path.display(),
                            wav.sample_rate(),
                            self.sample_rate
                        )));
                    }
                    if wav.len() < len {
                        return Err(Error::Config(format!(
                            "source {n}: {} has {} samples, need {len}",
                            path.display(),
                            wav.len()
                        )));
                    }
                    wav.channel(0).iter().take(len).copied().collect()
                }
            };
            sources.push(Source {
                position: spec.position,
                signal,
            });
        }
        let scene = Scene {
            room: self.room.clone(),
            speed_of_sound: self.speed_of_sound,
            sample_rate: self.sample_rate,
            sources,
            devices: self.devices.clone(),
            noise_level_db: self.noise_level_db,
            noise_seed: rng.next_u64(),
        };
        scene.validate()?;
        let mics = scene.mic_positions().len();
        for a in &self.array_configs {
            if let Some(&m) = a.mics.iter().find(|&&m| m >= mics) {
                return Err(Error::Config(format!("array configuration '{}' names microphone {m} of {mics}", a.name)));
            }
        }
        Ok(scene)
    }
}

fn circle(center: Point, radius: f64, count: usize) -> Vec<Point> {
    (0..count)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let um = |v: f64| (v * 1e6).round() / 1e6;
            [um(center[0] + radius * a.cos()), um(center[1] + radius * a.sin()), center[2]]
        })
        .collect()
}

/// Desk-scale scene: a 9 x 13 x 3 m room, four talkers, each with a four-mic
/// tabletop array in front of it, and two listeners wearing four mics each.
pub fn desk_scene() -> SceneFile {
    let talkers = [[2.5, 5.0, 1.4], [6.5, 5.5, 1.4], [3.0, 9.0, 1.4], [6.0, 9.5, 1.4]];
    let tables = [[2.9, 5.3, 0.8], [6.1, 5.7, 0.8], [3.3, 8.7, 0.8], [5.7, 9.2, 0.8]];
    let mut devices: Vec<Device> = tables
        .iter()
        .enumerate()
        .map(|(i, &c)| Device {
            name: format!("table{i}"),
            mic_positions: circle(c, 0.05, 4),
            is_listener: false,
            ear_channels: None,
        })
        .collect();
    // Listener A faces +y (left ear at -x); listener B faces -y (left ear at +x).
    devices.push(Device {
        name: "listener_a".into(),
        mic_positions: vec![[3.92, 6.0, 1.5], [4.08, 6.0, 1.5], [3.9, 6.05, 1.3], [4.1, 6.05, 1.3]],
        is_listener: true,
        ear_channels: Some((0, 1)),
    });
    devices.push(Device {
        name: "listener_b".into(),
        mic_positions: vec![[5.08, 7.5, 1.5], [4.92, 7.5, 1.5], [5.1, 7.45, 1.3], [4.9, 7.45, 1.3]],
        is_listener: true,
        ear_channels: Some((0, 1)),
    });
    let reference: Vec<usize> = {
        let mics: Vec<Point> = devices.iter().flat_map(|d| d.mic_positions.clone()).collect();
        let mut r = crate::room::nearest_mics(&talkers, &mics);
        r.sort_unstable();
        r
    };
    SceneFile {
        room: Room::uniform([9.0, 13.0, 3.0], 0.35),
        speed_of_sound: 343.0,
        sample_rate: 16000,
        sources: talkers
            .iter()
            .map(|&p| SourceSpec {
                position: p,
                signal: SignalSource::SpeechLike,
            })
            .collect(),
        devices,
        noise_level_db: Some(-30.0),
        seed: 2024,
        array_configs: vec![
            ArrayConfig {
                name: "reference".into(),
                mics: reference,
            },
            ArrayConfig {
                name: "wearable".into(),
                mics: (16..24).collect(),
            },
            ArrayConfig {
                name: "tabletop".into(),
                mics: (0..16).collect(),
            },
            ArrayConfig {
                name: "all".into(),
                mics: (0..24).collect(),
            },
        ],
        render: RenderConfig::default(),
    }
}

/// Experiment parameters; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Scene JSON; the built-in desk scene when absent.
    pub scene: Option<PathBuf>,
    pub methods: Vec<Method>,
    /// Array configurations to evaluate; all of the scene's when empty.
    pub array_configs: Vec<String>,
    /// STFT for the second-order statistics.
    pub stats_stft: StftConfig,
    /// AuxIVA settings; its STFT is also used by the ideal separator.
    pub iva: IvaConfig,
    /// Optional remix rendered to WAV for listening (not scored).
    pub remix_gains: Option<Vec<f64>>,
    pub delay_ms: f64,
    pub filter_ms: f64,
    pub reir: ReirWindow,
    pub estimation_clip_s: f64,
    pub eval_clip_s: f64,
    /// Overrides the scene seed.
    pub seed: Option<u64>,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: None,
            methods: Method::ALL.to_vec(),
            array_configs: Vec::new(),
            stats_stft: StftConfig::sqrt_hann(4096),
            iva: IvaConfig::default(),
            remix_gains: None,
            delay_ms: 16.0,
            filter_ms: 128.0,
            reir: ReirWindow::default(),
            estimation_clip_s: 16.0,
            eval_clip_s: 16.0,
            seed: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn scene_file(&self) -> Result<SceneFile> {
        let mut scene = match &self.scene {
            Some(p) => SceneFile::load(p)?,
            None => desk_scene(),
        };
        if let Some(seed) = self.seed {
            scene.seed = seed;
        }
        Ok(scene)
    }

    fn scene_dir(&self) -> PathBuf {
        self.scene
            .as_ref()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    /// Sample counts derived from the millisecond / second parameters.
    pub fn resolve(&self, sample_rate: u32) -> Result<Resolved> {
        let fs = f64::from(sample_rate);
        let samples = |sec: f64| (sec * fs).round() as usize;
        let taps = samples(self.filter_ms * 1e-3);
        let delay = samples(self.delay_ms * 1e-3);
        if taps == 0 {
            return Err(Error::Config("filter length must be at least one sample".into()));
        }
        let order = taps - 1;
        if delay > order {
            return Err(Error::Config(format!("delay of {delay} samples exceeds filter order {order}")));
        }
        let estimation = samples(self.estimation_clip_s);
        let evaluation = samples(self.eval_clip_s);
        if estimation == 0 || evaluation == 0 {
            return Err(Error::Config("estimation and evaluation clips must be non-empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no separation methods selected".into()));
        }
        self.stats_stft.validate()?;
        self.iva.stft.validate()?;
        Ok(Resolved {
            order,
            delay,
            estimation: 0..estimation,
            evaluation: estimation..estimation + evaluation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub order: usize,
    pub delay: usize,
    pub estimation: std::ops::Range<usize>,
    pub evaluation: std::ops::Range<usize>,
}

impl Resolved {
    pub fn design(&self, reir: ReirWindow) -> DesignParams {
        DesignParams {
            order: self.order,
            delay: self.delay,
            reir,
        }
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

/// Where every artifact of a run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn render_dir(&self) -> PathBuf {
        self.root.join("render")
    }

    pub fn cell_dir(&self, method: Method, array: &str) -> PathBuf {
        self.root.join("cells").join(format!("{method}-{array}"))
    }

    pub fn stats(&self, method: Method, array: &str, listener: &str) -> PathBuf {
        self.cell_dir(method, array).join(format!("stats-{listener}.bin"))
    }

    pub fn filter(&self, method: Method, array: &str, listener: &str, source: usize, ear: Ear) -> PathBuf {
        self.cell_dir(method, array)
            .join(format!("filter-{listener}-s{source}-{}.bin", ear.as_str()))
    }
}

/// Render metadata that the WAV files do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderInfo {
    pub sources: usize,
    pub mics: usize,
    pub sample_rate: u32,
    pub len: usize,
    pub reference_mics: Vec<usize>,
    pub direct_delays: Vec<Vec<f64>>,
    pub sabine_t60_s: f64,
}

pub fn write_render(dir: &Path, scene: &Scene, rendered: &RenderedScene) -> Result<()> {
    ensure_dir(dir)?;
    write_wav(dir.join("mixture.wav"), &rendered.mixture, WavEncoding::Float32)?;
    write_wav(dir.join("noise.wav"), &rendered.noise, WavEncoding::Float32)?;
    for n in 0..rendered.sources() {
        write_wav(dir.join(format!("image-{n}.wav")), &rendered.images[n], WavEncoding::Float32)?;
        write_wav(dir.join(format!("early-{n}.wav")), &rendered.early_images[n], WavEncoding::Float32)?;
    }
    let info = RenderInfo {
        sources: rendered.sources(),
        mics: rendered.mics(),
        sample_rate: rendered.sample_rate(),
        len: rendered.len(),
        reference_mics: rendered.reference_mics.clone(),
        direct_delays: rendered.direct_delays.clone(),
        sabine_t60_s: scene.room.sabine_t60(),
    };
    write_atomic(dir.join("render.json"), &json_bytes(&info)?)
}

/// Reload a render; impulse responses are not stored and come back empty.
pub fn read_render(dir: &Path) -> Result<RenderedScene> {
    let info: RenderInfo = serde_json::from_slice(&fs::read(dir.join("render.json"))?)?;
    let mut images = Vec::with_capacity(info.sources);
    let mut early_images = Vec::with_capacity(info.sources);
    for n in 0..info.sources {
        images.push(read_wav(dir.join(format!("image-{n}.wav")))?);
        early_images.push(read_wav(dir.join(format!("early-{n}.wav")))?);
    }
    let noise = read_wav(dir.join("noise.wav"))?;
    let shape_ok = |s: &MultichannelSignal| s.channels() == info.mics && s.len() == info.len;
    if !images.iter().chain(&early_images).chain([&noise]).all(shape_ok) {
        return Err(Error::Format("render.json disagrees with stored images".into()));
    }
    // mixture.wav is for listening; the exact sum is rebuilt from the stored parts.
    let mixture = sum_mixture(&images, &noise);
    Ok(RenderedScene {
        images,
        early_images,
        noise,
        mixture,
        reference_mics: info.reference_mics,
        rirs: Vec::new(),
        direct_delays: info.direct_delays,
    })
}

/// Render the configured scene over both clips, rounded to WAV precision.
pub fn render_stage(cfg: &ExperimentConfig) -> Result<(SceneFile, Scene, RenderedScene)> {
    let file = cfg.scene_file()?;
    let r = cfg.resolve(file.sample_rate)?;
    let scene = file.to_scene(r.evaluation.end, &cfg.scene_dir())?;
    let rendered = render(&scene, &file.render)?.quantize_f32();
    Ok((file, scene, rendered))
}

/// Array configuration microphones plus every reference microphone, ascending.
pub fn subset_mics(file: &SceneFile, name: &str, reference_mics: &[usize]) -> Result<Vec<usize>> {
    let mut mics = file.array_mics(name)?.to_vec();
    mics.extend_from_slice(reference_mics);
    mics.sort_unstable();
    mics.dedup();
    Ok(mics)
}

/// Mixture and images only, on a microphone subset and time range.
fn slice_for_separation(rendered: &RenderedScene, mics: &[usize], range: std::ops::Range<usize>) -> Result<RenderedScene> {
    let cut = |s: &MultichannelSignal| s.select_channels(mics)?.slice_time(range.clone());
    let reference_mics = rendered
        .reference_mics
        .iter()
        .map(|r| {
            mics.iter()
                .position(|m| m == r)
                .ok_or_else(|| Error::Config(format!("reference microphone {r} is not in the subset")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedScene {
        images: rendered.images.iter().map(cut).collect::<Result<_>>()?,
        early_images: Vec::new(),
        noise: cut(&rendered.noise)?,
        mixture: cut(&rendered.mixture)?,
        reference_mics,
        rirs: Vec::new(),
        direct_delays: Vec::new(),
    })
}

const SEP_MAGIC: &[u8; 8] = b"CLSEPFLT";
const SEP_VERSION: u8 = 1;

fn window_code(w: WindowKind) -> u64 {
    match w {
        WindowKind::SqrtHann => 0,
        WindowKind::Rectangular => 1,
    }
}

pub fn write_separation_filter(path: &Path, filter: &SeparationFilter) -> Result<()> {
    let mut w = BinWriter::new(SEP_MAGIC, SEP_VERSION);
    match filter {
        SeparationFilter::Select { channels } => {
            w.u64(0).u64(channels.len() as u64);
            for &c in channels {
                w.u64(c as u64);
            }
        }
        SeparationFilter::Spectral { weights, config } => {
            let (n, bins, m) = weights.dim();
            w.u64(1)
                .u64(n as u64)
                .u64(bins as u64)
                .u64(m as u64)
                .u64(config.frame_len as u64)
                .u64(config.hop as u64)
                .u64(config.fft_len as u64)
                .u64(window_code(config.window));
            for c in weights {
                w.f64(c.re).f64(c.im);
            }
        }
    }
    write_atomic(path, &w.finish())
}

pub fn read_separation_filter(path: &Path) -> Result<SeparationFilter> {
    let data = fs::read(path)?;
    let mut r = BinReader::new(&data, SEP_MAGIC, SEP_VERSION)?;
    let filter = match r.u64()? {
        0 => {
            let n = r.usize()?;
            let channels = (0..n).map(|_| r.usize()).collect::<Result<_>>()?;
            SeparationFilter::Select { channels }
        }
        1 => {
            let (n, bins, m) = (r.usize()?, r.usize()?, r.usize()?);
            let (frame_len, hop, fft_len) = (r.usize()?, r.usize()?, r.usize()?);
            let window = match r.u64()? {
                0 => WindowKind::SqrtHann,
                1 => WindowKind::Rectangular,
                other => return Err(Error::Format(format!("unknown window code {other}"))),
            };
            let raw = r.f64s(2 * n * bins * m)?;
            let values: Vec<Complex64> = raw.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
            SeparationFilter::Spectral {
                weights: Array3::from_shape_vec((n, bins, m), values).map_err(|e| Error::Format(e.to_string()))?,
                config: StftConfig {
                    frame_len,
                    hop,
                    fft_len,
                    window,
                },
            }
        }
        other => return Err(Error::Format(format!("unknown separation filter kind {other}"))),
    };
    r.expect_end()?;
    Ok(filter)
}

/// One filter of a single-target sweep.
#[derive(Debug, Clone)]
pub struct FilterEntry {
    pub listener: String,
    pub source: usize,
    pub ear: Ear,
    pub solution: MwfSolution,
}

/// One unit-gain filter per (source, listener, ear): `2 * listeners * sources` in total.
pub fn single_target_sweep(
    stats: &[(String, SpatialStats)],
    sources: usize,
    params: &DesignParams,
) -> Result<Vec<FilterEntry>> {
    let gain_sets: Vec<Vec<f64>> = (0..sources)
        .map(|n| (0..sources).map(|p| if p == n { 1.0 } else { 0.0 }).collect())
        .collect();
    let per_listener = par::map_slice(stats, |(name, st)| -> Result<Vec<FilterEntry>> {
        let designed = design_binaural(st, &gain_sets, params)?;
        let mut out = Vec::with_capacity(2 * sources);
        for (source, bf) in designed.into_iter().enumerate() {
            for ear in Ear::BOTH {
                out.push(FilterEntry {
                    listener: name.clone(),
                    source,
                    ear,
                    solution: bf.ear(ear).clone(),
                });
            }
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for entries in per_listener {
        all.extend(entries?);
    }
    if let Some(bad) = all.iter().find(|e| !(e.solution.residual_norm < RESIDUAL_TOLERANCE)) {
        return Err(Error::Numerical(format!(
            "filter {}/s{}/{} has residual {:.3e}",
            bad.listener,
            bad.source,
            bad.ear.as_str(),
            bad.solution.residual_norm
        )));
    }
    Ok(all)
}

/// A listening device of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Listener {
    pub name: String,
    /// Global microphone indices of the device.
    pub mics: std::ops::Range<usize>,
    /// `(left, right)` indices into the device's microphones.
    pub ears: (usize, usize),
}

pub fn listeners(file: &SceneFile) -> Vec<Listener> {
    let mut start = 0;
    let mut out = Vec::new();
    for d in &file.devices {
        let mics = start..start + d.mic_positions.len();
        if let (true, Some(ears)) = (d.is_listener, d.ear_channels) {
            out.push(Listener {
                name: d.name.clone(),
                mics: mics.clone(),
                ears,
            });
        }
        start = mics.end;
    }
    out
}

/// Everything a cell leaves behind that evaluation needs.
#[derive(Debug, Clone)]
pub struct CellArtifacts {
    pub method: Method,
    pub array: String,
    pub separation_filter: SeparationFilter,
    pub report: SeparationReport,
    pub filters: Vec<FilterEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub separation: Vec<SnrRecord>,
    pub enhancement: Vec<SnrRecord>,
    pub scatter: Vec<ScatterPoint>,
    pub separation_summary: Vec<CellSummary>,
    pub enhancement_summary: Vec<CellSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    table: String,
    method: String,
    array_config: String,
    count: usize,
    snr_median_db: f64,
    improvement_min_db: f64,
    improvement_q1_db: f64,
    improvement_median_db: f64,
    improvement_q3_db: f64,
    improvement_max_db: f64,
}

fn summary_rows(table: &str, cells: &[CellSummary]) -> Vec<SummaryRow> {
    cells
        .iter()
        .map(|c| SummaryRow {
            table: table.into(),
            method: c.method.clone(),
            array_config: c.array_config.clone(),
            count: c.snr.count,
            snr_median_db: c.snr.median,
            improvement_min_db: c.improvement.min,
            improvement_q1_db: c.improvement.q1,
            improvement_median_db: c.improvement.median,
            improvement_q3_db: c.improvement.q3,
            improvement_max_db: c.improvement.max,
        })
        .collect()
}

pub fn write_tables(root: &Path, tables: &Tables) -> Result<()> {
    metrics::write_csv(root.join("separation.csv"), &tables.separation)?;
    metrics::write_csv(root.join("enhancement.csv"), &tables.enhancement)?;
    metrics::write_csv(root.join("scatter.csv"), &tables.scatter)?;
    let mut rows = summary_rows("separation", &tables.separation_summary);
    rows.extend(summary_rows("enhancement", &tables.enhancement_summary));
    metrics::write_csv(root.join("summary.csv"), &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipInfo {
    pub estimation: [usize; 2],
    pub evaluation: [usize; 2],
    pub disjoint: bool,
}

/// Deterministic record of a run: identical for identical configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub sample_rate: u32,
    pub filter_order: usize,
    pub filter_delay: usize,
    pub clips: ClipInfo,
    pub cells: Vec<String>,
    pub artifacts: Vec<String>,
    pub filters: usize,
    pub max_residual: f64,
    pub loaded_filters: usize,
    pub separation_regularization_events: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub tables: Tables,
    pub manifest: Manifest,
    pub cells: Vec<CellArtifacts>,
    pub timings: BTreeMap<String, f64>,
}

/// A run's configuration, scene and rendered signals, plus where its artifacts go.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub file: SceneFile,
    pub rendered: RenderedScene,
    pub resolved: Resolved,
    pub arrays: Vec<String>,
    pub layout: Layout,
}

fn selected_arrays(cfg: &ExperimentConfig, file: &SceneFile) -> Result<Vec<String>> {
    let names: Vec<String> = if cfg.array_configs.is_empty() {
        file.array_configs.iter().map(|a| a.name.clone()).collect()
    } else {
        cfg.array_configs.clone()
    };
    if names.is_empty() {
        return Err(Error::Config("no array configurations selected".into()));
    }
    for n in &names {
        file.array_mics(n)?;
    }
    Ok(names)
}

impl Run {
    /// Render the scene and write `render/`, `scene.json` and `config.json`.
    pub fn render(cfg: &ExperimentConfig) -> Result<Run> {
        let (file, scene, rendered) = render_stage(cfg)?;
        let resolved = cfg.resolve(file.sample_rate)?;
        let arrays = selected_arrays(cfg, &file)?;
        let layout = Layout::new(&cfg.output_dir);
        ensure_dir(&layout.root)?;
        write_render(&layout.render_dir(), &scene, &rendered)?;
        file.save(layout.root.join("scene.json"))?;
        write_atomic(layout.root.join("config.json"), &json_bytes(cfg)?)?;
        Ok(Run {
            cfg: cfg.clone(),
            file,
            rendered,
            resolved,
            arrays,
            layout,
        })
    }

    /// Reopen a rendered run from its output directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Run> {
        let layout = Layout::new(root);
        let mut cfg = ExperimentConfig::load(layout.root.join("config.json"))?;
        cfg.output_dir = layout.root.clone();
        let file = SceneFile::load(layout.root.join("scene.json"))?;
        let rendered = read_render(&layout.render_dir())?;
        let resolved = cfg.resolve(file.sample_rate)?;
        if rendered.len() < resolved.evaluation.end {
            return Err(Error::Format(format!(
                "render has {} samples, configuration needs {}",
                rendered.len(),
                resolved.evaluation.end
            )));
        }
        let arrays = selected_arrays(&cfg, &file)?;
        Ok(Run {
            cfg,
            file,
            rendered,
            resolved,
            arrays,
            layout,
        })
    }

    pub fn cells(&self) -> Vec<(Method, String)> {
        self.cfg
            .methods
            .iter()
            .flat_map(|&m| self.arrays.iter().map(move |a| (m, a.clone())))
            .collect()
    }

    fn estimation_subset(&self, array: &str) -> Result<RenderedScene> {
        let mics = subset_mics(&self.file, array, &self.rendered.reference_mics)?;
        slice_for_separation(&self.rendered, &mics, self.resolved.estimation.clone())
    }

    fn listener_mixture(&self, l: &Listener, range: std::ops::Range<usize>) -> Result<MultichannelSignal> {
        let local: Vec<usize> = l.mics.clone().collect();
        self.rendered.mixture.select_channels(&local)?.slice_time(range)
    }

    /// Separate the estimation clip; estimates are rounded to the precision of their WAV file.
    pub fn separate_cell(&self, method: Method, array: &str) -> Result<SeparationResult> {
        let dir = self.layout.cell_dir(method, array);
        ensure_dir(&dir)?;
        let mut result = separate(&self.estimation_subset(array)?, method, &self.cfg.iva)?;
        result.estimates = result.estimates.quantize_f32();
        result.write_wav(dir.join("estimates.wav"))?;
        write_separation_filter(&dir.join("separation.bin"), &result.filter)?;
        write_atomic(dir.join("separation.json"), &json_bytes(&result.report)?)?;
        Ok(result)
    }

    pub fn load_estimates(&self, method: Method, array: &str) -> Result<MultichannelSignal> {
        read_wav(self.layout.cell_dir(method, array).join("estimates.wav"))
    }

    /// Second-order statistics of each listener's microphones against the estimates.
    pub fn estimate_cell(&self, method: Method, array: &str, estimates: &MultichannelSignal) -> Result<Vec<(String, SpatialStats)>> {
        let s = stft(estimates, &self.cfg.stats_stft)?;
        let mut out = Vec::new();
        for l in listeners(&self.file) {
            let x = stft(&self.listener_mixture(&l, self.resolved.estimation.clone())?, &self.cfg.stats_stft)?;
            let mut st = estimate_spectra(&x, &s)?;
            st.ear_channels = Some(l.ears);
            st.write(self.layout.stats(method, array, &l.name))?;
            out.push((l.name, st));
        }
        Ok(out)
    }

    pub fn load_stats(&self, method: Method, array: &str) -> Result<Vec<(String, SpatialStats)>> {
        listeners(&self.file)
            .into_iter()
            .map(|l| {
                let st = SpatialStats::read(self.layout.stats(method, array, &l.name))?;
                Ok((l.name, st))
            })
            .collect()
    }

    /// Single-target filters for every listener, plus the optional listening remix.
    pub fn design_cell(&self, method: Method, array: &str, stats: &[(String, SpatialStats)]) -> Result<Vec<FilterEntry>> {
        let params = self.resolved.design(self.cfg.reir);
        let filters = single_target_sweep(stats, self.rendered.sources(), &params)?;
        for f in &filters {
            write_filter(self.layout.filter(method, array, &f.listener, f.source, f.ear), &f.solution)?;
        }
        if let Some(gains) = &self.cfg.remix_gains {
            for (l, (_, st)) in listeners(&self.file).iter().zip(stats) {
                let eval = self.listener_mixture(l, self.resolved.evaluation.clone())?;
                let out = enhance(&eval, st, gains, &params)?;
                let pair = MultichannelSignal::from_channels(vec![out.left, out.right], eval.sample_rate())?;
                let path = self.layout.cell_dir(method, array).join(format!("remix-{}.wav", l.name));
                write_wav(path, &pair, WavEncoding::Float32)?;
            }
        }
        Ok(filters)
    }

    pub fn load_cell(&self, method: Method, array: &str) -> Result<CellArtifacts> {
        let dir = self.layout.cell_dir(method, array);
        let separation_filter = read_separation_filter(&dir.join("separation.bin"))?;
        let report: SeparationReport = serde_json::from_slice(&fs::read(dir.join("separation.json"))?)?;
        let mut filters = Vec::new();
        for l in listeners(&self.file) {
            for source in 0..self.rendered.sources() {
                for ear in Ear::BOTH {
                    filters.push(FilterEntry {
                        listener: l.name.clone(),
                        source,
                        ear,
                        solution: read_filter(self.layout.filter(method, array, &l.name, source, ear))?,
                    });
                }
            }
        }
        Ok(CellArtifacts {
            method,
            array: array.to_string(),
            separation_filter,
            report,
            filters,
        })
    }

    /// Score every cell: separation on the estimation clip, enhancement on the evaluation clip.
    pub fn evaluate(&self, cells: &[CellArtifacts]) -> Result<Tables> {
        let rendered = &self.rendered;
        let n = rendered.sources();
        let lst = listeners(&self.file);
        let eval_images: Vec<Vec<MultichannelSignal>> = lst
            .iter()
            .map(|l| {
                let local: Vec<usize> = l.mics.clone().collect();
                rendered
                    .images
                    .iter()
                    .map(|img| img.select_channels(&local)?.slice_time(self.resolved.evaluation.clone()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let per_cell = par::map_slice(cells, |cell| -> Result<(Vec<SnrRecord>, Vec<SnrRecord>)> {
            let est = self.estimation_subset(&cell.array)?;
            let sep_snr = separation_snr(&cell.separation_filter, &est.images)?;
            let mut sep_rows = Vec::with_capacity(n);
            for (s, &snr) in sep_snr.iter().enumerate() {
                let unprocessed = channel_snr(&est.images, est.reference_mics[s], s)?;
                sep_rows.push(SnrRecord {
                    method: cell.method.to_string(),
                    array_config: cell.array.clone(),
                    n_sources: n,
                    source: s,
                    listener: "reference".into(),
                    ear: format!("mic{}", rendered.reference_mics[s]),
                    snr_db: snr,
                    improvement_db: metrics::snr_improvement(snr, unprocessed),
                });
            }
            let mut enh_rows = Vec::with_capacity(cell.filters.len());
            for f in &cell.filters {
                let li = lst
                    .iter()
                    .position(|l| l.name == f.listener)
                    .ok_or_else(|| Error::Config(format!("unknown listener {}", f.listener)))?;
                let images = &eval_images[li];
                let out = output_snr(&f.solution.filter, images, f.source)?;
                let input = channel_snr(images, f.ear.channel(lst[li].ears), f.source)?;
                enh_rows.push(SnrRecord {
                    method: cell.method.to_string(),
                    array_config: cell.array.clone(),
                    n_sources: n,
                    source: f.source,
                    listener: f.listener.clone(),
                    ear: f.ear.as_str().into(),
                    snr_db: out,
                    improvement_db: metrics::snr_improvement(out, input),
                });
            }
            Ok((sep_rows, enh_rows))
        });
        let mut separation = Vec::new();
        let mut enhancement = Vec::new();
        for cell in per_cell {
            let (s, e) = cell?;
            separation.extend(s);
            enhancement.extend(e);
        }
        Ok(Tables {
            scatter: metrics::scatter(&separation, &enhancement),
            separation_summary: metrics::summarize(&separation),
            enhancement_summary: metrics::summarize(&enhancement),
            separation,
            enhancement,
        })
    }

    fn artifact_list(&self, cells: &[CellArtifacts]) -> Vec<String> {
        let mut out = vec!["config.json".to_string(), "scene.json".into(), "render/render.json".into()];
        out.push("render/mixture.wav".into());
        out.push("render/noise.wav".into());
        for n in 0..self.rendered.sources() {
            out.push(format!("render/image-{n}.wav"));
            out.push(format!("render/early-{n}.wav"));
        }
        for c in cells {
            let dir = format!("cells/{}-{}", c.method, c.array);
            for f in ["estimates.wav", "separation.bin", "separation.json"] {
                out.push(format!("{dir}/{f}"));
            }
            for l in listeners(&self.file) {
                out.push(format!("{dir}/stats-{}.bin", l.name));
            }
            for f in &c.filters {
                out.push(format!("{dir}/filter-{}-s{}-{}.bin", f.listener, f.source, f.ear.as_str()));
            }
            if self.cfg.remix_gains.is_some() {
                for l in listeners(&self.file) {
                    out.push(format!("{dir}/remix-{}.wav", l.name));
                }
            }
        }
        out.extend(["separation.csv", "enhancement.csv", "scatter.csv", "summary.csv"].map(String::from));
        out
    }

    pub fn manifest(&self, cells: &[CellArtifacts]) -> Manifest {
        let filters: Vec<&FilterEntry> = cells.iter().flat_map(|c| &c.filters).collect();
        let r = &self.resolved;
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.file.seed,
            config: self.cfg.clone(),
            sample_rate: self.file.sample_rate,
            filter_order: r.order,
            filter_delay: r.delay,
            clips: ClipInfo {
                estimation: [r.estimation.start, r.estimation.end],
                evaluation: [r.evaluation.start, r.evaluation.end],
                disjoint: r.estimation.end <= r.evaluation.start,
            },
            cells: cells.iter().map(|c| format!("{}-{}", c.method, c.array)).collect(),
            artifacts: self.artifact_list(cells),
            filters: filters.len(),
            max_residual: filters.iter().map(|f| f.solution.residual_norm).fold(0.0, f64::max),
            loaded_filters: filters.iter().filter(|f| f.solution.loading > 0.0).count(),
            separation_regularization_events: cells
                .iter()
                .map(|c| (format!("{}-{}", c.method, c.array), c.report.regularization_events))
                .collect(),
            notes: vec![
                "Source images are rendered individually and summed with independent sensor noise; no recombination step adds ambient noise.".into(),
                "Enhancement SNR is measured on the evaluation clip, disjoint from the clip used for separation and statistics.".into(),
            ],
        }
    }

    /// Score the cells and write the tables, `manifest.json` and `timings.json`.
    pub fn finish(&self, cells: Vec<CellArtifacts>, mut timings: BTreeMap<String, f64>) -> Result<ExperimentReport> {
        let t0 = Instant::now();
        let tables = self.evaluate(&cells)?;
        write_tables(&self.layout.root, &tables)?;
        let manifest = self.manifest(&cells);
        write_atomic(self.layout.root.join("manifest.json"), &json_bytes(&manifest)?)?;
        timings.insert("evaluate".into(), t0.elapsed().as_secs_f64());
        write_atomic(self.layout.root.join("timings.json"), &json_bytes(&timings)?)?;
        Ok(ExperimentReport {
            tables,
            manifest,
            cells,
            timings,
        })
    }

    /// Run `f` on every cell in parallel, labelling failures with the cell.
    pub fn for_each_cell<R: Send>(&self, f: impl Fn(Method, &str) -> Result<R> + Sync) -> Result<Vec<R>> {
        par::map_slice(&self.cells(), |(m, a)| {
            f(*m, a)
                .map_err(|e| Error::Cell {
                    cell: format!("{m}-{a}"),
                    source: Box::new(e),
                })
        })
        .into_iter()
        .collect()
    }
}

/// Full pipeline: render, separate, estimate, design and evaluate every cell, writing all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut timings = BTreeMap::new();
    let run = Run::render(cfg).stage("render")?;
    timings.insert("render".to_string(), start.elapsed().as_secs_f64());
    let per_cell = run.for_each_cell(|m, a| {
        let mut t = [0.0; 3];
        let t0 = Instant::now();
        let sep = run.separate_cell(m, a).stage("separate")?;
        t[0] = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let stats = run.estimate_cell(m, a, &sep.estimates).stage("estimate")?;
        t[1] = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let filters = run.design_cell(m, a, &stats).stage("design")?;
        t[2] = t0.elapsed().as_secs_f64();
        let cell = CellArtifacts {
            method: m,
            array: a.to_string(),
            separation_filter: sep.filter,
            report: sep.report,
            filters,
        };
        Ok((cell, t))
    })?;
    let mut cells = Vec::with_capacity(per_cell.len());
    for (cell, t) in per_cell {
        for (k, v) in ["separate", "estimate", "design"].into_iter().zip(t) {
            *timings.entry(k.to_string()).or_default() += v;
        }
        cells.push(cell);
    }
    let mut report = run.finish(cells, timings).stage("evaluate")?;
    report.timings.insert("total".into(), start.elapsed().as_secs_f64());
    write_atomic(run.layout.root.join("timings.json"), &json_bytes(&report.timings)?)?;
    Ok(report)
}

/// Recompute the evaluation tables of a finished run purely from its output directory.
pub fn evaluate_from_disk(root: &Path) -> Result<Tables> {
    let run = Run::open(root)?;
    let cells = run.for_each_cell(|m, a| run.load_cell(m, a))?;
    run.evaluate(&cells)
}
