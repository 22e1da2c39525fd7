//! Seeded synthetic scenes and events.
//!
//! Every scene class owns one frequency band; its clips are band-limited
//! noise (a random-phase sinusoid cloud inside the band) over a weak
//! broadband floor. Event classes are tone bursts at fixed frequencies laid
//! over the clips of the last scene task, so the event task reuses that
//! task's audio with different labels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::features::{write_feature_file, Framing, MelExtractor, N_MELS};
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Class count of each scene task, in task order.
    pub scene_tasks: Vec<usize>,
    pub event_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub segment_seconds: f64,
    pub sample_rate_hz: u32,
    /// Probability that a given event occurs in a clip.
    pub event_probability: f64,
    /// RMS of the broadband background shared by all scenes, relative to
    /// the class band.
    pub background_level: f64,
    /// Peak amplitude of event bursts relative to the mean scene level.
    pub event_level: f64,
    /// Overlap of neighbouring scene bands, as a fraction of band width.
    pub band_overlap: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            scene_tasks: vec![4],
            event_classes: 8,
            train_per_class: 50,
            eval_per_class: 20,
            segment_seconds: 0.34,
            sample_rate_hz: 16_000,
            event_probability: 0.3,
            background_level: 0.2,
            band_overlap: 0.0,
            event_level: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Scene tasks first, then the event task.
    pub tasks: Vec<TaskSpec>,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub n_frames: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scene_tasks.is_empty() || self.scene_tasks.iter().any(|&n| n < 2) {
            return Err(Error::Parameter(
                "every synthetic scene task needs at least 2 classes".into(),
            ));
        }
        if self.event_classes == 0 {
            return Err(Error::Parameter("at least one event class is required".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Parameter("train_per_class must be positive".into()));
        }
        if !(self.band_overlap >= 0.0) {
            return Err(Error::Parameter("band_overlap must be non-negative".into()));
        }
        if !(self.background_level >= 0.0) {
            return Err(Error::Parameter("background_level must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.event_probability) {
            return Err(Error::Parameter("event_probability outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut tasks: Vec<TaskSpec> = self
            .scene_tasks
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                TaskSpec::new(
                    t as u32,
                    format!("scenes{t}"),
                    TaskKind::SingleLabel,
                    (0..n).map(|k| format!("scene{t}_{k}")).collect(),
                )
            })
            .collect();
        tasks.push(TaskSpec::new(
            self.scene_tasks.len() as u32,
            "events",
            TaskKind::MultiLabel,
            (0..self.event_classes).map(|k| format!("event{k}")).collect(),
        ));
        tasks
    }

    fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sample_rate_hz as f64).round() as usize
    }

    /// Band `[lo, hi]` of class `k` of scene task `t` on a log-frequency
    /// axis over 150 Hz .. 0.9·Nyquist. Tasks interleave, so every class of
    /// one task lies between classes of the others; neighbouring bands
    /// overlap by `band_overlap` of their width.
    fn scene_band(&self, t: usize, k: usize) -> (f64, f64) {
        let lo = 150f64.ln();
        let hi = (0.45 * self.sample_rate_hz as f64).ln();
        let s = self.scene_tasks.len() as f64;
        let n = self.scene_tasks[t] as f64;
        let centre = (k as f64 + (t as f64 + 0.5) / s) / n;
        let half = 0.5 * (1.0 + self.band_overlap) / (n * s);
        let at = |u: f64| (lo + (hi - lo) * u.clamp(0.0, 1.0)).exp();
        (at(centre - half), at(centre + half))
    }

    fn event_freq(&self, e: usize) -> f64 {
        let lo = 300f64.ln();
        let hi = (0.4 * self.sample_rate_hz as f64).ln();
        (lo + (hi - lo) * (e as f64 + 0.5) / self.event_classes as f64).exp()
    }
}

const PARTIALS: usize = 24;

fn band_noise(rng: &mut ChaCha8Rng, band: (f64, f64), n: usize, sr: f64, amplitude: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let norm = amplitude * (2.0 / PARTIALS as f64).sqrt();
    for _ in 0..PARTIALS {
        let f = rng.gen_range(band.0..band.1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let a = norm * rng.gen_range(0.5..1.5);
        let step = 2.0 * PI * f / sr;
        for (i, o) in out.iter_mut().enumerate() {
            *o += a * (phase + step * i as f64).sin();
        }
    }
    out
}

fn add_burst(rng: &mut ChaCha8Rng, signal: &mut [f64], freq: f64, sr: f64, amplitude: f64) {
    let n = signal.len();
    let len = ((rng.gen_range(0.3..0.6) * n as f64) as usize).max(2);
    let start = rng.gen_range(0..=n - len);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let step = 2.0 * PI * freq / sr;
    for i in 0..len {
        let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
        signal[start + i] += amplitude * env * (phase + step * i as f64).sin();
    }
}

/// Writes LMEL feature files plus `train.tsv` / `eval.tsv` manifests (all
/// tasks) and `tasks.json` into `out_dir`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let sr = spec.sample_rate_hz;
    let n = spec.segment_samples();
    let framing = Framing::standard(sr)?;
    let n_frames = framing.frame_count(n)?;
    let extractor = MelExtractor::with_framing(framing, sr, N_MELS)?;
    let tasks = spec.tasks();
    let event_task = tasks.last().expect("event task").clone();
    let last_scene = spec.scene_tasks.len() - 1;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (t, &n_classes) in spec.scene_tasks.iter().enumerate() {
        for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Eval, spec.eval_per_class)] {
            for k in 0..n_classes {
                let band = spec.scene_band(t, k);
                for j in 0..per_class {
                    let gain = 0.1 * rng.gen_range(0.5..2.0);
                    let mut signal = band_noise(&mut rng, band, n, sr as f64, gain);
                    // Uniform noise on [-a, a] has RMS a/√3.
                    let floor = spec.background_level * gain * 3f64.sqrt();
                    for s in signal.iter_mut() {
                        *s += floor * rng.gen_range(-1.0..1.0);
                    }
                    let mut events = Vec::new();
                    if t == last_scene {
                        for e in 0..spec.event_classes {
                            if rng.gen_bool(spec.event_probability) {
                                let amp = 0.1 * spec.event_level * rng.gen_range(0.7..1.5);
                                add_burst(&mut rng, &mut signal, spec.event_freq(e), sr as f64, amp);
                                events.push(event_task.classes[e].clone());
                            }
                        }
                    }
                    let samples: Vec<f32> = signal.iter().map(|&v| v as f32).collect();
                    let fm = extractor.extract(&samples)?;
                    let name = format!("features/{split}_t{t}_c{k}_{j:04}.lmel");
                    write_feature_file(&fm, &out_dir.join(&name))?;
                    let list = if split == Split::Train { &mut train } else { &mut eval };
                    list.push(ManifestEntry {
                        feature_ref: name.clone(),
                        path: out_dir.join(&name),
                        task_id: t as u32,
                        labels: vec![tasks[t].classes[k].clone()],
                        split,
                    });
                    if t == last_scene {
                        list.push(ManifestEntry {
                            feature_ref: name.clone(),
                            path: out_dir.join(&name),
                            task_id: event_task.id,
                            labels: events,
                            split,
                        });
                    }
                }
            }
        }
    }

    let train_manifest = out_dir.join("train.tsv");
    let eval_manifest = out_dir.join("eval.tsv");
    write_manifest(&train_manifest, &train)?;
    write_manifest(&eval_manifest, &eval)?;
    let tasks_path = out_dir.join("tasks.json");
    let json = serde_json::to_string_pretty(&tasks).expect("tasks serialize");
    fs::write(&tasks_path, json).map_err(|e| Error::io(&tasks_path, e))?;
    Ok(SynthOutput {
        tasks,
        train_manifest,
        eval_manifest,
        n_frames,
    })
}
