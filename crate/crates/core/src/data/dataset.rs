use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{load_manifest, ManifestEntry, Split};
use super::wav::read_wav;
use crate::error::{Error, Result};
use crate::features::{read_feature_file, segment_signal, FeatureMatrix, MelExtractor};
use crate::model::InputSpec;
use crate::task::{TaskKind, TaskSpec};
use crate::tensor::{Real, Tensor};

/// One training or evaluation example, already fitted to the input size.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// Mel-major `[n_mels, n_frames]` values.
    pub features: Vec<f32>,
    /// Class indices within the task.
    pub labels: Vec<usize>,
}

/// Loads features for manifest entries: LMEL files directly, WAV files by
/// extracting log mel energies per fixed-length segment (cached per path).
pub struct FeatureSource {
    pub sample_rate_hz: u32,
    pub segment_seconds: f64,
    extractor: Option<MelExtractor>,
    cache: HashMap<PathBuf, Vec<FeatureMatrix>>,
}

impl FeatureSource {
    pub fn new(sample_rate_hz: u32, segment_seconds: f64) -> Self {
        FeatureSource {
            sample_rate_hz,
            segment_seconds,
            extractor: None,
            cache: HashMap::new(),
        }
    }

    /// Feature matrices referenced by `path`: one for an LMEL file, one per
    /// segment for audio.
    pub fn load(&mut self, path: &Path, n_mels: usize) -> Result<&[FeatureMatrix]> {
        if !self.cache.contains_key(path) {
            let is_wav = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            let mats = if is_wav {
                let (samples, sr) = read_wav(path)?;
                if sr != self.sample_rate_hz {
                    return Err(Error::format(
                        path,
                        format!("sample rate {sr} Hz, expected {} Hz", self.sample_rate_hz),
                    ));
                }
                if self.extractor.is_none() {
                    self.extractor = Some(MelExtractor::new(sr, n_mels)?);
                }
                let ex = self.extractor.as_ref().expect("initialized");
                segment_signal(&samples, sr, self.segment_seconds)
                    .iter()
                    .map(|seg| ex.extract(seg))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![read_feature_file(path)?]
            };
            self.cache.insert(path.to_path_buf(), mats);
        }
        Ok(&self.cache[path])
    }
}

/// Zero-pads or centre-crops a feature matrix to `input.n_frames` and
/// transposes it to mel-major order.
pub fn fit_to_input(fm: &FeatureMatrix, input: &InputSpec) -> Result<Vec<f32>> {
    if fm.n_mels != input.n_mels {
        return Err(Error::Dimension(format!(
            "feature matrix has {} mel bands, the model expects {}",
            fm.n_mels, input.n_mels
        )));
    }
    let n = input.n_frames;
    let offset = fm.n_frames.saturating_sub(n) / 2;
    let mut out = vec![0.0f32; input.n_mels * n];
    for t in 0..n.min(fm.n_frames) {
        let frame = fm.frame(offset + t);
        for (m, &v) in frame.iter().enumerate() {
            out[m * n + t] = v;
        }
    }
    Ok(out)
}

/// All examples of one task and split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskSpec,
    pub input: InputSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_entries(
        entries: &[ManifestEntry],
        task: &TaskSpec,
        input: InputSpec,
        source: &mut FeatureSource,
    ) -> Result<Self> {
        let mut examples = Vec::with_capacity(entries.len());
        for entry in entries {
            if entry.task_id != task.id {
                continue;
            }
            let labels = entry
                .labels
                .iter()
                .map(|l| {
                    task.class_index(l)
                        .ok_or_else(|| Error::Label(format!("class {l:?} not in task {}", task.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mats = source.load(&entry.path, input.n_mels)?;
            let multi = mats.len() > 1;
            for (k, fm) in mats.iter().enumerate() {
                let id = if multi {
                    format!("{}#{k}", entry.feature_ref)
                } else {
                    entry.feature_ref.clone()
                };
                examples.push(Example {
                    id,
                    features: fit_to_input(fm, &input)?,
                    labels: labels.clone(),
                });
            }
        }
        Ok(Dataset {
            task: task.clone(),
            input,
            examples,
        })
    }

    /// Loads the `split` rows of `task` from a manifest.
    pub fn load(
        manifest: &Path,
        task: &TaskSpec,
        split: Split,
        input: InputSpec,
        source: &mut FeatureSource,
    ) -> Result<Self> {
        let entries: Vec<_> = load_manifest(manifest, task)?
            .into_iter()
            .filter(|e| e.split == split)
            .collect();
        Self::from_entries(&entries, task, input, source)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn features<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.input.n_mels * self.input.n_frames;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.examples[i].features.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(
            vec![indices.len(), 1, self.input.n_mels, self.input.n_frames],
            data,
        )
        .expect("examples are fitted to the input size")
    }

    /// One-hot or multi-hot rows over the task's classes.
    pub fn targets<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let k = self.task.classes.len();
        let mut data = vec![T::zero(); indices.len() * k];
        for (r, &i) in indices.iter().enumerate() {
            for &c in &self.examples[i].labels {
                data[r * k + c] = T::one();
            }
        }
        Tensor::new(vec![indices.len(), k], data).expect("sized")
    }

    fn check_labels(&self) -> Result<()> {
        let k = self.task.classes.len();
        for ex in &self.examples {
            if ex.labels.iter().any(|&c| c >= k) {
                return Err(Error::Label(format!(
                    "example {} has a label outside task {}",
                    ex.id, self.task.id
                )));
            }
            if self.task.kind == TaskKind::SingleLabel && ex.labels.len() != 1 {
                return Err(Error::Label(format!(
                    "example {} of single-label task {} has {} labels",
                    ex.id,
                    self.task.id,
                    ex.labels.len()
                )));
            }
        }
        Ok(())
    }
}

/// Scene and event labels for the same clips, aligned by example id.
#[derive(Debug, Clone)]
pub struct JointDataset {
    pub scenes: Dataset,
    pub events: Dataset,
}

impl JointDataset {
    pub fn align(scenes: Dataset, events: Dataset) -> Result<Self> {
        let mut by_id: HashMap<&str, &Example> =
            events.examples.iter().map(|e| (e.id.as_str(), e)).collect();
        let mut aligned = Vec::with_capacity(scenes.len());
        for ex in &scenes.examples {
            let ev = by_id.remove(ex.id.as_str()).ok_or_else(|| Error::Manifest {
                path: PathBuf::from(&ex.id),
                line: 0,
                message: format!("example has no {} labels", events.task.name),
            })?;
            aligned.push(ev.clone());
        }
        if let Some(id) = by_id.keys().next() {
            return Err(Error::Manifest {
                path: PathBuf::from(id),
                line: 0,
                message: format!("example has no {} label", scenes.task.name),
            });
        }
        let events = Dataset {
            examples: aligned,
            ..events
        };
        Ok(JointDataset { scenes, events })
    }
}

/// A mini-batch `[B, 1, n_mels, n_frames]` with targets over the task classes.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub features: Tensor<T>,
    pub targets: Tensor<T>,
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Example order for one epoch; the permutation depends only on
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        order.shuffle(&mut rng);
    }
    order
}

/// Splits one epoch into batches of `batch_size`; the last partial batch is
/// kept.
pub fn make_batches<T: Real>(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Result<Vec<Batch<T>>> {
    if data.is_empty() {
        return Err(Error::Contract(format!(
            "task {} has no examples to batch",
            data.task.id
        )));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    data.check_labels()?;
    Ok(epoch_order(data.len(), seed, epoch, shuffle)
        .chunks(batch_size)
        .map(|idx| Batch {
            features: data.features(idx),
            targets: data.targets(idx),
            indices: idx.to_vec(),
            ids: idx.iter().map(|&i| data.examples[i].id.clone()).collect(),
        })
        .collect())
}
