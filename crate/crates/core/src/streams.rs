//! Synthetic class-template datasets, their binary file format, and the
//! split into disjoint-class tasks.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const DATASET_MAGIC: &[u8; 4] = b"CLLD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `channels × H × W`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub num_classes: u32,
    pub train_per_class: u32,
    pub test_per_class: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl DatasetHeader {
    pub fn pixels(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// Class-major, sample-minor.
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub channels: usize,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 16,
            test_per_class: 8,
            image_side: 16,
            channels: 1,
            noise_std: 0.08,
        }
    }
}

/// One uniform-noise template per class; every sample is its class template
/// plus Gaussian pixel noise, clamped to `[0, 1]`.
///
/// Draw order: all templates (class-ascending), then train samples, then
/// test samples, each class-major.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut SeededRng) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise_std must be nonnegative, got {}",
            spec.noise_std
        )));
    }
    if spec.image_side == 0 || spec.channels == 0 || spec.train_per_class == 0 {
        return Err(Error::InvalidParameter(
            "image_side, channels and train_per_class must be positive".into(),
        ));
    }
    let pixels = spec.channels * spec.image_side * spec.image_side;
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..pixels).map(|_| rng.uniform(0.0, 1.0)).collect())
        .collect();
    let draw = |per_class: usize, rng: &mut SeededRng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * spec.num_classes);
        for (class, template) in templates.iter().enumerate() {
            for _ in 0..per_class {
                let image = template
                    .iter()
                    .map(|&p| {
                        let noise = if spec.noise_std > 0.0 {
                            spec.noise_std * rng.standard_normal()
                        } else {
                            0.0
                        };
                        (p + noise).clamp(0.0, 1.0) as f32
                    })
                    .collect();
                out.push(Sample {
                    image,
                    label: class as u32,
                });
            }
        }
        out
    };
    let train = draw(spec.train_per_class, rng);
    let test = draw(spec.test_per_class, rng);
    Ok(Dataset {
        header: DatasetHeader {
            num_classes: spec.num_classes as u32,
            train_per_class: spec.train_per_class as u32,
            test_per_class: spec.test_per_class as u32,
            channels: spec.channels as u32,
            height: spec.image_side as u32,
            width: spec.image_side as u32,
        },
        train,
        test,
    })
}

impl Dataset {
    /// Binary encoding, little-endian:
    /// `"CLLD" version num_classes train_per_class test_per_class channels
    /// height width` (all `u32`), then train pixels as `f32`, test pixels,
    /// train labels `u32[]`, test labels `u32[]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(
            HEADER_LEN + (self.train.len() + self.test.len()) * (h.pixels() * 4 + 4),
        );
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            h.num_classes,
            h.train_per_class,
            h.test_per_class,
            h.channels,
            h.height,
            h.width,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in self.train.iter().chain(&self.test) {
            for p in &s.image {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        for s in self.train.iter().chain(&self.test) {
            out.extend_from_slice(&s.label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated before magic".into()));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(fmt(
                0,
                format!("bad magic {:?}, expected \"CLLD\"", String::from_utf8_lossy(&bytes[..4])),
            ));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), format!("truncated header: need {HEADER_LEN} bytes")));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != DATASET_VERSION {
            return Err(fmt(4, format!("unsupported version {version}, expected {DATASET_VERSION}")));
        }
        let header = DatasetHeader {
            num_classes: word(1),
            train_per_class: word(2),
            test_per_class: word(3),
            channels: word(4),
            height: word(5),
            width: word(6),
        };
        let n_train = header.num_classes as usize * header.train_per_class as usize;
        let n_test = header.num_classes as usize * header.test_per_class as usize;
        let pixels = (header.channels as usize)
            .checked_mul(header.height as usize)
            .and_then(|p| p.checked_mul(header.width as usize))
            .and_then(|p| p.checked_mul(4))
            .ok_or_else(|| fmt(20, "image shape overflows".into()))?
            / 4;
        let expected = (n_train + n_test)
            .checked_mul(pixels * 4 + 4)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| fmt(4, "header sizes overflow".into()))?;
        if bytes.len() < expected {
            return Err(fmt(
                bytes.len(),
                format!("truncated: expected {expected} bytes, got {}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let mut pos = HEADER_LEN;
        let mut images = Vec::with_capacity(n_train + n_test);
        for _ in 0..n_train + n_test {
            let img: Vec<f32> = bytes[pos..pos + pixels * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += pixels * 4;
            images.push(img);
        }
        let mut labels = Vec::with_capacity(n_train + n_test);
        for _ in 0..n_train + n_test {
            let label = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            if label >= header.num_classes {
                return Err(fmt(pos, format!("label {label} >= num_classes {}", header.num_classes)));
            }
            labels.push(label);
            pos += 4;
        }
        let mut samples = images
            .into_iter()
            .zip(labels)
            .map(|(image, label)| Sample { image, label });
        let train = samples.by_ref().take(n_train).collect();
        let test = samples.collect();
        Ok(Self {
            header,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub image: Vec<f32>,
    pub class: u32,
    /// Index of `class` within the task.
    pub local: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    pub classes: Vec<u32>,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

impl Task {
    pub fn local_label(&self, class: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub num_classes: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Disjointness and coverage of the class partition.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::Data(format!("class {c} appears in more than one task")));
                }
            }
        }
        let expected: BTreeSet<u32> = (0..self.num_classes as u32).collect();
        if seen != expected {
            return Err(Error::Data("task class sets do not cover the dataset".into()));
        }
        Ok(())
    }
}

/// Partitions classes into `num_tasks` equal contiguous groups. With
/// `class_order`, classes are first permuted by that generator.
pub fn split_tasks(
    dataset: &Dataset,
    num_tasks: usize,
    class_order: Option<&mut SeededRng>,
) -> Result<TaskStream> {
    let c = dataset.header.num_classes as usize;
    if num_tasks == 0 || !c.is_multiple_of(num_tasks) {
        return Err(Error::Data(format!(
            "{num_tasks} tasks do not evenly divide {c} classes"
        )));
    }
    let mut order: Vec<u32> = (0..c as u32).collect();
    if let Some(rng) = class_order {
        rng.shuffle(&mut order);
    }
    let per_task = c / num_tasks;
    let tasks = order
        .chunks(per_task)
        .enumerate()
        .map(|(i, classes)| {
            let classes = classes.to_vec();
            let pick = |samples: &[Sample]| -> Vec<TaskSample> {
                samples
                    .iter()
                    .filter_map(|s| {
                        classes.iter().position(|&c| c == s.label).map(|local| TaskSample {
                            image: s.image.clone(),
                            class: s.label,
                            local,
                        })
                    })
                    .collect()
            };
            Task {
                index: i + 1,
                train: pick(&dataset.train),
                test: pick(&dataset.test),
                classes,
            }
        })
        .collect();
    let stream = TaskStream {
        tasks,
        num_classes: c,
    };
    stream.validate()?;
    Ok(stream)
}
