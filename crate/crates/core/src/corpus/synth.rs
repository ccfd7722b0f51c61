//! A seeded synthetic image–paragraph corpus.
//!
//! Every image holds a few distinct objects, each with a colour. Each object
//! owns a block of regions whose features are its latent vector plus the
//! colour's latent vector plus noise; the remaining regions are low-scoring
//! background. The paragraph has one sentence per object, in descending
//! objectness order, and each sentence position uses its own template so
//! gold paragraphs never repeat a trigram.

use super::io::{DatasetRecord, SplitSpec};
use crate::cae::RawRegionSet;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const OBJECTS: &[&str] = &[
    "dog", "cat", "horse", "car", "tree", "kite", "boat", "bench", "bird", "clock", "lamp", "chair", "train", "truck",
    "table", "vase", "sheep", "cow", "bus", "bicycle",
];

pub const COLORS: &[&str] = &["red", "blue", "green", "white", "black", "brown", "yellow", "gray"];

const TEMPLATES: &[(&str, &str)] = &[
    ("there is a", "in the picture"),
    ("next to it sits a", "on the ground"),
    ("behind them we see a", "near the wall"),
    ("further back stands a", "under the sky"),
    ("in the corner lies a", "by the road"),
    ("far away one can spot a", "at the edge"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub images: usize,
    pub objects_per_image: usize,
    /// How many entries of the object list are in play.
    pub object_types: usize,
    pub colors: usize,
    pub regions: usize,
    pub raw_dim: usize,
    pub regions_per_object: usize,
    pub noise: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 64,
            objects_per_image: 3,
            object_types: 8,
            colors: 4,
            regions: 50,
            raw_dim: 4096,
            regions_per_object: 4,
            noise: 0.1,
            val_fraction: 0.125,
            test_fraction: 0.125,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<DatasetRecord>,
    pub features: Vec<RawRegionSet>,
    pub split: SplitSpec,
    /// The object nouns in play, the natural lexicon candidates.
    pub objects: Vec<String>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.images == 0 || self.raw_dim == 0 || self.regions_per_object == 0 {
            return bad("images, raw_dim and regions_per_object must be positive");
        }
        if self.objects_per_image == 0 || self.objects_per_image > TEMPLATES.len() {
            return bad("objects_per_image must be between 1 and 6");
        }
        if self.object_types < self.objects_per_image || self.object_types > OBJECTS.len() {
            return bad("object_types must cover objects_per_image and fit the object list");
        }
        if self.colors == 0 || self.colors > COLORS.len() {
            return bad("colors out of range");
        }
        if self.objects_per_image * self.regions_per_object > self.regions {
            return bad("object regions exceed the region count");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad("noise must be non-negative");
        }
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && f < 1.0) {
            return bad("split fractions must be non-negative and sum below 1");
        }
        Ok(())
    }
}

fn uniform_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// The gold sentence for the object at position `k`.
pub fn sentence(k: usize, color: &str, object: &str) -> String {
    let (lead, tail) = TEMPLATES[k];
    format!("{lead} {color} {object} {tail}.")
}

pub fn synthesize_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let object_latent: Vec<Vec<f64>> = (0..spec.object_types)
        .map(|_| uniform_vec(&mut rng, spec.raw_dim))
        .collect();
    let color_latent: Vec<Vec<f64>> = (0..spec.colors)
        .map(|_| {
            uniform_vec(&mut rng, spec.raw_dim)
                .into_iter()
                .map(|x| 0.5 * x)
                .collect()
        })
        .collect();
    let width = format!("{}", spec.images.saturating_sub(1)).len();
    let mut records = Vec::with_capacity(spec.images);
    let mut features = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let mut img = rng.fork(i as u64);
        let image_id = format!("img{i:0width$}");
        let mut kinds: Vec<usize> = (0..spec.object_types).collect();
        kinds.shuffle(&mut img);
        kinds.truncate(spec.objects_per_image);
        let colors: Vec<usize> = kinds.iter().map(|_| img.gen_range(0..spec.colors)).collect();

        let mut rows: Vec<(f64, Vec<f64>)> = Vec::with_capacity(spec.regions);
        for (k, (&obj, &col)) in kinds.iter().zip(&colors).enumerate() {
            // Non-overlapping score bands keep the objects in sentence order.
            let top = 0.95 - 0.12 * k as f64;
            for _ in 0..spec.regions_per_object {
                let score = top - img.gen_range(0.0..0.05);
                let row = object_latent[obj]
                    .iter()
                    .zip(&color_latent[col])
                    .map(|(o, c)| o + c + spec.noise * img.gen_range(-1.0..1.0))
                    .collect();
                rows.push((score, row));
            }
        }
        while rows.len() < spec.regions {
            let score = img.gen_range(0.0..0.2);
            let row = (0..spec.raw_dim)
                .map(|_| spec.noise * img.gen_range(-1.0..1.0))
                .collect();
            rows.push((score, row));
        }
        rows.shuffle(&mut img);
        let objectness = rows.iter().map(|r| r.0).collect();
        let data = rows.into_iter().flat_map(|r| r.1).collect();
        features.push(RawRegionSet::new(
            image_id.clone(),
            Tensor::matrix(spec.regions, spec.raw_dim, data)?,
            objectness,
        )?);
        let paragraph = kinds
            .iter()
            .zip(&colors)
            .enumerate()
            .map(|(k, (&o, &c))| sentence(k, COLORS[c], OBJECTS[o]))
            .collect::<Vec<_>>()
            .join(" ");
        records.push(DatasetRecord { image_id, paragraph });
    }

    let mut ids: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_val = (spec.images as f64 * spec.val_fraction).round() as usize;
    let n_test = (spec.images as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.images.saturating_sub(n_val + n_test).max(1);
    let mut split = SplitSpec {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..(n_train + n_val).min(ids.len())].to_vec(),
        test: ids[(n_train + n_val).min(ids.len())..].to_vec(),
    };
    for l in [&mut split.train, &mut split.val, &mut split.test] {
        l.sort();
    }
    Ok(SynthDataset {
        records,
        features,
        split,
        objects: OBJECTS[..spec.object_types].iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::tokenize;
    use crate::generator::trigram::has_repeated_trigram;
    use crate::metrics::coverage_reward;
    use std::collections::HashSet;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            images: 8,
            regions: 16,
            raw_dim: 6,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(
            synthesize_dataset(&small(7)).unwrap(),
            synthesize_dataset(&small(7)).unwrap()
        );
        assert_ne!(
            synthesize_dataset(&small(7)).unwrap(),
            synthesize_dataset(&small(8)).unwrap()
        );
    }

    #[test]
    fn paragraphs_mention_every_object() {
        let d = synthesize_dataset(&small(7)).unwrap();
        let objects: HashSet<String> = d.objects.iter().cloned().collect();
        for r in &d.records {
            let toks: Vec<String> = tokenize(&r.paragraph, 6, 20).unwrap().concat();
            let mentioned: HashSet<&String> = toks.iter().filter(|t| objects.contains(*t)).collect();
            assert_eq!(mentioned.len(), 3);
            assert_eq!(coverage_reward(&toks, &toks, &objects), 1.0);
        }
    }

    #[test]
    fn gold_respects_caps_and_has_no_repeated_trigram() {
        let spec = SynthSpec {
            objects_per_image: 6,
            object_types: 12,
            regions: 24,
            ..small(3)
        };
        let d = synthesize_dataset(&spec).unwrap();
        for r in &d.records {
            let t = tokenize(&r.paragraph, usize::MAX, usize::MAX).unwrap();
            assert_eq!(t.len(), 6);
            assert!(t.iter().all(|s| s.len() <= 20));
            let vocab = crate::corpus::build_vocab([&t], 1).unwrap();
            let ids: Vec<Vec<u32>> = t.iter().map(|s| vocab.encode(s)).collect();
            assert!(!has_repeated_trigram(&ids));
        }
    }

    #[test]
    fn zero_noise_duplicates_are_identical() {
        let spec = SynthSpec { noise: 0.0, ..small(5) };
        let d = synthesize_dataset(&spec).unwrap();
        let f = d.features[0].canonicalize(spec.regions).unwrap();
        // The first object's regions are the four top-scoring rows.
        for i in 1..spec.regions_per_object {
            assert_eq!(f.features.row(i), f.features.row(0));
        }
    }

    #[test]
    fn split_is_a_partition() {
        let d = synthesize_dataset(&SynthSpec { images: 64, ..small(1) }).unwrap();
        d.split.validate(d.records.iter().map(|r| r.image_id.as_str())).unwrap();
        assert_eq!((d.split.train.len(), d.split.val.len(), d.split.test.len()), (48, 8, 8));
    }
}
