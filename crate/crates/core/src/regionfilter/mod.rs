//! Three-class (black / text / non-text) region classifier that decides which
//! grid cells get indexed.

mod forest;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forest::{DecisionTree, ForestParams};

use crate::embedder::{EmbeddingGrid, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::preprocess::TileGeometry;

pub const CLASS_COUNT: usize = 3;
pub const DEFAULT_PROPORTIONS: [f64; 3] = [0.6, 0.25, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Class {
    Black = 0,
    Text = 1,
    NonText = 2,
}

impl Class {
    pub const ALL: [Class; CLASS_COUNT] = [Class::Black, Class::Text, Class::NonText];

    pub fn from_u8(v: u8) -> Option<Class> {
        Class::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Black => "black",
            Class::Text => "text",
            Class::NonText => "non_text",
        }
    }
}

/// Non-text boxes for one page, in original page coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiAnnotation {
    pub page_id: String,
    pub boxes: Vec<BBox>,
}

/// Reads `{"page_id": .., "boxes": [[x0,y0,w,h], ..]}` lines.
pub fn read_annotations(path: &Path) -> Result<Vec<RoiAnnotation>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub vector: Vec<f32>,
    pub label: Class,
    pub level_k: u8,
    pub page_id: String,
    pub cell: (usize, usize),
}

/// Class of the cell whose receptive field is centered at tile point `(x, y)`.
pub fn label_point(x: i64, y: i64, geometry: &TileGeometry, boxes: &[BBox]) -> Class {
    let px = x + geometry.tile_offset.0 as i64;
    let py = y + geometry.tile_offset.1 as i64;
    if !geometry.on_content(px, py) {
        return Class::Black;
    }
    let ox = px - geometry.canvas_offset.0 as i64 + geometry.crop_offset.0 as i64;
    let oy = py - geometry.canvas_offset.1 as i64 + geometry.crop_offset.1 as i64;
    if boxes.iter().any(|b| b.contains_point(ox, oy)) {
        Class::NonText
    } else {
        Class::Text
    }
}

/// One labeled sample per grid cell: black when the receptive-field center lies
/// on canvas fill, non-text when it lies inside an annotated box, text otherwise.
pub fn label_samples(grid: &EmbeddingGrid, geometry: &TileGeometry, annotation: &RoiAnnotation) -> Vec<LabeledSample> {
    grid.cells()
        .map(|(i, j, v)| {
            let (x, y) = grid.level.rf_center(i, j).expect("cell within grid");
            LabeledSample {
                vector: v.to_vec(),
                label: label_point(x, y, geometry, &annotation.boxes),
                level_k: grid.level.k,
                page_id: annotation.page_id.clone(),
                cell: (i, j),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Split sizes by largest remainder: each is `floor(n * p)` or one more, and
/// they sum to `n`.
pub fn split_sizes(n: usize, proportions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = proportions.iter().map(|p| n as f64 * p).collect();
    // Guard against products like 740624.9999999 for an exact 740625.
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &s in order.iter().take(n.saturating_sub(assigned)) {
        sizes[s] += 1;
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Seeded shuffle then train / validation / test partition.
pub fn split_dataset<T>(mut samples: Vec<T>, proportions: [f64; 3], seed: u64) -> Result<Split<T>> {
    if proportions.iter().any(|p| !(0.0..=1.0).contains(p)) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("proportions {proportions:?} must sum to 1")));
    }
    let sizes = split_sizes(samples.len(), proportions);
    let empty: Vec<&str> = ["train", "validation", "test"]
        .iter()
        .zip(sizes)
        .filter(|(_, s)| *s == 0)
        .map(|(n, _)| *n)
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptySplit(empty.join(", ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let test = samples.split_off(sizes[0] + sizes[1]);
    let validation = samples.split_off(sizes[0]);
    Ok(Split {
        train: samples,
        validation,
        test,
    })
}

/// Confusion-derived classification metrics. `confusion[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: [[u64; CLASS_COUNT]; CLASS_COUNT],
    /// Per-class recall, `None` for classes absent from the evaluated set.
    pub recall: [Option<f64>; CLASS_COUNT],
    pub accuracy: f64,
    pub total: u64,
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; CLASS_COUNT]; CLASS_COUNT]) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..CLASS_COUNT).map(|c| confusion[c][c]).sum();
        let recall = std::array::from_fn(|c| {
            let support: u64 = confusion[c].iter().sum();
            (support > 0).then(|| confusion[c][c] as f64 / support as f64)
        });
        Self {
            confusion,
            recall,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            total,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Class, Class)>) -> Self {
        let mut confusion = [[0u64; CLASS_COUNT]; CLASS_COUNT];
        for (truth, pred) in pairs {
            confusion[truth as usize][pred as usize] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn recall_of(&self, class: Class) -> Option<f64> {
        self.recall[class as usize]
    }
}

/// Decision forest for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub level_k: u8,
    pub dim: usize,
    pub params: ForestParams,
    trees: Vec<DecisionTree>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f32]) -> Class {
        forest::vote(&self.trees, x)
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    const MAGIC: &'static [u8; 4] = b"PSRF";
    const VERSION: u32 = 1;

    /// `PSRF`, u32 version, u8 level, u32 dim, u64 seed, u32 max depth
    /// (0 = unlimited), trees, trailing CRC32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.write_u32::<LittleEndian>(Self::VERSION).unwrap();
        buf.write_u8(self.level_k).unwrap();
        buf.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        buf.write_u64::<LittleEndian>(self.params.seed).unwrap();
        buf.write_u32::<LittleEndian>(self.params.max_depth.unwrap_or(0) as u32).unwrap();
        forest::write_trees(&mut buf, &self.trees).unwrap();
        let crc = crc32fast::hash(&buf);
        buf.write_u32::<LittleEndian>(crc).unwrap();
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 1 + 4 + 8 + 4 + 4 + 4 || &bytes[..4] != Self::MAGIC {
            return Err(Error::CorruptModel("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Cursor::new(&body[4..]);
        let version = r.read_u32::<LittleEndian>()?;
        if version != Self::VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: Self::VERSION,
            });
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptModel("checksum mismatch".into()));
        }
        let level_k = r.read_u8()?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let depth = r.read_u32::<LittleEndian>()? as usize;
        let trees = forest::read_trees(&mut r, dim)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::CorruptModel("trailing bytes".into()));
        }
        Ok(Self {
            level_k,
            dim,
            params: ForestParams {
                n_trees: trees.len(),
                max_depth: (depth > 0).then_some(depth),
                seed,
                ..ForestParams::default()
            },
            trees,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
        Self::from_bytes(&bytes)
    }
}

/// Trains one level's forest and scores it on the validation split.
pub fn train_forest(
    train: &[LabeledSample],
    validation: &[LabeledSample],
    level_k: u8,
    params: &ForestParams,
) -> Result<(ForestModel, Metrics)> {
    for class in Class::ALL {
        if !train.iter().any(|s| s.label == class) {
            return Err(Error::MissingClass(class));
        }
    }
    if let Some(s) = train.iter().chain(validation).find(|s| s.level_k != level_k) {
        return Err(Error::LevelMismatch {
            expected: level_k,
            found: s.level_k,
        });
    }
    let dim = train[0].vector.len();
    let view = forest::TrainingView {
        rows: train.iter().map(|s| s.vector.as_slice()).collect(),
        labels: train.iter().map(|s| s.label).collect(),
        dim,
    };
    let model = ForestModel {
        level_k,
        dim,
        params: params.clone(),
        trees: forest::grow_forest(&view, params),
    };
    let metrics = evaluate_forest(&model, validation);
    Ok((model, metrics))
}

pub fn evaluate_forest(model: &ForestModel, test: &[LabeledSample]) -> Metrics {
    Metrics::from_pairs(test.iter().map(|s| (s.label, model.predict(&s.vector))))
}

/// Cells whose predicted class is non-text, in row-major order.
pub fn filter_nontext(grid: &EmbeddingGrid, model: &ForestModel) -> Result<Vec<(usize, usize)>> {
    if model.level_k != grid.level.k {
        return Err(Error::LevelMismatch {
            expected: grid.level.k,
            found: model.level_k,
        });
    }
    if model.dim != EMBEDDING_DIM {
        return Err(Error::ShapeMismatch(format!("model expects {}-D vectors", model.dim)));
    }
    Ok(grid
        .cells()
        .filter(|(_, _, v)| model.predict(v) == Class::NonText)
        .map(|(i, j, _)| (i, j))
        .collect())
}

/// Per-level models, keyed by level.
#[derive(Debug, Clone, Default)]
pub struct FilterModels {
    pub models: HashMap<u8, ForestModel>,
}

impl FilterModels {
    pub fn model_path(dir: &Path, k: u8) -> std::path::PathBuf {
        dir.join(format!("p{k}.psrf"))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut models = HashMap::new();
        for k in crate::embedder::LEVELS {
            let m = ForestModel::load(&Self::model_path(dir, k))?;
            if m.level_k != k {
                return Err(Error::LevelMismatch {
                    expected: k,
                    found: m.level_k,
                });
            }
            models.insert(k, m);
        }
        Ok(Self { models })
    }

    pub fn get(&self, k: u8) -> Option<&ForestModel> {
        self.models.get(&k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::PyramidLevel;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(v: Vec<f32>, label: Class, k: u8) -> LabeledSample {
        LabeledSample {
            vector: v,
            label,
            level_k: k,
            page_id: "p".into(),
            cell: (0, 0),
        }
    }

    /// Three well-separated Gaussian blobs in `dim` dimensions.
    fn blobs(n_per_class: usize, dim: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut out = Vec::new();
        for (ci, class) in Class::ALL.iter().enumerate() {
            for _ in 0..n_per_class {
                let v = (0..dim)
                    .map(|d| {
                        let center = if d % 3 == ci { 5.0 } else { 0.0 };
                        center + noise.sample(&mut rng) as f32
                    })
                    .collect();
                out.push(sample(v, *class, 3));
            }
        }
        out
    }

    fn nearest_centroid(train: &[LabeledSample], x: &[f32]) -> Class {
        let mut best = (f64::INFINITY, Class::Black);
        for class in Class::ALL {
            let members: Vec<_> = train.iter().filter(|s| s.label == class).collect();
            let dim = x.len();
            let mut d2 = 0.0;
            for d in 0..dim {
                let c = members.iter().map(|s| s.vector[d] as f64).sum::<f64>() / members.len() as f64;
                d2 += (c - x[d] as f64).powi(2);
            }
            if d2 < best.0 {
                best = (d2, class);
            }
        }
        best.1
    }

    #[test]
    fn separable_blobs_have_perfect_recall() {
        let data = blobs(120, 24, 1);
        let split = split_dataset(data, DEFAULT_PROPORTIONS, 9).unwrap();
        // The oracle confirms the held-out set is separable.
        for s in &split.test {
            assert_eq!(nearest_centroid(&split.train, &s.vector), s.label);
        }
        let params = ForestParams {
            n_trees: 25,
            seed: 3,
            ..ForestParams::default()
        };
        let (model, val) = train_forest(&split.train, &split.validation, 3, &params).unwrap();
        let test = evaluate_forest(&model, &split.test);
        for c in Class::ALL {
            assert_eq!(test.recall_of(c), Some(1.0));
            assert_eq!(val.recall_of(c), Some(1.0));
        }
        assert_eq!(test.accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(40, 12, 2);
        let params = ForestParams {
            n_trees: 8,
            seed: 5,
            max_samples: Some(60),
            ..ForestParams::default()
        };
        let (a, ma) = train_forest(&data, &data, 3, &params).unwrap();
        let (b, mb) = train_forest(&data, &data, 3, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn missing_class_rejected() {
        let data: Vec<_> = blobs(10, 6, 3).into_iter().filter(|s| s.label != Class::Text).collect();
        let err = train_forest(&data, &[], 3, &ForestParams::default()).unwrap_err();
        assert!(matches!(err, Error::MissingClass(Class::Text)));
    }

    #[test]
    fn hand_scored_confusion() {
        // truth rows, predicted columns
        let confusion = [[8, 1, 1], [2, 5, 3], [0, 1, 9]];
        let m = Metrics::from_confusion(confusion);
        assert_eq!(m.total, 30);
        assert_eq!(m.accuracy, 22.0 / 30.0);
        assert_eq!(m.recall, [Some(0.8), Some(0.5), Some(0.9)]);
    }

    #[test]
    fn single_class_predictor_on_balanced_set() {
        let pairs = Class::ALL.iter().flat_map(|&t| std::iter::repeat((t, Class::Text)).take(5));
        let m = Metrics::from_pairs(pairs);
        assert_eq!(m.accuracy, 1.0 / 3.0);
        assert_eq!(m.recall, [Some(0.0), Some(1.0), Some(0.0)]);
    }

    #[test]
    fn split_formula_sizes() {
        // 79 single-tile pages at P3; the spare unit goes to the .75 remainder.
        let n = 79 * 125 * 125;
        assert_eq!(split_sizes(n, DEFAULT_PROPORTIONS), [740_625, 308_594, 185_156]);
        let exact = [740_625.0, 308_593.75, 185_156.25];
        for (s, e) in split_sizes(n, DEFAULT_PROPORTIONS).iter().zip(exact) {
            assert!((*s as f64 - e).abs() < 1.0);
        }
    }

    #[test]
    fn split_degenerate_and_deterministic() {
        let err = split_dataset((0..10).collect::<Vec<_>>(), [1.0, 0.0, 0.0], 1).unwrap_err();
        match err {
            Error::EmptySplit(s) => assert_eq!(s, "validation, test"),
            other => panic!("{other:?}"),
        }
        let a = split_dataset((0..100).collect::<Vec<_>>(), DEFAULT_PROPORTIONS, 4).unwrap();
        let b = split_dataset((0..100).collect::<Vec<_>>(), DEFAULT_PROPORTIONS, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (60, 25, 15));
        let mut all: Vec<_> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    fn grid_with(level: PyramidLevel, f: impl Fn(usize, usize) -> f32) -> EmbeddingGrid {
        let r = level.resolution as usize;
        let mut data = vec![0f32; r * r * EMBEDDING_DIM];
        for i in 0..r {
            for j in 0..r {
                data[(i * r + j) * EMBEDDING_DIM] = f(i, j);
            }
        }
        EmbeddingGrid::new(level, data).unwrap()
    }

    fn stump(level_k: u8, low: Class, high: Class) -> ForestModel {
        ForestModel {
            level_k,
            dim: EMBEDDING_DIM,
            params: ForestParams::default(),
            trees: vec![DecisionTree {
                nodes: vec![
                    forest::Node::Split {
                        feature: 0,
                        threshold: 0.5,
                        left: 1,
                        right: 2,
                    },
                    forest::Node::Leaf(low),
                    forest::Node::Leaf(high),
                ],
            }],
        }
    }

    #[test]
    fn filter_follows_predictions() {
        let level = PyramidLevel::new(5, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let marks: Vec<bool> = (0..64).map(|_| rng.gen()).collect();
        let grid = grid_with(level, |i, j| if marks[i * 8 + j] { 1.0 } else { 0.0 });
        let kept = filter_nontext(&grid, &stump(5, Class::Text, Class::NonText)).unwrap();
        let oracle: Vec<_> = (0..8)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .filter(|&(i, j)| marks[i * 8 + j])
            .collect();
        assert_eq!(kept, oracle);

        let all = filter_nontext(&grid, &stump(5, Class::NonText, Class::NonText)).unwrap();
        assert_eq!(all.len(), 64);
        let none = filter_nontext(&grid, &stump(5, Class::Black, Class::Black)).unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            filter_nontext(&grid, &stump(4, Class::Black, Class::Black)),
            Err(Error::LevelMismatch { .. })
        ));
    }

    #[test]
    fn labels_follow_rf_centers() {
        let level = PyramidLevel::new(5, 256).unwrap();
        let grid = grid_with(level, |_, _| 0.0);
        // 128x128 crop at (10, 20) pasted at (64, 64) on a 256 canvas.
        let geometry = TileGeometry {
            tile_offset: (0, 0),
            canvas_offset: (64, 64),
            crop_offset: (10, 20),
            content_size: (128, 128),
        };
        let ann = RoiAnnotation {
            page_id: "p".into(),
            boxes: vec![BBox::new(10 + 32, 20 + 32, 32, 32)],
        };
        let samples = label_samples(&grid, &geometry, &ann);
        assert_eq!(samples.len(), 64);
        let at = |i: usize, j: usize| samples[i * 8 + j].label;
        assert_eq!(at(0, 0), Class::Black); // center (16,16) on fill
        assert_eq!(at(3, 3), Class::NonText); // (112,112) -> page (58,68)
        assert_eq!(at(2, 2), Class::Text); // (80,80) -> page (26,36)
        assert_eq!(at(7, 7), Class::Black);
    }

    #[test]
    fn model_round_trip_and_corruption() {
        let data = blobs(20, 8, 4);
        let params = ForestParams {
            n_trees: 3,
            seed: 1,
            ..ForestParams::default()
        };
        let (model, _) = train_forest(&data, &data, 3, &params).unwrap();
        let bytes = model.to_bytes();
        let back = ForestModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.trees(), model.trees());
        for s in &data {
            assert_eq!(back.predict(&s.vector), model.predict(&s.vector));
        }
        assert!(ForestModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut flipped = bytes.clone();
        flipped[30] ^= 0xFF;
        assert!(matches!(ForestModel::from_bytes(&flipped), Err(Error::CorruptModel(_))));
    }
}
