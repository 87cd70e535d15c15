//! End-to-end offline (index build, filter training) and online (query) stages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{FilterConfig, PipelineConfig, PreprocessConfig};
use crate::embedder::{extract_pyramid, Extractor, Pyramid, EMBEDDING_DIM, LEVELS};
use crate::error::{Error, Result};
use crate::index::{load_index, Catalog, Index, PageEntry, ShardBuilder};
use crate::preprocess::{
    binarize, crop, load_image, remove_background, tile_page, CanvasSpec, CropRegion, RawImage, Tile,
};
use crate::regionfilter::{
    evaluate_forest, filter_nontext, label_samples, split_dataset, train_forest, FilterModels, ForestModel,
    LabeledSample, Metrics, RoiAnnotation,
};
use crate::spotting::{spot, SpotContext, SpotResult};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Page images of a collection, addressed by position. Positions are the
/// page numbers stored in the index.
pub trait PageSource: Sync {
    fn len(&self) -> usize;
    fn page_id(&self, n: usize) -> &str;
    fn load(&self, n: usize) -> Result<RawImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn position(&self, page_id: &str) -> Option<usize> {
        (0..self.len()).find(|&n| self.page_id(n) == page_id)
    }
}

/// Image files in one directory, page id = file stem, sorted by id.
#[derive(Debug, Clone)]
pub struct DirPages {
    pages: Vec<(String, PathBuf)>,
}

impl DirPages {
    pub fn scan(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|_| Error::MissingAsset(dir.to_path_buf()))?;
        let mut pages = Vec::new();
        for entry in entries {
            let path = entry?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .unwrap_or_default();
            if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            pages.push((stem, path));
        }
        pages.sort();
        if let Some(w) = pages.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidInput(format!("two page images share the id {:?}", w[0].0)));
        }
        Ok(Self { pages })
    }

    pub fn path(&self, n: usize) -> &Path {
        &self.pages[n].1
    }
}

impl PageSource for DirPages {
    fn len(&self) -> usize {
        self.pages.len()
    }

    fn page_id(&self, n: usize) -> &str {
        &self.pages[n].0
    }

    fn load(&self, n: usize) -> Result<RawImage> {
        load_image(&self.pages[n].1)
    }
}

/// In-memory pages, kept in the given order.
#[derive(Debug, Clone, Default)]
pub struct MemoryPages {
    pub pages: Vec<(String, Arc<RawImage>)>,
}

impl PageSource for MemoryPages {
    fn len(&self) -> usize {
        self.pages.len()
    }

    fn page_id(&self, n: usize) -> &str {
        &self.pages[n].0
    }

    fn load(&self, n: usize) -> Result<RawImage> {
        Ok((*self.pages[n].1).clone())
    }
}

#[derive(Debug, Clone)]
pub struct PreparedPage {
    pub entry: PageEntry,
    pub tiles: Vec<Tile>,
}

/// Background removal, canvas placement and tiling of one page.
pub fn preprocess_page(page_id: &str, image: &RawImage, canvas: &CanvasSpec, opts: &PreprocessConfig) -> Result<PreparedPage> {
    let (width, height) = image.dimensions();
    let region = if opts.remove_background {
        remove_background(&binarize(image), opts.stop_ratio)?
    } else {
        CropRegion::full(width, height)
    };
    let tiles = tile_page(&crop(image, &region), canvas, (region.x0, region.y0))?;
    if tiles.len() > u16::MAX as usize {
        return Err(Error::InvalidInput(format!("page {page_id} needs {} tiles", tiles.len())));
    }
    Ok(PreparedPage {
        entry: PageEntry {
            page_id: page_id.to_string(),
            width,
            height,
            crop: region,
            tiles: tiles.iter().map(|t| t.geometry).collect(),
        },
        tiles,
    })
}

pub struct BuildOptions<'a> {
    pub canvas: CanvasSpec,
    pub preprocess: PreprocessConfig,
    /// Keep only cells predicted non-text; dense indexing when `None`.
    pub filter: Option<&'a FilterModels>,
}

impl<'a> BuildOptions<'a> {
    pub fn from_config(config: &PipelineConfig, filter: Option<&'a FilterModels>) -> Self {
        Self {
            canvas: config.page_canvas(),
            preprocess: config.preprocess.clone(),
            filter,
        }
    }
}

struct PageFeatures {
    entry: PageEntry,
    /// Per tile: pyramid plus, per level, the retained cells (`None` = all).
    tiles: Vec<(Pyramid, [Option<Vec<(usize, usize)>>; 3])>,
}

fn page_features(
    source: &dyn PageSource,
    n: usize,
    extractor: &dyn Extractor,
    opts: &BuildOptions<'_>,
) -> Result<PageFeatures> {
    let id = source.page_id(n);
    let page = preprocess_page(id, &source.load(n)?, &opts.canvas, &opts.preprocess)?;
    let mut tiles = Vec::with_capacity(page.tiles.len());
    for tile in &page.tiles {
        let pyramid = extract_pyramid(tile, extractor)?;
        let mut retained: [Option<Vec<(usize, usize)>>; 3] = [None, None, None];
        if let Some(models) = opts.filter {
            for (slot, k) in retained.iter_mut().zip(LEVELS) {
                let model = models
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("no region filter model for level P{k}")))?;
                let grid = pyramid.level(k).expect("extractors emit every level");
                *slot = Some(filter_nontext(grid, model)?);
            }
        }
        tiles.push((pyramid, retained));
    }
    debug!("page {id}: {} tile(s)", tiles.len());
    Ok(PageFeatures {
        entry: page.entry,
        tiles,
    })
}

/// Builds the three per-level shards over every page of `source`.
///
/// Pages are processed in parallel in small batches to bound memory; the
/// result does not depend on the thread count.
pub fn build_index(source: &dyn PageSource, extractor: &dyn Extractor, opts: &BuildOptions<'_>) -> Result<Index> {
    if extractor.input_size() != opts.canvas.size {
        return Err(Error::ShapeMismatch(format!(
            "extractor takes {} px tiles, canvas is {} px",
            extractor.input_size(),
            opts.canvas.size
        )));
    }
    if source.len() > u32::MAX as usize {
        return Err(Error::InvalidInput("too many pages".into()));
    }
    let mut builders: Vec<ShardBuilder> = LEVELS.iter().map(|&k| ShardBuilder::new(k, EMBEDDING_DIM)).collect();
    let mut entries = Vec::with_capacity(source.len());
    let batch = rayon::current_num_threads().max(1) * 2;
    let positions: Vec<usize> = (0..source.len()).collect();
    for chunk in positions.chunks(batch) {
        let done: Vec<PageFeatures> = chunk
            .par_iter()
            .map(|&n| page_features(source, n, extractor, opts))
            .collect::<Result<_>>()?;
        for (&n, features) in chunk.iter().zip(done) {
            for (t, (pyramid, retained)) in features.tiles.iter().enumerate() {
                for ((builder, k), cells) in builders.iter_mut().zip(LEVELS).zip(retained) {
                    let grid = pyramid.level(k).expect("extractors emit every level");
                    builder.push_grid(n as u32, t as u16, grid, cells.as_deref())?;
                }
            }
            entries.push(features.entry);
        }
        info!("indexed {}/{} pages", entries.len(), source.len());
    }
    let shards = LEVELS
        .iter()
        .zip(builders)
        .map(|(&k, b)| Ok((k, b.finish()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Index {
        catalog: Catalog::new(opts.canvas.size, extractor.describe(), opts.filter.is_some(), entries),
        shards,
    })
}

/// Labeled cells of every annotated page, grouped by level.
pub fn collect_samples(
    source: &dyn PageSource,
    annotations: &[RoiAnnotation],
    extractor: &dyn Extractor,
    canvas: &CanvasSpec,
    preprocess: &PreprocessConfig,
    filter: &FilterConfig,
) -> Result<BTreeMap<u8, Vec<LabeledSample>>> {
    let mut jobs = Vec::with_capacity(annotations.len());
    let mut seen = HashSet::new();
    for a in annotations {
        let n = source
            .position(&a.page_id)
            .ok_or_else(|| Error::UnknownPageId(a.page_id.clone()))?;
        if !seen.insert(n) {
            return Err(Error::InvalidInput(format!("page {} annotated twice", a.page_id)));
        }
        jobs.push((n, a));
    }
    let per_page: Vec<Vec<LabeledSample>> = jobs
        .par_iter()
        .map(|&(n, annotation)| {
            let page = preprocess_page(source.page_id(n), &source.load(n)?, canvas, preprocess)?;
            let mut out = Vec::new();
            for (t, tile) in page.tiles.iter().enumerate() {
                let pyramid = extract_pyramid(tile, extractor)?;
                for grid in &pyramid.grids {
                    let mut samples = label_samples(grid, &tile.geometry, annotation);
                    if let Some(cap) = filter.samples_per_tile.filter(|&c| c < samples.len()) {
                        let stream = (n as u64) << 24 | (t as u64) << 8 | grid.level.k as u64;
                        let mut rng = ChaCha8Rng::seed_from_u64(filter.split_seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        let mut keep = sample(&mut rng, samples.len(), cap).into_vec();
                        keep.sort_unstable();
                        let mut all: Vec<Option<LabeledSample>> = samples.into_iter().map(Some).collect();
                        samples = keep.into_iter().map(|i| all[i].take().expect("distinct indices")).collect();
                    }
                    out.extend(samples);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut by_level: BTreeMap<u8, Vec<LabeledSample>> = LEVELS.iter().map(|&k| (k, Vec::new())).collect();
    for s in per_page.into_iter().flatten() {
        by_level.get_mut(&s.level_k).expect("known level").push(s);
    }
    Ok(by_level)
}

#[derive(Debug, Clone)]
pub struct TrainedFilter {
    pub model: ForestModel,
    pub validation: Metrics,
    pub test: Metrics,
    pub split_sizes: [usize; 3],
}

/// Splits each level's samples, trains a forest on the train part and scores
/// it on validation and test.
pub fn train_filters(samples: BTreeMap<u8, Vec<LabeledSample>>, filter: &FilterConfig) -> Result<Vec<TrainedFilter>> {
    let mut out = Vec::new();
    for (k, level_samples) in samples {
        let split = split_dataset(level_samples, filter.proportions, filter.split_seed ^ k as u64)?;
        let sizes = [split.train.len(), split.validation.len(), split.test.len()];
        let (model, validation) = train_forest(&split.train, &split.validation, k, &filter.forest)?;
        let test = evaluate_forest(&model, &split.test);
        info!(
            "P{k}: {} train / {} val / {} test, test accuracy {:.4}",
            sizes[0], sizes[1], sizes[2], test.accuracy
        );
        out.push(TrainedFilter {
            model,
            validation,
            test,
            split_sizes: sizes,
        });
    }
    Ok(out)
}

/// Loaded, ready-to-query engine: configuration, extractor, index and canvas.
pub struct Engine {
    pub config: PipelineConfig,
    pub extractor: Arc<dyn Extractor>,
    pub index: Arc<Index>,
    pub query_canvas: CanvasSpec,
    pages: Option<DirPages>,
    page_lookup: HashMap<String, u32>,
}

impl Engine {
    pub fn open(config: PipelineConfig) -> Result<Self> {
        let extractor = config.extractor_spec()?.build()?;
        let index = load_index(&config.output.index_dir)?;
        Self::from_parts(config, extractor, index)
    }

    pub fn from_parts(config: PipelineConfig, extractor: Arc<dyn Extractor>, index: Index) -> Result<Self> {
        if index.catalog.extractor != extractor.describe() {
            return Err(Error::Config(format!(
                "index was built with {} but the configured extractor is {}",
                index.catalog.extractor,
                extractor.describe()
            )));
        }
        let query_canvas = config.query_canvas()?;
        let pages = match config.dataset.pages_dir.as_deref() {
            Some(dir) if dir.is_dir() => Some(DirPages::scan(dir)?),
            _ => None,
        };
        let page_lookup = index
            .catalog
            .pages
            .iter()
            .enumerate()
            .map(|(n, p)| (p.page_id.clone(), n as u32))
            .collect();
        Ok(Self {
            config,
            extractor,
            index: Arc::new(index),
            query_canvas,
            pages,
            page_lookup,
        })
    }

    pub fn spot(&self, query_id: &str, query: &RawImage) -> Result<SpotResult> {
        let ctx = SpotContext {
            extractor: self.extractor.as_ref(),
            index: &self.index,
            query_canvas: &self.query_canvas,
            params: &self.config.search,
        };
        spot(query_id, query, &ctx)
    }

    pub fn page_entry(&self, page_id: &str) -> Result<&PageEntry> {
        self.page_lookup
            .get(page_id)
            .and_then(|&n| self.index.catalog.page(n))
            .ok_or_else(|| Error::UnknownPageId(page_id.to_string()))
    }

    /// Original image of an indexed page, read from the dataset directory.
    pub fn page_image_path(&self, page_id: &str) -> Result<&Path> {
        self.page_entry(page_id)?;
        let pages = self
            .pages
            .as_ref()
            .ok_or_else(|| Error::Config("dataset.pages_dir: not set or missing".into()))?;
        let n = pages
            .position(page_id)
            .ok_or_else(|| Error::UnknownPageId(page_id.to_string()))?;
        Ok(pages.path(n))
    }

    pub fn page_image(&self, page_id: &str) -> Result<RawImage> {
        load_image(self.page_image_path(page_id)?)
    }
}
