//! TOML pipeline configuration. Relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedder::{ExtractorKind, ExtractorSpec, Normalization};
use crate::error::{Error, Result};
use crate::preprocess::{load_image, synthetic_parchment, CanvasSpec, DEFAULT_CANVAS_SIZE, DEFAULT_STOP_RATIO};
use crate::regionfilter::ForestParams;
use crate::spotting::SpotParams;

/// Seed of the built-in parchment texture used when no texture file is set.
pub const TEXTURE_SEED: u64 = 7;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub pages_dir: Option<PathBuf>,
    /// JSONL of `{page_id, boxes}` graphical-region annotations for filter training.
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanvasConfig {
    pub size: u32,
}

impl Default for CanvasConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_CANVAS_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub remove_background: bool,
    pub stop_ratio: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            remove_background: true,
            stop_ratio: DEFAULT_STOP_RATIO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillKind {
    Black,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryCanvasConfig {
    pub fill: FillKind,
    /// Texture image; the built-in synthetic parchment when unset.
    pub texture: Option<PathBuf>,
}

impl Default for QueryCanvasConfig {
    fn default() -> Self {
        Self {
            fill: FillKind::Texture,
            texture: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorChoice {
    Reference,
    Onnx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorChoice,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_names: Vec<String>,
    pub level_strides: [u32; 3],
    pub normalization: Normalization,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorChoice::Reference,
            seed: 42,
            model: None,
            manifest: None,
            output_names: Vec::new(),
            level_strides: [8, 16, 32],
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub model_dir: PathBuf,
    /// Train / validation / test proportions.
    pub proportions: [f64; 3],
    pub split_seed: u64,
    /// Labeled cells drawn per tile and level for training; all when unset.
    pub samples_per_tile: Option<usize>,
    pub forest: ForestParams,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            model_dir: PathBuf::from("models"),
            proportions: crate::regionfilter::DEFAULT_PROPORTIONS,
            split_seed: 42,
            samples_per_tile: None,
            forest: ForestParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub index_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            index_dir: PathBuf::from("index"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Queries allowed to run concurrently; further requests wait.
    pub max_inflight: usize,
    /// Finished query results kept for `GET /queries/{id}`.
    pub cache_size: usize,
    /// Largest accepted query side, in pixels.
    pub max_query_side: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_inflight: 2,
            cache_size: 256,
            max_query_side: 2000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub canvas: CanvasConfig,
    pub preprocess: PreprocessConfig,
    pub query_canvas: QueryCanvasConfig,
    pub extractor: ExtractorConfig,
    pub filter: FilterConfig,
    pub search: SpotParams,
    pub output: OutputConfig,
    pub service: ServiceConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset.pages_dir.as_mut().map(fix);
        self.dataset.annotations.as_mut().map(fix);
        self.query_canvas.texture.as_mut().map(fix);
        self.extractor.model.as_mut().map(fix);
        self.extractor.manifest.as_mut().map(fix);
        fix(&mut self.filter.model_dir);
        fix(&mut self.output.index_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if self.canvas.size < 128 {
            return bad("canvas.size", format!("{} is below the 128 px minimum", self.canvas.size));
        }
        let r = self.preprocess.stop_ratio;
        if !(r > 0.0 && r < 1.0) {
            return bad("preprocess.stop_ratio", format!("{r} is outside (0, 1)"));
        }
        if self.extractor.level_strides != [8, 16, 32] {
            return bad(
                "extractor.level_strides",
                format!("{:?}; only P3/P4/P5 strides [8, 16, 32] are supported", self.extractor.level_strides),
            );
        }
        if self.extractor.kind == ExtractorChoice::Onnx && self.extractor.model.is_none() {
            return bad("extractor.model", "required when extractor.kind = \"onnx\"".into());
        }
        if self.extractor.normalization.scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return bad("extractor.normalization.scale", "entries must be finite and non-zero".into());
        }
        let p = self.filter.proportions;
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("filter.proportions", format!("{p:?} must be non-negative and sum to 1"));
        }
        if self.filter.forest.n_trees == 0 {
            return bad("filter.forest.n_trees", "must be at least 1".into());
        }
        if self.search.top_n == 0 {
            return bad("search.top_n", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.search.nms_iou) {
            return bad("search.nms_iou", format!("{} is outside [0, 1]", self.search.nms_iou));
        }
        if self.service.max_inflight == 0 {
            return bad("service.max_inflight", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn pages_dir(&self) -> Result<&Path> {
        let dir = self
            .dataset
            .pages_dir
            .as_deref()
            .ok_or_else(|| Error::Config("dataset.pages_dir: not set".into()))?;
        if !dir.is_dir() {
            return Err(Error::MissingAsset(dir.to_path_buf()));
        }
        Ok(dir)
    }

    pub fn extractor_spec(&self) -> Result<ExtractorSpec> {
        let e = &self.extractor;
        let kind = match e.kind {
            ExtractorChoice::Reference => ExtractorKind::Reference { seed: e.seed },
            ExtractorChoice::Onnx => {
                let path = e.model.clone().expect("validated");
                for p in std::iter::once(&path).chain(e.manifest.as_ref()) {
                    if !p.is_file() {
                        return Err(Error::MissingAsset(p.clone()));
                    }
                }
                ExtractorKind::SerializedModel {
                    path,
                    output_names: e.output_names.clone(),
                    manifest: e.manifest.clone(),
                }
            }
        };
        Ok(ExtractorSpec {
            kind,
            input_size: self.canvas.size,
            normalization: e.normalization.clone(),
        })
    }

    /// Canvas that pages are placed on.
    pub fn page_canvas(&self) -> CanvasSpec {
        CanvasSpec::black(self.canvas.size)
    }

    /// Canvas that queries are centered on.
    pub fn query_canvas(&self) -> Result<CanvasSpec> {
        let size = self.canvas.size;
        Ok(match self.query_canvas.fill {
            FillKind::Black => CanvasSpec::black(size),
            FillKind::Texture => {
                let texture = match &self.query_canvas.texture {
                    Some(path) => load_image(path)?,
                    None => synthetic_parchment(size, size, TEXTURE_SEED),
                };
                CanvasSpec::texture(size, Arc::new(texture))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Measure;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_sections() {
        let c = PipelineConfig::from_toml(
            "[search]\nmeasure = \"cosine\"\ntop_n = 50\n[query_canvas]\nfill = \"black\"\n[filter.forest]\nn_trees = 5\n",
        )
        .unwrap();
        assert_eq!(c.search.measure, Measure::Cosine);
        assert_eq!(c.search.top_n, 50);
        assert_eq!(c.search.nms_iou, 0.5);
        assert_eq!(c.query_canvas.fill, FillKind::Black);
        assert_eq!(c.filter.forest.n_trees, 5);
        assert_eq!(c.filter.forest.seed, 42);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("[preprocess]\nstop_ratio = 1.5", "preprocess.stop_ratio"),
            ("[extractor]\nlevel_strides = [4, 8, 16]", "extractor.level_strides"),
            ("[extractor]\nkind = \"onnx\"", "extractor.model"),
            ("[canvas]\nsize = 64", "canvas.size"),
        ] {
            match PipelineConfig::from_toml(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(key), "{msg}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(PipelineConfig::from_toml("[canvas]\nsise = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pspot.toml");
        std::fs::write(&path, "[dataset]\npages_dir = \"pages\"\n[output]\nindex_dir = \"/abs/idx\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.dataset.pages_dir.as_deref(), Some(dir.path().join("pages").as_path()));
        assert_eq!(c.output.index_dir, PathBuf::from("/abs/idx"));
        assert!(matches!(c.pages_dir(), Err(Error::MissingAsset(_))));
        assert!(matches!(PipelineConfig::load(&dir.path().join("nope.toml")), Err(Error::MissingAsset(_))));
    }
}
