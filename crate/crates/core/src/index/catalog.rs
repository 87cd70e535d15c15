use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_shard, shard_file_name, write_shard, IndexShard};
use crate::embedder::LEVELS;
use crate::error::{Error, Result};
use crate::preprocess::{CropRegion, TileGeometry};

pub const CATALOG_FILE: &str = "catalog.json";
const CATALOG_VERSION: u32 = 1;

/// Back-translation metadata for one indexed page. Its position in
/// [`Catalog::pages`] is the `page` number stored in shard records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageEntry {
    pub page_id: String,
    pub width: u32,
    pub height: u32,
    pub crop: CropRegion,
    pub tiles: Vec<TileGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    pub canvas_size: u32,
    pub extractor: String,
    /// Whether a region filter selected the indexed cells (false = dense).
    pub filtered: bool,
    pub pages: Vec<PageEntry>,
}

impl Catalog {
    pub fn new(canvas_size: u32, extractor: String, filtered: bool, pages: Vec<PageEntry>) -> Self {
        Self {
            version: CATALOG_VERSION,
            canvas_size,
            extractor,
            filtered,
            pages,
        }
    }

    pub fn page(&self, page: u32) -> Option<&PageEntry> {
        self.pages.get(page as usize)
    }

    pub fn find(&self, page_id: &str) -> Option<(u32, &PageEntry)> {
        self.pages
            .iter()
            .enumerate()
            .find(|(_, p)| p.page_id == page_id)
            .map(|(n, p)| (n as u32, p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub catalog: Catalog,
    pub shards: BTreeMap<u8, IndexShard>,
}

impl Index {
    pub fn shard(&self, k: u8) -> Option<&IndexShard> {
        self.shards.get(&k)
    }
}

/// Writes `catalog.json` and one `p{k}.pspx` per shard into `dir`.
pub fn save_index(index: &Index, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let catalog = serde_json::to_vec_pretty(&index.catalog)?;
    std::fs::write(dir.join(CATALOG_FILE), catalog)?;
    for (k, shard) in &index.shards {
        write_shard(shard, File::create(dir.join(shard_file_name(*k)))?)?;
    }
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<Index> {
    let cpath = dir.join(CATALOG_FILE);
    let text = std::fs::read(&cpath).map_err(|_| Error::MissingAsset(cpath.clone()))?;
    let catalog: Catalog =
        serde_json::from_slice(&text).map_err(|e| Error::CorruptIndex(format!("{}: {e}", cpath.display())))?;
    if catalog.version != CATALOG_VERSION {
        return Err(Error::VersionMismatch {
            found: catalog.version,
            expected: CATALOG_VERSION,
        });
    }
    let mut shards = BTreeMap::new();
    for k in LEVELS {
        let path = dir.join(shard_file_name(k));
        if !path.exists() {
            continue;
        }
        let shard = read_shard(&std::fs::read(&path)?)?;
        if shard.level_k != k {
            return Err(Error::CorruptIndex(format!("{} holds level {}", path.display(), shard.level_k)));
        }
        for m in shard.metas() {
            let page = catalog
                .page(m.page)
                .ok_or_else(|| Error::CorruptIndex(format!("record references unknown page {}", m.page)))?;
            if m.tile as usize >= page.tiles.len() {
                return Err(Error::CorruptIndex(format!("record references unknown tile {}", m.tile)));
            }
        }
        shards.insert(k, shard);
    }
    Ok(Index { catalog, shards })
}
