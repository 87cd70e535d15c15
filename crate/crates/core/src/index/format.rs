//! On-disk shard layout, little-endian throughout:
//!
//! ```text
//! "PSPX" | u32 version | u8 level_k | u32 dim | u64 count
//! count x (u32 page | u16 tile | u16 i | u16 j | dim x f32)
//! u32 CRC32 of all preceding bytes
//! ```

use std::io::{Cursor, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{IndexShard, RecordMeta};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSPX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 1 + 4 + 8;
/// Fixed per-record metadata preceding the vector payload.
pub const RECORD_META_BYTES: usize = 4 + 2 + 2 + 2;

pub fn shard_file_name(level_k: u8) -> String {
    format!("p{level_k}.pspx")
}

pub fn write_shard<W: Write>(shard: &IndexShard, out: W) -> Result<()> {
    let mut crc = crc32fast::Hasher::new();
    let mut w = std::io::BufWriter::new(out);
    let mut header = Vec::with_capacity(HEADER_BYTES);
    header.extend_from_slice(MAGIC);
    header.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    header.write_u8(shard.level_k)?;
    header.write_u32::<LittleEndian>(shard.dim as u32)?;
    header.write_u64::<LittleEndian>(shard.len() as u64)?;
    crc.update(&header);
    w.write_all(&header)?;

    let mut rec = Vec::with_capacity(RECORD_META_BYTES + 4 * shard.dim);
    for n in 0..shard.len() {
        rec.clear();
        let m = shard.meta(n);
        rec.write_u32::<LittleEndian>(m.page)?;
        rec.write_u16::<LittleEndian>(m.tile)?;
        rec.write_u16::<LittleEndian>(m.i)?;
        rec.write_u16::<LittleEndian>(m.j)?;
        for &v in shard.vector(n) {
            rec.write_f32::<LittleEndian>(v)?;
        }
        crc.update(&rec);
        w.write_all(&rec)?;
    }
    w.write_u32::<LittleEndian>(crc.finalize())?;
    w.flush()?;
    Ok(())
}

pub fn read_shard(bytes: &[u8]) -> Result<IndexShard> {
    let corrupt = |msg: &str| Error::CorruptIndex(msg.to_string());
    if bytes.len() < HEADER_BYTES + 4 {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut r = Cursor::new(&bytes[4..HEADER_BYTES]);
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let level_k = r.read_u8()?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()?;
    if dim == 0 {
        return Err(corrupt("zero dimension"));
    }
    let record_bytes = RECORD_META_BYTES as u64 + 4 * dim as u64;
    let expected = count
        .checked_mul(record_bytes)
        .and_then(|b| b.checked_add(HEADER_BYTES as u64 + 4));
    if expected != Some(bytes.len() as u64) {
        return Err(corrupt("length does not match record count"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let count = count as usize;
    let mut meta = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * dim);
    let mut r = Cursor::new(&body[HEADER_BYTES..]);
    for _ in 0..count {
        meta.push(RecordMeta {
            page: r.read_u32::<LittleEndian>()?,
            tile: r.read_u16::<LittleEndian>()?,
            i: r.read_u16::<LittleEndian>()?,
            j: r.read_u16::<LittleEndian>()?,
        });
        for _ in 0..dim {
            vectors.push(r.read_f32::<LittleEndian>()?);
        }
    }
    IndexShard::from_parts(level_k, dim, meta, vectors).map_err(|e| Error::CorruptIndex(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EMBEDDING_DIM;
    use proptest::prelude::*;

    fn encode(shard: &IndexShard) -> Vec<u8> {
        let mut buf = Vec::new();
        write_shard(shard, &mut buf).unwrap();
        buf
    }

    fn sample_shard(n: usize) -> IndexShard {
        let meta = (0..n)
            .map(|k| RecordMeta {
                page: k as u32 * 7,
                tile: (k % 3) as u16,
                i: k as u16,
                j: (k * 2) as u16,
            })
            .collect();
        let vectors = (0..n * EMBEDDING_DIM).map(|v| (v as f32).sin()).collect();
        IndexShard::from_parts(4, EMBEDDING_DIM, meta, vectors).unwrap()
    }

    #[test]
    fn layout_is_fixed_width() {
        let shard = sample_shard(3);
        let bytes = encode(&shard);
        assert_eq!(&bytes[..4], b"PSPX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 4);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 256);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 21 + 3 * (10 + 1024) + 4);
        // first record: page 0, tile 0, i 0, j 0, then vector[0] = sin(0)
        assert_eq!(&bytes[21..31], &[0u8; 10]);
    }

    #[test]
    fn truncated_and_tampered_files_rejected() {
        let bytes = encode(&sample_shard(4));
        assert!(matches!(read_shard(&bytes[..bytes.len() - 1]), Err(Error::CorruptIndex(_))));
        assert!(matches!(read_shard(&bytes[..10]), Err(Error::CorruptIndex(_))));
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(read_shard(&bad), Err(Error::CorruptIndex(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_shard(&bad_magic), Err(Error::CorruptIndex(_))));
        let mut future = bytes.clone();
        future[4] = 9;
        assert!(matches!(read_shard(&future), Err(Error::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn empty_shard_round_trips() {
        let shard = IndexShard::new(5, EMBEDDING_DIM);
        assert_eq!(read_shard(&encode(&shard)).unwrap(), shard);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            level in 3u8..6,
            recs in proptest::collection::vec((any::<u32>(), any::<u16>(), any::<u16>(), any::<u16>()), 0..20),
            seed in any::<u32>(),
        ) {
            let dim = 8;
            let meta: Vec<_> = recs.iter().map(|&(page, tile, i, j)| RecordMeta { page, tile, i, j }).collect();
            let vectors: Vec<f32> = (0..meta.len() * dim)
                .map(|n| f32::from_bits((seed as u64 * 2654435761 + n as u64) as u32 & 0x3FFF_FFFF))
                .collect();
            let shard = IndexShard::from_parts(level, dim, meta, vectors).unwrap();
            let bytes = encode(&shard);
            let back = read_shard(&bytes).unwrap();
            prop_assert_eq!(&back, &shard);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
