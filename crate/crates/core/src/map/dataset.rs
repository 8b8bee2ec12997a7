//! Binary dataset container for semantic maps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SMAPDS1\0"
//! u32     count, H, W, C, P
//! palette C records: u16 name length, UTF-8 name, 3 color bytes
//! maps    count x (H*W) u8 label bytes
//! ```
//!
//! Labels are stored raw (not one-hot) for compactness; range is validated
//! on read so deserialized maps satisfy the one-hot invariant.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::map::palette::{Category, CategoryPalette};
use crate::map::semantic::SemanticMap;

pub const DATASET_MAGIC: &[u8; 8] = b"SMAPDS1\0";

/// Serialize maps plus palette. All maps must share geometry and match the
/// palette's channel count.
pub fn write_dataset(
    maps: &[SemanticMap],
    palette: &CategoryPalette,
    patch_size: usize,
    path: &Path,
) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    let (h, w, c) = (maps[0].height(), maps[0].width(), maps[0].channels());
    for (i, m) in maps.iter().enumerate() {
        if (m.height(), m.width(), m.channels()) != (h, w, c) {
            return Err(Error::invalid(format!(
                "map {i} geometry {}x{}x{} differs from first map {h}x{w}x{c}",
                m.height(),
                m.width(),
                m.channels()
            )));
        }
    }
    if c != palette.len() {
        return Err(Error::shape("dataset palette", &[c], &[palette.len()]));
    }
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not divide {h}x{w}"
        )));
    }

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    for v in [maps.len() as u32, h as u32, w as u32, c as u32, patch_size as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for cat in palette.categories() {
        let name = cat.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("category name too long"));
        }
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&cat.color)?;
    }
    for m in maps {
        out.write_all(m.labels())?;
    }
    out.flush()?;
    Ok(())
}

/// Offset-tracking reader so parse errors can name the failing byte.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            let got = self.inner.read(&mut buf[filled..])?;
            if got == 0 {
                return Err(Error::format(
                    self.offset + filled as u64,
                    "unexpected end of stream",
                ));
            }
            filled += got;
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u16_le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read back a dataset written by [`write_dataset`]; exact inverse.
pub fn read_dataset(path: &Path) -> Result<(Vec<SemanticMap>, CategoryPalette, usize)> {
    let mut cur = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let magic = cur.take(8)?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let count = cur.u32_le()? as usize;
    let h = cur.u32_le()? as usize;
    let w = cur.u32_le()? as usize;
    let c = cur.u32_le()? as usize;
    let p = cur.u32_le()? as usize;
    if count == 0 || h == 0 || w == 0 {
        return Err(Error::format(8, "zero count or dimensions in header"));
    }
    if c < 2 || c > 256 {
        return Err(Error::format(20, format!("channel count {c} out of range")));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::format(
            24,
            format!("patch size {p} does not divide {h}x{w}"),
        ));
    }

    let mut categories = Vec::with_capacity(c);
    for id in 0..c {
        let name_offset = cur.offset;
        let name_len = cur.u16_le()? as usize;
        let name_bytes = cur.take(name_len)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(name_offset + 2, "category name is not UTF-8"))?;
        let color = cur.take(3)?;
        categories.push(Category {
            id: id as u8,
            name,
            color: [color[0], color[1], color[2]],
        });
    }
    let palette = CategoryPalette::from_categories(categories)?;

    let mut maps = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.offset;
        let labels = cur.take(h * w)?;
        let map = SemanticMap::from_labels(h, w, c, labels)
            .map_err(|e| Error::format(at, format!("invalid map payload: {e}")))?;
        maps.push(map);
    }

    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    if cur.inner.read(&mut probe)? != 0 {
        return Err(Error::format(cur.offset, "trailing bytes after last map"));
    }

    Ok((maps, palette, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mapbert-dataset-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn random_maps(seed: u64, n: usize) -> Vec<SemanticMap> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let labels: Vec<u8> = (0..16 * 16).map(|_| rng.below(6) as u8).collect();
                SemanticMap::from_labels(16, 16, 6, labels).unwrap()
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_identity() {
        let maps = random_maps(1, 3);
        let palette = CategoryPalette::default_indoor();
        let path = tmp("roundtrip.bin");
        write_dataset(&maps, &palette, 8, &path).unwrap();
        let (back, pal2, p) = read_dataset(&path).unwrap();
        assert_eq!(back, maps);
        assert_eq!(pal2, palette);
        assert_eq!(p, 8);
    }

    #[test]
    fn truncated_file_names_eof() {
        let maps = random_maps(2, 2);
        let palette = CategoryPalette::default_indoor();
        let path = tmp("trunc.bin");
        write_dataset(&maps, &palette, 8, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("unexpected end of stream"), "{err}");
    }

    #[test]
    fn bad_magic_rejected_at_offset_zero() {
        let path = tmp("magic.bin");
        std::fs::write(&path, b"NOTMAGIC rest of file").unwrap();
        let err = read_dataset(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mixed_geometry_rejected_on_write() {
        let mut maps = random_maps(3, 2);
        maps.push(SemanticMap::from_labels(8, 8, 6, vec![0; 64]).unwrap());
        let palette = CategoryPalette::default_indoor();
        let err = write_dataset(&maps, &palette, 8, &tmp("mixed.bin")).unwrap_err();
        assert!(err.to_string().contains("differs"), "{err}");
    }

    #[test]
    fn label_out_of_range_rejected_on_read() {
        let maps = random_maps(4, 1);
        let palette = CategoryPalette::default_indoor();
        let path = tmp("range.bin");
        write_dataset(&maps, &palette, 8, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 250; // out of range for C=6
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn byte_exact_header() {
        let maps = random_maps(5, 1);
        let palette = CategoryPalette::default_indoor();
        let path = tmp("header.bin");
        write_dataset(&maps, &palette, 8, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], DATASET_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 8);
        // First palette record: "free"
        assert_eq!(u16::from_le_bytes(bytes[28..30].try_into().unwrap()), 4);
        assert_eq!(&bytes[30..34], b"free");
    }
}
