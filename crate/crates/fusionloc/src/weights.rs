//! Flat binary archive of named float32 arrays with a small text manifest.
//! Used for checkpoints and the optional pretrained-backbone weight file.
//!
//! Layout: magic `FLARCH1\n`, u64-le manifest length, manifest bytes
//! (`key<TAB>value` lines, newlines in values escaped as `\n`), u32-le array
//! count, then per array: u16-le name length, name, u8 ndim, ndim u64-le
//! dims, f32-le data.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

const MAGIC: &[u8; 8] = b"FLARCH1\n";

pub type Manifest = Vec<(String, String)>;

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn write_archive(
    path: &Path,
    manifest: &Manifest,
    arrays: &[(String, ArrayD<f32>)],
) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    let mut mtext = String::new();
    for (k, v) in manifest {
        mtext.push_str(&format!("{k}\t{}\n", escape(v)));
    }
    f.write_all(&(mtext.len() as u64).to_le_bytes())?;
    f.write_all(mtext.as_bytes())?;
    f.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, arr) in arrays {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "array name too long");
        f.write_all(&(bytes.len() as u16).to_le_bytes())?;
        f.write_all(bytes)?;
        let shape = arr.shape();
        f.write_all(&[shape.len() as u8])?;
        for &d in shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        // standard (row-major) layout is guaranteed for owned arrays here
        let data = arr.as_standard_layout();
        for &v in data.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_archive(path: &Path) -> io::Result<(Manifest, Vec<(String, ArrayD<f32>)>)> {
    let mut f = io::BufReader::new(fs::File::open(path)?);
    let magic = read_exact_buf(&mut f, 8)?;
    if magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "not a fusionloc archive"));
    }
    let mlen = u64::from_le_bytes(read_exact_buf(&mut f, 8)?.try_into().unwrap()) as usize;
    let mtext = String::from_utf8(read_exact_buf(&mut f, mlen)?)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut manifest = Manifest::new();
    for line in mtext.lines() {
        if let Some((k, v)) = line.split_once('\t') {
            manifest.push((k.to_string(), unescape(v)));
        }
    }
    let count = u32::from_le_bytes(read_exact_buf(&mut f, 4)?.try_into().unwrap());
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact_buf(&mut f, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_buf(&mut f, name_len)?)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let ndim = read_exact_buf(&mut f, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact_buf(&mut f, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = read_exact_buf(&mut f, len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        arrays.push((name, arr));
    }
    Ok((manifest, arrays))
}

pub fn manifest_get<'a>(manifest: &'a Manifest, key: &str) -> Option<&'a str> {
    manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_manifest_and_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.flarch");
        let manifest = vec![
            ("epoch".to_string(), "42".to_string()),
            ("config".to_string(), "[a]\nkey = value\ttabbed".to_string()),
        ];
        let arrays = vec![
            ("w.0".to_string(), ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
            ("scalar".to_string(), ArrayD::from_elem(IxDyn(&[]), -0.5f32)),
        ];
        write_archive(&path, &manifest, &arrays).unwrap();
        let (m2, a2) = read_archive(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(a2.len(), 2);
        assert_eq!(a2[0].0, "w.0");
        assert_eq!(a2[0].1, arrays[0].1);
        assert_eq!(a2[1].1[[]], -0.5);
        assert_eq!(manifest_get(&m2, "epoch"), Some("42"));
    }

    #[test]
    fn rejects_non_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus");
        fs::write(&path, b"not an archive at all").unwrap();
        assert!(read_archive(&path).is_err());
    }
}
