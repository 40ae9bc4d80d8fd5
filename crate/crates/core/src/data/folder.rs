//! PNG folder layout: `root/<class_name>/<image>.png`, optionally nested under
//! `root/domain_<k>/` for augmented datasets.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Dataset, Patch, RgbImage};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub(crate) fn decode_png(path: &Path) -> Result<RgbImage, DataError> {
    let decode_err = |reason: String| DataError::DecodeError {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    buf.truncate(info.line_size * info.height as usize);
    let n = info.width as usize * info.height as usize;
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => {
            buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect()
        }
        png::ColorType::Indexed => return Err(decode_err("unexpanded palette".into())),
    };
    if rgb.len() != n * 3 {
        return Err(decode_err(format!(
            "decoded {} bytes for {}x{}",
            rgb.len(),
            info.width,
            info.height
        )));
    }
    Ok(RgbImage::from_raw(info.width, info.height, rgb))
}

pub(crate) fn encode_png(img: &RgbImage) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), img.width(), img.height());
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(img.as_raw())?;
    }
    Ok(out)
}

fn load_classes(
    root: &Path,
    expected_classes: Option<&[String]>,
) -> Result<(Vec<String>, Vec<PathBuf>), DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingClass(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let found: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let name_of = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned());
    match expected_classes {
        Some(expected) => {
            let mut dirs = Vec::with_capacity(expected.len());
            for class in expected {
                let dir = root.join(class);
                if !dir.is_dir() {
                    return Err(DataError::MissingClass(class.clone()));
                }
                dirs.push(dir);
            }
            Ok((expected.to_vec(), dirs))
        }
        None => {
            if found.is_empty() {
                return Err(DataError::MissingClass(format!(
                    "no class folders under {}",
                    root.display()
                )));
            }
            let names = found.iter().filter_map(name_of).collect();
            Ok((names, found))
        }
    }
}

fn load_into(
    ds: &mut Dataset,
    dirs: &[PathBuf],
    domain: Option<u8>,
) -> Result<(), DataError> {
    for (class_id, dir) in dirs.iter().enumerate() {
        if domain.is_some() && !dir.is_dir() {
            continue;
        }
        let class_name = ds.class_names[class_id].clone();
        for file in sorted_entries(dir)?.into_iter().filter(|p| is_png(p)) {
            let pixels = decode_png(&file)?;
            let fname = file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut patch = Patch::new(pixels, class_id, format!("{class_name}/{fname}"));
            patch.domain_id = domain;
            ds.patches.push(patch);
        }
    }
    Ok(())
}

/// Loads `root/<class>/*.png`. Class ids follow lexicographic folder order
/// unless `expected_classes` is given; patches are ordered by (class, file).
pub fn load_folder(root: &Path, expected_classes: Option<&[String]>) -> Result<Dataset, DataError> {
    let (names, dirs) = load_classes(root, expected_classes)?;
    let mut ds = Dataset::new(names);
    load_into(&mut ds, &dirs, None)?;
    if ds.is_empty() {
        return Err(DataError::MissingClass(format!(
            "no PNG images under {}",
            root.display()
        )));
    }
    ds.validate()?;
    Ok(ds)
}

/// Loads an augmented layout `root/domain_<k>/<class>/*.png` for k = 1..5.
/// A class may be absent from individual domains.
pub fn load_domain_folder(
    root: &Path,
    expected_classes: Option<&[String]>,
) -> Result<Dataset, DataError> {
    let domain_roots: Vec<(u8, PathBuf)> = (1..=5u8)
        .map(|k| (k, root.join(format!("domain_{k}"))))
        .filter(|(_, p)| p.is_dir())
        .collect();
    if domain_roots.is_empty() {
        return Err(DataError::MissingClass(format!(
            "no domain_<k> folders under {}",
            root.display()
        )));
    }
    let names: Vec<String> = match expected_classes {
        Some(e) => e.to_vec(),
        None => {
            let mut all = std::collections::BTreeSet::new();
            for (_, droot) in &domain_roots {
                for p in sorted_entries(droot)?.into_iter().filter(|p| p.is_dir()) {
                    if let Some(n) = p.file_name() {
                        all.insert(n.to_string_lossy().into_owned());
                    }
                }
            }
            all.into_iter().collect()
        }
    };
    let mut ds = Dataset::new(names);
    for (k, droot) in &domain_roots {
        let dirs: Vec<PathBuf> = ds.class_names.iter().map(|c| droot.join(c)).collect();
        load_into(&mut ds, &dirs, Some(*k))?;
    }
    for (c, n) in ds.class_counts().iter().enumerate() {
        if *n == 0 {
            return Err(DataError::MissingClass(ds.class_names[c].clone()));
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// File name component of a patch's source key.
fn file_name_for(p: &Patch, index: usize) -> String {
    let base = p.source_key.rsplit('/').next().unwrap_or_default();
    if base.is_empty() {
        format!("{index:05}.png")
    } else if is_png(Path::new(base)) {
        base.to_string()
    } else {
        format!("{base}.png")
    }
}

/// Relative output path of every patch in `ds`.
fn layout(ds: &Dataset) -> Vec<PathBuf> {
    ds.patches
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rel = PathBuf::new();
            if let Some(d) = p.domain_id {
                rel.push(format!("domain_{d}"));
            }
            rel.push(&ds.class_names[p.class_id]);
            rel.push(file_name_for(p, i));
            rel
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

/// Summary written next to a dataset folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub domain_counts: Vec<usize>,
    pub files: Vec<ManifestFile>,
}

/// Writes every patch as PNG under `root` and returns the manifest (also
/// written to `root/manifest.json`).
pub fn write_folder(ds: &Dataset, root: &Path) -> Result<DatasetManifest, DataError> {
    let mut files = Vec::with_capacity(ds.len());
    for (p, rel) in ds.patches.iter().zip(layout(ds)) {
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let bytes = encode_png(&p.pixels).map_err(|e| DataError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(ManifestFile {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let mut domain_counts = vec![0usize; 5];
    for p in &ds.patches {
        if let Some(d) = p.domain_id {
            domain_counts[usize::from(d) - 1] += 1;
        }
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        class_names: ds.class_names.clone(),
        counts: ds.class_counts(),
        domain_counts,
        files,
    };
    write_manifest(&manifest, &root.join("manifest.json"))?;
    Ok(manifest)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, m).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    std::io::Write::write_all(&mut w, b"\n").map_err(io_err(path))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut ds = Dataset::new(vec!["b_cls".into(), "a_cls".into()]);
        for i in 0..3u8 {
            ds.patches.push(Patch::new(
                RgbImage::filled(8, 8, [i * 40, 10, 200]),
                0,
                format!("b_cls/{i}.png"),
            ));
            ds.patches.push(Patch::new(
                RgbImage::filled(9, 8, [5, i * 50, 7]),
                1,
                format!("a_cls/{i}.png"),
            ));
        }
        ds
    }

    #[test]
    fn write_then_load_sorts_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        write_folder(&sample(), dir.path()).unwrap();
        let ds = load_folder(dir.path(), None).unwrap();
        assert_eq!(ds.class_names, vec!["a_cls", "b_cls"]);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.patches[0].source_key, "a_cls/0.png");
        assert_eq!(ds.patches[0].pixels, RgbImage::filled(9, 8, [5, 0, 7]));
        assert_eq!(load_folder(dir.path(), None).unwrap(), ds);

        let expected = vec!["b_cls".to_string(), "a_cls".to_string()];
        let ds2 = load_folder(dir.path(), Some(&expected)).unwrap();
        assert_eq!(ds2.patches[0].class_id, 0);
        assert_eq!(ds2.patches[0].source_key, "b_cls/0.png");
    }

    #[test]
    fn empty_root_is_missing_class() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_folder(dir.path(), None), Err(DataError::MissingClass(_))));
        let ghost = dir.path().join("nope");
        assert!(matches!(load_folder(&ghost, None), Err(DataError::MissingClass(_))));
    }

    #[test]
    fn expected_class_absent() {
        let dir = tempfile::tempdir().unwrap();
        write_folder(&sample(), dir.path()).unwrap();
        let expected = vec!["a_cls".to_string(), "zzz".to_string()];
        match load_folder(dir.path(), Some(&expected)) {
            Err(DataError::MissingClass(c)) => assert_eq!(c, "zzz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_png_names_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("x")).unwrap();
        fs::write(dir.path().join("x/bad.png"), b"not a png").unwrap();
        match load_folder(dir.path(), None) {
            Err(DataError::DecodeError { path, .. }) => assert!(path.ends_with("x/bad.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn domain_layout_roundtrip() {
        let mut ds = sample();
        for (i, p) in ds.patches.iter_mut().enumerate() {
            p.domain_id = Some((i % 5) as u8 + 1);
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_folder(&ds, dir.path()).unwrap();
        assert!(manifest.files[0].path.starts_with("domain_1/b_cls/"));
        assert_eq!(manifest.domain_counts.iter().sum::<usize>(), 6);
        let back = load_domain_folder(dir.path(), Some(&ds.class_names)).unwrap();
        assert_eq!(back.len(), 6);
        let mut a: Vec<_> = ds.patches.iter().map(|p| (p.source_key.clone(), p.domain_id)).collect();
        let mut b: Vec<_> = back.patches.iter().map(|p| (p.source_key.clone(), p.domain_id)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
