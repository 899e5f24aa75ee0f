use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DegradationSpec, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::{read_tns, write_tns, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGES_FILE: &str = "images.tns";
const LABELS_FILE: &str = "labels.tns";

/// Linear map of `[lo, hi]` onto `0..=255`; values outside are clipped and
/// halves round up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub lo: f64,
    pub hi: f64,
}

impl Default for PgmScale {
    fn default() -> Self {
        PgmScale { lo: 0.0, hi: 1.0 }
    }
}

impl PgmScale {
    pub fn quantise(&self, v: f64) -> u8 {
        let t = (v - self.lo) / (self.hi - self.lo) * 255.0;
        (t + 0.5).floor().clamp(0.0, 255.0) as u8
    }
}

/// Binary greyscale PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, image: &[f64], height: usize, width: usize, scale: PgmScale) -> Result<()> {
    if image.len() != height * width {
        return Err(Error::shape("write_pgm", format!("{} pixels for {height}x{width}", image.len())));
    }
    if !(scale.hi > scale.lo) {
        return Err(Error::InvalidInput(format!("pgm scale needs hi > lo, got [{}, {}]", scale.lo, scale.hi)));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&v| scale.quantise(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, pixels)`. Accepts comments and any maxval up
/// to 255.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut field = |name: &str| -> Result<usize> {
        token().and_then(|t| t.parse().ok()).ok_or_else(|| bad(&format!("bad {name} in header")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let end = start + width * height;
    if end > bytes.len() {
        return Err(bad("truncated raster"));
    }
    Ok((height, width, bytes[start..end].to_vec()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub generator: Option<SyntheticSpec>,
    pub degradation: Option<DegradationSpec>,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    /// Re-hashes every listed file under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for entry in &self.files {
            let path = dir.join(&entry.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::Format { path, detail: "checksum mismatch".into() });
            }
        }
        Ok(())
    }
}

/// Writes `images.tns` `[N, 1, H, W]`, `labels.tns` `[N, H, W]`, the first
/// `previews` images as PGM under `previews/`, then the manifest.
pub fn save_dataset(
    dir: &Path,
    data: &Dataset,
    generator: Option<&SyntheticSpec>,
    degradation: Option<&DegradationSpec>,
    previews: usize,
) -> Result<DatasetManifest> {
    if data.is_empty() {
        return Err(Error::InvalidInput("refusing to save an empty dataset".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&all)?;
    let labels = Tensor::new(&[data.len(), data.height, data.width], labels.iter().map(|&k| k as f64).collect())?;
    let mut written: Vec<PathBuf> = Vec::new();
    write_tns(dir.join(IMAGES_FILE), &images)?;
    written.push(IMAGES_FILE.into());
    write_tns(dir.join(LABELS_FILE), &labels)?;
    written.push(LABELS_FILE.into());
    if previews > 0 {
        let pdir = dir.join("previews");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        // normalised images mostly live within 3 std of zero
        let scale = PgmScale { lo: -3.0, hi: 3.0 };
        let label_scale = PgmScale { lo: 0.0, hi: (data.num_classes - 1) as f64 };
        for (i, s) in data.samples.iter().take(previews).enumerate() {
            let img = PathBuf::from(format!("previews/image_{i:04}.pgm"));
            write_pgm(&dir.join(&img), &s.image, data.height, data.width, scale)?;
            let lab = PathBuf::from(format!("previews/label_{i:04}.pgm"));
            let lv: Vec<f64> = s.labels.iter().map(|&k| k as f64).collect();
            write_pgm(&dir.join(&lab), &lv, data.height, data.width, label_scale)?;
            written.extend([img, lab]);
        }
    }
    let files = written
        .iter()
        .map(|rel| {
            let path = dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        schema_version: 1,
        num_samples: data.len(),
        height: data.height,
        width: data.width,
        num_classes: data.num_classes,
        generator: generator.cloned(),
        degradation: degradation.copied(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`], checking every checksum.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.verify(dir)?;
    let images = read_tns(dir.join(IMAGES_FILE))?;
    let labels = read_tns(dir.join(LABELS_FILE))?;
    let (n, h, w) = (manifest.num_samples, manifest.height, manifest.width);
    if images.shape() != [n, 1, h, w] || labels.shape() != [n, h, w] {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: format!("tensor shapes {:?} and {:?} disagree with manifest", images.shape(), labels.shape()),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let lab = &labels.data()[i * h * w..(i + 1) * h * w];
        if let Some(v) = lab.iter().find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= manifest.num_classes as f64) {
            return Err(Error::Format { path: dir.join(LABELS_FILE), detail: format!("invalid label {v}") });
        }
        samples.push(Sample {
            image: images.data()[i * h * w..(i + 1) * h * w].to_vec(),
            labels: lab.iter().map(|&v| v as usize).collect(),
        });
    }
    Ok((Dataset { height: h, width: w, num_classes: manifest.num_classes, samples }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate;

    #[test]
    fn pgm_constant_half_is_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.pgm");
        write_pgm(&path, &[0.5; 12], 3, 4, PgmScale::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let (h, w, px) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert!(px.iter().all(|&p| p == 128));
    }

    #[test]
    fn pgm_rejects_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P5\n4 3\n255\n\x01\x02").unwrap();
        assert!(read_pgm(&path).is_err());
        fs::write(&path, b"P2\n1 1\n255\n7").unwrap();
        assert!(read_pgm(&path).is_err());
        fs::write(&path, b"P5 # c\n1 1 255\n\x07").unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (1, 1, vec![7]));
    }

    #[test]
    fn dataset_round_trip_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        let data = generate(&spec, 4).unwrap();
        let manifest = save_dataset(dir.path(), &data, Some(&spec), None, 2).unwrap();
        assert_eq!(manifest.files.len(), 6);
        for f in &manifest.files {
            let bytes = fs::read(dir.path().join(&f.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), f.sha256);
        }
        let (back, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(m2, manifest);
        fs::write(dir.path().join("labels.tns"), b"junk").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
