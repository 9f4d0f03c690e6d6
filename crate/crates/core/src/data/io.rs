//! Dataset persistence: JSON-lines manifest plus one binary image file per
//! scene ("TVQP": u32 H, u32 W, 3 optical float32 LE planes, 1 thermal).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QAPair, RenderedPair, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"TVQP";
const MANIFEST: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(flatten)]
    scene: SceneSpec,
    qa: Vec<QAPair>,
}

pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    for s in samples {
        let record = ManifestRecord {
            scene: s.scene.clone(),
            qa: s.qas.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        manifest.write_all(line.as_bytes())?;
        manifest.write_all(b"\n")?;
        write_pair(&s.pair, s.scene.width, s.scene.height, &dir.join(scene_file(s.scene.id)))?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn scene_file(id: u64) -> String {
    format!("scene_{id}.bin")
}

fn write_pair(pair: &RenderedPair, w: u32, h: u32, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(IMAGE_MAGIC)?;
    f.write_all(&h.to_le_bytes())?;
    f.write_all(&w.to_le_bytes())?;
    for &v in pair.opt.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    for &v in pair.tir.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn read_pair(path: &Path, expect_w: u32, expect_h: u32) -> Result<RenderedPair> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "image magic")?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:?} in {path:?}")));
    }
    let h = read_u32(&mut r, "height")?;
    let w = read_u32(&mut r, "width")?;
    if (w, h) != (expect_w, expect_h) {
        return Err(Error::Consistency(format!(
            "image header {w}x{h} disagrees with manifest {expect_w}x{expect_h} for {path:?}"
        )));
    }
    let (wu, hu) = (w as usize, h as usize);
    let mut read_plane_stack = |planes: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(planes * wu * hu);
        let mut buf = [0u8; 4];
        for _ in 0..planes * wu * hu {
            read_exact(&mut r, &mut buf, "pixels")?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Tensor::new(vec![planes, hu, wu], data).map_err(|e| Error::Format(e.to_string()))
    };
    let opt = read_plane_stack(3)?;
    let tir = read_plane_stack(1)?;
    Ok(RenderedPair { opt, tir })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Format(format!("manifest not found in {dir:?}")));
    }
    let reader = BufReader::new(File::open(&manifest_path)?);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Corrupt(format!("manifest line {}: {e}", ln + 1)))?;
        let pair = read_pair(
            &dir.join(scene_file(record.scene.id)),
            record.scene.width,
            record.scene.height,
        )?;
        out.push(SceneSample {
            scene: record.scene,
            pair,
            qas: record.qa,
        });
    }
    out.sort_by_key(|s| s.scene.id);
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    #[test]
    fn round_trip_ten_scenes() {
        let cfg = DatasetConfig {
            n_scenes: 10,
            seed: 3,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.scene, b.scene);
            assert_eq!(a.qas, b.qas);
            // Pixels were quantized through f32 at render time, so the
            // on-disk round trip is exact.
            assert!(a.pair.opt.bits_eq(&b.pair.opt));
            assert!(a.pair.tir.bits_eq(&b.pair.tir));
        }
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_header_dims_is_consistency_error() {
        let cfg = DatasetConfig {
            n_scenes: 1,
            seed: 3,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        // Corrupt the header width field.
        let img = dir.path().join(scene_file(0));
        let mut bytes = fs::read(&img).unwrap();
        bytes[8] = 99;
        fs::write(&img, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Consistency(_))));
    }

    #[test]
    fn truncated_image_is_corrupt_error() {
        let cfg = DatasetConfig {
            n_scenes: 1,
            seed: 4,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let img = dir.path().join(scene_file(0));
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corrupt(_))));
    }
}
