//! On-disk dataset formats.
//!
//! Layout: a root directory with a `manifest.csv` (`file,sao2_percent` or
//! `file,class`; paths relative to the root, UTF-8). A file directly under
//! the root is a single-slice instance named by its stem; files inside a
//! subdirectory form one multi-slice instance named by that directory, rows
//! in slice order. Images are 8-bit grayscale PNG. A `.raw` entry is a
//! little-endian f32 volume with a `{"dims":[D,H,W]}` JSON sidecar and is
//! expanded into slices on load.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, slice_volume, Dataset, LabeledInstance, Provenance, SaO2Class};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct VolumeMeta {
    dims: [usize; 3],
}

/// Writes a `[D, H, W]` volume as raw little-endian f32 plus a JSON sidecar
/// describing its dims (same path, `.json` extension).
pub fn write_volume(path: &Path, volume: &Tensor) -> Result<()> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("write_volume expects [D,H,W], got {s:?}")));
    }
    let mut bytes = Vec::with_capacity(volume.numel() * 4);
    for &v in volume.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = VolumeMeta {
        dims: [s[0], s[1], s[2]],
    };
    let sidecar = path.with_extension("json");
    fs::write(&sidecar, serde_json::to_string_pretty(&meta).expect("serializable"))
        .map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let sidecar = path.with_extension("json");
    let meta_text = fs::read_to_string(&sidecar)
        .map_err(|e| Error::ingest(&sidecar, format!("missing volume sidecar: {e}")))?;
    let meta: VolumeMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::ingest(&sidecar, format!("bad volume sidecar: {e}")))?;
    let [d, h, w] = meta.dims;
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    if bytes.len() != d * h * w * 4 {
        return Err(Error::ingest(
            path,
            format!(
                "volume holds {} bytes, dims {:?} require {}",
                bytes.len(),
                meta.dims,
                d * h * w * 4
            ),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(vec![d, h, w], data)
}

fn image_to_png_bytes(image: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::dim(format!(
            "PNG export expects single-channel [H,W,1], got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((w as u32, h as u32, raw))
}

fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, raw) = image_to_png_bytes(image)?;
    let buf = image::GrayImage::from_raw(w, h, raw)
        .ok_or_else(|| Error::Format("pixel buffer size mismatch".to_string()))?;
    buf.save(path)
        .map_err(|e| Error::ingest(path, format!("PNG encode failed: {e}")))
}

fn load_png(path: &Path, target_size: Option<usize>) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, format!("undecodable image: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    let t = Tensor::new(vec![h as usize, w as usize, 1], data)?;
    match target_size {
        Some(s) if s != h as usize || s != w as usize => resize_bilinear(&t, s, s),
        _ => Ok(t),
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains('/') || id.contains('\\') || id == ".." {
        return Err(Error::contract(format!(
            "instance id {id:?} is not filesystem-safe"
        )));
    }
    Ok(())
}

/// Writes every instance as grayscale PNG slices plus a `manifest.csv`.
/// Single-slice instances live directly under the root; multi-slice ones get
/// a subdirectory each.
pub fn save_dataset_folder(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::from("file,sao2_percent\n");
    for inst in &dataset.instances {
        check_id(&inst.instance_id)?;
        if inst.slices.len() == 1 {
            let rel = format!("{}.png", inst.instance_id);
            save_png(&root.join(&rel), &inst.slices[0])?;
            manifest.push_str(&format!("{rel},{}\n", inst.sao2_percent));
        } else {
            let dir = root.join(&inst.instance_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (k, slice) in inst.slices.iter().enumerate() {
                let rel = format!("{}/slice_{k:03}.png", inst.instance_id);
                save_png(&root.join(&rel), slice)?;
                manifest.push_str(&format!("{rel},{}\n", inst.sao2_percent));
            }
        }
    }
    let mpath = root.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

enum LabelColumn {
    Percent,
    Class,
}

struct ManifestRow {
    file: String,
    percent: f64,
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::ingest(path, format!("cannot open manifest: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ingest(path, format!("bad manifest header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    let label = match cols.as_slice() {
        ["file", "sao2_percent"] => LabelColumn::Percent,
        ["file", "class"] => LabelColumn::Class,
        other => {
            return Err(Error::ingest(
                path,
                format!("manifest header must be file,sao2_percent or file,class; got {other:?}"),
            ))
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::ingest(path, format!("bad manifest row: {e}")))?;
        if record.len() != 2 {
            return Err(Error::ingest(
                path,
                format!("manifest row needs 2 fields, got {}", record.len()),
            ));
        }
        let file = record[0].trim().to_string();
        let percent = match label {
            LabelColumn::Percent => record[1].trim().parse::<f64>().map_err(|e| {
                Error::ingest(path, format!("bad sao2_percent for {file}: {e}"))
            })?,
            LabelColumn::Class => SaO2Class::parse(&record[1])
                .map_err(|e| Error::ingest(path, format!("bad class for {file}: {e}")))?
                .representative_percent(),
        };
        rows.push(ManifestRow { file, percent });
    }
    Ok(rows)
}

/// Loads a dataset from a manifest-driven image folder. Images decode to
/// grayscale floats in [0, 1]; `target_size` resizes slices to a square,
/// `volume_stride` thins `.raw` volume slices.
pub fn load_image_folder(
    root: &Path,
    manifest: Option<&Path>,
    target_size: Option<usize>,
    volume_stride: usize,
) -> Result<Dataset> {
    let default_manifest = root.join(MANIFEST_NAME);
    let manifest_path = manifest.unwrap_or(&default_manifest);
    let rows = parse_manifest(manifest_path)?;

    // instance = parent directory when present, file stem otherwise
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&ManifestRow>> =
        std::collections::HashMap::new();
    for row in &rows {
        let rel = Path::new(&row.file);
        let group = match rel.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_string_lossy().replace('\\', "/"),
            _ => rel
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.file.clone()),
        };
        if !groups.contains_key(&group) {
            order.push(group.clone());
        }
        groups.entry(group).or_default().push(row);
    }

    let mut instances = Vec::new();
    for id in order {
        let members = &groups[&id];
        let percent = members[0].percent;
        for m in members.iter() {
            if m.percent != percent {
                return Err(Error::ingest(
                    root.join(&m.file),
                    format!(
                        "instance {id} mixes labels {} and {}",
                        percent, m.percent
                    ),
                ));
            }
        }
        let mut slices = Vec::new();
        for m in members.iter() {
            let full = root.join(&m.file);
            if !full.exists() {
                return Err(Error::ingest(&full, "file not found".to_string()));
            }
            if full.extension().is_some_and(|e| e == "raw") {
                let volume = read_volume(&full)?;
                for s in slice_volume(&volume, volume_stride)? {
                    slices.push(match target_size {
                        Some(t) => resize_bilinear(&s, t, t)?,
                        None => s,
                    });
                }
            } else {
                slices.push(load_png(&full, target_size)?);
            }
        }
        instances.push(LabeledInstance::new(id, slices, percent)?);
    }
    Dataset::new(instances, Provenance::Folder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_longtail, SynthSpec};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn folder_round_trip_within_quantization() {
        let ds = synth_longtail(&SynthSpec {
            counts: [2, 3, 2],
            image_size: 16,
            slices_per_instance: 2,
            seed: 5,
        })
        .unwrap();
        let dir = tmp();
        save_dataset_folder(&ds, dir.path()).unwrap();
        let back = load_image_folder(dir.path(), None, None, 1).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.class_counts, ds.class_counts);
        for (a, b) in ds.instances.iter().zip(&back.instances) {
            assert_eq!(a.instance_id, b.instance_id);
            assert_eq!(a.slices.len(), b.slices.len());
            assert!((a.sao2_percent - b.sao2_percent).abs() < 1e-12);
            for (sa, sb) in a.slices.iter().zip(&b.slices) {
                assert_eq!(sa.shape(), sb.shape());
                for (x, y) in sa.data().iter().zip(sb.data()) {
                    assert!((x - y).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn empty_manifest_loads_empty_dataset() {
        let dir = tmp();
        fs::write(dir.path().join(MANIFEST_NAME), "file,sao2_percent\n").unwrap();
        let ds = load_image_folder(dir.path(), None, None, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tmp();
        fs::write(
            dir.path().join(MANIFEST_NAME),
            "file,sao2_percent\nghost.png,94.0\n",
        )
        .unwrap();
        let err = load_image_folder(dir.path(), None, None, 1).unwrap_err();
        assert!(err.to_string().contains("ghost.png"), "{err}");
    }

    #[test]
    fn class_only_manifest_maps_to_representative_percent() {
        let ds = synth_longtail(&SynthSpec {
            counts: [1, 1, 1],
            image_size: 16,
            slices_per_instance: 1,
            seed: 2,
        })
        .unwrap();
        let dir = tmp();
        save_dataset_folder(&ds, dir.path()).unwrap();
        let mut manifest = String::from("file,class\n");
        for inst in &ds.instances {
            manifest.push_str(&format!("{}.png,{}\n", inst.instance_id, inst.sao2_class));
        }
        fs::write(dir.path().join(MANIFEST_NAME), manifest).unwrap();
        let back = load_image_folder(dir.path(), None, None, 1).unwrap();
        for (a, b) in ds.instances.iter().zip(&back.instances) {
            assert_eq!(a.sao2_class, b.sao2_class);
            assert_eq!(b.sao2_percent, b.sao2_class.representative_percent());
        }
    }

    #[test]
    fn mixed_labels_within_instance_rejected() {
        let ds = synth_longtail(&SynthSpec {
            counts: [1, 1, 1],
            image_size: 16,
            slices_per_instance: 2,
            seed: 2,
        })
        .unwrap();
        let dir = tmp();
        save_dataset_folder(&ds, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // corrupt the label of the second slice of the first instance
        let first_id = &ds.instances[0].instance_id;
        for line in lines.iter_mut() {
            if line.starts_with(&format!("{first_id}/slice_001")) {
                let file = line.split(',').next().unwrap().to_string();
                *line = format!("{file},97.0");
            }
        }
        fs::write(&manifest_path, lines.join("\n") + "\n").unwrap();
        let err = load_image_folder(dir.path(), None, None, 1).unwrap_err();
        assert!(err.to_string().contains("mixes labels"), "{err}");
    }

    #[test]
    fn target_size_resizes_slices() {
        let ds = synth_longtail(&SynthSpec {
            counts: [1, 1, 1],
            image_size: 16,
            slices_per_instance: 1,
            seed: 3,
        })
        .unwrap();
        let dir = tmp();
        save_dataset_folder(&ds, dir.path()).unwrap();
        let back = load_image_folder(dir.path(), None, Some(8), 1).unwrap();
        assert_eq!(back.instances[0].slice_shape(), &[8, 8, 1]);
    }

    #[test]
    fn volume_round_trip_and_ingest() {
        let dir = tmp();
        let volume = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|v| (v % 97) as f64 / 96.0).collect(),
        )
        .unwrap();
        let vpath = dir.path().join("vol-a.raw");
        write_volume(&vpath, &volume).unwrap();
        let back = read_volume(&vpath).unwrap();
        assert_eq!(back.shape(), volume.shape());
        for (a, b) in volume.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6); // f32 storage
        }
        fs::write(
            dir.path().join(MANIFEST_NAME),
            "file,sao2_percent\nvol-a.raw,91.5\n",
        )
        .unwrap();
        let ds = load_image_folder(dir.path(), None, None, 1).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.instances[0].slices.len(), 3);
        assert_eq!(ds.instances[0].slice_shape(), &[8, 8, 1]);
        let ds2 = load_image_folder(dir.path(), None, None, 2).unwrap();
        assert_eq!(ds2.instances[0].slices.len(), 2);
    }

    #[test]
    fn truncated_volume_rejected() {
        let dir = tmp();
        let volume = Tensor::zeros(vec![2, 4, 4]);
        let vpath = dir.path().join("vol.raw");
        write_volume(&vpath, &volume).unwrap();
        let bytes = fs::read(&vpath).unwrap();
        fs::write(&vpath, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_volume(&vpath).is_err());
    }
}
