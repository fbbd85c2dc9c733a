//! On-disk formats: text voxel grids, PGM images, the dataset manifest,
//! and the dataset config used to regenerate a corpus bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::tensor::Tensor;

use super::{DataError, Dataset, DatasetConfig, VoxelGrid};

fn parse_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Text format: header line "voxel D D D", then D^3 whitespace-separated
/// occupancy values, z-fastest.
pub fn write_voxel(path: &Path, grid: &VoxelGrid) -> Result<(), DataError> {
    let d = grid.resolution();
    let mut out = format!("voxel {d} {d} {d}\n");
    for line in grid.values().chunks(d) {
        let row: Vec<String> = line.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(" ")).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_voxel(path: &Path) -> Result<VoxelGrid, DataError> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("voxel") {
        return Err(parse_err(path, "missing voxel header"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(path, "bad dimension in voxel header"))?;
    }
    if dims[0] != dims[1] || dims[1] != dims[2] || dims[0] == 0 {
        return Err(parse_err(path, format!("non-cubic dimensions {dims:?}")));
    }
    let mut values = Vec::with_capacity(dims[0].pow(3));
    for token in tokens {
        let v: f64 = token
            .parse()
            .map_err(|_| parse_err(path, format!("bad occupancy value {token:?}")))?;
        values.push(v);
    }
    if values.len() != dims[0].pow(3) {
        return Err(parse_err(
            path,
            format!("expected {} values, found {}", dims[0].pow(3), values.len()),
        ));
    }
    VoxelGrid::from_values(dims[0], values)
}

/// Plain-text PGM (P2), 8-bit. Quantization happens only here; in-memory
/// pixels stay f64.
pub fn write_pgm(path: &Path, pixels: &Tensor) -> Result<(), DataError> {
    let shape = pixels.shape();
    if shape.len() != 2 {
        return Err(DataError::InvalidConfig(format!(
            "PGM export needs a rank-2 image, got shape {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in pixels.data().chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|p| ((p * 255.0).round().clamp(0.0, 255.0) as u32).to_string())
            .collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor, DataError> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(parse_err(path, "missing P2 header"));
    }
    let mut header = [0usize; 3];
    for h in &mut header {
        *h = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(path, "bad PGM header"))?;
    }
    let (w, h, max) = (header[0], header[1], header[2]);
    if max == 0 {
        return Err(parse_err(path, "zero max value"));
    }
    let mut data = Vec::with_capacity(w * h);
    for token in tokens {
        let v: f64 = token
            .parse()
            .map_err(|_| parse_err(path, format!("bad pixel value {token:?}")))?;
        data.push(v / max as f64);
    }
    if data.len() != w * h {
        return Err(parse_err(
            path,
            format!("expected {} pixels, found {}", w * h, data.len()),
        ));
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

/// One manifest line: what an artifact is and where it lives. `pair_id`
/// ties an image back to a source shape where one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    pub kind: String,
    pub path: String,
    pub azimuth: Option<f64>,
    pub pair_id: Option<usize>,
}

pub const MANIFEST_HEADER: &str = "id,kind,path,azimuth,pair_id";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        let az = r.azimuth.map(|a| a.to_string()).unwrap_or_default();
        let pair = r.pair_id.map(|p| p.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.id, r.kind, r.path, az, pair).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(MANIFEST_HEADER) => {}
        other => return Err(parse_err(path, format!("bad manifest header {other:?}"))),
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(path, format!("bad manifest row {line:?}")));
        }
        let opt = |s: &str, what: &str| -> Result<Option<f64>, DataError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| parse_err(path, format!("bad {what} {s:?}")))
            }
        };
        rows.push(ManifestRow {
            id: fields[0]
                .parse()
                .map_err(|_| parse_err(path, format!("bad id {:?}", fields[0])))?,
            kind: fields[1].to_string(),
            path: fields[2].to_string(),
            azimuth: opt(fields[3], "azimuth")?,
            pair_id: opt(fields[4], "pair id")?.map(|p| p as usize),
        });
    }
    Ok(rows)
}

const DATASET_KEYS: [&str; 6] = [
    "shapes",
    "views",
    "train_fraction",
    "image_size",
    "resolution",
    "seed",
];

pub fn dataset_config_to_kv(config: &DatasetConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("shapes", &config.shape_count.to_string());
    kv.set("views", &config.views.to_string());
    kv.set("train_fraction", &config.train_fraction.to_string());
    kv.set("image_size", &config.image_size.to_string());
    kv.set("resolution", &config.resolution.to_string());
    kv.set("seed", &config.seed.to_string());
    kv
}

pub fn dataset_config_from_kv(kv: &KeyValues) -> Result<DatasetConfig, DataError> {
    let bad = |e: crate::config::ConfigError| DataError::InvalidConfig(e.to_string());
    kv.check_known(&DATASET_KEYS).map_err(bad)?;
    let defaults = DatasetConfig::default();
    Ok(DatasetConfig {
        shape_count: kv.get_usize("shapes").map_err(bad)?.unwrap_or(defaults.shape_count),
        views: kv.get_usize("views").map_err(bad)?.unwrap_or(defaults.views),
        train_fraction: kv
            .get_f64("train_fraction")
            .map_err(bad)?
            .unwrap_or(defaults.train_fraction),
        image_size: kv
            .get_usize("image_size")
            .map_err(bad)?
            .unwrap_or(defaults.image_size),
        resolution: kv
            .get_usize("resolution")
            .map_err(bad)?
            .unwrap_or(defaults.resolution),
        seed: kv.get_u64("seed").map_err(bad)?.unwrap_or(defaults.seed),
    })
}

/// Lay a dataset out on disk: voxels/, images/, manifest.csv, and
/// dataset.cfg (enough to regenerate the corpus exactly).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir.join("voxels"))?;
    fs::create_dir_all(dir.join("images"))?;
    let mut rows = Vec::new();
    let mut next_id = 0;
    let mut row = |kind: &str, path: String, azimuth: Option<f64>, pair: Option<usize>| {
        rows.push(ManifestRow {
            id: next_id,
            kind: kind.to_string(),
            path,
            azimuth,
            pair_id: pair,
        });
        next_id += 1;
    };

    for item in &data.shapes {
        let rel = format!("voxels/shape{:04}.txt", item.id);
        write_voxel(&dir.join(&rel), &item.grid)?;
        row("voxel", rel, None, Some(item.id));
    }
    for (i, sample) in data.synth.iter().enumerate() {
        let rel = format!("images/synth{:05}.pgm", i);
        write_pgm(&dir.join(&rel), &sample.pixels)?;
        row("synth", rel, Some(sample.azimuth), sample.shape_id);
    }
    for (i, sample) in data.real.iter().enumerate() {
        let rel = format!("images/real{:05}.pgm", i);
        write_pgm(&dir.join(&rel), &sample.pixels)?;
        row("real", rel, Some(sample.azimuth), Some(data.real_sources[i]));
    }
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    fs::write(
        dir.join("dataset.cfg"),
        dataset_config_to_kv(&data.config).render(),
    )?;
    Ok(())
}

/// Rebuild the corpus from a directory's dataset.cfg. Generation is
/// deterministic, so this reproduces exactly what was written.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let cfg_path = dir.join("dataset.cfg");
    let kv = KeyValues::from_file(&cfg_path)
        .map_err(|e| parse_err(&cfg_path, e.to_string()))?;
    Dataset::generate(&dataset_config_from_kv(&kv)?)
}

pub fn dataset_dir_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let rows = read_manifest(&dir.join("manifest.csv"))?;
    Ok(rows.into_iter().map(|r| dir.join(r.path)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shape, render_view, ShapeRecipe};

    #[test]
    fn voxel_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let grid = generate_shape(&ShapeRecipe::solid_box(0.5), 16).unwrap();
        let path = dir.path().join("g.txt");
        write_voxel(&path, &grid).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("voxel 16 16 16\n"));
        assert_eq!(read_voxel(&path).unwrap(), grid);
    }

    #[test]
    fn voxel_parse_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "voxel 2 2 2\n0 1 0\n").unwrap();
        let err = read_voxel(&path).unwrap_err();
        assert!(err.to_string().contains("bad.txt"), "{err}");
        std::fs::write(&path, "grid 2 2 2\n").unwrap();
        assert!(read_voxel(&path).is_err());
    }

    #[test]
    fn pgm_round_trip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let grid = generate_shape(&ShapeRecipe::solid_box(0.5), 16).unwrap();
        let img = render_view(&grid, 45.0, 16);
        let path = dir.path().join("img.pgm");
        write_pgm(&path, &img.pixels).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[16, 16]);
        for (a, b) in img.pixels.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
        write_pgm(&path, &img.pixels).unwrap();
        let second = read_pgm(&path).unwrap();
        assert_eq!(back.data(), second.data());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ManifestRow {
                id: 0,
                kind: "voxel".into(),
                path: "voxels/shape0000.txt".into(),
                azimuth: None,
                pair_id: Some(0),
            },
            ManifestRow {
                id: 1,
                kind: "synth".into(),
                path: "images/synth00000.pgm".into(),
                azimuth: Some(15.0),
                pair_id: Some(0),
            },
        ];
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
        write_manifest(&path, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{MANIFEST_HEADER}\n")
        );
    }

    #[test]
    fn dataset_directory_regenerates_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetConfig {
            shape_count: 4,
            views: 2,
            train_fraction: 0.7,
            image_size: 16,
            resolution: 16,
            seed: 3,
        };
        let data = Dataset::generate(&config).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let again = load_dataset(dir.path()).unwrap();
        assert_eq!(again.config, config);
        for (a, b) in data.synth.iter().zip(&again.synth) {
            assert_eq!(a.pixels.data(), b.pixels.data());
        }
        assert_eq!(again.test_ids.len(), 1);
        let files = dataset_dir_files(dir.path()).unwrap();
        assert_eq!(files.len(), 4 + 4 * 2 + 2);
        for f in files {
            assert!(f.exists(), "{f:?} missing");
        }
    }

    #[test]
    fn dataset_config_rejects_unknown_keys() {
        let kv = KeyValues::parse("shapes = 4\nviewz = 2\n").unwrap();
        assert!(dataset_config_from_kv(&kv).is_err());
        let ok = KeyValues::parse("shapes = 4\nviews = 2\nseed = 9\n").unwrap();
        let config = dataset_config_from_kv(&ok).unwrap();
        assert_eq!(config.shape_count, 4);
        assert_eq!(config.views, 2);
        assert_eq!(config.seed, 9);
        assert_eq!(config.train_fraction, 0.7);
    }
}
