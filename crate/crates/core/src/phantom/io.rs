//! On-disk dataset layout: `case_<k>/{volume.raw, seg.raw, case.json}` plus
//! a top-level `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_case, Case, PhantomConfig};
use crate::error::{Error, Result};
use crate::fields::LabelField;
use crate::types::{linear_index, voxel_count, Dims, EsoClass, EsoObject, Voxel, Volume};

pub const VOLUME_RAW: &str = "volume.raw";
pub const SEG_RAW: &str = "seg.raw";
pub const CASE_JSON: &str = "case.json";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseHeader {
    dims: Dims,
    spacing_mm: [f64; 3],
    channels: usize,
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    id: u32,
    centre_mm: [f64; 3],
    scale: f64,
    voxel_count: usize,
    voxels: Vec<Voxel>,
    true_class: EsoClass,
    rater_votes: Vec<EsoClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: PhantomConfig,
    pub cases: Vec<String>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

fn read_raw(path: &Path, expected_values: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = expected_values as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::RawSizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = &case.volume;
    let vol: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    let p = dir.join(VOLUME_RAW);
    fs::write(&p, vol).map_err(|e| Error::io(&p, e))?;
    let seg: Vec<u8> = case.seg_mask.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    let p = dir.join(SEG_RAW);
    fs::write(&p, seg).map_err(|e| Error::io(&p, e))?;
    let header = CaseHeader {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        channels: v.channels,
        objects: case
            .objects
            .iter()
            .map(|o| ObjectRecord {
                id: o.id,
                centre_mm: o.centre_mm,
                scale: o.scale,
                voxel_count: o.voxels.len(),
                voxels: o.voxels.clone(),
                true_class: o.true_class,
                rater_votes: o.rater_votes.clone(),
            })
            .collect(),
    };
    write_json(&dir.join(CASE_JSON), &header)
}

pub fn read_case(dir: &Path) -> Result<Case> {
    let json_path = dir.join(CASE_JSON);
    let h: CaseHeader = read_json(&json_path)?;
    let corrupt = |msg: String| Error::Corrupt(format!("{}: {msg}", json_path.display()));
    if h.dims.contains(&0) || h.channels == 0 {
        return Err(corrupt(format!("dims {:?} / channels {} invalid", h.dims, h.channels)));
    }
    let n = voxel_count(h.dims);
    let data = read_raw(&dir.join(VOLUME_RAW), h.channels * n)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect();
    let volume = Volume::from_data(h.dims, h.spacing_mm, h.channels, data)?;
    let seg_data: Vec<u32> = read_raw(&dir.join(SEG_RAW), n)?
        .into_iter()
        .map(u32::from_le_bytes)
        .collect();
    let seg_mask = LabelField {
        dims: h.dims,
        spacing_mm: h.spacing_mm,
        data: seg_data,
    };
    let mut objects = Vec::with_capacity(h.objects.len());
    for r in h.objects {
        if r.voxel_count != r.voxels.len() {
            return Err(corrupt(format!(
                "object {} lists {} voxels but voxel_count is {}",
                r.id,
                r.voxels.len(),
                r.voxel_count
            )));
        }
        for &v in &r.voxels {
            if (0..3).any(|a| v[a] >= h.dims[a]) {
                return Err(corrupt(format!("object {} voxel {v:?} outside {:?}", r.id, h.dims)));
            }
            if seg_mask.data[linear_index(h.dims, v)] != r.id {
                return Err(corrupt(format!("object {} voxel {v:?} not labelled in {SEG_RAW}", r.id)));
            }
        }
        objects.push(EsoObject {
            id: r.id,
            centre_mm: r.centre_mm,
            voxels: r.voxels,
            scale: r.scale,
            true_class: r.true_class,
            rater_votes: r.rater_votes,
        });
    }
    Ok(Case {
        volume,
        objects,
        seg_mask,
    })
}

pub fn case_dir_name(k: usize) -> String {
    format!("case_{k}")
}

/// Generates `n_cases` cases (in parallel) and writes them with a manifest.
pub fn write_dataset(root: &Path, cfg: &PhantomConfig, n_cases: usize) -> Result<(Manifest, Vec<Case>)> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let cases: Vec<Case> = (0..n_cases)
        .into_par_iter()
        .map(|k| generate_case(cfg, k as u64))
        .collect::<Result<_>>()?;
    let names: Vec<String> = (0..n_cases).map(case_dir_name).collect();
    for (name, case) in names.iter().zip(&cases) {
        write_case(&root.join(name), case)?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        cases: names,
    };
    write_json(&root.join(MANIFEST_JSON), &manifest)?;
    Ok((manifest, cases))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join(MANIFEST_JSON))
}

pub fn load_case(root: &Path, name: &str) -> Result<Case> {
    read_case(&case_path(root, name))
}

pub fn case_path(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}
