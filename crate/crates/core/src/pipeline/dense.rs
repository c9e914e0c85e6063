//! Tiled full-volume evaluation of the frozen backbone and proposal network.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{BnMode, ModelParams, Net, Section, MIN_PATCH};
use crate::nn::{Graph, Tensor};
use crate::types::{voxel_count, Dims, Voxel, Volume};

/// Full-volume network outputs, channel-major like [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMaps {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    /// Regressed proximity map, one channel.
    pub distance: Vec<f32>,
    /// Backbone features, `F` channels.
    pub features: Vec<f32>,
    pub n_features: usize,
    /// Positive-class probability of the proposal network (empty unless requested).
    pub score: Vec<f32>,
    /// Offset (x, y, z) and scale channels of the proposal network (empty unless requested).
    pub reg: Vec<f32>,
}

impl DenseMaps {
    pub fn has_rpn(&self) -> bool {
        !self.score.is_empty()
    }
}

/// Tile start positions along one axis: multiples of `stride`, with the last
/// tile flush against the end.
pub fn tile_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let mut o: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < dim).collect();
    o.push(dim - tile);
    o.dedup();
    o
}

/// Copies the box `[origin, origin + extent)` of a channel-major array.
pub(crate) fn extract_box(data: &[f32], channels: usize, dims: Dims, origin: Voxel, extent: Dims) -> Vec<f32> {
    let n = voxel_count(dims);
    let mut out = Vec::with_capacity(channels * voxel_count(extent));
    for c in 0..channels {
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                let start = c * n + ((origin[2] + z) * dims[1] + origin[1] + y) * dims[0] + origin[0];
                out.extend_from_slice(&data[start..start + extent[0]]);
            }
        }
    }
    out
}

fn accumulate(acc: &mut [f64], src: &[f32], channels: usize, dims: Dims, origin: Voxel, extent: Dims) {
    let n = voxel_count(dims);
    let m = voxel_count(extent);
    for c in 0..channels {
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                let dst = c * n + ((origin[2] + z) * dims[1] + origin[1] + y) * dims[0] + origin[0];
                let s = c * m + (z * extent[1] + y) * extent[0];
                for x in 0..extent[0] {
                    acc[dst + x] += src[s + x] as f64;
                }
            }
        }
    }
}

struct TileOut {
    origin: Voxel,
    distance: Vec<f32>,
    features: Vec<f32>,
    score: Vec<f32>,
    reg: Vec<f32>,
}

/// Runs the backbone (and, with `with_rpn`, the proposal network) over
/// `patch`-sized tiles spaced by `stride` and averages overlapping outputs.
pub fn dense_maps(volume: &Volume, params: &ModelParams, patch: usize, stride: usize, with_rpn: bool) -> Result<DenseMaps> {
    let dims = volume.dims;
    let extent = dims.map(|d| d.min(patch));
    let smallest = *extent.iter().min().unwrap();
    if smallest < MIN_PATCH {
        return Err(Error::PatchTooSmall {
            got: smallest,
            min: MIN_PATCH,
        });
    }
    if stride == 0 {
        return Err(Error::Config("tile stride must be ≥ 1".into()));
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|a| tile_origins(dims[a], extent[a], stride)).collect();
    let mut origins = Vec::new();
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                origins.push([x, y, z]);
            }
        }
    }
    let f = params.spec().features;
    let sections: &[Section] = if with_rpn {
        &[Section::Backbone, Section::Rpn]
    } else {
        &[Section::Backbone]
    };
    let tiles: Vec<TileOut> = origins
        .par_iter()
        .map(|&origin| -> Result<TileOut> {
            let x = extract_box(&volume.data, volume.channels, dims, origin, extent);
            let mut g = Graph::<f32>::new();
            let net = Net::bind(params, &mut g, sections, None);
            let xv = g.input(Tensor::new(vec![volume.channels, extent[2], extent[1], extent[0]], x)?);
            let b = net.backbone(&mut g, xv, BnMode::Eval)?;
            let (mut score, mut reg) = (Vec::new(), Vec::new());
            if with_rpn {
                let r = net.rpn(&mut g, b.features)?;
                let s = g.softmax_channels(r.cls_logits);
                score = g.value(s).channel(1).to_vec();
                reg = g.value(r.reg).data().to_vec();
            }
            Ok(TileOut {
                origin,
                distance: g.value(b.distance).data().to_vec(),
                features: g.value(b.features).data().to_vec(),
                score,
                reg,
            })
        })
        .collect::<Result<_>>()?;

    let n = voxel_count(dims);
    let mut count = vec![0f64; n];
    let mut dist = vec![0f64; n];
    let mut feat = vec![0f64; f * n];
    let (mut score, mut reg) = if with_rpn {
        (vec![0f64; n], vec![0f64; 4 * n])
    } else {
        (Vec::new(), Vec::new())
    };
    let ones = vec![1f32; voxel_count(extent)];
    for t in &tiles {
        accumulate(&mut count, &ones, 1, dims, t.origin, extent);
        accumulate(&mut dist, &t.distance, 1, dims, t.origin, extent);
        accumulate(&mut feat, &t.features, f, dims, t.origin, extent);
        if with_rpn {
            accumulate(&mut score, &t.score, 1, dims, t.origin, extent);
            accumulate(&mut reg, &t.reg, 4, dims, t.origin, extent);
        }
    }
    let avg = |acc: Vec<f64>| -> Vec<f32> {
        acc.iter()
            .enumerate()
            .map(|(i, &v)| (v / count[i % n]) as f32)
            .collect()
    };
    Ok(DenseMaps {
        dims,
        spacing_mm: volume.spacing_mm,
        distance: avg(dist),
        features: avg(feat),
        n_features: f,
        score: avg(score),
        reg: avg(reg),
    })
}
