//! Forward construction of the three network sections on a [`Graph`].

use std::collections::HashMap;

use super::{ModelParams, Section, MIN_PATCH};
use crate::error::{Error, Result};
use crate::nn::{BatchStats, Graph, Real, Tensor, Var};
use crate::types::{linear_index, voxel_count, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Spatial batch statistics; observed statistics are returned.
    Train,
    /// Stored running statistics.
    Eval,
}

pub struct BackboneOut {
    pub distance: Var,
    pub features: Var,
    /// Batch statistics per batch norm, in evaluation order (train mode only).
    pub stats: Vec<(String, BatchStats)>,
}

pub struct RpnOut {
    /// `[2, D, H, W]` logits; channel 1 is "object centre".
    pub cls_logits: Var,
    /// `[4, D, H, W]`: offset to the centre (voxels, x/y/z) and scale (voxels).
    pub reg: Var,
}

pub struct RcnOut {
    pub class_logits: Var,
    /// Centre residual (voxels, x/y/z) and multiplicative scale factor.
    pub box_residual: Var,
    pub rater_logits: Vec<Var>,
}

/// Parameters of a [`ModelParams`] bound as leaves of one graph.
pub struct Net<'a> {
    params: &'a ModelParams,
    vars: HashMap<&'a str, Var>,
    trainable: Vec<(usize, Var)>,
}

impl<'a> Net<'a> {
    /// Binds every tensor of `sections`; those of `train` become trainable.
    pub fn bind<T: Real>(
        params: &'a ModelParams,
        g: &mut Graph<T>,
        sections: &[Section],
        train: Option<Section>,
    ) -> Self {
        let mut vars = HashMap::new();
        let mut trainable = Vec::new();
        for (i, name) in params.names().iter().enumerate() {
            let Some(sec) = Section::of(name) else { continue };
            if !sections.contains(&sec) || super::is_running_stat(name) {
                continue;
            }
            let t = params.tensors()[i].cast::<T>();
            let v = if train == Some(sec) {
                let v = g.param(t);
                trainable.push((i, v));
                v
            } else {
                g.input(t)
            };
            vars.insert(name.as_str(), v);
        }
        Self {
            params,
            vars,
            trainable,
        }
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    /// `(manifest index, graph leaf)` of every trainable tensor, in manifest order.
    pub fn trainable(&self) -> &[(usize, Var)] {
        &self.trainable
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("parameter {name} not bound")))
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        g.conv3d(x, w, Some(b), dilation)
    }

    fn bn_relu<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        name: &str,
        mode: BnMode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let y = match mode {
            BnMode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta)?;
                stats.push((name.to_string(), s));
                y
            }
            BnMode::Eval => {
                let (m, v) = self.params.running_stats(name)?;
                g.batch_norm_eval(x, gamma, beta, &m, &v)?
            }
        };
        Ok(g.relu(y))
    }

    /// `[C_in, P, P, P]` patch to a 1-channel proximity map and `F` feature channels.
    pub fn backbone<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: BnMode) -> Result<BackboneOut> {
        let shape = g.value(x).shape().to_vec();
        let spec = self.params.spec();
        if shape.len() != 4 || shape[0] != spec.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects [{}, D, H, W] input, got {shape:?}",
                spec.in_channels
            )));
        }
        let smallest = shape[1..].iter().copied().min().unwrap();
        if smallest < MIN_PATCH {
            return Err(Error::PatchTooSmall {
                got: smallest,
                min: MIN_PATCH,
            });
        }
        let mut stats = Vec::new();
        let mut h = self.conv(g, x, "backbone.init", 1)?;
        for (l, &d) in spec.dilations.iter().enumerate() {
            let skip = h;
            for c in 0..spec.convs_per_level {
                let name = format!("backbone.l{l}.c{c}");
                h = self.bn_relu(g, h, &format!("{name}.bn"), mode, &mut stats)?;
                h = self.conv(g, h, &name, d)?;
            }
            h = g.add(h, skip)?;
        }
        let features = h;
        let h = self.bn_relu(g, features, "backbone.head.bn", mode, &mut stats)?;
        let distance = self.conv(g, h, "backbone.head", 1)?;
        Ok(BackboneOut {
            distance,
            features,
            stats,
        })
    }

    pub fn rpn<T: Real>(&self, g: &mut Graph<T>, features: Var) -> Result<RpnOut> {
        let s = self.conv(g, features, "rpn.shared", 1)?;
        let s = g.relu(s);
        Ok(RpnOut {
            cls_logits: self.conv(g, s, "rpn.cls", 1)?,
            reg: self.conv(g, s, "rpn.reg", 1)?,
        })
    }

    /// Crop of `[C_in + F, s, s, s]` (any `s`) to class, box and per-rater outputs.
    pub fn rcn<T: Real>(&self, g: &mut Graph<T>, crop: Var) -> Result<RcnOut> {
        let spec = self.params.spec();
        let shape = g.value(crop).shape().to_vec();
        if shape.len() != 4 || shape[0] != spec.rcn_in_channels() {
            return Err(Error::Shape(format!(
                "rcn expects [{}, s, s, s] crop, got {shape:?}",
                spec.rcn_in_channels()
            )));
        }
        let h = self.conv(g, crop, "rcn.conv", 1)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h);
        let fw = self.var("rcn.fc.w")?;
        let fb = self.var("rcn.fc.b")?;
        let h = g.linear(h, fw, fb)?;
        let h = g.relu(h);
        let head = |g: &mut Graph<T>, name: &str| -> Result<Var> {
            let w = self.var(&format!("{name}.w"))?;
            let b = self.var(&format!("{name}.b"))?;
            g.linear(h, w, b)
        };
        let class_logits = head(g, "rcn.cls")?;
        let box_residual = head(g, "rcn.box")?;
        let rater_logits = (0..spec.n_raters)
            .map(|r| head(g, &format!("rcn.rater{r}")))
            .collect::<Result<_>>()?;
        Ok(RcnOut {
            class_logits,
            box_residual,
            rater_logits,
        })
    }
}

/// Crop side for a proposal of `scale` voxels: `round(1.5·scale)` clamped to
/// `[7, 15]`, rounded up to odd so the crop is centred on a voxel.
pub fn crop_side(scale: f64) -> usize {
    let s = if scale.is_finite() { (1.5 * scale).round() } else { 7.0 };
    let s = s.clamp(7.0, 15.0) as usize;
    s | 1
}

/// Cube of `side` voxels centred on `centre`, channels of every source
/// stacked in order. Positions outside the volume are zero; the flag reports
/// whether any were.
pub fn extract_crop(sources: &[(&[f32], usize)], dims: Dims, centre: [i64; 3], side: usize) -> (Tensor<f32>, bool) {
    let n = voxel_count(dims);
    let channels: usize = sources.iter().map(|s| s.1).sum();
    let half = (side / 2) as i64;
    let origin = centre.map(|c| c - half);
    let s3 = side * side * side;
    let mut out = vec![0.0f32; channels * s3];
    let mut clamped = false;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let p = [origin[0] + x as i64, origin[1] + y as i64, origin[2] + z as i64];
                if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as i64) {
                    clamped = true;
                    continue;
                }
                let src = linear_index(dims, p.map(|c| c as usize));
                let dst = (z * side + y) * side + x;
                let mut ch = 0;
                for &(data, c) in sources {
                    for k in 0..c {
                        out[(ch + k) * s3 + dst] = data[k * n + src];
                    }
                    ch += c;
                }
            }
        }
    }
    let t = Tensor::new(vec![channels, side, side, side], out).expect("crop shape");
    (t, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes() {
        let p = ModelParams::init(&ModelSpec::default(), 1).unwrap();
        let mut g = Graph::<f32>::new();
        let net = Net::bind(&p, &mut g, &[Section::Backbone, Section::Rpn, Section::Rcn], None);
        assert!(net.trainable().is_empty());
        let x = g.input(rand_input(2, &[3, 17, 18, 19]));
        let b = net.backbone(&mut g, x, BnMode::Train).unwrap();
        assert_eq!(g.value(b.distance).shape(), &[1, 17, 18, 19]);
        assert_eq!(g.value(b.features).shape(), &[8, 17, 18, 19]);
        assert_eq!(b.stats.len(), 10);
        let r = net.rpn(&mut g, b.features).unwrap();
        assert_eq!(g.value(r.cls_logits).shape(), &[2, 17, 18, 19]);
        assert_eq!(g.value(r.reg).shape(), &[4, 17, 18, 19]);
        let s = g.softmax_channels(r.cls_logits);
        let n = 17 * 18 * 19;
        for i in 0..n {
            let t = g.value(s).data()[i] + g.value(s).data()[n + i];
            assert!((t - 1.0).abs() < 1e-5);
        }
        for side in [7, 13] {
            let c = g.input(rand_input(side as u64, &[11, side, side, side]));
            let o = net.rcn(&mut g, c).unwrap();
            assert_eq!(g.value(o.class_logits).shape(), &[4]);
            assert_eq!(g.value(o.box_residual).shape(), &[4]);
            assert_eq!(o.rater_logits.len(), 6);
        }
    }

    #[test]
    fn small_patch_rejected() {
        let p = ModelParams::init(&ModelSpec::default(), 1).unwrap();
        let mut g = Graph::<f32>::new();
        let net = Net::bind(&p, &mut g, &[Section::Backbone], None);
        let x = g.input(Tensor::zeros(&[3, 16, 17, 17]));
        let e = net.backbone(&mut g, x, BnMode::Eval).err().unwrap();
        assert!(matches!(e, Error::PatchTooSmall { got: 16, min: 17 }));
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = ModelParams::init(&ModelSpec::default(), 1).unwrap();
        for i in 0..p.names().len() {
            if p.names()[i].starts_with("backbone.") && p.names()[i].ends_with(".w") {
                p.tensor_at_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p.get_mut("backbone.head.b").unwrap().data_mut()[0] = 0.75;
        let mut g = Graph::<f32>::new();
        let net = Net::bind(&p, &mut g, &[Section::Backbone], None);
        let x = g.input(rand_input(3, &[3, 17, 17, 17]));
        let b = net.backbone(&mut g, x, BnMode::Eval).unwrap();
        assert!(g.value(b.distance).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn backbone_is_translation_equivariant() {
        let mut p = ModelParams::init(&ModelSpec::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..p.names().len() {
            if p.names()[i].ends_with("running_mean") {
                p.tensor_at_mut(i).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let dims = [50usize, 17, 17];
        let x1 = rand_input(4, &[3, 17, 17, 50]);
        let mut x2 = x1.clone();
        let n = voxel_count(dims);
        for c in 0..3 {
            for z in 0..17 {
                for y in 0..17 {
                    for x in 0..49 {
                        x2.data_mut()[c * n + linear_index(dims, [x, y, z])] =
                            x1.data()[c * n + linear_index(dims, [x + 1, y, z])];
                    }
                }
            }
        }
        let run = |x: &Tensor<f32>| {
            let mut g = Graph::<f32>::new();
            let net = Net::bind(&p, &mut g, &[Section::Backbone], None);
            let xv = g.input(x.clone());
            let b = net.backbone(&mut g, xv, BnMode::Eval).unwrap();
            g.value(b.distance).clone()
        };
        let (o1, o2) = (run(&x1), run(&x2));
        // receptive radius: 1 + 3·(1 + 2 + 4) = 22
        for z in 0..17 {
            for y in 0..17 {
                for x in 22..(49 - 23) {
                    let a = o2.data()[linear_index(dims, [x, y, z])];
                    let b = o1.data()[linear_index(dims, [x + 1, y, z])];
                    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn trunk_feeds_every_head() {
        let mut p = ModelParams::init(&ModelSpec::default(), 6).unwrap();
        let crop = rand_input(7, &[11, 9, 9, 9]);
        let run = |p: &ModelParams| {
            let mut g = Graph::<f64>::new();
            let net = Net::bind(p, &mut g, &[Section::Rcn], None);
            let c = g.input(crop.cast::<f64>());
            let o = net.rcn(&mut g, c).unwrap();
            let mut outs = vec![g.value(o.class_logits).clone(), g.value(o.box_residual).clone()];
            outs.extend(o.rater_logits.iter().map(|&v| g.value(v).clone()));
            outs
        };
        let before = run(&p);
        // perturb one trunk weight feeding an active hidden unit
        let fc = p.get_mut("rcn.fc.b").unwrap();
        fc.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let after = run(&p);
        for (a, b) in before.iter().zip(&after) {
            assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
        }
    }

    #[test]
    fn crops() {
        assert_eq!(crop_side(1.0), 7);
        assert_eq!(crop_side(6.0), 9);
        assert_eq!(crop_side(9.0), 15);
        assert_eq!(crop_side(40.0), 15);
        let dims = [4, 4, 4];
        let a: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..128).map(|i| -(i as f32)).collect();
        let (t, clamped) = extract_crop(&[(&a, 1), (&b, 2)], dims, [1, 1, 1], 3);
        assert!(!clamped);
        assert_eq!(t.shape(), &[3, 3, 3, 3]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[13], 21.0);
        assert_eq!(t.data()[27 * 2 + 13], -(64.0 + 21.0));
        let (t, clamped) = extract_crop(&[(&a, 1)], dims, [0, 0, 0], 3);
        assert!(clamped);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[26], 21.0);
    }
}
