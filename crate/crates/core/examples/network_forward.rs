//! Build the three network sections from a fresh initialisation and run one
//! patch through backbone, proposal heads and a refinement crop.

use anyhow::Result;
use eso_rcnn::model::{BnMode, ModelParams, ModelSpec, Net, Section};
use eso_rcnn::nn::{loss::softmax, Graph, Tensor};
use eso_rcnn::phantom::{generate_case, PhantomConfig};

fn main() -> Result<()> {
    let spec = ModelSpec::default();
    let params = ModelParams::init(&spec, 0)?;
    let n_values: usize = params.tensors().iter().map(|t| t.len()).sum();
    println!("{} tensors, {n_values} values, fingerprint {}", params.names().len(), &params.fingerprint()[..16]);

    let case = generate_case(&PhantomConfig::default(), 0)?;
    // 24³ patch from the corner of the volume
    let p = 24;
    let [_, ny, nx] = case.volume.dims;
    let mut data = Vec::with_capacity(spec.in_channels * p * p * p);
    for c in 0..spec.in_channels {
        let ch = case.volume.channel(c);
        for z in 0..p {
            for y in 0..p {
                data.extend_from_slice(&ch[(z * ny + y) * nx..][..p]);
            }
        }
    }

    let mut g = Graph::<f32>::new();
    let net = Net::bind(&params, &mut g, &[Section::Backbone, Section::Rpn, Section::Rcn], None);
    let x = g.input(Tensor::new(vec![spec.in_channels, p, p, p], data)?);
    let bb = net.backbone(&mut g, x, BnMode::Eval)?;
    println!("backbone distance {:?}, features {:?}", g.value(bb.distance).shape(), g.value(bb.features).shape());
    let rpn = net.rpn(&mut g, bb.features)?;
    println!("rpn logits {:?}, regression {:?}", g.value(rpn.cls_logits).shape(), g.value(rpn.reg).shape());

    let side = 9;
    let crop = g.input(Tensor::zeros(&[spec.rcn_in_channels(), side, side, side]));
    let rcn = net.rcn(&mut g, crop)?;
    let main: Vec<f64> = g.value(rcn.class_logits).data().iter().map(|&v| v as f64).collect();
    println!("rcn class probabilities {:.3?}", softmax(&main));
    println!("rcn box residual {:?}", g.value(rcn.box_residual).data());
    println!("{} per-rater heads", rcn.rater_logits.len());
    Ok(())
}
