//! Full-volume inference with a trained checkpoint: tiled dense maps,
//! proposals, NMS, refinement and the detections file.
//!
//! `cargo run --release --example inference -- <checkpoint_dir> [out.json]`
//! Use the `rcn_step2` directory written by the `staged_training` example
//! (default `$TMPDIR/eso_training/rcn_step2`).

use anyhow::{Context, Result};
use eso_rcnn::model::load_checkpoint;
use eso_rcnn::phantom::{generate_case, PhantomConfig};
use eso_rcnn::pipeline::{dense_maps, infer_volume, propose, write_detections, InferConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt_dir = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("eso_training").join("rcn_step2"));
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("eso_detections.json"));
    let ckpt = load_checkpoint(&ckpt_dir, None)
        .with_context(|| format!("run the staged_training example first ({})", ckpt_dir.display()))?;

    // a held-out case from the same generator settings as the training example
    let case = generate_case(
        &PhantomConfig {
            dims: [40, 40, 40],
            seed: 11,
            ..Default::default()
        },
        100,
    )?;
    let cfg = InferConfig::for_patch(24);

    let maps = dense_maps(&case.volume, &ckpt.params, cfg.patch_size, cfg.stride, true)?;
    println!("{} proposals after NMS", propose(&maps, &cfg)?.len());

    let dets = infer_volume(&case.volume, &ckpt, &cfg)?;
    println!("{} detections for {} ground-truth objects", dets.len(), case.objects.len());
    for d in dets.iter().take(5) {
        println!(
            "  centre {:.1?} score {:.2} scale {:.1} class {}",
            d.proposal.centre_mm,
            d.proposal.score,
            d.proposal.scale,
            d.class_probs.argmax().as_str()
        );
    }
    write_detections(&out, &dets)?;
    println!("wrote {}", out.display());
    Ok(())
}
