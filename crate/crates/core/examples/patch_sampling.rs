//! Weighted patch-centre sampling and balanced per-voxel RPN samples.

use anyhow::Result;
use eso_rcnn::pipeline::prepare_cases;
use eso_rcnn::phantom::{generate_case, PhantomConfig};
use eso_rcnn::sampler::{patch_origin, select_rpn_samples, PatchObject, PatchSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let case = generate_case(
        &PhantomConfig {
            seed: 5,
            ..Default::default()
        },
        0,
    )?;
    let spec = PatchSpec {
        patch_size: 32,
        ..Default::default()
    };
    let prepared = prepare_cases(std::slice::from_ref(&case), &spec)?;
    let dims = case.volume.dims;
    let extent = spec.extent(dims);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..3 {
        let centre = prepared[0].draw_centre(&mut rng);
        let origin = patch_origin(centre, extent, dims);
        // objects whose centre falls inside the patch, in patch coordinates
        let objects: Vec<PatchObject> = case
            .objects
            .iter()
            .filter_map(|o| {
                let c = o.centre_vox(case.volume.spacing_mm);
                let local: [f64; 3] = [0, 1, 2].map(|a| c[a] - origin[a] as f64);
                (0..3)
                    .all(|a| local[a] >= 0.0 && local[a] < extent[a] as f64)
                    .then_some(PatchObject {
                        centre_vox: local,
                        scale: o.scale,
                    })
            })
            .collect();
        let samples = select_rpn_samples(extent, &objects, &spec, i)?;
        let pos = samples.iter().filter(|s| s.is_positive).count();
        println!(
            "patch {i}: centre {centre:?}, origin {origin:?}, {} objects, {} samples ({pos} positive)",
            objects.len(),
            samples.len()
        );
    }
    Ok(())
}
