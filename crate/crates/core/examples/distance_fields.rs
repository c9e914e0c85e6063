//! Distance transform, proximity target, sampling weights and local maxima on
//! one phantom case.

use anyhow::Result;
use eso_rcnn::fields::{
    euclidean_distance_transform, gaussian_smooth, local_maxima_extract, proximity_target_map, sampling_weight_map,
};
use eso_rcnn::phantom::{generate_case, PhantomConfig};
use eso_rcnn::EsoClass;

fn main() -> Result<()> {
    let case = generate_case(
        &PhantomConfig {
            seed: 3,
            ..Default::default()
        },
        0,
    )?;
    let seg = &case.seg_mask;

    let mask = seg.mask_where(|l| l != 0);
    let edt = euclidean_distance_transform(&mask, seg.dims, seg.spacing_mm);
    let max_d = edt.data.iter().cloned().fold(0.0, f64::max);
    println!("distance to nearest object: max {max_d:.2} mm");

    let proximity = proximity_target_map(seg, 5.0);
    let inside = proximity.data.iter().filter(|&&v| v == 5.0).count();
    println!("proximity target: {inside} voxels at the cap of 5");

    let (lacunes, epvs): (Vec<_>, Vec<_>) = case.objects.iter().partition(|o| o.true_class == EsoClass::Lacune);
    let ids = |v: &[&eso_rcnn::EsoObject]| v.iter().map(|o| o.id).collect::<Vec<_>>();
    let w = sampling_weight_map(seg, &ids(&epvs), &ids(&lacunes), 2.0, 1e-5);
    let on_objects: f64 = w.data.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    println!(
        "sampling weights: sum {:.6}, mass on object voxels {:.3} ({} EPVS, {} lacunes)",
        w.sum(),
        on_objects,
        epvs.len(),
        lacunes.len()
    );

    let smooth = gaussian_smooth(&proximity, 1.0);
    let gate: Vec<bool> = smooth.data.iter().map(|&v| v > 1.0).collect();
    let peaks = local_maxima_extract(&smooth, &gate);
    println!("{} local maxima for {} objects; top five:", peaks.len(), case.objects.len());
    for (v, value) in peaks.iter().take(5) {
        println!("  {v:?}  {value:.3}");
    }
    Ok(())
}
