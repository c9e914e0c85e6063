//! Matching, sensitivity, agreement strata and the rank-sum test, using a
//! simulated detector that finds most of the larger objects.

use anyhow::Result;
use eso_rcnn::eval::{build_report, evaluate_case, wilcoxon_ranksum, RankSumConfig};
use eso_rcnn::phantom::{generate_case, PhantomConfig};
use eso_rcnn::{Cuboid, Detection, Proposal, SoftLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let cfg = PhantomConfig {
        seed: 21,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cases = Vec::new();
    for k in 0..4 {
        let case = generate_case(&cfg, k)?;
        let found: Vec<_> = case
            .objects
            .iter()
            .filter(|o| rng.random::<f64>() < (o.voxels.len() as f64 / 15.0).min(0.95))
            .collect();
        let dets: Vec<Detection> = found
            .into_iter()
            .map(|o| {
                let centre_mm = o.centre_mm.map(|c| c + rng.random_range(-0.5..0.5));
                let side = o.scale * rng.random_range(0.8..1.3);
                Ok(Detection {
                    proposal: Proposal {
                        centre_mm,
                        score: 0.9,
                        scale: side,
                    },
                    bbox: Cuboid::new(centre_mm, side)?,
                    class_probs: o.soft_label()?,
                    per_rater_probs: o.rater_votes.iter().map(|&v| SoftLabel::one_hot(v)).collect(),
                })
            })
            .collect::<eso_rcnn::Result<_>>()?;
        cases.push(evaluate_case(&format!("case_{k}"), &dets, &case.objects, case.volume.spacing_mm)?);
    }
    let report = build_report(&cases, &RankSumConfig::default())?;
    println!(
        "sensitivity {:.3} (>= 10 voxels {:.3}, smaller {:.3}) over {} objects",
        report.sensitivity.unwrap_or(f64::NAN),
        report.sensitivity_large.unwrap_or(f64::NAN),
        report.sensitivity_small.unwrap_or(f64::NAN),
        report.n_gt
    );
    for s in &report.strata {
        println!("  {s:?}");
    }
    let sc = &report.size_comparison;
    println!(
        "scale median matched {:?} vs missed {:?}; test {:?}",
        sc.median_scale_matched, sc.median_scale_missed, sc.test
    );

    let r = wilcoxon_ranksum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0])?;
    println!("[1,2,3] vs [4,5,6]: U = {}, p = {} ({:?})", r.u, r.p_two_sided, r.method);
    Ok(())
}
