//! Train all five stages in order on a handful of small phantoms, saving a
//! checkpoint and a CSV log after each stage.
//!
//! `cargo run --release --example staged_training -- [iterations] [out_dir]`

use anyhow::Result;
use eso_rcnn::model::{save_checkpoint, ModelSpec, Stage};
use eso_rcnn::phantom::{generate_case, PhantomConfig};
use eso_rcnn::pipeline::{prepare_cases, train_stage, InferConfig, LogRow, StageSettings, TrainConfig};
use eso_rcnn::sampler::PatchSpec;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(50);
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("eso_training"));

    let phantom = PhantomConfig {
        dims: [40, 40, 40],
        seed: 11,
        ..Default::default()
    };
    let cases = (0..4).map(|i| generate_case(&phantom, i)).collect::<eso_rcnn::Result<Vec<_>>>()?;
    let settings = StageSettings {
        spec: ModelSpec {
            features: 6,
            ..Default::default()
        },
        patch: PatchSpec {
            patch_size: 24,
            n_rpn_samples: 120,
            ..Default::default()
        },
        train: TrainConfig {
            iterations,
            ..Default::default()
        },
        infer: InferConfig::for_patch(24),
    };
    let prepared = prepare_cases(&cases, &settings.patch)?;

    let mut ckpt = None;
    for stage in Stage::ALL {
        let t = std::time::Instant::now();
        let (next, log) = train_stage(stage, &prepared, ckpt.take(), &settings)?;
        let dir = out.join(stage.as_str());
        save_checkpoint(&dir, &next)?;
        log.write_csv(&dir.join("train_log.csv"))?;
        // single iterations are noisy: compare the first and last fifths;
        // totals include the ramped regression weight, so show raw components
        let k = (log.rows.len() / 5).max(1);
        let (head, tail) = (&log.rows[..k], &log.rows[log.rows.len() - k..]);
        let mean = |rows: &[LogRow], f: fn(&LogRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mut parts = Vec::new();
        for (name, f) in [
            ("rmse", (|r: &LogRow| r.rmse) as fn(&LogRow) -> Option<f64>),
            ("cls", |r| r.cls),
            ("rater", |r| r.rater),
            ("reg", |r| r.reg),
        ] {
            if let (Some(a), Some(b)) = (mean(head, f), mean(tail, f)) {
                parts.push(format!("{name} {a:.3} -> {b:.3}"));
            }
        }
        println!(
            "{stage:<10} {}  ({:.1}s, saved to {})",
            parts.join(", "),
            t.elapsed().as_secs_f64(),
            dir.display()
        );
        ckpt = Some(next);
    }
    Ok(())
}
