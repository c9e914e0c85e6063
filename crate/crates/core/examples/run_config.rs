//! Load a run configuration, show inherited seeds and derived defaults, and
//! print the fully materialised document that the CLI records with each run.

use anyhow::Result;
use eso_rcnn::config::RunConfig;
use eso_rcnn::model::Stage;

fn main() -> Result<()> {
    let cfg = RunConfig::from_json(
        r#"{
            "seed": 42,
            "patch": {"patch_size": 32},
            "train": {"rpn_step1": {"iterations": 500, "seed": 7}},
            "infer": {"score_threshold": 0.3}
        }"#,
    )?;
    for stage in Stage::ALL {
        let t = cfg.train.get(stage);
        println!("{stage:<10} iterations {:>4} seed {:>2} lr {}", t.iterations, t.seed, t.lr);
    }
    println!("phantom seed {}, inference tile {} stride {}", cfg.phantom.seed, cfg.infer.patch_size, cfg.infer.stride);

    match RunConfig::from_json(r#"{"patch": {"patch_size": 8}}"#) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    println!("{}", cfg.to_json_pretty());
    Ok(())
}
