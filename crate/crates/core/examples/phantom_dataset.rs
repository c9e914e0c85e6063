//! Generate a small synthetic dataset, write it to disk, read one case back
//! and print the object statistics.
//!
//! `cargo run --release --example phantom_dataset -- [out_dir]`

use anyhow::Result;
use eso_rcnn::phantom::{load_case, read_manifest, summarize, write_dataset, PhantomConfig};

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("eso_phantoms"));
    let cfg = PhantomConfig {
        seed: 1,
        ..Default::default()
    };
    let (manifest, cases) = write_dataset(&out, &cfg, 8)?;
    println!("wrote {} cases to {}", manifest.cases.len(), out.display());

    let s = summarize(cases.iter().flat_map(|c| &c.objects), cases.len());
    println!("objects:            {}", s.n_objects);
    println!("below 10 voxels:    {:.3}", s.frac_below_10vox);
    println!("lacunes:            {:.3}", s.lacune_fraction);
    println!("unanimous panels:   {:.3}", s.unanimous_fraction);
    println!("size histogram:     {:?}  ([5,10) [10,20) [20,50) [50,100) [100,inf))", s.size_histogram);

    let first = &read_manifest(&out)?.cases[0];
    let case = load_case(&out, first)?;
    assert_eq!(case, cases[0]);
    let o = &case.objects[0];
    println!(
        "{first}: {} objects; object {} has {} voxels, scale {}, votes {:?}",
        case.objects.len(),
        o.id,
        o.voxels.len(),
        o.scale,
        o.rater_votes.iter().map(|v| v.as_str()).collect::<Vec<_>>()
    );
    Ok(())
}
