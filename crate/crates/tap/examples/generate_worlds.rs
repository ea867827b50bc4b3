//! Generate a few episodes of every world and dump the first episode's
//! frames as PPM images.
//!
//! ```bash
//! cargo run --release -p tap --example generate_worlds
//! ```

use tap::synthworlds::{frame_to_ppm, gen_gridpick, gen_gridpush, gen_maze, write_dataset, Dataset};

fn show(ds: &Dataset, out: &std::path::Path) -> tap::Result<()> {
    let ep = &ds.episodes[0];
    println!(
        "{:<14} episodes={} t_len={} entities={} bottleneck frames={:?}",
        ds.world.name(),
        ds.len(),
        ds.t_len,
        ep.positions[0].len(),
        ep.bottleneck_truth,
    );
    let dir = out.join(ds.world.name());
    std::fs::create_dir_all(&dir).expect("create output dir");
    for (t, frame) in ep.frames.iter().enumerate() {
        frame_to_ppm(frame, &dir.join(format!("frame_{t:02}.ppm")))?;
    }
    write_dataset(ds, &dir.join("dataset.tapds"))?;
    Ok(())
}

fn main() -> tap::Result<()> {
    let out = std::path::PathBuf::from("worlds_out");
    show(&gen_gridpick(7, 8, false)?, &out)?;
    show(&gen_gridpick(7, 8, true)?, &out)?;
    show(&gen_gridpush(7, 8, 2)?, &out)?;
    show(&gen_gridpush(7, 8, 3)?, &out)?;
    show(&gen_maze(7, 8)?, &out)?;
    println!("frames and datasets under {}/", out.display());
    Ok(())
}
