//! Generate the part-texture dataset, split it, and save a few samples as
//! PPM images plus the whole set as a binary container.
//!
//! `cargo run --example synth_data -- out/`

use std::path::PathBuf;

use dbtnet::data::{class_combinations, generate_dataset, read_dataset, split, write_dataset, DatasetSpec, Sample};

fn ppm(s: &Sample) -> Vec<u8> {
    let size = s.image.shape()[1];
    let plane = size * size;
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push((s.image.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn main() -> dbtnet::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-data".into()));
    std::fs::create_dir_all(&dir).expect("output dir");
    let spec = DatasetSpec::default();
    for (class, combo) in class_combinations(&spec)?.iter().enumerate() {
        println!("class {class}: textures {combo:?}");
    }
    let data = generate_dataset(&spec)?;
    let (train, test) = split(&data, 0.75, 0)?;
    println!("{} samples, {} train / {} test", data.len(), train.len(), test.len());

    for s in data.iter().take(spec.classes) {
        let parts: Vec<_> = s.parts.iter().map(|p| (p.texture, p.center.0.round(), p.center.1.round())).collect();
        println!("label {} parts (texture, row, col) {parts:?}", s.label);
        std::fs::write(dir.join(format!("class{}.ppm", s.label)), ppm(s)).expect("write ppm");
    }
    let container = dir.join("dataset.dbtd");
    write_dataset(&container, &data, spec.classes)?;
    let (back, classes) = read_dataset(&container)?;
    assert_eq!((back.len(), classes), (data.len(), spec.classes));
    println!("wrote {} and {} images to {}", container.display(), spec.classes, dir.display());
    Ok(())
}
