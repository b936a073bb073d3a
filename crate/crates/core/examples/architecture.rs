//! Print a preset as a descriptor TOML, or list the presets.
//!
//! `cargo run --example architecture -- dbtnet-tiny > my-arch.toml`

use dbtnet::arch::{preset, ArchDescriptor, PRESET_NAMES};

fn main() -> dbtnet::Result<()> {
    let Some(name) = std::env::args().nth(1) else {
        for name in PRESET_NAMES {
            let d = preset(name).expect("listed preset");
            let dbt: Vec<_> = d.stages.iter().filter(|s| s.dbt_block_count() > 0).map(|s| s.name.as_str()).collect();
            println!("{name:<12} stages={} dbt={dbt:?}", d.stages.len());
        }
        return Ok(());
    };
    let d = ArchDescriptor::resolve(&name)?;
    let text = d.to_toml_string();
    assert_eq!(ArchDescriptor::from_toml_str(&text)?, d);
    print!("{text}");
    Ok(())
}
