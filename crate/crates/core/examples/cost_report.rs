//! Parameter and FLOP report for a preset or a descriptor file.
//!
//! `cargo run --example cost_report -- dbtnet-50 224`

use dbtnet::arch::{count_flops, count_params, ArchDescriptor};

fn main() -> dbtnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "dbtnet-50".into());
    let input: usize = args.next().map(|s| s.parse().expect("input side")).unwrap_or(224);
    let d = ArchDescriptor::resolve(&name)?;
    let report = count_flops(&d, input)?;
    print!("{}", report.to_table());
    println!("params (counter only): {}", count_params(&d)?);
    if d.has_dbt() {
        let plain = d.plain_counterpart();
        let base = count_flops(&plain, input)?;
        println!(
            "vs {}: +{} params, +{:.3}% flops",
            plain.name,
            report.params - base.params,
            100.0 * (report.flops as f64 / base.flops as f64 - 1.0)
        );
    }
    Ok(())
}
