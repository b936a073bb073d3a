//! Save a freshly built network, reload it into the same architecture, and
//! show that a mismatched architecture is refused with named differences.
//!
//! `cargo run --example checkpoint`

use dbtnet::arch::{build_network, preset, Network};
use dbtnet::train::{decode_checkpoint, encode_checkpoint};

fn main() -> dbtnet::Result<()> {
    let d = preset("dbtnet-tiny").expect("preset");
    let net = build_network(&d, 8, 42)?;
    let bytes = encode_checkpoint(net.params())?;
    println!("{} tensors, {} bytes", net.params().len(), bytes.len());

    let back = Network::from_params(&d, decode_checkpoint(&bytes)?)?;
    println!("roundtrip identical: {}", back.params() == net.params());

    let plain = preset("plain-tiny").expect("preset");
    match Network::<f32>::from_params(&plain, decode_checkpoint(&bytes)?) {
        Ok(_) => println!("unexpected: plain network accepted DBT weights"),
        Err(e) => println!("plain-tiny refuses it: {e}"),
    }

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    println!("bad magic: {}", decode_checkpoint(&corrupt).unwrap_err());
    Ok(())
}
