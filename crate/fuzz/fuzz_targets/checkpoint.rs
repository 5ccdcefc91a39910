#![no_main]

use libfuzzer_sys::fuzz_target;

// Input layout: 4-byte little-endian manifest length, manifest JSON, blob.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    let rest = &data[4..];
    let (manifest, blob) = rest.split_at(n.min(rest.len()));
    let _ = incrdet::nn::checkpoint::decode_checkpoint(manifest, blob);
});
