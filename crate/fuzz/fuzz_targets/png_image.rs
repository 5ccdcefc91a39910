#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = incrdet::dataset::RgbImage::decode_png(data) {
        let again = img.encode_png().unwrap();
        assert_eq!(incrdet::dataset::RgbImage::decode_png(&again).unwrap(), img);
    }
});
