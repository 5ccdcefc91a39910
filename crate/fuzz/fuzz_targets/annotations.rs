#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = incrdet::dataset::parse_annotations(data) {
        // whatever validates must survive a serialize/parse round trip
        let again = serde_json::to_vec(&file).unwrap();
        assert_eq!(incrdet::dataset::parse_annotations(&again).unwrap(), file);
    }
});
