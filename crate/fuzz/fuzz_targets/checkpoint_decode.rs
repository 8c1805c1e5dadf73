#![no_main]

use libfuzzer_sys::fuzz_target;
use mgmem::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // one re-encode reaches a fixed point
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
        let _ = ck.restore();
    }
});
