#![no_main]

use libfuzzer_sys::fuzz_target;
use mgmem::tasks::TestSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = TestSet::decode(data) {
        let _ = set.dump_text();
        let again = TestSet::decode(&set.encode()).expect("re-encoded test set decodes");
        assert_eq!(again.instances.len(), set.instances.len());
    }
});
