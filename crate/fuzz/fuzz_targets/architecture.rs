#![no_main]

use libfuzzer_sys::fuzz_target;
use stnas_core::arch::DiscreteArchitecture;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(arch) = DiscreteArchitecture::from_text(text) {
        let back = DiscreteArchitecture::from_text(&arch.to_text()).expect("round trip");
        assert_eq!(back, arch);
    }
});
