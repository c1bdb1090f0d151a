#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use stnas_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text, Path::new("/data")) {
        let _ = cfg.validate();
    }
});
