#![no_main]

use libfuzzer_sys::fuzz_target;
use stnas_core::data::{parse_signals_csv, write_signals_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_signals_csv(text, None) {
        assert_eq!(m.values.len(), m.steps * m.nodes * m.channels);
        // what we write we must read back
        let again = parse_signals_csv(&write_signals_csv(&m, 0), None).expect("re-parse");
        assert_eq!((again.steps, again.nodes), (m.steps, m.nodes));
    }
});
