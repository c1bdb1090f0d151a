#![no_main]

use libfuzzer_sys::fuzz_target;
use stnas_core::data::parse_graph_csv;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    if let Ok(g) = parse_graph_csv(text, n as usize % 32) {
        assert!(g.adjacency.data().iter().all(|&w| w >= 0.0));
    }
});
