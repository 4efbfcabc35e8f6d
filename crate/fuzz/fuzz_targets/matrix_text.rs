#![no_main]

use amc_kfac::experiment::parse_matrix_text;
use amc_kfac::experiment::solve::format_matrix_text;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_matrix_text(text) {
        assert_eq!(parse_matrix_text(&format_matrix_text(&m)).unwrap(), m);
    }
});
