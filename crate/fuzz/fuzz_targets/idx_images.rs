#![no_main]

use amc_kfac::dataset::parse_idx_images;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((n, rows, cols, pixels)) = parse_idx_images(data) {
        assert_eq!(pixels.len(), n * rows * cols);
    }
});
