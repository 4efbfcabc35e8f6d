use std::path::PathBuf;

use amc_kfac::dataset::{parse_idx_images, parse_idx_labels};
use amc_kfac::experiment::solve::format_matrix_text;
use amc_kfac::experiment::{parse_matrix_text, ExperimentConfig};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn verdicts<F: Fn(&[u8]) -> bool>(target: &str, accept: F) -> Vec<(String, bool)> {
    seeds(target).into_iter().map(|(name, data)| (name, accept(&data))).collect()
}

fn named(list: &[(&str, bool)]) -> Vec<(String, bool)> {
    list.iter().map(|&(n, ok)| (n.to_string(), ok)).collect()
}

#[test]
fn idx_image_seeds() {
    let got = verdicts("idx_images", |data| match parse_idx_images(data) {
        Ok((n, rows, cols, pixels)) => {
            assert_eq!(pixels.len(), n * rows * cols);
            true
        }
        Err(_) => false,
    });
    assert_eq!(
        got,
        named(&[("header_only", true), ("one_2x3", true), ("truncated", false), ("two_28x28", true)])
    );
}

#[test]
fn idx_label_seeds() {
    let got = verdicts("idx_labels", |data| match parse_idx_labels(data) {
        Ok(labels) => {
            assert_eq!(labels.len() + 8, data.len());
            true
        }
        Err(_) => false,
    });
    assert_eq!(got, named(&[("empty", true), ("four", true), ("trailing", false)]));
}

#[test]
fn matrix_text_seeds() {
    let got = verdicts("matrix_text", |data| {
        let Ok(m) = parse_matrix_text(std::str::from_utf8(data).unwrap()) else {
            return false;
        };
        assert_eq!(parse_matrix_text(&format_matrix_text(&m)).unwrap(), m);
        true
    });
    assert_eq!(
        got,
        named(&[("exponents", true), ("identity4", true), ("rhs", true), ("short", false)])
    );
}

#[test]
fn config_toml_seeds() {
    let got = verdicts("config_toml", |data| {
        let Ok(cfg) = ExperimentConfig::from_toml_str(std::str::from_utf8(data).unwrap()) else {
            return false;
        };
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap().to_toml_string(), text);
        cfg.validate().is_ok()
    });
    assert_eq!(got, named(&[("default", true), ("sections", true), ("unknown_key", false)]));
}
