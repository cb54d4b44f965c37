//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every training and
//! architecture field has a key; unknown or repeated keys are rejected.
//! [`serialize`] writes every key in a fixed order, so parsing its output
//! and serializing again gives the same text.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::read_file;
use crate::error::{CarError, Result};
use crate::trainer::TrainConfig;

pub const KEYS: [&str; 20] = [
    "epochs",
    "batch_size",
    "lr_init",
    "lr_final",
    "decay_start_epoch",
    "lambda1",
    "lambda2",
    "seed",
    "no_clr",
    "augment",
    "rc_kernel_size",
    "rc_depth",
    "sim_both_passes",
    "lncc_window",
    "levels",
    "enc_channels",
    "dec_channels",
    "proj_channels",
    "slope",
    "share_encoders",
];

fn get(cfg: &TrainConfig, key: &str) -> String {
    let a = &cfg.arch;
    match key {
        "epochs" => cfg.epochs.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "lr_init" => format!("{:e}", cfg.lr_init),
        "lr_final" => format!("{:e}", cfg.lr_final),
        "decay_start_epoch" => cfg.decay_start_epoch.to_string(),
        "lambda1" => cfg.lambda1.to_string(),
        "lambda2" => cfg.lambda2.to_string(),
        "seed" => cfg.seed.to_string(),
        "no_clr" => cfg.no_clr.to_string(),
        "augment" => cfg.augment.to_string(),
        "rc_kernel_size" => cfg.rc_kernel_size.to_string(),
        "rc_depth" => cfg.rc_depth.to_string(),
        "sim_both_passes" => cfg.sim_both_passes.to_string(),
        "lncc_window" => cfg.lncc_window.to_string(),
        "levels" => a.levels.to_string(),
        "enc_channels" => a.enc_channels.to_string(),
        "dec_channels" => a.dec_channels.to_string(),
        "proj_channels" => a.proj_channels.to_string(),
        "slope" => a.slope.to_string(),
        "share_encoders" => a.share_encoders.to_string(),
        _ => unreachable!("key list and getter disagree"),
    }
}

/// Sets one field from its textual value.
pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("cannot parse {:?}", v))
    }
    fn real(v: &str) -> std::result::Result<f64, String> {
        let x: f64 = num(v)?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(format!("{:?} is not finite", v))
        }
    }
    fn flag(v: &str) -> std::result::Result<bool, String> {
        match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(format!("expected true or false, got {:?}", v)),
        }
    }
    let a = &mut cfg.arch;
    match key {
        "epochs" => cfg.epochs = num(value)?,
        "batch_size" => cfg.batch_size = num(value)?,
        "lr_init" => cfg.lr_init = real(value)?,
        "lr_final" => cfg.lr_final = real(value)?,
        "decay_start_epoch" => cfg.decay_start_epoch = num(value)?,
        "lambda1" => cfg.lambda1 = real(value)?,
        "lambda2" => cfg.lambda2 = real(value)?,
        "seed" => cfg.seed = num(value)?,
        "no_clr" => cfg.no_clr = flag(value)?,
        "augment" => cfg.augment = flag(value)?,
        "rc_kernel_size" => cfg.rc_kernel_size = num(value)?,
        "rc_depth" => cfg.rc_depth = num(value)?,
        "sim_both_passes" => cfg.sim_both_passes = flag(value)?,
        "lncc_window" => cfg.lncc_window = num(value)?,
        "levels" => a.levels = num(value)?,
        "enc_channels" => a.enc_channels = num(value)?,
        "dec_channels" => a.dec_channels = num(value)?,
        "proj_channels" => a.proj_channels = num(value)?,
        "slope" => a.slope = real(value)?,
        "share_encoders" => a.share_encoders = flag(value)?,
        _ => return Err(format!("unknown key {:?}", key)),
    }
    Ok(())
}

/// Parses `text` on top of the defaults and validates the result.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CarError::Config {
            line: line_no,
            detail: format!("expected key = value, got {:?}", line),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) && KEYS.contains(&k) {
            return Err(CarError::Config {
                line: line_no,
                detail: format!("duplicate key {:?}", k),
            });
        }
        set(&mut cfg, k, v).map_err(|detail| CarError::Config { line: line_no, detail })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize(cfg: &TrainConfig) -> String {
    KEYS.iter().map(|k| format!("{} = {}\n", k, get(cfg, k))).collect()
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CarError::Config {
        line: 0,
        detail: format!("{} is not UTF-8: {}", path.display(), e),
    })?;
    parse(&text)
}

/// SHA-256 of the canonical serialization.
pub fn digest(cfg: &TrainConfig) -> [u8; 32] {
    Sha256::digest(serialize(cfg).as_bytes()).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = serialize(&TrainConfig::default());
        assert_eq!(text.lines().count(), KEYS.len());
        assert!(text.contains("lr_init = 1e-4\n"));
        let back = parse(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert_eq!(serialize(&back), text);
    }

    #[test]
    fn overrides_comments_and_errors() {
        let cfg = parse("# toy\nepochs = 3\n\nno_clr = true\nslope=0.1\n").unwrap();
        assert_eq!((cfg.epochs, cfg.no_clr, cfg.arch.slope), (3, true, 0.1));
        let e = parse("epochs = 3\nmomentum = 0.9\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("momentum"), "{}", e);
        assert!(parse("epochs = 3\nepochs = 4\n").is_err());
        assert!(parse("epochs 3\n").is_err());
        assert!(parse("lr_init = nan\n").is_err());
        assert!(parse("batch_size = 0\n").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 2, ..a.clone() };
        assert_eq!(digest(&a), digest(&a.clone()));
        assert_ne!(digest(&a), digest(&b));
    }
}
