//! Flat `key = value` experiment files. One entry per line; `#` starts a
//! comment; list values are comma separated.
//!
//! ```text
//! data = bench
//! holdout = 4
//! train = agg, mldg
//! test = bn, tn, qib, sib
//! seeds = 0, 1, 2, 3, 4
//! sweep.m = 1, 2, 4, 8
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use super::{parse_split, ExperimentConfig, SweepParameter};
use crate::error::{Error, Result};
use crate::trainer::LossOrder;

/// Key/value pairs in file order. Duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// A parsed experiment file.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationFile {
    /// Dataset directory, relative paths resolved by the caller.
    pub data: Option<PathBuf>,
    pub experiment: ExperimentConfig,
    pub sweeps: Vec<(SweepParameter, Vec<String>)>,
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    list(value).iter().map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

impl AblationFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = AblationFile { data: None, experiment: ExperimentConfig::default(), sweeps: Vec::new() };
        let e = &mut file.experiment;
        for (key, value) in parse_key_values(text)? {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "data" => file.data = Some(PathBuf::from(v)),
                "holdout" => e.holdout = parse_list(k, v)?,
                "sources" => e.sources = Some(parse_list(k, v)?),
                "train" => e.train_methods = parse_list(k, v)?,
                "test" => e.test_methods = parse_list(k, v)?,
                "seeds" => e.seeds = parse_list(k, v)?,
                "m" => e.test.m = parse(k, v)?,
                "q" => e.test.q = parse(k, v)?,
                "style_layer" => {
                    e.test.style_layer = parse(k, v)?;
                    e.network.style_layer = e.test.style_layer;
                }
                "widths" => e.network.widths = parse_list(k, v)?,
                "kernel_size" => e.network.kernel_size = parse(k, v)?,
                "num_classes" => e.network.num_classes = parse(k, v)?,
                "norm_eps" => e.network.norm_eps = parse(k, v)?,
                "epochs" => e.train.epochs = parse(k, v)?,
                "batch_size" => e.train.batch_size = parse(k, v)?,
                "inner_lr" => e.train.inner_lr = parse(k, v)?,
                "outer_lr" => e.train.outer_lr = parse(k, v)?,
                "alpha" => e.train.alpha = parse(k, v)?,
                "split" => e.train.split = Some(parse_split(v)?),
                "poly_power" => e.train.poly_power = parse(k, v)?,
                "meta_gradient" => e.train.meta_gradient = parse(k, v)?,
                "loss_order" => {
                    e.train.loss_order = match v {
                        "ds_first" => LossOrder::WeightGeneralization,
                        "dg_first" => LossOrder::WeightSpecific,
                        _ => return Err(Error::Config(format!("loss_order: expected ds_first or dg_first, got '{v}'"))),
                    }
                }
                "momentum" => e.train.momentum = parse(k, v)?,
                "weight_decay" => e.train.weight_decay = parse(k, v)?,
                "flip" => e.train.flip = parse_bool(k, v)?,
                "crop" => e.train.crop = if v == "none" { None } else { Some(parse(k, v)?) },
                _ => match k.strip_prefix("sweep.") {
                    Some(p) => file.sweeps.push((p.parse()?, list(v))),
                    None => return Err(Error::Config(format!("unknown key '{k}'"))),
                },
            }
        }
        file.experiment.validate()?;
        Ok(file)
    }
}
