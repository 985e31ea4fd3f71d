//! `key = value` run configuration.
//!
//! Every key has a default; files and `--set` overrides may only name known
//! keys. The fully resolved configuration is written next to each run's
//! outputs and can be passed back with `--config` to repeat the run.

use std::collections::BTreeMap;
use std::path::Path;

use encnet::{Error, Result};

/// `(key, default, meaning)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for every random stream"),
    ("precision", "32", "floating-point width for training: 32 or 64"),
    ("model.variant", "encnet", "fcn | encnet for segmentation; plain | se | encoding for CIFAR"),
    ("model.backbone", "mini", "segmentation backbone: mini | desk | resnet50"),
    ("model.width", "16", "first-stage width (mini backbone stages are w, 2w, 4w, 4w; CIFAR stages d, 2d, 4d)"),
    ("model.k", "16", "codewords per encoding layer; 0 selects global average pooling"),
    ("model.stage3_branch", "true", "auxiliary presence loss on stage 3"),
    ("model.head_width", "0", "optional 3x3 reduction before the segmentation head; 0 keeps the stage-4 width"),
    ("model.se_reduction", "16", "squeeze-excitation reduction factor"),
    ("model.stochastic", "true", "stochastic smoothing factors in CIFAR encoding blocks"),
    ("loss.alpha", "0.2", "weight of each presence loss term"),
    ("optim.base_lr", "0.1", "base learning rate"),
    ("optim.schedule", "poly", "poly | cosine | constant"),
    ("optim.power", "0.9", "poly schedule exponent"),
    ("optim.momentum", "0.9", "SGD momentum"),
    ("optim.weight_decay", "0.0001", "L2 weight decay folded into the gradient"),
    ("optim.epochs", "8", "training epochs"),
    ("optim.batch_size", "8", "mini-batch size; the last incomplete batch is dropped"),
    ("data.path", "data/synth.bin", "synthetic dataset container, or CIFAR-10 binary directory"),
    ("data.crop", "64", "segmentation crop size (multiple of 8)"),
    ("data.augment", "false", "random flip/scale/rotate/crop (segmentation) or flip/shift (CIFAR)"),
    ("data.train_limit", "0", "use only the first N training samples; 0 keeps all"),
    ("data.test_limit", "0", "use only the first N evaluation samples; 0 keeps all"),
    ("data.mean", "0.4914,0.4822,0.4465", "CIFAR per-channel mean after scaling to [0, 1]"),
    ("data.std", "0.2470,0.2435,0.2616", "CIFAR per-channel standard deviation"),
    ("synth.size", "64", "synthetic image side"),
    ("synth.train", "2000", "synthetic training images"),
    ("synth.val", "500", "synthetic validation images"),
    ("synth.cue", "0.02", "background shift carrying the context"),
    ("synth.noise", "0.5", "pixel noise standard deviation"),
    ("synth.shapes_min", "2", "fewest shapes per image"),
    ("synth.shapes_max", "4", "most shapes per image"),
    ("synth.radius_min", "5", "smallest shape radius"),
    ("synth.radius_max", "9", "largest shape radius"),
    ("syncbn.devices", "1", "simulated devices for synchronized batch norm"),
    ("eval.convention", "with_background", "with_background | ignore_background"),
    ("eval.scales", "1", "comma-separated evaluation scales"),
    ("eval.flip", "false", "also average horizontally mirrored predictions"),
    ("eval.batch", "16", "evaluation batch size"),
    ("log.wall_clock", "false", "record elapsed seconds in the metrics log (breaks byte-reproducibility)"),
    ("out.dir", "runs/default", "output directory"),
    ("bench.iters", "3", "timed forward passes per model"),
    ("bench.batch", "2", "images per timed forward pass"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

/// Comma-separated number lists; other keys take the type of their default.
const LIST_KEYS: [&str; 3] = ["eval.scales", "data.mean", "data.std"];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, v, _)| *v)
}

fn check_value(key: &str, default: &str, value: &str) -> Result<()> {
    let ok = if LIST_KEYS.contains(&key) {
        value.split(',').all(|s| s.trim().parse::<f64>().is_ok_and(f64::is_finite))
    } else if default.parse::<bool>().is_ok() {
        value.parse::<bool>().is_ok()
    } else if default.parse::<u64>().is_ok() {
        value.parse::<u64>().is_ok()
    } else if default.parse::<f64>().is_ok() {
        value.parse::<f64>().is_ok_and(f64::is_finite)
    } else {
        !value.is_empty()
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} = '{value}' is not a valid value")))
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let default = default_of(key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        let value = value.trim();
        check_value(key, default, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("{source}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item.split_once('=').ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key '{key}' missing from table"))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key).parse().map_err(|_| Error::Config(format!("{key} = '{}' is not a valid value", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: '{s}' is not a number"))))
            .collect()
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nseed = 7\n\nloss.alpha=0.5  # trailing\n", "t").unwrap();
        assert_eq!(c.u64("seed").unwrap(), 7);
        assert_eq!(c.f64("loss.alpha").unwrap(), 0.5);
        let mut back = RunConfig::default();
        back.apply_text(&c.render(), "r").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("model.depth = 50", "t").unwrap_err().to_string().contains("model.depth"));
        assert!(c.apply_text("seed 3", "t").is_err());
        assert!(c.set("seed", "x").is_err());
        assert!(c.set("optim.base_lr", "inf").is_err());
        assert!(c.set("eval.scales", "0.5,x").is_err());
        assert!(c.set("data.augment", "1").is_err());
        c.set("eval.scales", "0.75, 1,1.25").unwrap();
        assert_eq!(c.f64_list("eval.scales").unwrap(), [0.75, 1.0, 1.25]);
    }
}
