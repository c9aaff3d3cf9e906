//! Configurations owned by single subcommands. Library configurations
//! (training, student, synthetic data) are reused directly.

use sseg::config::{format_f64, parse_value, unknown_key, KvConfig};
use sseg::evalmod::Protocol;
use sseg::inference::{DEFAULT_TAU, DEFAULT_TEMPLATE};
use sseg::pseudomask::DEFAULT_K;
use sseg::selftrain::StudentConfig;
use sseg::Result;

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn format_opt_f64(v: Option<f64>) -> String {
    v.map_or("none".into(), format_f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoConfig {
    pub k: usize,
    pub backbone: String,
    pub stride: usize,
    pub position_weight: f64,
    pub seed: u64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            backbone: "color".into(),
            stride: 4,
            position_weight: 0.1,
            seed: 0,
        }
    }
}

impl KvConfig for PseudoConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "k" => self.k = parse_value(key, value)?,
            "backbone" => self.backbone = value.to_string(),
            "stride" => self.stride = parse_value(key, value)?,
            "position_weight" => self.position_weight = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("k".into(), self.k.to_string()),
            ("backbone".into(), self.backbone.clone()),
            ("stride".into(), self.stride.to_string()),
            ("position_weight".into(), format_f64(self.position_weight)),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    /// `None` disables background thresholding.
    pub tau: Option<f64>,
    pub template: String,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tau: None,
            template: DEFAULT_TEMPLATE.into(),
        }
    }
}

impl KvConfig for InferConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "tau" => self.tau = parse_opt_f64(key, value)?,
            "template" => self.template = value.to_string(),
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("tau".into(), format_opt_f64(self.tau)),
            ("template".into(), self.template.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::WithBackground,
        }
    }
}

impl KvConfig for EvalConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "protocol" => self.protocol = parse_value(key, value)?,
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![("protocol".into(), self.protocol.to_string())]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainConfig {
    pub tau: f64,
    pub template: String,
    pub student: StudentConfig,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            template: DEFAULT_TEMPLATE.into(),
            student: StudentConfig::default(),
        }
    }
}

impl KvConfig for SelfTrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("student.") {
            return self.student.set(k, value);
        }
        match key {
            "tau" => self.tau = parse_value(key, value)?,
            "template" => self.template = value.to_string(),
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("tau".into(), format_f64(self.tau)),
            ("template".into(), self.template.clone()),
        ];
        out.extend(
            self.student
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("student.{k}"), v)),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn round_trip<C: KvConfig + Default + PartialEq + std::fmt::Debug>(c: C) {
        let mut back = C::default();
        back.apply_text(&c.to_kv_string(), Path::new("snapshot.cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn snapshots_round_trip() {
        let mut p = PseudoConfig::default();
        p.set("k", "5").unwrap();
        round_trip(p);
        let mut i = InferConfig::default();
        i.set("tau", "0.3").unwrap();
        i.set("template", "a photo of {}").unwrap();
        round_trip(i);
        round_trip(EvalConfig {
            protocol: Protocol::WithoutBackground,
        });
        let mut s = SelfTrainConfig::default();
        s.set("student.epochs", "3").unwrap();
        round_trip(s);
    }

    #[test]
    fn unknown_keys_list_valid_ones() {
        let err = InferConfig::default().set("tua", "1").unwrap_err().to_string();
        assert!(err.contains("tau") && err.contains("template"), "{err}");
    }
}
