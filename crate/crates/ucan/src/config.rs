//! Run configuration: a flat `[section]` / `key = value` text format.
//!
//! Every knob of the pipeline lives here with an explicit default, so a run
//! is a pure function of (config, seeds). Unknown sections or keys are
//! config errors rather than silent no-ops. `#` starts a comment.
//!
//! Schema (defaults in parentheses):
//!
//! ```text
//! [data]
//! classes (4), per_class (90), image_size (16), separation (0.16), seed (7)
//! split_train (0.6), split_val (0.15), split_calib (0.1), split_test (0.15)
//! cifar_path (unset; switches ingestion to the CIFAR-10 binary format)
//!
//! [backbone]
//! epochs (30), learning_rate (0.05), momentum (0.9), batch_size (16),
//! seed (11), noise_aug (0.0 = off)
//!
//! [aux]
//! embed_dim (16), scale (64.0), margin (0.5), epochs (10),
//! learning_rate (0.002), momentum (0.9), batch_size (16), seed (13)
//!
//! [select]
//! policy (top | offset; default top), count (4 for top, 1-based start for offset)
//!
//! [attack]
//! epsilon (16/255), steps (200), alpha (epsilon/8 when unset),
//! random_start (true), cw_c (0.5), cw_kappa (0.0), cw_lr (0.001),
//! ada_m (100), ada_lambda (1.0), ada_refresh (50), ada_steps (400), seed (17)
//!
//! [detector]
//! dknn_k (5), svm_c (1.0), svm_gamma (auto when unset), svm_tol (0.001)
//!
//! [eval]
//! attacks (pgd,cw_linf), epsilons (8/255,16/255), seeds (0,1,2),
//! successful_only (true), max_test (0 = all)
//!
//! [bench]
//! batch (8), iterations (10)
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Result, UcanError};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub separation: f64,
    pub data_seed: u64,
    pub split_fractions: [f64; 4],
    pub cifar_path: Option<String>,
    // backbone
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub backbone_momentum: f64,
    pub backbone_batch: usize,
    pub backbone_seed: u64,
    pub noise_aug: f64,
    // aux
    pub embed_dim: usize,
    pub scale: f64,
    pub margin: f64,
    pub aux_epochs: usize,
    pub aux_lr: f64,
    pub aux_momentum: f64,
    pub aux_batch: usize,
    pub aux_seed: u64,
    // select
    pub select_policy: String,
    pub select_count: usize,
    // attack
    pub epsilon: f64,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub cw_c: f64,
    pub cw_kappa: f64,
    pub cw_lr: f64,
    pub ada_m: usize,
    pub ada_lambda: f64,
    pub ada_refresh: usize,
    pub ada_steps: usize,
    pub attack_seed: u64,
    // detector
    pub dknn_k: usize,
    pub svm_c: f64,
    pub svm_gamma: Option<f64>,
    pub svm_tol: f64,
    // eval
    pub eval_attacks: Vec<String>,
    pub eval_epsilons: Vec<f64>,
    pub eval_seeds: Vec<u64>,
    pub successful_only: bool,
    pub max_test: usize,
    // bench
    pub bench_batch: usize,
    pub bench_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 90,
            image_size: 16,
            separation: 0.14,
            data_seed: 7,
            split_fractions: [0.6, 0.15, 0.1, 0.15],
            cifar_path: None,
            backbone_epochs: 90,
            backbone_lr: 0.02,
            backbone_momentum: 0.9,
            backbone_batch: 16,
            backbone_seed: 11,
            noise_aug: 0.0,
            embed_dim: 16,
            scale: 64.0,
            margin: 0.5,
            aux_epochs: 10,
            aux_lr: 0.002,
            aux_momentum: 0.9,
            aux_batch: 16,
            aux_seed: 13,
            select_policy: "top".into(),
            select_count: 4,
            epsilon: 16.0 / 255.0,
            steps: 200,
            alpha: None,
            random_start: true,
            cw_c: 0.5,
            cw_kappa: 0.0,
            cw_lr: 1e-3,
            ada_m: 100,
            ada_lambda: 1.0,
            ada_refresh: 50,
            ada_steps: 400,
            attack_seed: 17,
            dknn_k: 5,
            svm_c: 1.0,
            svm_gamma: None,
            svm_tol: 1e-3,
            eval_attacks: vec!["pgd".into(), "cw_linf".into()],
            eval_epsilons: vec![8.0 / 255.0, 16.0 / 255.0],
            eval_seeds: vec![0, 1, 2],
            successful_only: true,
            max_test: 0,
            bench_batch: 8,
            bench_iterations: 10,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| UcanError::Config(format!("[{section}] {key}: cannot parse '{v}'")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(UcanError::Config(format!("[{section}] {key}: expected a boolean, got '{v}'"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let known_sections: BTreeSet<&str> = ["data", "backbone", "aux", "select", "attack", "detector", "eval", "bench"]
            .into_iter()
            .collect();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if !known_sections.contains(name) {
                    return Err(UcanError::Config(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UcanError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(&section, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("data", "classes") => self.classes = parse_num(section, key, v)?,
            ("data", "per_class") => self.per_class = parse_num(section, key, v)?,
            ("data", "image_size") => self.image_size = parse_num(section, key, v)?,
            ("data", "separation") => self.separation = parse_num(section, key, v)?,
            ("data", "seed") => self.data_seed = parse_num(section, key, v)?,
            ("data", "split_train") => self.split_fractions[0] = parse_num(section, key, v)?,
            ("data", "split_val") => self.split_fractions[1] = parse_num(section, key, v)?,
            ("data", "split_calib") => self.split_fractions[2] = parse_num(section, key, v)?,
            ("data", "split_test") => self.split_fractions[3] = parse_num(section, key, v)?,
            ("data", "cifar_path") => self.cifar_path = Some(v.to_string()),
            ("backbone", "epochs") => self.backbone_epochs = parse_num(section, key, v)?,
            ("backbone", "learning_rate") => self.backbone_lr = parse_num(section, key, v)?,
            ("backbone", "momentum") => self.backbone_momentum = parse_num(section, key, v)?,
            ("backbone", "batch_size") => self.backbone_batch = parse_num(section, key, v)?,
            ("backbone", "seed") => self.backbone_seed = parse_num(section, key, v)?,
            ("backbone", "noise_aug") => self.noise_aug = parse_num(section, key, v)?,
            ("aux", "embed_dim") => self.embed_dim = parse_num(section, key, v)?,
            ("aux", "scale") => self.scale = parse_num(section, key, v)?,
            ("aux", "margin") => self.margin = parse_num(section, key, v)?,
            ("aux", "epochs") => self.aux_epochs = parse_num(section, key, v)?,
            ("aux", "learning_rate") => self.aux_lr = parse_num(section, key, v)?,
            ("aux", "momentum") => self.aux_momentum = parse_num(section, key, v)?,
            ("aux", "batch_size") => self.aux_batch = parse_num(section, key, v)?,
            ("aux", "seed") => self.aux_seed = parse_num(section, key, v)?,
            ("select", "policy") => self.select_policy = v.to_string(),
            ("select", "count") => self.select_count = parse_num(section, key, v)?,
            ("attack", "epsilon") => self.epsilon = parse_num(section, key, v)?,
            ("attack", "steps") => self.steps = parse_num(section, key, v)?,
            ("attack", "alpha") => self.alpha = Some(parse_num(section, key, v)?),
            ("attack", "random_start") => self.random_start = parse_bool(section, key, v)?,
            ("attack", "cw_c") => self.cw_c = parse_num(section, key, v)?,
            ("attack", "cw_kappa") => self.cw_kappa = parse_num(section, key, v)?,
            ("attack", "cw_lr") => self.cw_lr = parse_num(section, key, v)?,
            ("attack", "ada_m") => self.ada_m = parse_num(section, key, v)?,
            ("attack", "ada_lambda") => self.ada_lambda = parse_num(section, key, v)?,
            ("attack", "ada_refresh") => self.ada_refresh = parse_num(section, key, v)?,
            ("attack", "ada_steps") => self.ada_steps = parse_num(section, key, v)?,
            ("attack", "seed") => self.attack_seed = parse_num(section, key, v)?,
            ("detector", "dknn_k") => self.dknn_k = parse_num(section, key, v)?,
            ("detector", "svm_c") => self.svm_c = parse_num(section, key, v)?,
            ("detector", "svm_gamma") => self.svm_gamma = Some(parse_num(section, key, v)?),
            ("detector", "svm_tol") => self.svm_tol = parse_num(section, key, v)?,
            ("eval", "attacks") => {
                self.eval_attacks = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            ("eval", "epsilons") => {
                self.eval_epsilons = v
                    .split(',')
                    .map(|s| parse_num(section, key, s.trim()))
                    .collect::<Result<_>>()?
            }
            ("eval", "seeds") => {
                self.eval_seeds = v
                    .split(',')
                    .map(|s| parse_num(section, key, s.trim()))
                    .collect::<Result<_>>()?
            }
            ("eval", "successful_only") => self.successful_only = parse_bool(section, key, v)?,
            ("eval", "max_test") => self.max_test = parse_num(section, key, v)?,
            ("bench", "batch") => self.bench_batch = parse_num(section, key, v)?,
            ("bench", "iterations") => self.bench_iterations = parse_num(section, key, v)?,
            _ => {
                return Err(UcanError::Config(format!("unknown key '{key}' in section [{section}]")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(UcanError::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        if self.split_fractions.iter().any(|&f| f <= 0.0) {
            return Err(UcanError::Config("all split fractions must be positive".into()));
        }
        if self.classes < 2 || self.per_class == 0 {
            return Err(UcanError::Config("need classes >= 2 and per_class >= 1".into()));
        }
        if self.select_policy != "top" && self.select_policy != "offset" {
            return Err(UcanError::Config(format!(
                "select policy '{}' is not 'top' or 'offset'",
                self.select_policy
            )));
        }
        for a in &self.eval_attacks {
            if !matches!(a.as_str(), "pgd" | "cw_linf" | "ada_dknn") {
                return Err(UcanError::Config(format!("unknown eval attack '{a}'")));
            }
        }
        self.attack_config(self.epsilon, self.attack_seed)?.validate()?;
        Ok(())
    }

    /// Attack template with the configured hyperparameters.
    pub fn attack_config(&self, epsilon: f64, seed: u64) -> Result<crate::attacks::AttackConfig> {
        Ok(crate::attacks::AttackConfig {
            epsilon,
            steps: self.steps,
            alpha: self.alpha,
            random_start: self.random_start,
            cw_c: self.cw_c,
            cw_kappa: self.cw_kappa,
            cw_lr: self.cw_lr,
            ada_m: self.ada_m,
            ada_lambda: self.ada_lambda,
            ada_refresh: self.ada_refresh,
            seed,
        })
    }

    pub fn svm_config(&self) -> crate::svm::SvmConfig {
        crate::svm::SvmConfig {
            c: self.svm_c,
            gamma: self.svm_gamma,
            tol: self.svm_tol,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.classes, 4);
        assert!((cfg.epsilon - 16.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn parses_sections_and_comments() {
        let text = "
# reference run
[data]
classes = 3       # three classes
per_class = 10
[aux]
embed_dim = 8
[eval]
seeds = 1, 2, 5
attacks = pgd
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.classes, 3);
        assert_eq!(cfg.per_class, 10);
        assert_eq!(cfg.embed_dim, 8);
        assert_eq!(cfg.eval_seeds, vec![1, 2, 5]);
        assert_eq!(cfg.eval_attacks, vec!["pgd"]);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(RunConfig::parse("[nope]\nx = 1").is_err());
        assert!(RunConfig::parse("[data]\nbogus = 1").is_err());
        assert!(RunConfig::parse("[data]\nclasses").is_err());
        assert!(RunConfig::parse("[data]\nclasses = many").is_err());
    }

    #[test]
    fn rejects_bad_fractions_and_policies() {
        let bad = "[data]\nsplit_train = 0.9\nsplit_val = 0.9";
        match RunConfig::parse(bad) {
            Err(UcanError::Config(msg)) => assert!(msg.contains("fractions")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(RunConfig::parse("[select]\npolicy = best").is_err());
        assert!(RunConfig::parse("[eval]\nattacks = ddos").is_err());
    }
}
