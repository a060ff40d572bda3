//! Train-and-evaluate over a grid of weighting settings and seeds, reported as
//! a table with one row per setting.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use sbl_core::data::corpus_hash;
use sbl_core::model::{prepare_samples, training_chips};
use sbl_core::salience::compute_stats;
use sbl_core::{FrozenExtractor, TapId, TrainConfig, Trainer};

use crate::commands::{evaluate_detector, load_dataset, load_extractor, write_file};
use crate::config::LoadedConfig;
use crate::exit::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub name: String,
    /// None for the unweighted baseline.
    pub tap: Option<TapId>,
    pub new_min: Option<f64>,
    pub normalized: bool,
}

impl Setting {
    fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self.tap {
            None => cfg.sbl_enabled = false,
            Some(tap) => {
                cfg.sbl_enabled = true;
                cfg.tap = tap;
                cfg.normalize = self.normalized;
                if let Some(m) = self.new_min {
                    cfg.new_min = m;
                }
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub setting: Setting,
    /// mAP per seed, in seed order.
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub iou_threshold: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| setting | tap | new_min | normalization |");
        for seed in &self.seeds {
            let _ = write!(s, " seed {seed} |");
        }
        s.push_str(" mean mAP | std |\n|---|---|---:|---|");
        s.push_str(&"---:|".repeat(self.seeds.len() + 2));
        s.push('\n');
        for r in &self.rows {
            let st = &r.setting;
            let _ = write!(
                s,
                "| {} | {} | {} | {} |",
                st.name,
                st.tap.map_or("-".to_string(), |t| t.to_string()),
                st.new_min.map_or("-".to_string(), |m| m.to_string()),
                if st.tap.is_none() {
                    "-"
                } else if st.normalized {
                    "yes"
                } else {
                    "no"
                }
            );
            for m in &r.maps {
                let _ = write!(s, " {m:.4} |");
            }
            let _ = writeln!(s, " {:.4} | {:.4} |", r.mean, r.std);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,tap,new_min,normalized,seed,map\n");
        for r in &self.rows {
            for (seed, m) in self.seeds.iter().zip(&r.maps) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{seed},{m}",
                    r.setting.name,
                    r.setting.tap.map_or(String::new(), |t| t.to_string()),
                    r.setting.new_min.map_or(String::new(), |m| m.to_string()),
                    r.setting.normalized
                );
            }
        }
        s
    }
}

/// Grid rows: the baseline, one row per (tap, new_min), and optionally one
/// raw-weight row per tap.
pub fn settings(loaded: &LoadedConfig) -> Vec<Setting> {
    let a = &loaded.config.ablate;
    let mut out = Vec::new();
    if a.baseline {
        out.push(Setting {
            name: "baseline".into(),
            tap: None,
            new_min: None,
            normalized: false,
        });
    }
    for &tap in &a.taps {
        for &m in &a.new_min {
            out.push(Setting {
                name: format!("SBL-{tap} new_min={m}"),
                tap: Some(tap),
                new_min: Some(m),
                normalized: true,
            });
        }
        if a.raw {
            out.push(Setting {
                name: format!("SBL-{tap} raw"),
                tap: Some(tap),
                new_min: None,
                normalized: false,
            });
        }
    }
    out
}

pub fn ablate(loaded: &LoadedConfig, out: &Path) -> Result<AblationReport> {
    let cfg = &loaded.config;
    let train_path = cfg
        .data
        .train
        .as_deref()
        .ok_or_else(|| ConfigError::new("`data.train` is not set in the config"))?;
    let test_path = cfg
        .data
        .test
        .as_deref()
        .ok_or_else(|| ConfigError::new("`data.test` is not set in the config"))?;
    let grid = settings(loaded);
    if grid.is_empty() || cfg.ablate.seeds.is_empty() {
        return Err(ConfigError::new("ablation grid is empty").into());
    }
    for s in &grid {
        s.train_config(&cfg.train, 0)
            .validate()
            .map_err(|e| ConfigError::new(format!("{}: {e}", s.name)))?;
    }

    let train = load_dataset(cfg, train_path)?;
    let test = load_dataset(cfg, test_path)?;
    let n = cfg.detector.input_size;
    let train_chips = training_chips(&train, n)?;
    let test_chips = training_chips(&test, n)?;
    let extractor = load_extractor(cfg)?;
    let hash = corpus_hash(&train)?;
    let images: Vec<_> = train_chips.iter().map(|(c, _)| c.clone()).collect();
    // The band lives in each row's weight mode; the statistics only carry extrema.
    let stats = compute_stats(
        &images,
        &extractor,
        &TapId::ALL,
        (cfg.train.new_min, cfg.train.new_max),
        &hash,
    )?;
    drop(images);

    let mut rows = Vec::new();
    for setting in &grid {
        let mut maps = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let tcfg = setting.train_config(&cfg.train, seed);
            let mut trainer = Trainer::new(cfg.detector.clone(), tcfg.clone())?;
            let salience = Some((&stats, &extractor as &dyn FrozenExtractor, hash.as_str()));
            let samples = prepare_samples(train_chips.clone(), trainer.detector(), &tcfg, salience)?;
            trainer.fit(&samples, |_, _| Ok(()))?;
            let result = evaluate_detector(trainer.detector(), &test_chips, &test.classes, &cfg.predict, &cfg.eval)?;
            eprintln!("{:<24} seed {seed}: mAP {:.4}", setting.name, result.map);
            maps.push(result.map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let std = if maps.len() > 1 {
            (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (maps.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(AblationRow {
            setting: setting.clone(),
            maps,
            mean,
            std,
        });
    }
    let report = AblationReport {
        seeds: cfg.ablate.seeds.clone(),
        iou_threshold: cfg.eval.iou_threshold,
        rows,
    };
    std::fs::create_dir_all(out)?;
    write_file(&out.join("config.toml"), loaded.snapshot()?)?;
    write_file(
        &out.join("ablation.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_file(&out.join("ablation.csv"), report.to_csv())?;
    write_file(&out.join("ablation.md"), report.to_markdown())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_baseline_and_four_bands() {
        let loaded = LoadedConfig::load(None, &[]).unwrap();
        let names: Vec<String> = settings(&loaded).into_iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            [
                "baseline",
                "SBL-C2 new_min=0.3",
                "SBL-C2 new_min=0.5",
                "SBL-C2 new_min=0.7",
                "SBL-C2 new_min=1"
            ]
        );
    }

    #[test]
    fn table_shape() {
        let report = AblationReport {
            seeds: vec![0, 1],
            iou_threshold: 0.5,
            rows: vec![AblationRow {
                setting: Setting {
                    name: "baseline".into(),
                    tap: None,
                    new_min: None,
                    normalized: false,
                },
                maps: vec![0.5, 0.7],
                mean: 0.6,
                std: 0.1414,
            }],
        };
        let md = report.to_markdown();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].matches('|').count(), lines[1].matches('|').count());
        assert_eq!(lines[0].matches('|').count(), lines[2].matches('|').count());
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}
