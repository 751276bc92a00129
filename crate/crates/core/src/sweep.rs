//! Ablation sweeps: a base config, a list of variants given as overrides,
//! and a seed set. Each (variant, seed) pair is one child run directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::generate_dataset;
use crate::error::{Error, Result};
use crate::train::train;

/// Keys an ablation matrix may sweep, as written in the `[ablate]` table.
pub const AXES: [&str; 5] = [
    "prompt_mode",
    "sampling_strategy",
    "multi_scale",
    "gamma",
    "positives_per_class",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Variant {
    pub fn new(name: impl Into<String>, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

/// Named variant lists shipped with the tool.
pub fn preset(name: &str) -> Result<Vec<Variant>> {
    let v = match name {
        // Instance conditioning, contrastive learning and multi-scale
        // alignment switched on one at a time.
        "factor-table" => {
            let mut rows = Vec::new();
            for ic in [false, true] {
                for cl in [false, true] {
                    for ms in [false, true] {
                        let mut parts = Vec::new();
                        if ic {
                            parts.push("ic");
                        }
                        if cl {
                            parts.push("cl");
                        }
                        if ms {
                            parts.push("ms");
                        }
                        let name = if parts.is_empty() {
                            "baseline".to_string()
                        } else {
                            parts.join("+")
                        };
                        rows.push(Variant {
                            name,
                            overrides: vec![
                                format!("prompt_mode={}", if ic { "icpc" } else { "learnable" }),
                                format!("gamma={}", if cl { 0.5 } else { 0.0 }),
                                format!("multi_scale={ms}"),
                            ],
                        });
                    }
                }
            }
            // Keep the table's ordering: fewer components first.
            rows.sort_by_key(|r| r.name.matches('+').count() + usize::from(r.name != "baseline"));
            rows
        }
        "prompt-modes" => ["fixed", "learnable", "instance", "cocoop", "icpc"]
            .iter()
            .map(|m| Variant::new(*m, &[&format!("prompt_mode={m}")]))
            .collect(),
        "gamma" => ["0", "0.25", "0.5", "1.0"]
            .iter()
            .map(|g| Variant::new(format!("gamma={g}"), &[&format!("gamma={g}")]))
            .collect(),
        "sampling" => ["random", "easy-to-hard"]
            .iter()
            .map(|s| Variant::new(*s, &[&format!("sampling_strategy={s}")]))
            .collect(),
        "positives" => ["1", "3", "5", "10"]
            .iter()
            .map(|n| {
                Variant::new(
                    format!("positives={n}"),
                    &[&format!("positives_per_class={n}")],
                )
            })
            .collect(),
        other => {
            return Err(Error::config(
                "ablate.preset",
                format!("unknown preset '{other}' (factor-table, prompt-modes, gamma, sampling, positives)"),
            ))
        }
    };
    Ok(v)
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl AblationMatrix {
    /// Reads a matrix file: an ordinary run config plus an `[ablate]` table
    /// holding `seeds`, optional `preset`, optional `jobs`, and value lists
    /// for any of [`AXES`]. Listed axes are crossed with each other and with
    /// the preset rows.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let ablate = match root.remove("ablate") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::config("ablate", "must be a table")),
            None => toml::Table::new(),
        };
        let base = RunConfig::from_toml_str(&toml::to_string(&root).expect("table serialises"))?;

        let mut seeds = vec![base.train.seed];
        let mut jobs = 0;
        let mut variants = vec![Variant::new("base", &[])];
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (key, value) in &ablate {
            let full = format!("ablate.{key}");
            match key.as_str() {
                "seeds" => {
                    seeds = value
                        .as_array()
                        .ok_or_else(|| Error::config(&full, "expected an array of integers"))?
                        .iter()
                        .map(|s| {
                            s.as_integer()
                                .filter(|&i| i >= 0)
                                .map(|i| i as u64)
                                .ok_or_else(|| Error::config(&full, "seeds must be non-negative integers"))
                        })
                        .collect::<Result<_>>()?;
                }
                "jobs" => {
                    jobs = value
                        .as_integer()
                        .filter(|&i| i >= 0)
                        .ok_or_else(|| Error::config(&full, "expected a non-negative integer"))?
                        as usize;
                }
                "preset" => {
                    let name = value
                        .as_str()
                        .ok_or_else(|| Error::config(&full, "expected a string"))?;
                    variants = preset(name)?;
                }
                axis if AXES.contains(&axis) => {
                    let vals = value
                        .as_array()
                        .ok_or_else(|| Error::config(&full, "expected an array"))?;
                    if vals.is_empty() {
                        return Err(Error::config(&full, "must list at least one value"));
                    }
                    axes.push((axis.to_string(), vals.iter().map(value_text).collect()));
                }
                _ => return Err(Error::config(&full, "unknown key")),
            }
        }
        for (axis, vals) in &axes {
            let mut next = Vec::with_capacity(variants.len() * vals.len());
            for v in &variants {
                for val in vals {
                    let mut o = v.overrides.clone();
                    o.push(format!("{axis}={val}"));
                    let name = if v.name == "base" {
                        format!("{axis}={val}")
                    } else {
                        format!("{},{axis}={val}", v.name)
                    };
                    next.push(Variant { name, overrides: o });
                }
            }
            variants = next;
        }
        if seeds.is_empty() {
            return Err(Error::config("ablate.seeds", "must list at least one seed"));
        }
        let m = Self {
            base,
            variants,
            seeds,
            jobs,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Checks that every child config parses and validates.
    pub fn validate(&self) -> Result<()> {
        for v in &self.variants {
            for &s in &self.seeds {
                self.child_config(v, s)?.validate()?;
            }
        }
        Ok(())
    }

    /// Base config with the variant's overrides, its name and the seed.
    pub fn child_config(&self, v: &Variant, seed: u64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        for o in &v.overrides {
            cfg.set(o)?;
        }
        cfg.train.seed = seed;
        cfg.run.name = v.name.clone();
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildResult {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub val_miou: Option<f64>,
    pub error: Option<String>,
    /// Whether the failure was a divergence.
    pub numeric: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub overrides: Vec<String>,
    pub runs: usize,
    pub failures: usize,
    pub mean_miou: Option<f64>,
    /// Sample standard deviation; zero for a single run.
    pub std_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub children: Vec<ChildResult>,
    pub rows: Vec<SummaryRow>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.children.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// File-system-safe directory name for a variant.
fn dir_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn run_child(m: &AblationMatrix, v: &Variant, seed: u64, out: &Path) -> ChildResult {
    let dir = out.join(dir_name(&v.name)).join(format!("seed-{seed}"));
    let attempt = || -> Result<Option<f64>> {
        let cfg = m.child_config(v, seed)?;
        let data = generate_dataset(&cfg.dataset_spec())?;
        let o = train(&cfg, &data, Some(&dir))?;
        Ok(o.final_val.map(|r| r.miou))
    };
    let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(attempt));
    let mut numeric = false;
    let (val_miou, error) = match res {
        Ok(Ok(v)) => (v, None),
        Ok(Err(e)) => {
            numeric = e.is_numeric();
            (None, Some(e.to_string()))
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (None, Some(format!("panic: {msg}")))
        }
    };
    if let Some(e) = &error {
        log::warn!("{} seed {seed} failed: {e}", v.name);
    }
    ChildResult {
        variant: v.name.clone(),
        seed,
        dir,
        val_miou,
        error,
        numeric,
    }
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Runs every child, continuing past failures, and aggregates val mIoU.
/// With `out` set, writes `summary.csv`, `summary.md` and `children.json`.
pub fn run_sweep(m: &AblationMatrix, out: &Path) -> Result<SweepReport> {
    m.validate()?;
    std::fs::create_dir_all(out)?;
    let jobs: Vec<(&Variant, u64)> = m
        .variants
        .iter()
        .flat_map(|v| m.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(m.jobs)
        .build()
        .map_err(|e| Error::config("ablate.jobs", e.to_string()))?;
    let children: Vec<ChildResult> =
        pool.install(|| jobs.par_iter().map(|(v, s)| run_child(m, v, *s, out)).collect());

    let rows: Vec<SummaryRow> = m
        .variants
        .iter()
        .map(|v| {
            let mine: Vec<&ChildResult> = children.iter().filter(|c| c.variant == v.name).collect();
            let vals: Vec<f64> = mine.iter().filter_map(|c| c.val_miou).collect();
            let ms = mean_std(&vals);
            SummaryRow {
                variant: v.name.clone(),
                overrides: v.overrides.clone(),
                runs: mine.len(),
                failures: mine.iter().filter(|c| c.error.is_some()).count(),
                mean_miou: ms.map(|p| p.0),
                std_miou: ms.map(|p| p.1),
            }
        })
        .collect();
    let report = SweepReport { children, rows };
    write_summary(&report, out)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "nan".into())
}

pub fn write_summary(report: &SweepReport, out: &Path) -> Result<()> {
    let mut csv = String::from("variant,overrides,runs,failures,mean_miou,std_miou\n");
    let mut md = String::from(
        "| variant | overrides | runs | failures | mean mIoU | std |\n|---|---|---|---|---|---|\n",
    );
    for r in &report.rows {
        let o = r.overrides.join(" ");
        csv.push_str(&format!(
            "{},\"{}\",{},{},{},{}\n",
            r.variant,
            o,
            r.runs,
            r.failures,
            fmt_opt(r.mean_miou),
            fmt_opt(r.std_miou)
        ));
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            if o.is_empty() { "-".into() } else { format!("`{o}`") },
            r.runs,
            r.failures,
            fmt_opt(r.mean_miou),
            fmt_opt(r.std_miou)
        ));
    }
    std::fs::write(out.join("summary.csv"), csv)?;
    std::fs::write(out.join("summary.md"), md)?;
    std::fs::write(
        out.join("children.json"),
        serde_json::to_string_pretty(&report.children)?,
    )?;
    Ok(())
}
