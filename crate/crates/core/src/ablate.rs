//! The ablation grid: every variant trained on the same data for each seed.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{Config, Precision};
use crate::error::{Error, Result};
use crate::heads::RnnKind;
use crate::metrics::MetricsReport;
use crate::model::Ablation;
use crate::train::{prepare, train, LogEvent, Prepared};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoBidm,
    ZeroMasks,
    MeanPoolFusion,
    NoBigru,
    BiGru,
    BiLstm,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoBidm,
        Variant::ZeroMasks,
        Variant::MeanPoolFusion,
        Variant::NoBigru,
        Variant::BiGru,
        Variant::BiLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBidm => "no_bidm",
            Variant::ZeroMasks => "zero_masks",
            Variant::MeanPoolFusion => "mean_pool_fusion",
            Variant::NoBigru => "no_bigru",
            Variant::BiGru => "bi_gru",
            Variant::BiLstm => "bi_lstm",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoBidm => a.no_bidm = true,
            Variant::ZeroMasks => a.zero_masks = true,
            Variant::MeanPoolFusion => a.mean_pool_fusion = true,
            Variant::NoBigru => a.no_bigru = true,
            Variant::BiGru => a.bi_rnn_baseline = Some(RnnKind::Gru),
            Variant::BiLstm => a.bi_rnn_baseline = Some(RnnKind::Lstm),
        }
        a
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Best-epoch dev report per seed, in seed order.
    pub per_seed: Vec<MetricsReport>,
    /// Mean of each metric over seeds.
    pub mean: BTreeMap<String, f64>,
}

impl VariantResult {
    pub fn primary_per_seed(&self) -> Vec<f64> {
        self.per_seed.iter().map(MetricsReport::primary).collect()
    }

    pub fn primary_mean(&self) -> f64 {
        let v = self.primary_per_seed();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub primary: String,
    pub seeds: Vec<u64>,
    pub results: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }

    /// Fixed-width comparison table, one row per variant.
    pub fn table(&self) -> String {
        let mut s = format!("{:<18}", "variant");
        for seed in &self.seeds {
            s += &format!(" {:>9}", format!("seed {seed}"));
        }
        s += &format!(" {:>9}\n", format!("mean {}", self.primary));
        for r in &self.results {
            s += &format!("{:<18}", r.variant.name());
            for v in r.primary_per_seed() {
                s += &format!(" {v:>9.4}");
            }
            s += &format!(" {:>9.4}\n", r.primary_mean());
        }
        s
    }
}

/// Trains `variants` × `seeds` from `base`. The data (and vocabulary) is
/// prepared once from `base`, so variants differ only in the model and the
/// run seed. `progress` receives `(variant, seed, event)`.
pub fn run_ablation(
    base: &Config,
    variants: &[Variant],
    seeds: &[u64],
    progress: &mut dyn FnMut(Variant, u64, &LogEvent),
) -> Result<AblationReport> {
    let data = prepare(base)?;
    if data.dev.is_empty() {
        return Err(Error::Config("the ablation grid needs dev data".into()));
    }
    run_ablation_on(base, &data, variants, seeds, progress)
}

pub fn run_ablation_on(
    base: &Config,
    data: &Prepared,
    variants: &[Variant],
    seeds: &[u64],
    progress: &mut dyn FnMut(Variant, u64, &LogEvent),
) -> Result<AblationReport> {
    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.ablation = variant.ablation();
            let mut log = |e: &LogEvent| progress(variant, seed, e);
            let best = match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, data, &mut log)?.best_dev,
                Precision::F64 => train::<f64>(&cfg, data, &mut log)?.best_dev,
            };
            per_seed.push(best.ok_or_else(|| Error::Config("no dev report".into()))?);
        }
        let mut mean = BTreeMap::new();
        for r in &per_seed {
            for (k, v) in &r.metrics {
                *mean.entry(k.clone()).or_insert(0.0) += v / per_seed.len() as f64;
            }
        }
        results.push(VariantResult {
            variant,
            per_seed,
            mean,
        });
    }
    Ok(AblationReport {
        primary: MetricsReport::primary_name(base.task).to_string(),
        seeds: seeds.to_vec(),
        results,
    })
}
