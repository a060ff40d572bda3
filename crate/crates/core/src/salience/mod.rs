//! Per-image salience: the mean activation of a frozen extractor tap,
//! training-set min/max statistics, min-max normalization into a weight
//! band, and corpus ranking.

mod extractor;

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageChip;
use crate::error::{Error, Result};
use crate::losses::ImageWeight;

pub use extractor::{ConvExtractor, FrozenExtractor};

static CALLS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn record_call() {
    CALLS.fetch_add(1, AtomicOrdering::Relaxed);
}

/// Number of extractor invocations and salience estimates made by this
/// process so far.
pub fn call_count() -> u64 {
    CALLS.load(AtomicOrdering::Relaxed)
}

/// Extractor stage an estimate is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapId {
    C2,
    C3,
    C4,
    C5,
}

impl TapId {
    pub const ALL: [TapId; 4] = [TapId::C2, TapId::C3, TapId::C4, TapId::C5];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.index() + 2)
    }
}

impl FromStr for TapId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C2" => Ok(TapId::C2),
            "C3" => Ok(TapId::C3),
            "C4" => Ok(TapId::C4),
            "C5" => Ok(TapId::C5),
            _ => Err(Error::UnknownTap(s.to_string())),
        }
    }
}

/// A CxHxW activation block from one extractor tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tap: TapId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-planar.
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(tap: TapId, channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map", "dimensions must be positive"));
        }
        if values.len() != channels * height * width {
            return Err(Error::LengthMismatch {
                what: "feature map",
                expected: channels * height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map", "non-finite activation"));
        }
        Ok(FeatureMap {
            tap,
            channels,
            height,
            width,
            values,
        })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Mean over all `C*H*W` entries, accumulated in `f64`.
    pub fn mean_activation(&self) -> f64 {
        let sum: f64 = self.values.iter().map(|&v| f64::from(v)).sum();
        sum / self.values.len() as f64
    }
}

/// Raw salience of one image at one tap.
pub fn estimate_salience(image: &ImageChip, extractor: &dyn FrozenExtractor, tap: TapId) -> Result<f64> {
    record_call();
    let maps = extractor.extract(image)?;
    Ok(maps[tap.index()].mean_activation())
}

/// Raw salience at every tap from a single extractor pass.
pub fn estimate_all_taps(image: &ImageChip, extractor: &dyn FrozenExtractor) -> Result<[f64; 4]> {
    record_call();
    let maps = extractor.extract(image)?;
    Ok(maps.map(|m| m.mean_activation()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapRange {
    pub tap_id: TapId,
    pub min: f64,
    pub max: f64,
}

pub const STATS_FORMAT: &str = "sbl-salience-stats";
pub const STATS_VERSION: u32 = 1;

/// Training-set salience extrema and the target weight band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalienceStats {
    pub format: String,
    pub version: u32,
    pub taps: Vec<TapRange>,
    pub new_min: f64,
    pub new_max: f64,
    pub corpus_hash: String,
    pub extractor_fingerprint: String,
    pub num_images: usize,
    /// Taken from `SOURCE_DATE_EPOCH` when set, so repeated runs stay byte-identical.
    pub created_at: Option<String>,
}

impl SalienceStats {
    pub fn tap(&self, tap: TapId) -> Result<&TapRange> {
        self.taps
            .iter()
            .find(|t| t.tap_id == tap)
            .ok_or_else(|| Error::UnknownTap(format!("{tap} (not in statistics)")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != STATS_FORMAT || self.version != STATS_VERSION {
            return Err(Error::invalid(
                "stats",
                format!("unsupported stats format {} v{}", self.format, self.version),
            ));
        }
        validate_band(self.new_min, self.new_max)?;
        for t in &self.taps {
            if !(t.min <= t.max) {
                return Err(Error::invalid("stats", format!("{}: min > max", t.tap_id)));
            }
        }
        Ok(())
    }

    /// Fails with [`Error::StaleStats`] unless these statistics were computed
    /// for exactly this corpus and extractor.
    pub fn check_fresh(&self, corpus_hash: &str, extractor_fingerprint: &str) -> Result<()> {
        if self.corpus_hash != corpus_hash {
            return Err(Error::StaleStats(format!(
                "computed for corpus {}, training corpus is {}",
                short(&self.corpus_hash),
                short(corpus_hash)
            )));
        }
        if self.extractor_fingerprint != extractor_fingerprint {
            return Err(Error::StaleStats(format!(
                "computed with extractor {}, current extractor is {}",
                short(&self.extractor_fingerprint),
                short(extractor_fingerprint)
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: SalienceStats = serde_json::from_str(&text)?;
        stats.validate()?;
        Ok(stats)
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn validate_band(new_min: f64, new_max: f64) -> Result<()> {
    if !(new_min > 0.0 && new_min <= new_max && new_max.is_finite()) {
        return Err(Error::invalid(
            "band",
            format!("need 0 < new_min ({new_min}) <= new_max ({new_max})"),
        ));
    }
    Ok(())
}

/// Per-tap extrema of raw salience over a corpus.
///
/// Images are scored in parallel; min/max reduction is exact, so the result
/// does not depend on traversal order or worker count.
pub fn compute_stats(
    corpus: &[ImageChip],
    extractor: &dyn FrozenExtractor,
    taps: &[TapId],
    band: (f64, f64),
    corpus_hash: &str,
) -> Result<SalienceStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if taps.is_empty() {
        return Err(Error::invalid("taps", "at least one tap required"));
    }
    validate_band(band.0, band.1)?;
    let scores = score_corpus(corpus, extractor)?;
    let mut tap_list: Vec<TapId> = taps.to_vec();
    tap_list.sort();
    tap_list.dedup();
    let ranges = tap_list
        .into_iter()
        .map(|tap| {
            let (min, max) = scores
                .iter()
                .map(|s| s[tap.index()])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            TapRange { tap_id: tap, min, max }
        })
        .collect();
    Ok(SalienceStats {
        format: STATS_FORMAT.into(),
        version: STATS_VERSION,
        taps: ranges,
        new_min: band.0,
        new_max: band.1,
        corpus_hash: corpus_hash.to_string(),
        extractor_fingerprint: extractor.fingerprint(),
        num_images: corpus.len(),
        created_at: std::env::var("SOURCE_DATE_EPOCH").ok(),
    })
}

/// Raw salience at all four taps for every image, in corpus order.
pub fn score_corpus(corpus: &[ImageChip], extractor: &dyn FrozenExtractor) -> Result<Vec<[f64; 4]>> {
    corpus
        .par_iter()
        .map(|chip| estimate_all_taps(chip, extractor))
        .collect()
}

/// Maps `[min, max]` linearly onto `[new_min, new_max]`, clamping outside
/// values. A degenerate range (`min == max`) yields `new_max`.
pub fn normalize_with(s: f64, min: f64, max: f64, new_min: f64, new_max: f64) -> f64 {
    if !(max > min) {
        return new_max;
    }
    let t = ((s - min) / (max - min)).clamp(0.0, 1.0);
    (t * (new_max - new_min) + new_min).clamp(new_min, new_max)
}

pub fn normalize_salience(s: f64, stats: &SalienceStats, tap: TapId) -> Result<f64> {
    let r = stats.tap(tap)?;
    Ok(normalize_with(s, r.min, r.max, stats.new_min, stats.new_max))
}

/// How raw salience turns into a loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum WeightMode {
    /// Every image weighs 1: plain focal loss.
    Off,
    /// The raw mean activation is the weight.
    Raw,
    /// Min-max normalized into `[new_min, new_max]`.
    Normalized { new_min: f64, new_max: f64 },
}

/// Loss weight of an image with raw salience `raw`.
pub fn image_weight(raw: f64, stats: &SalienceStats, tap: TapId, mode: WeightMode) -> Result<ImageWeight> {
    let weight = match mode {
        WeightMode::Off => return Ok(ImageWeight::UNIT),
        WeightMode::Raw => raw,
        WeightMode::Normalized { new_min, new_max } => {
            validate_band(new_min, new_max)?;
            let r = stats.tap(tap)?;
            normalize_with(raw, r.min, r.max, new_min, new_max)
        }
    };
    Ok(ImageWeight { raw, weight })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub raw_s: f64,
    pub normalized_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub tap_id: TapId,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 50;

impl Histogram {
    /// Uniform bins over `[lo, hi]`; the top edge falls in the last bin.
    pub fn build(tap: TapId, values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = if hi > lo {
                (((v - lo) / (hi - lo)) * bins as f64).floor() as isize
            } else {
                0
            };
            counts[idx.clamp(0, bins as isize - 1) as usize] += 1;
        }
        Histogram {
            tap_id: tap,
            lo,
            hi,
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let mut out = String::from("tap,bin,lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * width;
            out.push_str(&format!("{},{i},{lo},{},{c}\n", self.tap_id, lo + width));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub tap_id: TapId,
    pub k: usize,
    /// Set when `k` exceeded the corpus size and both lists hold everything.
    pub saturated: bool,
    /// Highest salience first.
    pub top: Vec<RankedImage>,
    /// Lowest salience first.
    pub bottom: Vec<RankedImage>,
    pub histogram: Histogram,
}

/// Sorts scored images by raw salience, descending, ties by id.
pub fn rank_scores(
    scores: &[(String, f64)],
    tap: TapId,
    k: usize,
    band: (f64, f64),
    range: Option<(f64, f64)>,
) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if scores.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let raw: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    let (lo, hi) = range.unwrap_or_else(|| {
        raw.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let mut ranked: Vec<RankedImage> = scores
        .iter()
        .map(|(id, s)| RankedImage {
            image_id: id.clone(),
            raw_s: *s,
            normalized_s: normalize_with(*s, lo, hi, band.0, band.1),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.raw_s
            .partial_cmp(&a.raw_s)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    let saturated = k >= ranked.len();
    let take = k.min(ranked.len());
    let top = ranked[..take].to_vec();
    let bottom = ranked.iter().rev().take(take).cloned().collect();
    Ok(Ranking {
        tap_id: tap,
        k,
        saturated,
        top,
        bottom,
        histogram: Histogram::build(tap, &raw, lo, hi, HISTOGRAM_BINS),
    })
}

/// Scores a corpus at `tap` and ranks it. Normalized scores use the
/// statistics when given, otherwise the corpus's own extrema and the default band.
pub fn rank_images(
    corpus: &[ImageChip],
    extractor: &dyn FrozenExtractor,
    tap: TapId,
    k: usize,
    stats: Option<&SalienceStats>,
) -> Result<Ranking> {
    let scores = score_corpus(corpus, extractor)?;
    let pairs: Vec<(String, f64)> = corpus
        .iter()
        .zip(&scores)
        .map(|(c, s)| (c.source_id.clone(), s[tap.index()]))
        .collect();
    match stats {
        Some(st) => {
            let r = st.tap(tap)?;
            rank_scores(&pairs, tap, k, (st.new_min, st.new_max), Some((r.min, r.max)))
        }
        None => rank_scores(&pairs, tap, k, DEFAULT_BAND, None),
    }
}

pub const DEFAULT_BAND: (f64, f64) = (0.5, 1.0);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(c: usize, h: usize, w: usize, values: Vec<f32>) -> FeatureMap {
        FeatureMap::new(TapId::C2, c, h, w, values).unwrap()
    }

    #[test]
    fn mean_activation_examples() {
        assert_eq!(fm(2, 3, 3, vec![0.0; 18]).mean_activation(), 0.0);
        assert!((fm(4, 2, 2, vec![0.7; 16]).mean_activation() - 0.7).abs() < 1e-6);
        assert_eq!(fm(1, 2, 2, vec![1., 2., 3., 4.]).mean_activation(), 2.5);
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(TapId::C2, 0, 1, 1, vec![]).is_err());
        assert!(FeatureMap::new(TapId::C2, 1, 1, 2, vec![1.0]).is_err());
        assert!(FeatureMap::new(TapId::C2, 1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn tap_parsing() {
        assert_eq!("c3".parse::<TapId>().unwrap(), TapId::C3);
        assert!(matches!("C7".parse::<TapId>(), Err(Error::UnknownTap(_))));
        assert_eq!(TapId::C5.to_string(), "C5");
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_with(0.2, 0.2, 0.8, 0.5, 1.0), 0.5);
        assert_eq!(normalize_with(0.8, 0.2, 0.8, 0.5, 1.0), 1.0);
        assert!((normalize_with(0.5, 0.2, 0.8, 0.5, 1.0) - 0.75).abs() < 1e-12);
        assert_eq!(normalize_with(-3.0, 0.2, 0.8, 0.5, 1.0), 0.5);
        assert_eq!(normalize_with(9.0, 0.2, 0.8, 0.5, 1.0), 1.0);
        assert_eq!(normalize_with(0.3, 0.4, 0.4, 0.5, 1.0), 1.0);
    }

    #[test]
    fn weight_modes() {
        let stats = SalienceStats {
            format: STATS_FORMAT.into(),
            version: STATS_VERSION,
            taps: vec![TapRange {
                tap_id: TapId::C2,
                min: 0.1,
                max: 0.3,
            }],
            new_min: 0.5,
            new_max: 1.0,
            corpus_hash: "x".into(),
            extractor_fingerprint: "y".into(),
            num_images: 2,
            created_at: None,
        };
        let off = image_weight(0.2, &stats, TapId::C2, WeightMode::Off).unwrap();
        assert_eq!(off.weight, 1.0);
        let raw = image_weight(0.2, &stats, TapId::C2, WeightMode::Raw).unwrap();
        assert_eq!(raw.weight, 0.2);
        let band = WeightMode::Normalized {
            new_min: 0.3,
            new_max: 1.0,
        };
        let n = image_weight(0.2, &stats, TapId::C2, band).unwrap();
        assert!((n.weight - 0.65).abs() < 1e-12);
        assert!(image_weight(0.2, &stats, TapId::C4, band).is_err());
        assert!(stats.check_fresh("x", "y").is_ok());
        assert!(matches!(stats.check_fresh("z", "y"), Err(Error::StaleStats(_))));
    }

    #[test]
    fn ranking_examples() {
        let scores = vec![("a".to_string(), 0.1), ("b".to_string(), 0.5), ("c".to_string(), 0.9)];
        let r = rank_scores(&scores, TapId::C2, 1, DEFAULT_BAND, None).unwrap();
        assert_eq!(r.top[0].image_id, "c");
        assert_eq!(r.bottom[0].image_id, "a");
        assert!(!r.saturated);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 3);
        assert_eq!(r.histogram.counts[0], 1);
        assert_eq!(r.histogram.counts[HISTOGRAM_BINS - 1], 1);

        let all = rank_scores(&scores, TapId::C2, 5, DEFAULT_BAND, None).unwrap();
        assert!(all.saturated);
        let ids = |v: &[RankedImage]| v.iter().map(|r| r.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&all.top), ["c", "b", "a"]);
        assert_eq!(ids(&all.bottom), ["a", "b", "c"]);
        assert!(rank_scores(&scores, TapId::C2, 0, DEFAULT_BAND, None).is_err());
    }

    #[test]
    fn stats_on_tiny_corpus() {
        let ex = ConvExtractor::seeded(3, [4, 4, 4, 4]);
        let mut busy = ImageChip::filled(16, 16, [0.5; 3]);
        for (i, v) in busy.pixels.iter_mut().enumerate() {
            *v = if (i / 3) % 2 == 0 { 0.0 } else { 1.0 };
        }
        let flat = ImageChip::filled(16, 16, [0.5; 3]);

        let single = compute_stats(std::slice::from_ref(&flat), &ex, &TapId::ALL, DEFAULT_BAND, "h").unwrap();
        for t in &single.taps {
            assert_eq!(t.min, t.max);
        }

        let corpus = vec![flat.clone(), busy.clone()];
        let s1 = compute_stats(&corpus, &ex, &[TapId::C2], DEFAULT_BAND, "h").unwrap();
        let s2 = compute_stats(&[busy, flat], &ex, &[TapId::C2], DEFAULT_BAND, "h").unwrap();
        assert_eq!(s1, s2);
        assert!(s1.taps[0].min < s1.taps[0].max);
        assert!(compute_stats(&[], &ex, &[TapId::C2], DEFAULT_BAND, "h").is_err());
    }

    proptest! {
        #[test]
        fn channel_permutation_and_homogeneity(
            vals in proptest::collection::vec(0.0f32..10.0, 12),
            k in 0.0f32..8.0,
        ) {
            let base = fm(3, 2, 2, vals.clone());
            // Rotate channels.
            let mut permuted = vals[4..].to_vec();
            permuted.extend_from_slice(&vals[..4]);
            let rotated = fm(3, 2, 2, permuted);
            prop_assert!((base.mean_activation() - rotated.mean_activation()).abs() < 1e-9);
            // Power-of-two scale factors keep the check exact.
            let p2 = (k.round() as i32 - 4) as f32;
            let s = 2f32.powf(p2);
            let scaled = fm(3, 2, 2, vals.iter().map(|v| v * s).collect());
            prop_assert_eq!(scaled.mean_activation(), base.mean_activation() * s as f64);
        }

        #[test]
        fn normalization_monotone(a in -1.0..2.0f64, b in -1.0..2.0f64, lo in 0.0..0.5f64, w in 0.01..1.0f64) {
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            let f = |s| normalize_with(s, lo, lo + w, 0.5, 1.0);
            prop_assert!(f(x) <= f(y));
            prop_assert!((0.5..=1.0).contains(&f(x)));
        }
    }
}
