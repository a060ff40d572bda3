use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{record_call, FeatureMap, TapId};
use crate::data::ImageChip;
use crate::error::{Error, Result};
use crate::model::nn::{Conv2d, Tensor3};

/// Image to four-stage feature maps, with parameters that never change.
pub trait FrozenExtractor: Send + Sync {
    /// Rectified outputs of the four stages, C2 first.
    fn extract(&self, chip: &ImageChip) -> Result<[FeatureMap; 4]>;

    /// Hash of the architecture and every parameter.
    fn fingerprint(&self) -> String;
}

/// Four stride-2 3x3 rectified convolutions standing in for C2..C5.
///
/// Preprocessing: the chip's `[0, 1]` pixels are used as-is, at whatever
/// resolution the chip has.
///
/// The default parameters come from a fixed seed. First-stage kernels are
/// zero-mean, so a flat image region produces no activation and the mean
/// response grows with local texture and edges. Pretrained weights can be
/// loaded with [`ConvExtractor::load`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvExtractor {
    stages: [Conv2d; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    stages: Vec<Conv2d>,
}

const WEIGHTS_FORMAT: &str = "sbl-extractor-v1";

impl ConvExtractor {
    pub const DEFAULT_SEED: u64 = 0x5a1e_9ce0;
    pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];

    pub fn seeded(seed: u64, channels: [usize; 4]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let stages = channels.map(|out_c| {
            let conv = Conv2d::he_uniform(&mut rng, in_c, out_c, 3, 2);
            in_c = out_c;
            conv
        });
        let mut ex = ConvExtractor { stages };
        // Remove the DC component of every first-stage (out, in) kernel.
        let first = &mut ex.stages[0];
        for kernel in first.weight.chunks_exact_mut(9) {
            let mean = kernel.iter().sum::<f32>() / 9.0;
            kernel.iter_mut().for_each(|v| *v -= mean);
        }
        ex
    }

    pub fn from_stages(stages: [Conv2d; 4]) -> Result<Self> {
        let mut in_c = 3;
        for (i, s) in stages.iter().enumerate() {
            if s.in_c != in_c || s.weight.len() != s.out_c * s.in_c * s.kernel * s.kernel || s.bias.len() != s.out_c {
                return Err(Error::invalid("extractor", format!("stage {i} has inconsistent shape")));
            }
            in_c = s.out_c;
        }
        Ok(ConvExtractor { stages })
    }

    /// Loads stage weights from a JSON file written by [`ConvExtractor::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightsFile = serde_json::from_str(&text)?;
        if file.format != WEIGHTS_FORMAT {
            return Err(Error::invalid(
                "extractor weights",
                format!("unsupported format `{}`", file.format),
            ));
        }
        let stages: [Conv2d; 4] = file.stages.try_into().map_err(|v: Vec<Conv2d>| {
            Error::invalid("extractor weights", format!("expected 4 stages, got {}", v.len()))
        })?;
        Self::from_stages(stages)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightsFile {
            format: WEIGHTS_FORMAT.into(),
            stages: self.stages.to_vec(),
        };
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn stages(&self) -> &[Conv2d; 4] {
        &self.stages
    }
}

impl Default for ConvExtractor {
    fn default() -> Self {
        Self::seeded(Self::DEFAULT_SEED, Self::DEFAULT_CHANNELS)
    }
}

impl FrozenExtractor for ConvExtractor {
    fn extract(&self, chip: &ImageChip) -> Result<[FeatureMap; 4]> {
        record_call();
        if chip.width == 0 || chip.height == 0 {
            return Err(Error::invalid("chip", "empty image"));
        }
        let mut x = Tensor3::from_vec(3, chip.height, chip.width, chip.to_planar());
        let mut maps = Vec::with_capacity(4);
        for (stage, tap) in self.stages.iter().zip(TapId::ALL) {
            x = stage.forward(&x);
            x.relu_inplace();
            maps.push(FeatureMap::new(tap, x.c, x.h, x.w, x.data.clone())?);
        }
        Ok(maps.try_into().expect("four stages"))
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"conv-extractor");
        for s in &self.stages {
            for d in [s.in_c, s.out_c, s.kernel, s.stride, s.pad] {
                h.update((d as u64).to_le_bytes());
            }
            for v in s.weight.iter().chain(&s.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
