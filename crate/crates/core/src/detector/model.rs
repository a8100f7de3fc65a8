use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaf::{FeatureSet, GafTensor};
use crate::nn::{
    BatchNorm2d, Checkpoint, Conv2d, Dense, LeakyRelu, MaxPool2, Mode, NamedTensor, Param,
    Tensor4,
};
use crate::ohlc::{PatternClass, MAX_WINDOW_SIZE, MIN_WINDOW_SIZE, WINDOW_LEN};

/// Raw values per sample: `[w0, c0, w1, c1, class scores x8]`.
pub const OUTPUT_LEN: usize = 4 + PatternClass::COUNT;
pub const BLOCKS: usize = 6;
/// Blocks followed by a 2x2 max pool.
pub const POOLED_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorArchitecture {
    pub widths: [usize; BLOCKS],
    pub kernels: [usize; BLOCKS],
}

impl Default for DetectorArchitecture {
    fn default() -> Self {
        DetectorArchitecture {
            widths: [16, 32, 64, 128, 128, 128],
            kernels: [3, 3, 3, 3, 1, 1],
        }
    }
}

impl DetectorArchitecture {
    /// Narrow variant for gradient checks and quick experiments.
    pub fn tiny() -> Self {
        DetectorArchitecture {
            widths: [2; BLOCKS],
            kernels: [3, 3, 3, 3, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid("kernel sizes must be odd"));
        }
        Ok(())
    }

    /// Spatial size after each block for a `WINDOW_LEN` input.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut size = WINDOW_LEN;
        let mut trace = vec![size];
        for b in 0..BLOCKS {
            if b < POOLED_BLOCKS {
                size /= 2;
            }
            trace.push(size);
        }
        trace
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_six(s: &str, what: &str) -> Result<[usize; BLOCKS]> {
    let vals = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::invalid(format!("{what} {s:?} is not a comma-separated list")))?;
    vals.try_into()
        .map_err(|_| Error::invalid(format!("{what} needs exactly {BLOCKS} entries")))
}

impl fmt::Display for DetectorArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "widths={} kernels={}", join(&self.widths), join(&self.kernels))
    }
}

impl FromStr for DetectorArchitecture {
    type Err = Error;

    /// Parses a comma-separated widths list; kernels keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let arch = DetectorArchitecture {
            widths: parse_six(s, "widths")?,
            ..Default::default()
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Squashed detector output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    /// `(w_norm, confidence)` for each predictor pair.
    pub pairs: [(f64, f64); 2],
    pub class_scores: [f64; PatternClass::COUNT],
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(z: &[f64]) -> [f64; PatternClass::COUNT] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; PatternClass::COUNT];
    let mut sum = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = (zi - m).exp();
        sum += *pi;
    }
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Half-away-from-zero rounding of `w_norm * 16`, clamped to the valid range.
pub fn window_from_norm(w_norm: f64) -> usize {
    let w = (w_norm * WINDOW_LEN as f64).round();
    (w.max(MIN_WINDOW_SIZE as f64) as usize).min(MAX_WINDOW_SIZE)
}

impl DetectorOutput {
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() != OUTPUT_LEN {
            return Err(Error::shape(format!("expected {OUTPUT_LEN} raw outputs, got {}", raw.len())));
        }
        Ok(DetectorOutput {
            pairs: [
                (sigmoid(raw[0]), sigmoid(raw[1])),
                (sigmoid(raw[2]), sigmoid(raw[3])),
            ],
            class_scores: softmax(&raw[4..]),
        })
    }

    /// Pair with the higher confidence; ties go to pair 0.
    pub fn best_pair(&self) -> usize {
        usize::from(self.pairs[1].1 > self.pairs[0].1)
    }

    /// Highest-probability class and its probability; ties go to the lower id.
    pub fn top_class(&self) -> (PatternClass, f64) {
        let mut best = 0;
        for i in 1..PatternClass::COUNT {
            if self.class_scores[i] > self.class_scores[best] {
                best = i;
            }
        }
        (PatternClass::ALL[best], self.class_scores[best])
    }

    pub fn predicted_window(&self) -> usize {
        window_from_norm(self.pairs[self.best_pair()].0)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: LeakyRelu,
    pool: Option<MaxPool2>,
}

/// Six conv blocks and a dense head over a `4 x 16 x 16` GAF tensor.
#[derive(Debug, Clone)]
pub struct Detector {
    arch: DetectorArchitecture,
    feature_set: FeatureSet,
    blocks: Vec<Block>,
    head: Dense,
}

impl Detector {
    pub fn new(arch: DetectorArchitecture, feature_set: FeatureSet, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut in_ch = GafTensor::CHANNELS;
        for b in 0..BLOCKS {
            let name = format!("block{}", b + 1);
            let out = arch.widths[b];
            blocks.push(Block {
                conv: Conv2d::new(&format!("{name}.conv"), in_ch, out, arch.kernels[b], rng)?,
                bn: BatchNorm2d::new(&format!("{name}.bn"), out),
                act: LeakyRelu::new(LeakyRelu::DEFAULT_SLOPE)?,
                pool: (b < POOLED_BLOCKS).then(MaxPool2::new),
            });
            in_ch = out;
        }
        let head = Dense::new("head", in_ch, OUTPUT_LEN, rng);
        Ok(Detector {
            arch,
            feature_set,
            blocks,
            head,
        })
    }

    pub fn architecture(&self) -> &DetectorArchitecture {
        &self.arch
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.feature_set
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let expected = [GafTensor::CHANNELS, WINDOW_LEN, WINDOW_LEN];
        if x.shape()[1..] != expected {
            return Err(Error::shape(format!(
                "detector input must be (n, {}, {}, {}), got {:?}",
                expected[0],
                expected[1],
                expected[2],
                x.shape()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Raw outputs `(n, 12, 1, 1)`; caches activations for `backward`.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.conv.forward(&h)?;
            h = block.bn.forward(&h, mode)?;
            h = block.act.forward(&h);
            if let Some(pool) = &mut block.pool {
                h = pool.forward(&h)?;
            }
        }
        self.head.forward(&h)
    }

    /// Inference-mode raw outputs without touching any cached state.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.conv.infer(&h)?;
            h = block.bn.infer(&h)?;
            h = crate::nn::leaky_relu(&h, LeakyRelu::DEFAULT_SLOPE);
            if block.pool.is_some() {
                h = MaxPool2::apply(&h)?;
            }
        }
        crate::nn::dense_forward(
            &h,
            &self.head.weight.value,
            &self.head.bias.value,
            h.sample_len(),
            OUTPUT_LEN,
        )
    }

    pub fn predict(&self, x: &Tensor4) -> Result<Vec<DetectorOutput>> {
        let raw = self.infer(x)?;
        (0..raw.batch()).map(|s| DetectorOutput::from_raw(raw.sample(s))).collect()
    }

    /// Accumulates parameter gradients for `d loss / d raw outputs` and
    /// returns the input gradient.
    pub fn backward(&mut self, d_raw: &Tensor4) -> Result<Tensor4> {
        let mut d = self.head.backward(d_raw)?;
        for block in self.blocks.iter_mut().rev() {
            if let Some(pool) = &mut block.pool {
                d = pool.backward(&d)?;
            }
            d = block.act.backward(&d)?;
            d = block.bn.backward(&d)?;
            d = block.conv.backward(&d)?;
        }
        Ok(d)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = vec![
            ("widths".to_string(), join(&self.arch.widths)),
            ("kernels".to_string(), join(&self.arch.kernels)),
            ("feature_set".to_string(), self.feature_set.as_str().to_string()),
        ];
        let mut tensors: Vec<NamedTensor> = self
            .params()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.value.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        for (b, block) in self.blocks.iter().enumerate() {
            let st = &block.bn.state;
            for (suffix, vals) in [("running_mean", &st.running_mean), ("running_var", &st.running_var)] {
                tensors.push(NamedTensor {
                    name: format!("block{}.bn.{suffix}", b + 1),
                    shape: vec![vals.len()],
                    values: vals.iter().map(|&v| v as f32).collect(),
                });
            }
        }
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::format("checkpoint", format!("missing meta {k}")))
        };
        let arch = DetectorArchitecture {
            widths: parse_six(meta("widths")?, "widths")?,
            kernels: parse_six(meta("kernels")?, "kernels")?,
        };
        let feature_set: FeatureSet = meta("feature_set")?.parse()?;
        // weights are overwritten below; the generator only sizes the tensors
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Detector::new(arch, feature_set, &mut rng)?;
        let fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if t.values.len() != len {
                return Err(Error::format("checkpoint", format!("tensor {name} has wrong size")));
            }
            Ok(t.values.iter().map(|&v| f64::from(v)).collect())
        };
        for p in model.params_mut() {
            p.value = fetch(&p.name, p.len())?;
        }
        for (b, block) in model.blocks.iter_mut().enumerate() {
            let c = block.bn.channels();
            block.bn.state.running_mean = fetch(&format!("block{}.bn.running_mean", b + 1), c)?;
            block.bn.state.running_var = fetch(&format!("block{}.bn.running_var", b + 1), c)?;
        }
        Ok(model)
    }
}
