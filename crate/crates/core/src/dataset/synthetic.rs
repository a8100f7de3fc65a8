use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ohlc::{Candle, OhlcSeries};

/// 2000-01-01T00:00:00Z.
pub const SYNTHETIC_START_MS: i64 = 946_684_800_000;
pub const SYNTHETIC_BAR_MS: i64 = 60_000;
pub const SUB_STEPS: usize = 4;
pub const MIN_SYNTHETIC_BARS: usize = 1000;

/// Geometric random walk parameters; `drift` and `volatility` are per bar
/// in log-price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_bars: usize,
    pub drift: f64,
    pub volatility: f64,
    pub initial_price: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            n_bars: 200_000,
            drift: 0.0,
            volatility: 0.001,
            initial_price: 1.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bars < MIN_SYNTHETIC_BARS {
            return Err(Error::invalid(format!(
                "synthetic series needs at least {MIN_SYNTHETIC_BARS} bars, got {}",
                self.n_bars
            )));
        }
        if !(self.volatility > 0.0 && self.volatility.is_finite()) {
            return Err(Error::invalid("volatility must be positive"));
        }
        if !(self.initial_price > 0.0 && self.initial_price.is_finite()) {
            return Err(Error::invalid("initial price must be positive"));
        }
        if !self.drift.is_finite() {
            return Err(Error::invalid("drift must be finite"));
        }
        Ok(())
    }
}

/// One-minute bars from a seeded geometric random walk. Each bar walks
/// `SUB_STEPS` sub-steps from the previous close; high and low are the
/// extremes of the visited prices.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<OhlcSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let step_drift = cfg.drift / SUB_STEPS as f64;
    let step_vol = cfg.volatility / (SUB_STEPS as f64).sqrt();
    let mut log_price = cfg.initial_price.ln();
    let mut candles = Vec::with_capacity(cfg.n_bars);
    for i in 0..cfg.n_bars {
        let open = log_price.exp();
        let (mut high, mut low) = (open, open);
        for _ in 0..SUB_STEPS {
            let z: f64 = StandardNormal.sample(&mut rng);
            log_price += step_drift + step_vol * z;
            let p = log_price.exp();
            high = high.max(p);
            low = low.min(p);
        }
        let close = log_price.exp();
        let ts = SYNTHETIC_START_MS + i as i64 * SYNTHETIC_BAR_MS;
        candles.push(Candle::new(ts, open, high, low, close)?);
    }
    OhlcSeries::new(candles)
}
