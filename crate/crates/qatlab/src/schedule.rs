//! Warmup–stable–decay learning-rate schedule and the named magnitude
//! presets.
//!
//! The multiplier ramps linearly from 0 over the warmup, holds at 1 on the
//! plateau, and decays over the final `round(fraction · T)` steps, either
//! linearly or along a half cosine. Step `T` itself is inside the warmdown,
//! so any nonzero warmdown ends at multiplier 0.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Decay curve over the warmdown window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmdownShape {
    Linear,
    Cosine,
}

impl WarmdownShape {
    pub fn as_str(self) -> &'static str {
        match self {
            WarmdownShape::Linear => "linear",
            WarmdownShape::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(WarmdownShape::Linear),
            "cosine" => Ok(WarmdownShape::Cosine),
            other => Err(Error::config(format!(
                "unknown warmdown shape '{other}' (expected linear|cosine)"
            ))),
        }
    }
}

/// Named warmdown fractions used throughout the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WdTag {
    Wd00,
    Wd10,
    Wd33,
    Wd50,
}

impl WdTag {
    pub const ALL: [WdTag; 4] = [WdTag::Wd00, WdTag::Wd10, WdTag::Wd33, WdTag::Wd50];

    pub fn fraction(self) -> f64 {
        match self {
            WdTag::Wd00 => 0.0,
            WdTag::Wd10 => 0.10,
            WdTag::Wd33 => 0.33,
            WdTag::Wd50 => 0.50,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WdTag::Wd00 => "wd00",
            WdTag::Wd10 => "wd10",
            WdTag::Wd33 => "wd33",
            WdTag::Wd50 => "wd50",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wd00" => Ok(WdTag::Wd00),
            "wd10" => Ok(WdTag::Wd10),
            "wd33" => Ok(WdTag::Wd33),
            "wd50" => Ok(WdTag::Wd50),
            other => Err(Error::config(format!(
                "unknown warmdown tag '{other}' (expected wd00|wd10|wd33|wd50)"
            ))),
        }
    }
}

impl std::fmt::Display for WdTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub warmdown_fraction: f64,
    pub shape: WarmdownShape,
}

pub const DEFAULT_WARMUP_STEPS: u64 = 100;

impl ScheduleConfig {
    pub fn new(
        total_steps: u64,
        warmup_steps: u64,
        warmdown_fraction: f64,
        shape: WarmdownShape,
    ) -> Result<Self> {
        let wd = warmdown_steps(total_steps, warmdown_fraction)?;
        if warmup_steps + wd > total_steps {
            return Err(Error::config(format!(
                "warmup {warmup_steps} + warmdown {wd} exceed total {total_steps} steps"
            )));
        }
        Ok(ScheduleConfig {
            total_steps,
            warmup_steps,
            warmdown_fraction,
            shape,
        })
    }

    pub fn warmdown_steps(&self) -> u64 {
        // Constructor validated the fraction; this cannot fail afterwards.
        warmdown_steps(self.total_steps, self.warmdown_fraction).expect("validated fraction")
    }
}

/// `round(fraction · T)`, half away from zero.
pub fn warmdown_steps(total_steps: u64, fraction: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "warmdown fraction {fraction} outside [0, 1)"
        )));
    }
    Ok((fraction * total_steps as f64).round() as u64)
}

/// Schedule multiplier at integer step `t ∈ [0, T]`.
pub fn lr_at(t: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if t > cfg.total_steps {
        return Err(Error::domain(format!(
            "step {t} beyond schedule end {}",
            cfg.total_steps
        )));
    }
    if t < cfg.warmup_steps {
        return Ok(t as f64 / cfg.warmup_steps as f64);
    }
    let wd = cfg.warmdown_steps();
    let decay_start = cfg.total_steps - wd;
    if wd == 0 || t <= decay_start {
        return Ok(1.0);
    }
    let u = (t - decay_start) as f64 / wd as f64;
    Ok(match cfg.shape {
        WarmdownShape::Linear => 1.0 - u,
        WarmdownShape::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * u).cos()),
    })
}

/// Magnitude preset selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrTag {
    Lr05,
    Lr1x,
    Lr2x,
    AdamwCal,
}

impl LrTag {
    pub const ALL: [LrTag; 4] = [LrTag::Lr05, LrTag::Lr1x, LrTag::Lr2x, LrTag::AdamwCal];

    pub fn as_str(self) -> &'static str {
        match self {
            LrTag::Lr05 => "lr05",
            LrTag::Lr1x => "lr1x",
            LrTag::Lr2x => "lr2x",
            LrTag::AdamwCal => "adamw_cal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lr05" => Ok(LrTag::Lr05),
            "lr1x" => Ok(LrTag::Lr1x),
            "lr2x" => Ok(LrTag::Lr2x),
            "adamw_cal" => Ok(LrTag::AdamwCal),
            other => Err(Error::config(format!(
                "unknown learning-rate tag '{other}' (expected lr05|lr1x|lr2x|adamw_cal)"
            ))),
        }
    }
}

impl std::fmt::Display for LrTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Peak learning rates per parameter family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMagnitudes {
    pub matrix_lr: f64,
    pub scalar_lr: f64,
    pub tied_embed_lr: f64,
}

pub fn lr_magnitudes(tag: LrTag) -> LrMagnitudes {
    match tag {
        LrTag::Lr05 => LrMagnitudes {
            matrix_lr: 0.00625,
            scalar_lr: 0.00625,
            tied_embed_lr: 0.00875,
        },
        LrTag::Lr1x => LrMagnitudes {
            matrix_lr: 0.0125,
            scalar_lr: 0.0125,
            tied_embed_lr: 0.0175,
        },
        LrTag::Lr2x => LrMagnitudes {
            matrix_lr: 0.025,
            scalar_lr: 0.025,
            tied_embed_lr: 0.035,
        },
        LrTag::AdamwCal => LrMagnitudes {
            matrix_lr: 0.001,
            scalar_lr: 0.001,
            tied_embed_lr: 0.0014,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg(total: u64, frac: f64, shape: WarmdownShape) -> ScheduleConfig {
        ScheduleConfig::new(total, DEFAULT_WARMUP_STEPS, frac, shape).unwrap()
    }

    #[test]
    fn warmdown_table_all_twelve_cells() {
        let cases = [
            (9_000u64, [0u64, 900, 2_970, 4_500]),
            (27_000, [0, 2_700, 8_910, 13_500]),
            (81_000, [0, 8_100, 26_730, 40_500]),
        ];
        for (total, expected) in cases {
            for (tag, want) in WdTag::ALL.iter().zip(expected) {
                assert_eq!(
                    warmdown_steps(total, tag.fraction()).unwrap(),
                    want,
                    "{tag} at T={total}"
                );
            }
        }
    }

    #[test]
    fn endpoints_and_midpoints() {
        for shape in [WarmdownShape::Linear, WarmdownShape::Cosine] {
            let c = cfg(9_000, 0.33, shape);
            assert_relative_eq!(lr_at(0, &c).unwrap(), 0.0);
            assert_relative_eq!(lr_at(50, &c).unwrap(), 0.5, epsilon = 1e-12);
            assert_relative_eq!(lr_at(100, &c).unwrap(), 1.0);
            // Warmdown covers the last 2970 steps, so step 6030 still rides
            // the plateau and the decay midpoint lands at 6030 + 1485.
            assert_relative_eq!(lr_at(6_030, &c).unwrap(), 1.0);
            assert_relative_eq!(lr_at(6_030 + 1_485, &c).unwrap(), 0.5, epsilon = 1e-12);
            assert!(lr_at(9_000, &c).unwrap().abs() < 1e-12);
        }
        let flat = cfg(9_000, 0.0, WarmdownShape::Linear);
        assert_relative_eq!(lr_at(9_000, &flat).unwrap(), 1.0);
    }

    #[test]
    fn beyond_schedule_end_is_rejected() {
        let c = cfg(200, 0.33, WarmdownShape::Linear);
        assert!(lr_at(200, &c).is_ok());
        assert!(lr_at(201, &c).is_err());
        assert!(warmdown_steps(100, 1.0).is_err());
        assert!(warmdown_steps(100, -0.1).is_err());
        assert!(ScheduleConfig::new(90, 100, 0.0, WarmdownShape::Linear).is_err());
    }

    #[test]
    fn magnitude_presets() {
        let m = lr_magnitudes(LrTag::Lr1x);
        assert_eq!((m.matrix_lr, m.scalar_lr, m.tied_embed_lr), (0.0125, 0.0125, 0.0175));
        let h = lr_magnitudes(LrTag::Lr05);
        assert_eq!(h.matrix_lr, m.matrix_lr * 0.5);
        assert_eq!(h.scalar_lr, m.scalar_lr * 0.5);
        assert_eq!(h.tied_embed_lr, m.tied_embed_lr * 0.5);
        let d = lr_magnitudes(LrTag::Lr2x);
        assert_eq!((d.matrix_lr, d.scalar_lr, d.tied_embed_lr), (0.025, 0.025, 0.035));
        let a = lr_magnitudes(LrTag::AdamwCal);
        assert_eq!((a.matrix_lr, a.scalar_lr, a.tied_embed_lr), (0.001, 0.001, 0.0014));
        assert!(LrTag::parse("lr3x").is_err());
        assert_eq!(LrTag::parse("adamw_cal").unwrap(), LrTag::AdamwCal);
    }

    #[test]
    fn cosine_and_linear_agree_at_quarter_points() {
        let lin = cfg(1_000, 0.5, WarmdownShape::Linear);
        let cos = cfg(1_000, 0.5, WarmdownShape::Cosine);
        for (t, same) in [(500, true), (750, true), (1_000, true), (625, false)] {
            let a = lr_at(t, &lin).unwrap();
            let b = lr_at(t, &cos).unwrap();
            if same {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            } else {
                assert!((a - b).abs() > 1e-3);
            }
        }
    }

    proptest! {
        #[test]
        fn multiplier_stays_in_unit_interval(total in 200u64..100_000,
                                             frac in 0.0f64..0.95,
                                             shape in prop_oneof![Just(WarmdownShape::Linear),
                                                                  Just(WarmdownShape::Cosine)],
                                             pick in 0.0f64..1.0) {
            prop_assume!(DEFAULT_WARMUP_STEPS + (frac * total as f64).round() as u64 <= total);
            let c = cfg(total, frac, shape);
            let t = (pick * total as f64) as u64;
            let v = lr_at(t, &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn piecewise_monotonicity(total in 300u64..50_000,
                                  frac in 0.0f64..0.9,
                                  shape in prop_oneof![Just(WarmdownShape::Linear),
                                                       Just(WarmdownShape::Cosine)]) {
            prop_assume!(DEFAULT_WARMUP_STEPS + (frac * total as f64).round() as u64 <= total);
            let c = cfg(total, frac, shape);
            let wd = c.warmdown_steps();
            let start = total - wd;
            let mut prev = lr_at(0, &c).unwrap();
            for t in 1..=DEFAULT_WARMUP_STEPS {
                let v = lr_at(t, &c).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            for t in (DEFAULT_WARMUP_STEPS..=start).step_by(97) {
                prop_assert_eq!(lr_at(t, &c).unwrap(), 1.0);
            }
            let mut prev = lr_at(start, &c).unwrap();
            let stride = (wd / 50).max(1);
            let mut t = start;
            while t < total {
                t = (t + stride).min(total);
                let v = lr_at(t, &c).unwrap();
                prop_assert!(v <= prev + 1e-15);
                prev = v;
            }
        }
    }
}
