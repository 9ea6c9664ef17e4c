use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Intensity window in Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityWindow {
    pub low: f64,
    pub high: f64,
}

impl Default for IntensityWindow {
    /// A standard lung window.
    fn default() -> Self {
        Self {
            low: -1250.0,
            high: 250.0,
        }
    }
}

impl IntensityWindow {
    pub fn new(low: f64, high: f64) -> Result<Self, DataError> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(DataError::DegenerateWindow { low, high });
        }
        Ok(Self { low, high })
    }
}

/// Clips to the window and rescales to `[0, 1]`.
pub fn normalize_value(v: f64, window: IntensityWindow) -> f64 {
    (v.clamp(window.low, window.high) - window.low) / (window.high - window.low)
}

pub fn normalize_intensity<D: Dimension>(
    voxels: &Array<f32, D>,
    window: IntensityWindow,
) -> Result<Array<f32, D>, DataError> {
    let window = IntensityWindow::new(window.low, window.high)?;
    Ok(voxels.mapv(|v| normalize_value(f64::from(v), window) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn window_endpoints_and_midpoint() {
        let w = IntensityWindow::new(-100.0, 300.0).unwrap();
        assert_eq!(normalize_value(-100.0, w), 0.0);
        assert_eq!(normalize_value(300.0, w), 1.0);
        assert_eq!(normalize_value(100.0, w), 0.5);
        assert_eq!(normalize_value(-5000.0, w), 0.0);
        assert_eq!(normalize_value(5000.0, w), 1.0);
    }

    #[test]
    fn default_lung_window() {
        let w = IntensityWindow::default();
        assert_eq!(normalize_value(-500.0, w), 0.5);
        assert_eq!(normalize_value(-125.0, w), 0.75);
    }

    #[test]
    fn degenerate_window_rejected() {
        let v = array![1.0f32, 2.0];
        let err = normalize_intensity(&v, IntensityWindow { low: 5.0, high: 5.0 }).unwrap_err();
        assert!(matches!(err, DataError::DegenerateWindow { .. }));
        assert!(IntensityWindow::new(3.0, -3.0).is_err());
    }

    proptest! {
        #[test]
        fn monotone(a in -3000.0f64..3000.0, b in -3000.0f64..3000.0) {
            let w = IntensityWindow::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_value(lo, w) <= normalize_value(hi, w));
        }

        #[test]
        fn unit_window_idempotent(v in proptest::collection::vec(-2.0f32..3.0, 1..32)) {
            let unit = IntensityWindow::new(0.0, 1.0).unwrap();
            let once = normalize_intensity(&ndarray::Array1::from(v), IntensityWindow::default()).unwrap();
            let again = normalize_intensity(&once, unit).unwrap();
            prop_assert_eq!(once, again);
        }
    }
}
