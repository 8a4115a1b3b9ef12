//! Reference figures reported for the physical device, kept as constants.
//!
//! The beverage LOOCV accuracy (95.3 %) and the accuracy implied by the
//! beverage confusion matrix (20/21 = 95.24 %) disagree in the last digit.
//! Both are recorded as reported; neither is derived from the other.

/// Beverage classification, leave-one-out cross-validation.
pub const BEVERAGE_LOOCV_ACCURACY: f64 = 0.953;
/// Mineral-water classification accuracy.
pub const MINERAL_WATER_ACCURACY: f64 = 0.617;
/// Human testers on the same four mineral waters.
pub const HUMAN_TESTER_ACCURACY: f64 = 0.306;

pub const BEVERAGE_CLASSES: [&str; 3] = ["A", "B", "C"];
/// Beverage confusion matrix, `[predicted][true]`.
pub const BEVERAGE_CONFUSION: [[u64; 3]; 3] = [[7, 1, 0], [0, 7, 0], [0, 0, 6]];

pub const MINERAL_WATER_CLASSES: [&str; 4] = ["I", "II", "III", "IV"];
/// Mineral-water confusion matrix, `[predicted][true]`.
pub const MINERAL_WATER_CONFUSION: [[u64; 4]; 4] =
    [[16, 2, 3, 1], [7, 7, 4, 6], [1, 6, 15, 2], [0, 3, 1, 20]];

/// Measurements per beverage class (confusion-matrix column sums).
pub const BEVERAGE_REPLICATES: [u32; 3] = [7, 8, 6];
/// Nominal measurements per mineral water.
pub const MINERAL_WATER_REPLICATES: u32 = 24;

fn matrix<const K: usize>(classes: [&str; K], rows: [[u64; K]; K]) -> crate::ConfusionMatrix {
    crate::ConfusionMatrix {
        classes: classes.iter().map(|s| s.to_string()).collect(),
        counts: rows.iter().map(|r| r.to_vec()).collect(),
    }
}

pub fn beverage_confusion() -> crate::ConfusionMatrix {
    matrix(BEVERAGE_CLASSES, BEVERAGE_CONFUSION)
}

pub fn mineral_water_confusion() -> crate::ConfusionMatrix {
    matrix(MINERAL_WATER_CLASSES, MINERAL_WATER_CONFUSION)
}
