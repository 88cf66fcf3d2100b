pub const LN_10: f64 = std::f64::consts::LN_10;

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
