/// √(x² + eps): a differentiable over-approximation of |x| with
/// |x| ≤ smooth_abs(x, eps) ≤ |x| + √eps.
#[inline]
pub fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps).sqrt()
}
