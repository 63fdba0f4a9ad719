use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlopsError {
    #[error("patch count and width must be positive (n = {n}, d = {d})")]
    NonPositive { n: u64, d: u64 },
    #[error("operation count overflows 128 bits (n = {n}, d = {d})")]
    Overflow { n: u64, d: u64 },
}

/// DeiT-Base style operation count `144·N·D² + 24·N²·D`, exact in `u128`.
pub fn flops_deit(n: u64, d: u64) -> Result<u128, FlopsError> {
    if n == 0 || d == 0 {
        return Err(FlopsError::NonPositive { n, d });
    }
    let (nn, dd) = (u128::from(n), u128::from(d));
    let linear = nn.checked_mul(dd * dd).and_then(|v| v.checked_mul(144));
    let quadratic = (nn * nn).checked_mul(dd).and_then(|v| v.checked_mul(24));
    linear.zip(quadratic).and_then(|(a, b)| a.checked_add(b)).ok_or(FlopsError::Overflow { n, d })
}

/// Server compute for `selected` patches as a fraction of the full `total`.
pub fn server_compute_ratio(selected: u64, total: u64, d: u64) -> Result<f64, FlopsError> {
    Ok(flops_deit(selected, d)? as f64 / flops_deit(total, d)? as f64)
}
