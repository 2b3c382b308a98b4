//! Learning-rate schedules: warmup/decay in the two recipe shapes.

/// Linear ramp to `peak` over `warmup` steps, then linear decay to zero at
/// `total`; zero afterwards.
pub fn lr_hubert(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        if warmup == 0 {
            return peak;
        }
        return peak * step as f64 / warmup as f64;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}

/// Linear warmup over `warmup` steps, constant `peak` for `constant` steps,
/// linear decay to zero over the following `decay` steps.
pub fn lr_dino(step: u64, peak: f64, warmup: u64, constant: u64, decay: u64) -> f64 {
    if step < warmup {
        if warmup == 0 {
            return peak;
        }
        return peak * step as f64 / warmup as f64;
    }
    let after_warmup = step - warmup;
    if after_warmup < constant {
        return peak;
    }
    let into_decay = after_warmup - constant;
    if into_decay >= decay {
        return 0.0;
    }
    peak * (1.0 - into_decay as f64 / decay as f64)
}
