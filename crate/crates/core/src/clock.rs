//! Wall-clock abstraction. The core stays `no_std`; callers that want real
//! timing in run logs inject a clock (the lab crate provides one backed by
//! `std::time::Instant`).

/// Monotonic time source in seconds.
pub trait Clock {
    fn now_seconds(&self) -> f64;
}

/// Clock that always reads zero; run logs then report zero wall time.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}
