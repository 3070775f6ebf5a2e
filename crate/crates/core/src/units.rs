//! Durations are `f64` nanoseconds inside the crate; I/O boundaries use
//! microseconds.

pub const NS_PER_US: f64 = 1e3;
pub const NS_PER_S: f64 = 1e9;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

#[inline]
pub fn s_to_ns(s: f64) -> f64 {
    s * NS_PER_S
}

#[inline]
pub fn ns_to_us(ns: f64) -> f64 {
    ns / NS_PER_US
}

#[inline]
pub fn ns_to_s(ns: f64) -> f64 {
    ns / NS_PER_S
}
