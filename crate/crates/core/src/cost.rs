//! Back-of-envelope bandwidth arithmetic for one allreduce per backward pass.

use std::fmt;

use crate::collectives::{bandwidth_requirement, predict_bytes};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostQuery {
    pub params: f64,
    pub bytes_per_param: f64,
    pub backprop_seconds: f64,
    pub servers: usize,
    /// Link rate in bits per second, if a verdict is wanted.
    pub link_bits: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub query: CostQuery,
    pub param_bytes: f64,
    pub per_server_bytes: f64,
    pub required_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Sufficient,
    Insufficient,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Sufficient => "sufficient",
            Verdict::Insufficient => "insufficient",
        })
    }
}

pub fn cost_report(query: CostQuery) -> Result<CostReport> {
    for (field, v) in [
        ("params", query.params),
        ("bytes_per_param", query.bytes_per_param),
        ("backprop_seconds", query.backprop_seconds),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(field, "must be a positive number"));
        }
    }
    if query.servers == 0 {
        return Err(Error::config("servers", "must be at least 1"));
    }
    if let Some(l) = query.link_bits {
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::config("link", "must be a positive number"));
        }
    }
    let param_bytes = query.params * query.bytes_per_param;
    Ok(CostReport {
        query,
        param_bytes,
        per_server_bytes: predict_bytes(query.servers, param_bytes),
        required_bits: bandwidth_requirement(
            query.params,
            query.bytes_per_param,
            query.backprop_seconds,
        ),
    })
}

impl CostReport {
    pub fn verdict(&self) -> Option<Verdict> {
        self.query.link_bits.map(|l| {
            if l >= self.required_bits {
                Verdict::Sufficient
            } else {
                Verdict::Insufficient
            }
        })
    }

    /// `"<size>MB parameters, <rate> Gbit/s peak"`, decimal units.
    pub fn headline(&self) -> String {
        format!(
            "{}MB parameters, {} Gbit/s peak",
            self.param_bytes / 1e6,
            self.required_bits / 1e9
        )
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.headline())?;
        writeln!(f, "parameter bytes: {}", self.param_bytes)?;
        writeln!(
            f,
            "allreduce bytes per server (p={}): {}",
            self.query.servers, self.per_server_bytes
        )?;
        writeln!(f, "required rate: {} bit/s", self.required_bits)?;
        if let (Some(v), Some(l)) = (self.verdict(), self.query.link_bits) {
            writeln!(f, "link {} Gbit/s: {v}", l / 1e9)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(secs: f64, link: Option<f64>) -> CostQuery {
        CostQuery {
            params: 25e6,
            bytes_per_param: 4.0,
            backprop_seconds: secs,
            servers: 32,
            link_bits: link,
        }
    }

    #[test]
    fn headline_numbers() {
        let r = cost_report(query(0.125, Some(50e9))).unwrap();
        assert_eq!(r.param_bytes, 100e6);
        assert_eq!(r.required_bits, 12.8e9);
        assert_eq!(r.headline(), "100MB parameters, 12.8 Gbit/s peak");
        assert_eq!(r.verdict(), Some(Verdict::Sufficient));
        assert!(r.to_string().contains("sufficient"));
    }

    #[test]
    fn slower_backprop_halves_rate() {
        let a = cost_report(query(0.125, None)).unwrap();
        let b = cost_report(query(0.25, None)).unwrap();
        assert_eq!(b.required_bits * 2.0, a.required_bits);
        assert_eq!(a.verdict(), None);
    }

    #[test]
    fn slow_link_is_insufficient() {
        let r = cost_report(query(0.125, Some(10e9))).unwrap();
        assert_eq!(r.verdict(), Some(Verdict::Insufficient));
    }

    #[test]
    fn rejects_non_positive() {
        assert!(cost_report(query(0.0, None)).is_err());
        assert!(cost_report(CostQuery {
            servers: 0,
            ..query(1.0, None)
        })
        .is_err());
    }
}
