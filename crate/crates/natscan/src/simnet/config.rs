//! Scenario ground truth: the full description of a simulated topology.
//!
//! One TOML file describes one topology. Unknown keys are rejected so typos
//! in ground-truth fixtures fail loudly instead of silently changing the
//! scenario.

use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::is_private_addr;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// How a simulated host stamps the IPID field of packets it emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IpidPolicy {
    /// One host-global counter: every emitted packet, to any destination,
    /// increments it by 1 (mod 65536) and stamps the new value.
    Global { initial: u16 },
    /// One counter per remote address, each starting at `initial`.
    PerFlow { initial: u16 },
    /// Uniformly random value per packet. The stream is derived from the
    /// scenario seed unless an explicit seed is given.
    Random {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// The same value on every packet.
    Constant { value: u16 },
}

/// SYN-ACK retransmission schedule knobs. With doubling intervals the
/// offsets from the first SYN-ACK are `first_interval_s * (2^i - 1)`:
/// first_interval_s=1, count=5 gives {1,3,7,15,31}; first_interval_s=3
/// gives {3,9,21,45,93}. `doubling = false` produces a fixed-interval
/// schedule, useful as a non-conforming calibration fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetransBehavior {
    pub first_interval_s: u32,
    pub count: u32,
    #[serde(default = "default_true")]
    pub doubling: bool,
}

impl Default for RetransBehavior {
    fn default() -> Self {
        RetransBehavior { first_interval_s: 1, count: 5, doubling: true }
    }
}

impl RetransBehavior {
    /// Retransmission offsets in seconds, relative to the first SYN-ACK.
    pub fn offsets_s(&self) -> Vec<u32> {
        (1..=self.count)
            .map(|i| {
                if self.doubling {
                    self.first_interval_s * ((1u32 << i) - 1)
                } else {
                    self.first_interval_s * i
                }
            })
            .collect()
    }
}

/// Gateway-side treatment of inbound packets from the public side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPolicy {
    /// Drops any inbound packet whose claimed source could not have
    /// legitimately originated outside the gateway (every spoofed source,
    /// private ones included).
    BlockAllSpoofed,
    /// Drops only inbound packets carrying an RFC 1918 source.
    BlockPrivateSourceOnly,
    /// Drops nothing.
    NoFiltering,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy::NoFiltering
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InternalHost {
    pub ip: Ipv4Addr,
    #[serde(default = "default_true")]
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutpostConfig {
    pub public_ip: Ipv4Addr,
    #[serde(default = "default_ports")]
    pub open_ports: Vec<u16>,
    pub ipid: IpidPolicy,
    #[serde(default)]
    pub retrans: RetransBehavior,
    #[serde(default)]
    pub filter: FilterPolicy,
    #[serde(default)]
    pub hole: bool,
    #[serde(default)]
    pub noise_pps: f64,
    /// Set to false to model a host that silently ignores unsolicited
    /// SYN-ACKs instead of answering RST.
    #[serde(default = "default_true")]
    pub rst_to_unsolicited_synack: bool,
    /// Set to true to model an inbound firewall that drops SYNs outright.
    #[serde(default)]
    pub drop_inbound_syn: bool,
    #[serde(default, rename = "internal")]
    pub internal_hosts: Vec<InternalHost>,
}

/// Full ground-truth description of a simulated topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scanner_ip: Ipv4Addr,
    pub rng_seed: u64,
    #[serde(default)]
    pub link_loss_prob: f64,
    /// Per-packet delivery delay drawn uniformly from [0, jitter_ms].
    #[serde(default)]
    pub jitter_ms: u64,
    #[serde(default, rename = "outpost")]
    pub outposts: Vec<OutpostConfig>,
}

fn default_true() -> bool {
    true
}

fn default_ports() -> Vec<u16> {
    vec![80]
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let scenario: Scenario = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if is_private_addr(self.scanner_ip) {
            return inv(format!("scanner_ip {} must be public", self.scanner_ip));
        }
        if !(0.0..1.0).contains(&self.link_loss_prob) {
            return inv(format!("link_loss_prob {} must be in [0, 1)", self.link_loss_prob));
        }
        let mut seen = std::collections::HashSet::new();
        seen.insert(self.scanner_ip);
        for o in &self.outposts {
            if is_private_addr(o.public_ip) {
                return inv(format!("outpost {} must have a public address", o.public_ip));
            }
            if !seen.insert(o.public_ip) {
                return inv(format!("duplicate address {}", o.public_ip));
            }
            // Private addresses are scoped to their LAN and may repeat
            // across outposts.
            let mut lan = std::collections::HashSet::new();
            if o.open_ports.is_empty() {
                return inv(format!("outpost {} has no open ports", o.public_ip));
            }
            if !(3..=5).contains(&o.retrans.count) {
                return inv(format!(
                    "outpost {}: retrans count {} outside [3, 5]",
                    o.public_ip, o.retrans.count
                ));
            }
            if o.retrans.first_interval_s == 0 {
                return inv(format!("outpost {}: retrans interval must be positive", o.public_ip));
            }
            if o.noise_pps < 0.0 || !o.noise_pps.is_finite() {
                return inv(format!("outpost {}: noise_pps must be finite and >= 0", o.public_ip));
            }
            for h in &o.internal_hosts {
                if !is_private_addr(h.ip) {
                    return inv(format!(
                        "internal host {} behind {} must be private",
                        h.ip, o.public_ip
                    ));
                }
                if !lan.insert(h.ip) {
                    return inv(format!("duplicate internal host {} behind {}", h.ip, o.public_ip));
                }
            }
        }
        Ok(())
    }

    pub fn outpost(&self, ip: Ipv4Addr) -> Option<&OutpostConfig> {
        self.outposts.iter().find(|o| o.public_ip == ip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_scenario() -> &'static str {
        r#"
            scanner_ip = "198.51.100.9"
            rng_seed = 42

            [[outpost]]
            public_ip = "203.0.113.5"
            ipid = { policy = "global", initial = 500 }
            retrans = { first_interval_s = 1, count = 4 }
            hole = true
            internal = [{ ip = "192.168.1.17" }]
        "#
    }

    #[test]
    fn parses_and_validates() {
        let s: Scenario = toml::from_str(base_scenario()).unwrap();
        s.validate().unwrap();
        let o = &s.outposts[0];
        assert_eq!(o.open_ports, vec![80]);
        assert_eq!(o.retrans.offsets_s(), vec![1, 3, 7, 15]);
        assert_eq!(o.filter, FilterPolicy::NoFiltering);
        assert!(o.internal_hosts[0].alive);
    }

    #[test]
    fn doubling_presets() {
        let r = RetransBehavior { first_interval_s: 1, count: 5, doubling: true };
        assert_eq!(r.offsets_s(), vec![1, 3, 7, 15, 31]);
        let r = RetransBehavior { first_interval_s: 3, count: 5, doubling: true };
        assert_eq!(r.offsets_s(), vec![3, 9, 21, 45, 93]);
        let r = RetransBehavior { first_interval_s: 2, count: 3, doubling: false };
        assert_eq!(r.offsets_s(), vec![2, 4, 6]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{}\nbogus_key = 1\n", base_scenario());
        assert!(toml::from_str::<Scenario>(&text).is_err());
    }

    #[test]
    fn validation_catches_bad_ground_truth() {
        let mut s: Scenario = toml::from_str(base_scenario()).unwrap();
        s.outposts[0].internal_hosts[0].ip = Ipv4Addr::new(8, 8, 8, 8);
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(base_scenario()).unwrap();
        s.link_loss_prob = 1.0;
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(base_scenario()).unwrap();
        s.outposts[0].retrans.count = 6;
        assert!(s.validate().is_err());

        let mut s: Scenario = toml::from_str(base_scenario()).unwrap();
        s.outposts[0].public_ip = Ipv4Addr::new(10, 0, 0, 1);
        assert!(s.validate().is_err());
    }
}
