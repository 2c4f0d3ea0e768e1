//! Routing-policy names used on the command line and in configs.
//!
//! Grammar: `full`, `top<k>`, `top-p<p>`, `misaligned<k>`, `weight-clip`, each
//! optionally followed by `@T<temperature>`; e.g. `top2@T0.5`, `top-p0.9`.

use anyhow::{anyhow, bail};
use ddm_core::router::{PolicyKind, RoutingPolicy};

pub const VALID_POLICIES: &str = "full, top<k> (e.g. top2), top-p<p> (e.g. top-p0.9), misaligned<k>, weight-clip; \
     append @T<temperature> to rescale logits (e.g. full@T0.5)";

/// Seed of the misaligned-routing stream when a name does not carry one.
pub const MISALIGNED_SEED: u64 = 0x5EED_0A11;

pub fn parse_policy(name: &str) -> anyhow::Result<RoutingPolicy> {
    let usage = || anyhow!("unknown policy '{name}'; valid policies: {VALID_POLICIES}");
    let lower = name.trim().to_ascii_lowercase();
    let (base, temp) = match lower.split_once("@t") {
        Some((b, t)) => (b, Some(t.parse::<f64>().map_err(|_| usage())?)),
        None => (lower.as_str(), None),
    };
    let kind = if base == "full" {
        PolicyKind::Full
    } else if base == "weight-clip" {
        PolicyKind::WeightClip
    } else if let Some(p) = base.strip_prefix("top-p") {
        PolicyKind::TopP {
            p: p.parse().map_err(|_| usage())?,
        }
    } else if let Some(k) = base.strip_prefix("misaligned") {
        PolicyKind::MisalignedTopK {
            k: k.parse().map_err(|_| usage())?,
            seed: MISALIGNED_SEED,
        }
    } else if let Some(k) = base.strip_prefix("top") {
        PolicyKind::TopK {
            k: k.parse().map_err(|_| usage())?,
        }
    } else {
        return Err(usage());
    };
    let policy = RoutingPolicy::new(kind);
    let policy = match temp {
        Some(t) if !(t > 0.0 && t.is_finite()) => bail!("policy '{name}': temperature must be positive"),
        Some(t) => policy.with_temperature(t),
        None => policy,
    };
    Ok(policy)
}

/// Canonical short name, the inverse of [`parse_policy`].
pub fn policy_name(policy: &RoutingPolicy) -> String {
    let base = match policy.kind {
        PolicyKind::Full => "full".to_string(),
        PolicyKind::TopK { k } => format!("top{k}"),
        PolicyKind::TopP { p } => format!("top-p{p}"),
        PolicyKind::MisalignedTopK { k, .. } => format!("misaligned{k}"),
        PolicyKind::WeightClip => "weight-clip".to_string(),
    };
    if policy.temperature == 1.0 {
        base
    } else {
        format!("{base}@T{}", policy.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_family() {
        assert_eq!(parse_policy("full").unwrap(), RoutingPolicy::full());
        assert_eq!(parse_policy("Top2").unwrap(), RoutingPolicy::top_k(2));
        assert_eq!(parse_policy("top-p0.9").unwrap(), RoutingPolicy::top_p(0.9));
        assert_eq!(parse_policy("misaligned2").unwrap(), RoutingPolicy::misaligned(2, MISALIGNED_SEED));
        assert_eq!(parse_policy("weight-clip").unwrap(), RoutingPolicy::weight_clip());
        assert_eq!(parse_policy("full@T0.5").unwrap(), RoutingPolicy::full().with_temperature(0.5));
    }

    #[test]
    fn names_round_trip() {
        for n in ["full", "top1", "top-p0.8", "misaligned2", "weight-clip", "top2@T4"] {
            assert_eq!(policy_name(&parse_policy(n).unwrap()), n);
        }
    }

    #[test]
    fn unknown_names_list_valid_policies() {
        let err = parse_policy("bogus").unwrap_err().to_string();
        assert!(err.contains("valid policies") && err.contains("top-p"));
        assert!(parse_policy("topx").is_err());
        assert!(parse_policy("full@T-1").is_err());
    }
}
