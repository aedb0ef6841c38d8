//! Tile sizes, the register-budget solver and memory-access accounting.

use std::fmt;

use crate::error::{Error, Result};

/// Tile extents along the activation rows (`e_p`), weight rows (`h_p`) and
/// the reduction axis (`l_p`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileConfig {
    pub e_p: usize,
    pub h_p: usize,
    pub l_p: usize,
}

/// Published per-architecture tiles.
pub const PRESETS: [(&str, TileConfig); 4] = [
    ("arm-i8sdot", TileConfig { e_p: 12, h_p: 8, l_p: 4 }),
    ("arm-i8mm", TileConfig { e_p: 10, h_p: 8, l_p: 8 }),
    ("x86-avx2", TileConfig { e_p: 4, h_p: 8, l_p: 4 }),
    ("x86-avx512", TileConfig { e_p: 4, h_p: 64, l_p: 4 }),
];

impl TileConfig {
    pub fn new(e_p: usize, h_p: usize, l_p: usize) -> Result<Self> {
        if e_p == 0 || h_p == 0 || l_p == 0 {
            return Err(Error::BadArg(format!("tile extents must be positive: ({e_p}, {h_p}, {l_p})")));
        }
        Ok(Self { e_p, h_p, l_p })
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::BadArg(format!("unknown tile preset '{name}'")))
    }

    /// Parse a `--tiles` value: a preset name or `solve:R,iw`.
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(args) = text.strip_prefix("solve:") {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::BadArg(format!("expected solve:R,iw, got '{text}'")));
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::BadArg(format!("'{s}' is not an integer")))
            };
            return solve_tile_sizes(parse(parts[0])?, parse(parts[1])?);
        }
        Self::preset(text)
    }

    /// Registers consumed by one micro-kernel: `e_p + h_p + h_p * e_p`.
    pub fn register_cost(&self) -> usize {
        self.e_p + self.h_p + self.h_p * self.e_p
    }
}

impl fmt::Display for TileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.e_p, self.h_p, self.l_p)
    }
}

/// `(1/e_p + 1/h_p)` as the exact fraction `(e_p + h_p) / (e_p * h_p)`.
fn access_ratio(e_p: usize, h_p: usize) -> (u128, u128) {
    ((e_p + h_p) as u128, (e_p * h_p) as u128)
}

/// Choose `(e_p, h_p)` minimizing `1/e_p + 1/h_p` under
/// `e_p + h_p + h_p * e_p <= R`, with `l_p = instruction_width`.
///
/// Exhaustive over `1..=R` on both axes. Ties prefer the larger `e_p`, then
/// the larger `h_p`.
pub fn solve_tile_sizes(registers: usize, instruction_width: usize) -> Result<TileConfig> {
    if registers < 3 {
        return Err(Error::Infeasible(format!("R={registers} cannot hold a 1x1 tile")));
    }
    if instruction_width == 0 {
        return Err(Error::Infeasible("instruction width must be at least 1".into()));
    }
    let mut best: Option<(usize, usize)> = None;
    for e_p in 1..=registers {
        for h_p in 1..=registers {
            if e_p + h_p + e_p * h_p > registers {
                break;
            }
            let better = match best {
                None => true,
                Some((be, bh)) => {
                    let (n1, d1) = access_ratio(e_p, h_p);
                    let (n0, d0) = access_ratio(be, bh);
                    let (lhs, rhs) = (n1 * d0, n0 * d1);
                    lhs < rhs || (lhs == rhs && (e_p, h_p) > (be, bh))
                }
            };
            if better {
                best = Some((e_p, h_p));
            }
        }
    }
    let (e_p, h_p) = best.expect("R >= 3 always admits (1, 1)");
    Ok(TileConfig { e_p, h_p, l_p: instruction_width })
}

/// Element loads plus stores for an `[e, l] x [h, l]^T` product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessCount {
    /// `2ehl + eh`
    pub naive: u64,
    /// `ceil(e/e_p) * ceil(h/h_p) * (L*e_p + L*h_p + h_p*e_p)`, `L = ceil(l/l_p) * l_p`
    pub tiled: u64,
    /// False when any extent is not a multiple of its tile and ceilings were used.
    pub exact: bool,
}

pub fn count_accesses(e: usize, h: usize, l: usize, t: &TileConfig) -> AccessCount {
    let (e64, h64, l64) = (e as u64, h as u64, l as u64);
    let naive = 2 * e64 * h64 * l64 + e64 * h64;
    let (ep, hp, lp) = (t.e_p as u64, t.h_p as u64, t.l_p as u64);
    let l_pad = l64.div_ceil(lp) * lp;
    let tiled = e64.div_ceil(ep) * h64.div_ceil(hp) * (l_pad * ep + l_pad * hp + hp * ep);
    let exact = e % t.e_p == 0 && h % t.h_p == 0 && l % t.l_p == 0;
    AccessCount { naive, tiled, exact }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent brute force: float objective, different loop order.
    fn brute_force_objective(r: usize) -> f64 {
        let mut best = f64::INFINITY;
        for h in (1..=r).rev() {
            for e in (1..=r).rev() {
                if e + h + e * h <= r {
                    best = best.min(1.0 / e as f64 + 1.0 / h as f64);
                }
            }
        }
        best
    }

    #[test]
    fn solver_examples() {
        assert_eq!(solve_tile_sizes(3, 4).unwrap(), TileConfig { e_p: 1, h_p: 1, l_p: 4 });
        assert_eq!(solve_tile_sizes(116, 4).unwrap(), TileConfig { e_p: 12, h_p: 8, l_p: 4 });
        assert_eq!(solve_tile_sizes(2, 4).unwrap_err().code(), "infeasible");
    }

    #[test]
    fn solver_matches_brute_force() {
        for r in 3..=200 {
            for iw in [4, 8] {
                let t = solve_tile_sizes(r, iw).unwrap();
                assert!(t.register_cost() <= r);
                assert_eq!(t.l_p, iw);
                let got = 1.0 / t.e_p as f64 + 1.0 / t.h_p as f64;
                assert!((got - brute_force_objective(r)).abs() < 1e-12, "R={r}");
            }
        }
    }

    #[test]
    fn presets_and_parse() {
        assert_eq!(TileConfig::parse("arm-i8sdot").unwrap(), TileConfig { e_p: 12, h_p: 8, l_p: 4 });
        assert_eq!(TileConfig::parse("arm-i8mm").unwrap(), TileConfig { e_p: 10, h_p: 8, l_p: 8 });
        assert_eq!(TileConfig::parse("x86-avx2").unwrap(), TileConfig { e_p: 4, h_p: 8, l_p: 4 });
        assert_eq!(TileConfig::parse("x86-avx512").unwrap(), TileConfig { e_p: 4, h_p: 64, l_p: 4 });
        assert_eq!(TileConfig::parse("solve:116,4").unwrap(), TileConfig { e_p: 12, h_p: 8, l_p: 4 });
        assert!(TileConfig::parse("riscv").is_err());
        assert!(TileConfig::parse("solve:1").is_err());
    }

    #[test]
    fn access_count_worked_example() {
        let t = TileConfig { e_p: 12, h_p: 8, l_p: 4 };
        let c = count_accesses(24, 16, 8, &t);
        assert_eq!(c.tiled, 2 * 2 * (8 * 12 + 8 * 8 + 8 * 12));
        assert_eq!(c.tiled, 1024);
        assert_eq!(c.naive, 6528);
        assert!(c.exact);
        let single = count_accesses(12, 8, 20, &t);
        assert_eq!(single.tiled, 20 * 12 + 20 * 8 + 8 * 12);
        assert!(!count_accesses(13, 8, 20, &t).exact);
    }

    #[test]
    fn larger_e_p_never_costs_more() {
        for h_p in 1..=8 {
            for e_p in 1..=8 {
                let (e, h, l) = (e_p * (e_p + 1) * 2, h_p * 3, 16);
                // shapes divisible by both e_p and e_p + 1
                let a = count_accesses(e, h, l, &TileConfig { e_p, h_p, l_p: 4 }).tiled;
                let b = count_accesses(e, h, l, &TileConfig { e_p: e_p + 1, h_p, l_p: 4 }).tiled;
                assert!(b <= a, "e_p {e_p} -> {} raised {a} to {b}", e_p + 1);
            }
        }
    }
}
