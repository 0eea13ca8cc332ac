//! Per-level horizontal reductions and their cross-server combination.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::DiagnosticAction;
use super::message::DiagnosticMessage;
use crate::error::{CommError, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionOperator {
    Mean,
    Max,
    Min,
    Sum,
}

impl FromStr for ReductionOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ReductionOperator::Mean),
            "max" => Ok(ReductionOperator::Max),
            "min" => Ok(ReductionOperator::Min),
            "sum" => Ok(ReductionOperator::Sum),
            other => Err(Error::config(format!("unknown operator `{other}`"))),
        }
    }
}

impl fmt::Display for ReductionOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionOperator::Mean => "mean",
            ReductionOperator::Max => "max",
            ReductionOperator::Min => "min",
            ReductionOperator::Sum => "sum",
        })
    }
}

/// Per-level partial result. For `mean` and `sum` the values are running
/// sums; the point count per level is always carried so means combine
/// exactly across servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPartial {
    pub operator: ReductionOperator,
    pub values: Vec<f64>,
    pub counts: Vec<u64>,
}

impl LevelPartial {
    pub fn empty(operator: ReductionOperator, nz: usize) -> Self {
        let init = match operator {
            ReductionOperator::Mean | ReductionOperator::Sum => 0.0,
            ReductionOperator::Max => f64::NEG_INFINITY,
            ReductionOperator::Min => f64::INFINITY,
        };
        LevelPartial {
            operator,
            values: vec![init; nz],
            counts: vec![0; nz],
        }
    }

    #[inline]
    fn fold(&mut self, k: usize, v: f64) {
        let slot = &mut self.values[k];
        match self.operator {
            ReductionOperator::Mean | ReductionOperator::Sum => *slot += v,
            ReductionOperator::Max => *slot = slot.max(v),
            ReductionOperator::Min => *slot = slot.min(v),
        }
    }

    pub fn absorb(&mut self, msg: &DiagnosticMessage) {
        let nz = msg.extent.nz;
        let columns = msg.data.len().checked_div(nz).unwrap_or(0);
        for c in 0..columns {
            for k in 0..nz {
                self.fold(k, msg.data.at(c * nz + k));
                self.counts[k] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &LevelPartial) {
        for k in 0..self.values.len() {
            self.fold(k, other.values[k]);
            self.counts[k] += other.counts[k];
        }
    }

    /// Final per-level values; a level with no points yields NaN.
    pub fn finish(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.counts)
            .map(|(&v, &n)| match self.operator {
                _ if n == 0 => f64::NAN,
                ReductionOperator::Mean => v / n as f64,
                _ => v,
            })
            .collect()
    }
}

/// Reduces every slab a server holds for one `(field, timestep)` into a
/// per-level partial. Slabs are folded in the order given.
pub fn horizontal_reduction(
    action: &DiagnosticAction,
    slabs: &[&DiagnosticMessage],
    nz: usize,
) -> Result<LevelPartial> {
    let mut partial = LevelPartial::empty(action.operator, nz);
    for s in slabs {
        if s.field != action.field {
            return Err(Error::Diagnostics(format!(
                "slab for `{}` handed to action on `{}`",
                s.field, action.field
            )));
        }
        if s.extent.nz != nz || s.data.len() != s.extent.points() {
            return Err(Error::Diagnostics(format!(
                "slab from rank {} does not match its extent",
                s.source_rank
            )));
        }
        partial.absorb(s);
    }
    Ok(partial)
}

/// One I/O server's contribution for an `(output, timestep)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerPartial {
    pub server: usize,
    pub timestep: u64,
    pub partial: LevelPartial,
}

/// Combines per-server partials in ascending server order.
pub fn combine_partials(partials: &[ServerPartial], operator: ReductionOperator) -> Result<Vec<f64>> {
    let first = partials
        .first()
        .ok_or_else(|| Error::Diagnostics("no partials to combine".into()))?;
    let mut ordered: Vec<&ServerPartial> = partials.iter().collect();
    ordered.sort_by_key(|p| p.server);
    let mut acc = LevelPartial::empty(operator, first.partial.values.len());
    for p in ordered {
        if p.timestep != first.timestep {
            return Err(CommError::Protocol(format!(
                "partials disagree on timestep ({} vs {})",
                p.timestep, first.timestep
            ))
            .into());
        }
        if p.partial.operator != operator || p.partial.values.len() != acc.values.len() {
            return Err(CommError::Protocol("partials disagree on operator or level count".into()).into());
        }
        acc.merge(&p.partial);
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::Extent;
    use crate::io::config::ActionKind;
    use crate::io::message::{SlabData, SlabExtent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn action(op: ReductionOperator) -> DiagnosticAction {
        DiagnosticAction {
            kind: ActionKind::HorizontalReduction,
            operator: op,
            field: "f".into(),
            output: "o".into(),
        }
    }

    fn slab(rank: usize, nz: usize, y: Extent, x: Extent, values: Vec<f64>) -> DiagnosticMessage {
        DiagnosticMessage {
            source_rank: rank,
            timestep: 1,
            field: "f".into(),
            extent: SlabExtent { nz, y, x },
            data: SlabData::Double(values),
        }
    }

    fn ext(start: usize, size: usize) -> Extent {
        Extent { start, size }
    }

    #[test]
    fn constant_field_mean() {
        let s = slab(0, 3, ext(0, 2), ext(0, 2), vec![4.5; 12]);
        let p = horizontal_reduction(&action(ReductionOperator::Mean), &[&s], 3).unwrap();
        assert_eq!(p.finish(), vec![4.5; 3]);
    }

    #[test]
    fn level_valued_field_max() {
        let nz = 5;
        let values: Vec<f64> = (0..4 * nz).map(|n| (n % nz + 1) as f64).collect();
        let s = slab(0, nz, ext(0, 2), ext(0, 2), values);
        let p = horizontal_reduction(&action(ReductionOperator::Max), &[&s], nz).unwrap();
        assert_eq!(p.finish(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn empty_slab_contributes_nothing() {
        let full = slab(0, 2, ext(0, 1), ext(0, 1), vec![1.0, 3.0]);
        let empty = slab(1, 2, ext(1, 0), ext(0, 1), vec![]);
        let p = horizontal_reduction(&action(ReductionOperator::Mean), &[&full, &empty], 2).unwrap();
        assert_eq!(p.finish(), vec![1.0, 3.0]);
        assert_eq!(p.counts, vec![1, 1]);
    }

    #[test]
    fn random_field_over_four_ranks_matches_gathered_oracle() {
        let (nz, ny, nx) = (8, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let global: Vec<f64> = (0..nz * ny * nx).map(|_| rng.random_range(-5.0..5.0)).collect();
        let g = |k: usize, j: usize, i: usize| global[k + nz * (j + ny * i)];
        let mut slabs = Vec::new();
        for (r, (y0, x0)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
            let mut vals = Vec::new();
            for i in x0..x0 + 2 {
                for j in y0..y0 + 2 {
                    for k in 0..nz {
                        vals.push(g(k, j, i));
                    }
                }
            }
            slabs.push(slab(r, nz, ext(y0, 2), ext(x0, 2), vals));
        }
        let refs: Vec<&DiagnosticMessage> = slabs.iter().collect();
        for op in [ReductionOperator::Mean, ReductionOperator::Max] {
            let got = horizontal_reduction(&action(op), &refs, nz).unwrap().finish();
            for k in 0..nz {
                let level: Vec<f64> = (0..nx)
                    .flat_map(|i| (0..ny).map(move |j| (j, i)))
                    .map(|(j, i)| g(k, j, i))
                    .collect();
                let want = match op {
                    ReductionOperator::Mean => level.iter().sum::<f64>() / level.len() as f64,
                    _ => level.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
                assert!((got[k] - want).abs() <= 1e-12 * want.abs().max(1.0), "{op} level {k}");
            }
        }
    }

    #[test]
    fn weighted_mean_across_servers() {
        let a = ServerPartial {
            server: 0,
            timestep: 7,
            partial: LevelPartial {
                operator: ReductionOperator::Mean,
                values: vec![24.0],
                counts: vec![12],
            },
        };
        let mut b = a.clone();
        b.server = 1;
        b.partial.values = vec![16.0];
        b.partial.counts = vec![4];
        assert_eq!(combine_partials(&[b.clone(), a.clone()], ReductionOperator::Mean).unwrap(), vec![2.5]);
        assert_eq!(combine_partials(&[a.clone()], ReductionOperator::Mean).unwrap(), vec![2.0]);
        b.timestep = 8;
        assert!(matches!(
            combine_partials(&[a, b], ReductionOperator::Mean),
            Err(Error::Comm(CommError::Protocol(_)))
        ));
    }

    #[test]
    fn split_across_servers_equals_unsplit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nz = 3;
        let cols: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..nz).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let msg = |cs: &[Vec<f64>]| slab(0, nz, ext(0, cs.len()), ext(0, 1), cs.concat());
        for op in [
            ReductionOperator::Mean,
            ReductionOperator::Max,
            ReductionOperator::Min,
            ReductionOperator::Sum,
        ] {
            let act = action(op);
            let whole = horizontal_reduction(&act, &[&msg(&cols)], nz).unwrap().finish();
            let split = rng.random_range(1..9);
            let parts: Vec<ServerPartial> = [&cols[..split], &cols[split..]]
                .iter()
                .enumerate()
                .map(|(s, cs)| ServerPartial {
                    server: s,
                    timestep: 1,
                    partial: horizontal_reduction(&act, &[&msg(cs)], nz).unwrap(),
                })
                .collect();
            let combined = combine_partials(&parts, op).unwrap();
            for k in 0..nz {
                assert!((combined[k] - whole[k]).abs() <= 1e-12 * whole[k].abs().max(1.0));
            }
        }
    }
}
