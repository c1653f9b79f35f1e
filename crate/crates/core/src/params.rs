//! Mapping from coefficient vectors to per-(fleet, age) parameter values.
//!
//! Variance blocks (catch and survey log-sds) share one coefficient space,
//! catchability blocks another. Each block owns a contiguous slice of its
//! space unless it is aliased to another fleet's block.

use serde::{Deserialize, Serialize};

use crate::config::{Family, ModelConfig, RegimeSpec};
use crate::data::{FleetKind, StockData};
use crate::error::{Error, Result};
use crate::spline::{log_age_grid_from, BasisKind, SplineBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyGroup {
    /// One penalty shared by every catch and survey variance spline.
    Variance,
    /// One penalty shared by every catchability spline.
    Catchability,
}

impl PenaltyGroup {
    pub fn of(family: Family) -> Self {
        match family {
            Family::CatchSd | Family::SurveySd => PenaltyGroup::Variance,
            Family::Catchability => PenaltyGroup::Catchability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRegime {
    /// Group index per observed age of the fleet, contiguous from 0.
    Partition { groups: Vec<usize> },
    Maximal,
    Spline { kind: BasisKind, penalty_group: PenaltyGroup },
}

impl BlockRegime {
    pub fn label(&self) -> &'static str {
        match self {
            BlockRegime::Partition { .. } => "partition",
            BlockRegime::Maximal => "maximal",
            BlockRegime::Spline { kind: BasisKind::BSpline, .. } => "spline_bs",
            BlockRegime::Spline { .. } => "spline_cs",
        }
    }
}

/// Validate partition indices for a fleet observing `fleet_ages` internal age
/// slots starting at `fleet_offset` of a stock with `stock_ages` ages.
///
/// The array may list only the fleet's ages or every stock age with `-1` at
/// ages the fleet does not observe.
pub fn partition_from_indices(
    indices: &[i64],
    stock_ages: usize,
    fleet_offset: usize,
    fleet_ages: usize,
) -> Result<BlockRegime> {
    let own: Vec<i64> = if indices.len() == fleet_ages {
        indices.to_vec()
    } else if indices.len() == stock_ages {
        for (i, &g) in indices.iter().enumerate() {
            let observed = i >= fleet_offset && i < fleet_offset + fleet_ages;
            if observed == (g < 0) {
                return Err(Error::ConfigInvalid(format!(
                    "partition entry {i} is {g}; -1 must mark exactly the unobserved ages"
                )));
            }
        }
        indices[fleet_offset..fleet_offset + fleet_ages].to_vec()
    } else {
        return Err(Error::LengthMismatch { expected: fleet_ages, got: indices.len() });
    };
    // Groups cover adjacent ages and are numbered in age order.
    let mut next = 0i64;
    let mut groups = Vec::with_capacity(own.len());
    for &g in &own {
        if g < 0 || g > next || (g < next - 1) {
            return Err(Error::NonContiguousGroups(indices.to_vec()));
        }
        if g == next {
            next += 1;
        }
        groups.push(g as usize);
    }
    Ok(BlockRegime::Partition { groups })
}

/// Parse a JSON array of group indices, see [`partition_from_indices`].
pub fn parse_partition_spec(
    text: &str,
    stock_ages: usize,
    fleet_offset: usize,
    fleet_ages: usize,
) -> Result<BlockRegime> {
    let indices: Vec<i64> =
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(format!("partition spec: {e}")))?;
    partition_from_indices(&indices, stock_ages, fleet_offset, fleet_ages)
}

fn regime_from_spec(
    spec: &RegimeSpec,
    family: Family,
    stock_ages: usize,
    fleet_offset: usize,
    fleet_ages: usize,
) -> Result<BlockRegime> {
    match spec {
        RegimeSpec::Partition { partition } => partition_from_indices(partition, stock_ages, fleet_offset, fleet_ages),
        RegimeSpec::Named(name) => {
            let penalty_group = PenaltyGroup::of(family);
            match name.as_str() {
                "maximal" => Ok(BlockRegime::Maximal),
                "spline_cs" => Ok(BlockRegime::Spline { kind: BasisKind::CubicRegressionShrinkage, penalty_group }),
                "spline_bs" => Ok(BlockRegime::Spline { kind: BasisKind::BSpline, penalty_group }),
                other => Err(Error::ConfigInvalid(format!("unknown regime {other:?}"))),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub family: Family,
    pub fleet: usize,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub id: BlockId,
    pub regime: BlockRegime,
    /// Index of the fleet's first age within the stock's age range.
    pub age_offset: usize,
    pub n_ages: usize,
    /// Slice of the family's coefficient space.
    pub offset: usize,
    pub len: usize,
    pub spline: Option<SplineBlock>,
    /// Set when the coefficients belong to another fleet's block.
    pub alias_of: Option<BlockId>,
}

impl Block {
    /// Linear combination of space coefficients giving the value at local age `i`.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.regime {
            BlockRegime::Partition { groups } => vec![(self.offset + groups[i], 1.0)],
            BlockRegime::Maximal => vec![(self.offset + i, 1.0)],
            BlockRegime::Spline { .. } => {
                let x = &self.spline.as_ref().expect("spline block carries its basis").x;
                (0..x.ncols())
                    .filter(|&c| x[(i, c)] != 0.0)
                    .map(|c| (self.offset + c, x[(i, c)]))
                    .collect()
            }
        }
    }

    /// Whether this block contributes a penalty to `group`.
    pub fn penalized_in(&self, group: PenaltyGroup) -> bool {
        self.alias_of.is_none()
            && matches!(self.regime, BlockRegime::Spline { penalty_group, .. } if penalty_group == group)
            && self.spline.as_ref().is_some_and(|s| s.is_penalized())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    pub family: Family,
    pub fleet: usize,
    pub regime: String,
    pub coefficients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub blocks: Vec<BlockCount>,
    pub total: usize,
    /// Number of log-penalty parameters.
    pub penalties: usize,
}

#[derive(Debug, Clone)]
pub struct ParamMap {
    pub blocks: Vec<Block>,
    pub n_variance: usize,
    pub n_catchability: usize,
}

impl ParamMap {
    pub fn build(data: &StockData, config: &ModelConfig) -> Result<Self> {
        config.validate(data)?;
        let stock_ages = data.n_ages();
        let mut blocks: Vec<Block> = Vec::new();
        let mut n_variance = 0;
        let mut n_catchability = 0;
        let mut ids = Vec::new();
        for f in data.fleets.iter().filter(|f| f.kind == FleetKind::Catch) {
            ids.push((Family::CatchSd, f));
        }
        for f in data.fleets.iter().filter(|f| f.kind == FleetKind::Survey) {
            ids.push((Family::SurveySd, f));
        }
        for f in data.fleets.iter().filter(|f| f.kind == FleetKind::Survey) {
            ids.push((Family::Catchability, f));
        }
        for (family, fleet) in ids {
            let id = BlockId { family, fleet: fleet.fleet };
            let age_offset = data.ages.index(fleet.min_age).ok_or_else(|| {
                Error::ConfigInvalid(format!("fleet {} ages outside the stock range", fleet.fleet))
            })?;
            let n_ages = fleet.age_count();
            let spec = config
                .regime_spec(family, fleet.fleet)
                .ok_or_else(|| Error::ConfigInvalid(format!("no {family} regime for fleet {}", fleet.fleet)))?;
            let regime = regime_from_spec(spec, family, stock_ages, age_offset, n_ages)?;
            let alias = config.aliases.iter().find(|a| a.family == family && a.fleet == fleet.fleet);
            if let Some(a) = alias {
                let target = blocks
                    .iter()
                    .find(|b| b.id == BlockId { family, fleet: a.same_as })
                    .ok_or_else(|| {
                        Error::ConfigInvalid(format!(
                            "alias of fleet {} must point to an earlier fleet, got {}",
                            a.fleet, a.same_as
                        ))
                    })?;
                if target.alias_of.is_some() || target.age_offset != age_offset || target.n_ages != n_ages {
                    return Err(Error::ConfigInvalid(format!(
                        "alias of fleet {} to {} needs an unaliased target with the same ages",
                        a.fleet, a.same_as
                    )));
                }
                let mut b = target.clone();
                b.id = id;
                b.alias_of = Some(target.id);
                blocks.push(b);
                continue;
            }
            let (len, spline) = match &regime {
                BlockRegime::Partition { groups } => (groups.iter().max().map_or(0, |g| g + 1), None),
                BlockRegime::Maximal => (n_ages, None),
                BlockRegime::Spline { kind, .. } => {
                    let knots = log_age_grid_from(age_offset + 1, n_ages);
                    let sb = SplineBlock::new(*kind, &knots, config.shrinkage_epsilon, config.bs_degree)?;
                    (sb.n_basis, Some(sb))
                }
            };
            let space = match family {
                Family::Catchability => &mut n_catchability,
                _ => &mut n_variance,
            };
            let offset = *space;
            *space += len;
            blocks.push(Block { id, regime, age_offset, n_ages, offset, len, spline, alias_of: None });
        }
        Ok(ParamMap { blocks, n_variance, n_catchability })
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn space_len(&self, family: Family) -> usize {
        match family {
            Family::Catchability => self.n_catchability,
            _ => self.n_variance,
        }
    }

    /// Per-age values of one block; `coeffs` is the whole coefficient space of its family.
    pub fn evaluate_block(&self, id: BlockId, coeffs: &[f64]) -> Result<Vec<f64>> {
        let block = self
            .block(id)
            .ok_or_else(|| Error::ConfigInvalid(format!("no block {:?} for fleet {}", id.family, id.fleet)))?;
        let expected = self.space_len(id.family);
        if coeffs.len() != expected {
            return Err(Error::LayoutMismatch { expected, got: coeffs.len() });
        }
        Ok((0..block.n_ages)
            .map(|i| block.row(i).iter().map(|&(c, w)| w * coeffs[c]).sum())
            .collect())
    }

    /// Whether any block of the group carries a penalty.
    pub fn has_penalty(&self, group: PenaltyGroup) -> bool {
        self.blocks.iter().any(|b| b.penalized_in(group))
    }

    pub fn penalized_blocks(&self, group: PenaltyGroup) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(move |b| b.penalized_in(group))
    }

    /// Rank and unit log-determinant of the group's block-diagonal penalty.
    pub fn penalty_logdet(&self, group: PenaltyGroup) -> (usize, f64) {
        self.penalized_blocks(group).fold((0, 0.0), |(r, l), b| {
            let s = b.spline.as_ref().expect("penalized block has a basis");
            (r + s.rank, l + s.logdet_unit)
        })
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let blocks: Vec<BlockCount> = self
            .blocks
            .iter()
            .map(|b| BlockCount {
                family: b.id.family,
                fleet: b.id.fleet,
                regime: b.regime.label().to_string(),
                coefficients: if b.alias_of.is_some() { 0 } else { b.len },
            })
            .collect();
        let total = blocks.iter().map(|b| b.coefficients).sum();
        let penalties = [PenaltyGroup::Variance, PenaltyGroup::Catchability]
            .into_iter()
            .filter(|g| self.has_penalty(*g))
            .count();
        ParamCounts { blocks, total, penalties }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::grid_stock;
    use approx::assert_relative_eq;

    #[test]
    fn partition_counts_follow_group_indices() {
        let r = parse_partition_spec("[0,1,2,2,2,2,2,2,2,3,4,4,4]", 13, 0, 13).unwrap();
        let BlockRegime::Partition { groups } = r else { panic!() };
        assert_eq!(groups.iter().max().unwrap() + 1, 5);
        let r = parse_partition_spec("[0,0,0,0,0,0,0,0,0,0]", 10, 0, 10).unwrap();
        assert_eq!(r, BlockRegime::Partition { groups: vec![0; 10] });
    }

    #[test]
    fn partition_rejects_gaps_and_bad_lengths() {
        assert!(matches!(parse_partition_spec("[0,2,1]", 3, 0, 3), Err(Error::NonContiguousGroups(_))));
        assert!(matches!(parse_partition_spec("[1,1,1]", 3, 0, 3), Err(Error::NonContiguousGroups(_))));
        assert!(matches!(parse_partition_spec("[0,1,0]", 3, 0, 3), Err(Error::NonContiguousGroups(_))));
        assert!(matches!(parse_partition_spec("[0,0]", 4, 1, 3), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn partition_with_unobserved_sentinels() {
        let r = parse_partition_spec("[-1,0,0,1,-1]", 5, 1, 3).unwrap();
        assert_eq!(r, BlockRegime::Partition { groups: vec![0, 0, 1] });
        assert!(parse_partition_spec("[0,0,0,1,-1]", 5, 1, 3).is_err());
    }

    fn partition_block(groups: Vec<usize>) -> ParamMap {
        let len = groups.iter().max().unwrap() + 1;
        let n = groups.len();
        ParamMap {
            blocks: vec![Block {
                id: BlockId { family: Family::CatchSd, fleet: 0 },
                regime: BlockRegime::Partition { groups },
                age_offset: 0,
                n_ages: n,
                offset: 0,
                len,
                spline: None,
                alias_of: None,
            }],
            n_variance: len,
            n_catchability: 0,
        }
    }

    #[test]
    fn evaluate_partition_copies_by_group() {
        let m = partition_block(vec![0, 0, 1, 1, 1]);
        let id = BlockId { family: Family::CatchSd, fleet: 0 };
        assert_eq!(m.evaluate_block(id, &[-0.5, -1.2]).unwrap(), vec![-0.5, -0.5, -1.2, -1.2, -1.2]);
        assert!(matches!(m.evaluate_block(id, &[1.0]), Err(Error::LayoutMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn maximal_counts_and_identity() {
        let data = grid_stock(8, 10, &[(0.2, 0, 7), (0.6, 0, 7)]);
        let map = ParamMap::build(&data, &ModelConfig::uniform(RegimeSpec::Named("maximal".into()))).unwrap();
        let c = map.count_parameters();
        assert_eq!(c.total, 40);
        assert_eq!(c.penalties, 0);
        let coeffs: Vec<f64> = (0..map.n_variance).map(|i| i as f64 * 0.1).collect();
        let v = map.evaluate_block(BlockId { family: Family::SurveySd, fleet: 1 }, &coeffs).unwrap();
        assert_eq!(v, coeffs[8..16].to_vec());
    }

    #[test]
    fn spline_cs_is_cardinal_and_uses_two_penalties() {
        let data = grid_stock(6, 10, &[(0.5, 1, 4)]);
        let map = ParamMap::build(&data, &ModelConfig::default()).unwrap();
        let c = map.count_parameters();
        assert_eq!(c.penalties, 2);
        assert_eq!(c.total, 6 + 4 + 4);
        let beta: Vec<f64> = (0..map.n_catchability).map(|i| (i as f64).sin()).collect();
        let v = map.evaluate_block(BlockId { family: Family::Catchability, fleet: 1 }, &beta).unwrap();
        for (a, b) in v.iter().zip(&beta) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let q = map.block(BlockId { family: Family::Catchability, fleet: 1 }).unwrap();
        assert_eq!(q.age_offset, 1);
        assert_relative_eq!(q.spline.as_ref().unwrap().knots[0], 3f64.ln());
    }

    #[test]
    fn aliases_share_coefficients() {
        let data = grid_stock(5, 10, &[(0.2, 0, 4), (0.7, 0, 4)]);
        let mut cfg = ModelConfig::uniform(RegimeSpec::Named("maximal".into()));
        cfg.aliases.push(crate::config::Alias { family: Family::Catchability, fleet: 2, same_as: 1 });
        let map = ParamMap::build(&data, &cfg).unwrap();
        assert_eq!(map.n_catchability, 5);
        let beta = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = map.evaluate_block(BlockId { family: Family::Catchability, fleet: 1 }, &beta).unwrap();
        let b = map.evaluate_block(BlockId { family: Family::Catchability, fleet: 2 }, &beta).unwrap();
        assert_eq!(a, b);
    }
}
