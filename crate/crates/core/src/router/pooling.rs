use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::gating::GatingDecision;
use super::partition::RegionPartition;
use crate::error::{DgeError, Result};
use crate::tensor::{Element, Graph, RowMix, Var};

/// Where a pooled query came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOrigin {
    pub region: usize,
    pub patch: usize,
    /// Valid token indices averaged into this query.
    pub tokens: Vec<usize>,
    /// φ², the nominal patch area.
    pub area: usize,
}

/// Pooled queries for one layer, ordered region-major then patch row-major.
#[derive(Debug, Clone)]
pub struct SparseQuerySet {
    /// N×C query values; `None` when every region was skipped.
    pub queries: Option<Var>,
    pub origins: Vec<QueryOrigin>,
    pub per_region: Vec<usize>,
}

impl SparseQuerySet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Region of every query, in query order.
    pub fn row_regions(&self) -> Vec<usize> {
        self.origins.iter().map(|o| o.region).collect()
    }

    fn groups(&self) -> Vec<Vec<usize>> {
        self.origins.iter().map(|o| o.tokens.clone()).collect()
    }
}

/// Origins selected by `theta`, without touching any tensor.
pub fn query_origins(part: &RegionPartition, theta: &[usize]) -> Result<(Vec<QueryOrigin>, Vec<usize>)> {
    if theta.len() != part.num_regions() {
        return Err(DgeError::Usage(format!(
            "{} gating indices for {} regions",
            theta.len(),
            part.num_regions()
        )));
    }
    let k = part.granularities().k();
    let mut origins = Vec::new();
    let mut per_region = Vec::with_capacity(theta.len());
    for (region, &choice) in theta.iter().enumerate() {
        if choice >= k {
            return Err(DgeError::Usage(format!("gating index {choice} with {k} candidates")));
        }
        let phi = part.granularities().phi(choice);
        let patches = part.patches(choice, region);
        per_region.push(patches.len());
        for (patch, tokens) in patches.iter().enumerate() {
            origins.push(QueryOrigin {
                region,
                patch,
                tokens: tokens.clone(),
                area: phi * phi,
            });
        }
    }
    Ok((origins, per_region))
}

/// One query per selected patch: the mean of its valid tokens.
pub fn pool_queries<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    part: &RegionPartition,
    theta: &[usize],
) -> Result<SparseQuerySet> {
    let (origins, per_region) = query_origins(part, theta)?;
    let queries = if origins.is_empty() {
        None
    } else {
        let groups: Vec<Vec<usize>> = origins.iter().map(|o| o.tokens.clone()).collect();
        let mix = Rc::new(RowMix::mean_of(part.tokens(), &groups)?);
        Some(g.row_mix(z, mix)?)
    };
    Ok(SparseQuerySet {
        queries,
        origins,
        per_region,
    })
}

/// Broadcasts each query's output to its origin tokens; H·W×C result with
/// zero rows wherever no query was emitted.
pub fn unpool_restore<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    queries: &SparseQuerySet,
    part: &RegionPartition,
) -> Result<Var> {
    let rows = g.shape(y)[0];
    if rows != queries.len() {
        return Err(DgeError::Dimension {
            op: "unpool_restore",
            lhs: g.shape(y).to_vec(),
            rhs: vec![queries.len()],
        });
    }
    let mix = Rc::new(RowMix::broadcast(part.tokens(), &queries.groups())?);
    g.row_mix(y, mix)
}

/// Straight-through node: identity forward, `p_i · ŷ` backward for the
/// queries of region `i`.
pub fn ste_scale<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    decision: &GatingDecision<T>,
    queries: &SparseQuerySet,
) -> Result<Var> {
    let soft = decision.soft.as_ref().ok_or_else(|| {
        DgeError::Usage("ste_scale needs a training-mode decision with soft scores".into())
    })?;
    g.ste_scale(y, soft.var, &queries.row_regions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{partition, GranularitySet};
    use crate::tensor::{normal_tensor, RngStream, Tensor};

    fn setup(h: usize, w: usize, c: usize, phis: &[usize]) -> RegionPartition {
        partition(h, w, c, &GranularitySet::new(phis.to_vec(), None).unwrap()).unwrap()
    }

    #[test]
    fn finest_pooling_is_identity() {
        let part = setup(8, 8, 3, &[1, 2, 4]);
        let mut g = Graph::<f64>::new();
        let x = normal_tensor(&mut RngStream::new(2, 0), &[64, 3], 1.0);
        let z = g.leaf(x.clone());
        let q = pool_queries(&mut g, z, &part, &[0; 4]).unwrap();
        assert_eq!(q.len(), 64);
        let back = unpool_restore(&mut g, q.queries.unwrap(), &q, &part).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn two_by_two_mean() {
        let part = setup(2, 2, 1, &[1, 2]);
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_f64([4, 1], &[1., 2., 3., 4.]).unwrap());
        let q = pool_queries(&mut g, z, &part, &[1]).unwrap();
        assert_eq!(g.value(q.queries.unwrap()).data(), &[2.5]);
        assert_eq!(q.origins[0].area, 4);
    }

    #[test]
    fn padded_patch_averages_valid_tokens_only() {
        // 3×3 map, S=2: region 1 holds column x=2, rows 0..2
        let part = setup(3, 3, 1, &[1, 2]);
        let mut g = Graph::<f64>::new();
        let vals = [0., 0., 1., 0., 0., 3., 0., 0., 0.];
        let z = g.leaf(Tensor::from_f64([9, 1], &vals).unwrap());
        let q = pool_queries(&mut g, z, &part, &[1, 1, 1, 1]).unwrap();
        let o = &q.origins[1];
        assert_eq!(o.tokens, vec![2, 5]);
        assert_eq!(g.value(q.queries.unwrap()).row(1), &[2.0]);
        assert_eq!(q.per_region, vec![1, 1, 1, 1]);
    }

    #[test]
    fn constants_are_fixed_points() {
        let part = setup(6, 5, 2, &[1, 2, 4]);
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::full([30, 2], 1.75));
        let q = pool_queries(&mut g, z, &part, &[2, 1, 0, 2]).unwrap();
        let back = unpool_restore(&mut g, q.queries.unwrap(), &q, &part).unwrap();
        assert!(g.value(back).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn skip_region_emits_nothing_and_restores_zero() {
        let set = GranularitySet::new(vec![0, 1], Some(4)).unwrap();
        let part = partition(4, 8, 1, &set).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::ones([32, 1]));
        let q = pool_queries(&mut g, z, &part, &[0, 1]).unwrap();
        assert_eq!(q.per_region, vec![0, 16]);
        let back = unpool_restore(&mut g, q.queries.unwrap(), &q, &part).unwrap();
        let v = g.value(back);
        assert_eq!(v.row(0), &[0.0]);
        assert_eq!(v.row(4), &[1.0]);
        let none = pool_queries(&mut g, z, &part, &[0, 0]).unwrap();
        assert!(none.queries.is_none());
    }

    #[test]
    fn unpool_gradient_is_patch_area() {
        let part = setup(7, 7, 2, &[1, 2, 4]);
        let mut g = Graph::<f64>::new();
        let (origins, _) = query_origins(&part, &[2, 1, 1, 2]).unwrap();
        let y = g.variable(Tensor::zeros([origins.len(), 2]));
        let q = SparseQuerySet {
            queries: None,
            origins: origins.clone(),
            per_region: vec![],
        };
        let up = unpool_restore(&mut g, y, &q, &part).unwrap();
        let s = g.sum(up);
        let grads = g.backward(s).unwrap();
        let gy = grads.get(y).unwrap();
        for (j, o) in origins.iter().enumerate() {
            assert_eq!(gy[2 * j], o.tokens.len() as f64);
            assert_eq!(gy[2 * j + 1], o.tokens.len() as f64);
        }
    }

    #[test]
    fn ste_scale_refuses_inference_decisions() {
        let part = setup(2, 2, 1, &[1, 2]);
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::ones([4, 1]));
        let q = pool_queries(&mut g, z, &part, &[1]).unwrap();
        let d = GatingDecision::forced(Tensor::zeros([1, 2]), vec![1]).unwrap();
        assert!(matches!(
            ste_scale(&mut g, q.queries.unwrap(), &d, &q),
            Err(DgeError::Usage(_))
        ));
    }
}
