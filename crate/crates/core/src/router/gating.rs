use std::rc::Rc;

use super::partition::RegionPartition;
use crate::error::{DgeError, Result};
use crate::tensor::{cast, gumbel_sample, Element, Graph, RngStream, Tensor, Var};

/// Soft gating scores kept on the tape for the backward pass.
#[derive(Debug, Clone)]
pub struct SoftScores<T> {
    pub values: Vec<T>,
    pub var: Var,
}

/// Granularity choice for every region of one layer.
#[derive(Debug, Clone)]
pub struct GatingDecision<T> {
    /// R×K gating logits.
    pub logits: Tensor<T>,
    /// Gumbel noise used for the choice; absent at inference.
    pub noise: Option<Tensor<T>>,
    /// Selected candidate index per region (0-based into the granularity set).
    pub theta: Vec<usize>,
    /// Softmax probability of each selected candidate; training only.
    pub soft: Option<SoftScores<T>>,
    pub tau: f64,
}

impl<T: Element> GatingDecision<T> {
    pub fn is_training(&self) -> bool {
        self.soft.is_some()
    }

    pub fn num_regions(&self) -> usize {
        self.theta.len()
    }

    /// Decision with externally chosen indices and no soft scores.
    pub fn forced(logits: Tensor<T>, theta: Vec<usize>) -> Result<Self> {
        let (r, k) = logits.dims2()?;
        if theta.len() != r || theta.iter().any(|&t| t >= k) {
            return Err(DgeError::Usage(format!(
                "forced routing {theta:?} does not fit {r} regions × {k} candidates"
            )));
        }
        Ok(Self {
            logits,
            noise: None,
            theta,
            soft: None,
            tau: 1.0,
        })
    }
}

/// Region-mean tokens projected to R×K logits.
pub fn gating_logits<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    part: &RegionPartition,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let c = part.channels();
    let zs = g.shape(z).to_vec();
    if zs != [part.tokens(), c] {
        return Err(DgeError::Dimension {
            op: "gating_logits",
            lhs: zs,
            rhs: vec![part.tokens(), c],
        });
    }
    let ws = g.shape(weight).to_vec();
    if ws.len() != 2 || ws[0] != c {
        return Err(DgeError::Dimension {
            op: "gating_logits",
            lhs: ws,
            rhs: vec![c, part.granularities().k()],
        });
    }
    let mix = Rc::new(part.region_mean_mix()?);
    let means = g.row_mix(z, mix)?;
    let proj = g.matmul(means, weight)?;
    g.add_row(proj, bias)
}

/// Index of the largest entry; the smallest index wins ties.
fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic per-region argmax of the logits.
pub fn select_inference<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (rows, _) = logits.dims2()?;
    Ok((0..rows).map(|r| argmax(logits.row(r))).collect())
}

/// Inference decision: no sampling, no exponentials.
pub fn decide_inference<T: Element>(logits: Tensor<T>) -> Result<GatingDecision<T>> {
    let theta = select_inference(&logits)?;
    Ok(GatingDecision {
        logits,
        noise: None,
        theta,
        soft: None,
        tau: 1.0,
    })
}

/// Gumbel-max choice with soft scores for the straight-through backward.
pub fn select_training<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    rng: &mut RngStream,
    tau: f64,
) -> Result<GatingDecision<T>> {
    let noise = gumbel_sample(rng, g.shape(logits));
    select_with_noise(g, logits, noise, tau)
}

/// Training-mode selection with caller-supplied noise.
pub fn select_with_noise<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    noise: Tensor<T>,
    tau: f64,
) -> Result<GatingDecision<T>> {
    if !(tau > 0.0) {
        return Err(DgeError::Config(format!("temperature {tau} must be positive")));
    }
    let logit_values = g.value(logits).clone();
    let (rows, k) = logit_values.dims2()?;
    if noise.shape() != logit_values.shape() {
        return Err(DgeError::Dimension {
            op: "select_with_noise",
            lhs: noise.shape().to_vec(),
            rhs: logit_values.shape().to_vec(),
        });
    }
    let noisy: Vec<T> = logit_values.data().iter().zip(noise.data()).map(|(&l, &n)| l + n).collect();
    let theta: Vec<usize> = noisy.chunks(k).map(argmax).collect();

    let n = g.leaf(noise.clone());
    let s = g.add(logits, n)?;
    let s = g.reshape(s, &[rows, k])?;
    let s = g.scale(s, cast::<T>(1.0 / tau));
    let probs = g.softmax(s, 1)?;
    let p = g.pick(probs, &theta)?;
    let values = g.value(p).data().to_vec();
    Ok(GatingDecision {
        logits: logit_values,
        noise: Some(noise),
        theta,
        soft: Some(SoftScores { values, var: p }),
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{partition, GranularitySet};

    #[test]
    fn inference_argmax_examples() {
        let l = Tensor::<f64>::from_f64([3, 3], &[0.1, 0.5, 0.2, 0.3, 0.3, 0.1, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(select_inference(&l).unwrap(), vec![1, 0, 0]);
        let single = Tensor::<f64>::from_f64([2, 1], &[3.0, -3.0]).unwrap();
        assert_eq!(select_inference(&single).unwrap(), vec![0, 0]);
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let set = GranularitySet::new(vec![1, 2, 4], None).unwrap();
        let part = partition(8, 8, 5, &set).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.leaf(crate::tensor::normal_tensor(&mut RngStream::new(1, 0), &[64, 5], 1.0));
        let w = g.leaf(Tensor::zeros([5, 3]));
        let b = g.leaf(Tensor::from_f64([1, 3], &[0.5, -1.0, 2.0]).unwrap());
        let l = gating_logits(&mut g, z, &part, w, b).unwrap();
        assert_eq!(g.shape(l), &[4, 3]);
        for r in 0..4 {
            assert_eq!(g.value(l).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn region_mean_projection() {
        let set = GranularitySet::new(vec![1, 2], None).unwrap();
        let part = partition(2, 2, 1, &set).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_f64([4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.leaf(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap());
        let b = g.leaf(Tensor::zeros([1, 2]));
        let l = gating_logits(&mut g, z, &part, w, b).unwrap();
        assert_eq!(g.value(l).data(), &[2.5, -2.5]);
    }

    #[test]
    fn padded_tokens_do_not_dilute_region_mean() {
        let set = GranularitySet::new(vec![1, 2], None).unwrap();
        let part = partition(3, 3, 1, &set).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::full([9, 1], 6.0));
        let w = g.leaf(Tensor::ones([1, 2]));
        let b = g.leaf(Tensor::zeros([2]));
        let l = gating_logits(&mut g, z, &part, w, b).unwrap();
        assert!(g.value(l).data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn training_selection_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::full([2, 3], 0.4));
        let d = select_with_noise(&mut g, l, Tensor::zeros([2, 3]), 1.0).unwrap();
        assert_eq!(d.theta, vec![0, 0]);
        for p in &d.soft.as_ref().unwrap().values {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let l = g.leaf(Tensor::from_f64([1, 2], &[2f64.ln(), 0.0]).unwrap());
        let d = select_with_noise(&mut g, l, Tensor::zeros([1, 2]), 1.0).unwrap();
        assert_eq!(d.theta, vec![0]);
        assert!((d.soft.unwrap().values[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros([1, 2]));
        assert!(select_with_noise(&mut g, l, Tensor::zeros([1, 2]), 0.0).is_err());
    }

    #[test]
    fn gumbel_max_frequencies_follow_softmax() {
        let mut rng = RngStream::new(11, 3);
        let n = 100_000;
        let mut first = 0usize;
        for _ in 0..n {
            let mut g = Graph::<f64>::new();
            let l = g.leaf(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
            if select_training(&mut g, l, &mut rng, 1.0).unwrap().theta[0] == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / n as f64;
        let expect = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((freq - expect).abs() < 0.01, "{freq} vs {expect}");
    }

    #[test]
    fn adding_a_constant_keeps_the_choice() {
        let l = Tensor::<f64>::from_f64([2, 3], &[0.1, 0.9, 0.3, 2.0, -1.0, 2.0]).unwrap();
        let shifted = l.map(|v| v + 17.5);
        assert_eq!(select_inference(&l).unwrap(), select_inference(&shifted).unwrap());
    }
}
