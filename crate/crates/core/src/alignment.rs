//! Class-conditional mean discrepancy between two feature streams.
//!
//! Both streams are computed on the same batch rows: one with the frozen
//! auxiliary FC weights, one with the task's FC weights. For every class
//! present in the batch the squared distance between the two class means is
//! summed (linear kernel). Classes absent from the batch contribute nothing.

use std::collections::BTreeMap;

use crate::tensor::{Graph, NodeId, Result, Tensor, TensorError};

/// Mean feature vector and sample count of every class present in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalMeans {
    /// Keyed by local class id; classes with no rows are absent.
    pub means: BTreeMap<usize, (Vec<f64>, usize)>,
}

impl ClassConditionalMeans {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<(&[f64], usize)> {
        self.means.get(&class).map(|(m, k)| (m.as_slice(), *k))
    }
}

fn check_rows(op: &'static str, features: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok((s[0], s[1]))
}

pub fn class_means(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassConditionalMeans> {
    let (_, d) = check_rows("class_means", features, labels)?;
    let mut means: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &label) in features.data().chunks(d).zip(labels) {
        if label >= num_classes {
            return Err(TensorError::ClassOutOfRange {
                index: label,
                classes: num_classes,
            });
        }
        let entry = means.entry(label).or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in entry.0.iter_mut().zip(row) {
            *acc += v;
        }
        entry.1 += 1;
    }
    for (sum, count) in means.values_mut() {
        let k = *count as f64;
        sum.iter_mut().for_each(|v| *v /= k);
    }
    Ok(ClassConditionalMeans { means })
}

/// `P × n` matrix whose row `p` averages the rows of the `p`-th present class.
fn averaging_matrix(labels: &[usize]) -> Tensor {
    let mut present: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *present.entry(l).or_default() += 1;
    }
    let n = labels.len();
    let mut data = vec![0.0; present.len() * n];
    for (p, (&class, &count)) in present.iter().enumerate() {
        for (i, &l) in labels.iter().enumerate() {
            if l == class {
                data[p * n + i] = 1.0 / count as f64;
            }
        }
    }
    Tensor::new(vec![present.len(), n], data).expect("labels are non-empty")
}

/// Sum over present classes of `‖mean_c(aux) − mean_c(task)‖²`, as a graph node.
pub fn cmmd(g: &mut Graph, aux_stream: NodeId, task_stream: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (a, t) = (g.value(aux_stream), g.value(task_stream));
    if a.shape() != t.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cmmd",
            lhs: a.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    check_rows("cmmd", a, labels)?;
    let avg = g.constant(averaging_matrix(labels));
    let diff = g.sub(aux_stream, task_stream)?;
    let mean_diff = g.matmul(avg, diff)?;
    let sq = g.hadamard(mean_diff, mean_diff)?;
    Ok(g.sum(sq))
}

/// Value-only [`cmmd`].
pub fn cmmd_value(aux_stream: &Tensor, task_stream: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(aux_stream.clone());
    let t = g.constant(task_stream.clone());
    let d = cmmd(&mut g, a, t, labels)?;
    Ok(g.value(d).item())
}

/// Sum of [`cmmd`] over paired layers; `None` when there are no pairs.
pub fn alignment_total(
    g: &mut Graph,
    aux_streams: &[NodeId],
    task_streams: &[NodeId],
    labels: &[usize],
) -> Result<Option<NodeId>> {
    if aux_streams.len() != task_streams.len() {
        return Err(TensorError::Invalid {
            op: "alignment_total",
            reason: format!(
                "{} auxiliary streams for {} task streams",
                aux_streams.len(),
                task_streams.len()
            ),
        });
    }
    let mut total: Option<NodeId> = None;
    for (&a, &t) in aux_streams.iter().zip(task_streams) {
        let d = cmmd(g, a, t, labels)?;
        total = Some(match total {
            Some(acc) => g.add(acc, d)?,
            None => d,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_class_mean() {
        let m = class_means(&t(&[2, 2], &[1.0, 0.0, 3.0, 0.0]), &[0, 0], 3).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(0), Some((&[2.0, 0.0][..], 2)));
        assert_eq!(m.get(1), None);
    }

    #[test]
    fn out_of_range_label() {
        assert!(class_means(&t(&[1, 1], &[1.0]), &[4], 3).is_err());
    }

    #[test]
    fn identical_streams_are_aligned() {
        let x = Tensor::from_fn(&[6, 3], |i| (i as f64).cos());
        assert_eq!(cmmd_value(&x, &x, &[0, 1, 2, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_unit_means() {
        let a = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let b = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        assert!((cmmd_value(&a, &b, &[3, 3]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::ones(&[2, 2]);
        let b = Tensor::ones(&[2, 3]);
        assert!(cmmd_value(&a, &b, &[0, 0]).is_err());
        assert!(cmmd_value(&a, &a, &[0]).is_err());
    }

    #[test]
    fn total_adds_layers() {
        let mut g = Graph::new();
        let a1 = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let t1 = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let a2 = g.constant(t(&[1, 1], &[3.0f64.sqrt()]));
        let t2 = g.constant(t(&[1, 1], &[0.0]));
        let total = alignment_total(&mut g, &[a1, a2], &[t1, t2], &[0]).unwrap().unwrap();
        assert!((g.value(total).item() - 5.0).abs() < 1e-12);
        assert!(alignment_total(&mut g, &[], &[], &[0]).unwrap().is_none());
    }
}
