use super::{Result, TrainError};
use crate::tensor::{NodeId, Tape, Tensor};

struct LossParts {
    value: f64,
    grad_v: Vec<f64>,
    grad_log_scale: f64,
}

fn unit_rows(m: &Tensor, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (m.rows(), m.cols());
    let mut out = m.data().to_vec();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut out[i * d..(i + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(TrainError::Degenerate(format!(
                "degenerate embedding: {what} row {i} has norm {norm}"
            )));
        }
        row.iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

fn compute(v: &Tensor, t: &Tensor, labels: &[usize], log_scale: f64) -> Result<LossParts> {
    let n = labels.len();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if v.rank() != 2 || t.rank() != 2 || v.shape() != t.shape() || v.rows() != n {
        return Err(TrainError::Shape(format!(
            "embeddings {:?}, text {:?}, {} labels",
            v.shape(),
            t.shape(),
            n
        )));
    }
    let d = v.cols();
    let (vh, vnorm) = unit_rows(v, "object")?;
    let (th, _) = unit_rows(t, "text")?;
    let a = log_scale.exp();

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = crate::tensor::dot(&vh[i * d..(i + 1) * d], &th[j * d..(j + 1) * d]);
        }
    }

    let nf = n as f64;
    let mut value = 0.0;
    let mut dz = vec![0.0; n * n];
    for i in 0..n {
        let z: Vec<f64> = sim[i * n..(i + 1) * n].iter().map(|s| a * s).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|x| (x - zmax).exp()).sum::<f64>().ln();
        let positives = labels.iter().filter(|&&y| y == labels[i]).count() as f64;
        let mut row = 0.0;
        for j in 0..n {
            let q = if labels[j] == labels[i] {
                1.0 / positives
            } else {
                0.0
            };
            if q > 0.0 {
                row += z[j] - lse;
            }
            dz[i * n + j] = ((z[j] - lse).exp() - q) / nf;
        }
        value -= row / positives;
    }
    value /= nf;

    let mut grad_log_scale = 0.0;
    let mut grad_v = vec![0.0; n * d];
    for i in 0..n {
        let vi = &vh[i * d..(i + 1) * d];
        let gi = &mut grad_v[i * d..(i + 1) * d];
        for j in 0..n {
            let g = dz[i * n + j];
            let s = sim[i * n + j];
            grad_log_scale += g * a * s;
            let ds = a * g;
            for ((o, tj), vk) in gi.iter_mut().zip(&th[j * d..(j + 1) * d]).zip(vi) {
                *o += ds * (tj - s * vk);
            }
        }
        gi.iter_mut().for_each(|x| *x /= vnorm[i]);
    }
    Ok(LossParts {
        value,
        grad_v,
        grad_log_scale,
    })
}

/// Multi-positive contrastive loss of object embeddings `v` (N x D) against
/// their text embeddings `t` (N x D), where objects sharing a label are all
/// positives for each other. Similarities are cosines scaled by
/// `exp(log_scale)`.
pub fn infonce_loss(v: &Tensor, t: &Tensor, labels: &[usize], log_scale: f64) -> Result<f64> {
    Ok(compute(v, t, labels, log_scale)?.value)
}

/// Records the loss on `tape`. `t` is a constant; gradients reach `v` and
/// the `log_scale` node.
pub fn multi_positive_infonce(
    tape: &mut Tape,
    v: NodeId,
    t: &Tensor,
    labels: &[usize],
    log_scale: NodeId,
) -> Result<NodeId> {
    let ls = tape.value(log_scale);
    if ls.len() != 1 {
        return Err(TrainError::Shape(format!(
            "log_scale shape {:?}",
            ls.shape()
        )));
    }
    let ls_shape = ls.shape().to_vec();
    let parts = compute(tape.value(v), t, labels, ls.data()[0])?;
    let v_shape = tape.value(v).shape().to_vec();
    let LossParts {
        value,
        grad_v,
        grad_log_scale,
    } = parts;
    let node = tape.custom(&[v, log_scale], Tensor::scalar(value), move |g| {
        let g = g.data()[0];
        vec![
            Tensor::new(v_shape.clone(), grad_v.iter().map(|x| x * g).collect()).expect("shape"),
            Tensor::new(ls_shape.clone(), vec![grad_log_scale * g]).expect("shape"),
        ]
    })?;
    Ok(node)
}
