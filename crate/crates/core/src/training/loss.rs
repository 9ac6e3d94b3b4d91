use crate::error::{Error, Result};
use crate::model::ActionSpace;
use crate::tensor::{Function, Graph, Tensor, Var};

struct ActionLoss {
    grad: Tensor,
}

impl Function for ActionLoss {
    fn name(&self) -> &'static str {
        "action_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad.data()[0];
        vec![Some(self.grad.map(|v| v * s))]
    }
}

/// Mean loss over the unmasked positions of `pred` `[B, N, A]`.
///
/// Continuous actions use squared error averaged over action dimensions;
/// discrete actions use cross-entropy of the logits against the target
/// distribution (one-hot for recorded actions).
pub fn action_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[bool], space: ActionSpace) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 || target.shape() != shape.as_slice() || mask.len() != shape[0] * shape[1] {
        return Err(Error::Dimension(format!(
            "prediction {shape:?}, target {:?} and mask of {} do not agree",
            target.shape(),
            mask.len()
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Contract("loss mask selects no positions".into()));
    }
    let a = shape[2];
    let p = g.value(pred).data();
    let t = target.data();
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    for (row, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (pr, tr) = (&p[row * a..(row + 1) * a], &t[row * a..(row + 1) * a]);
        let gr = &mut grad[row * a..(row + 1) * a];
        match space {
            ActionSpace::Continuous => {
                let w = 1.0 / (valid * a) as f64;
                for k in 0..a {
                    let d = pr[k] - tr[k];
                    total += d * d * w;
                    gr[k] = 2.0 * d * w;
                }
            }
            ActionSpace::Discrete => {
                let max = pr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = pr.iter().map(|v| (v - max).exp()).sum();
                let lse = max + z.ln();
                let mass: f64 = tr.iter().sum();
                let w = 1.0 / valid as f64;
                for k in 0..a {
                    total -= tr[k] * (pr[k] - lse) * w;
                    gr[k] = ((pr[k] - lse).exp() * mass - tr[k]) * w;
                }
            }
        }
    }
    let grad = Tensor::new(shape, grad)?;
    Ok(g.apply(&[pred], Tensor::scalar(total), ActionLoss { grad }))
}
