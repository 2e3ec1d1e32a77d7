use super::param::{Gradients, ParamStore};
use crate::error::{Result, RtaError};

/// Plain SGD with decoupled-per-parameter L2 decay:
/// `p ← p − lr·(grad + weight_decay·p)`, decay skipped for exempt parameters.
///
/// Parameters absent from `grads` still receive the decay term; frozen
/// parameters are left untouched.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, lr: f32, weight_decay: f32) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(RtaError::Config(format!("learning rate must be finite and ≥ 0, got {lr}")));
    }
    for (id, buf) in grads.iter() {
        if id.0 >= params.len() {
            return Err(RtaError::Domain(format!("gradient for unknown parameter #{}", id.0)));
        }
        let t = params.tensor(id);
        if let Some(d) = &buf.dense {
            if d.len() != t.len() {
                return Err(RtaError::Shape {
                    op: "sgd_step",
                    left: t.shape().to_vec(),
                    right: vec![d.len()],
                });
            }
        }
        if let Some((&r, g)) = buf.rows.iter().next_back() {
            if r >= t.rows() || g.len() != t.cols() {
                return Err(RtaError::Shape {
                    op: "sgd_step",
                    left: t.shape().to_vec(),
                    right: vec![r, g.len()],
                });
            }
        }
    }
    if lr == 0.0 {
        return Ok(());
    }

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = params.get_mut(id);
        if p.frozen {
            continue;
        }
        let decay = if p.weight_decay_exempt { 0.0 } else { weight_decay };
        if decay != 0.0 {
            let shrink = 1.0 - lr * decay;
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= shrink);
        }
        let Some(buf) = grads.get(id) else { continue };
        let cols = p.tensor.cols();
        let data = p.tensor.data_mut();
        if let Some(d) = &buf.dense {
            for (v, g) in data.iter_mut().zip(d) {
                *v -= lr * g;
            }
        }
        for (&r, g) in &buf.rows {
            for (v, gv) in data[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                *v -= lr * gv;
            }
        }
    }
    Ok(())
}
