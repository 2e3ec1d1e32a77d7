use super::param::{Gradients, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Result, RtaError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval_loss<F>(params: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = loss_fn(&mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(RtaError::Shape {
            op: "grad_check",
            left: v.shape().to_vec(),
            right: vec![1, 1],
        });
    }
    let value = v.item() as f64;
    if !value.is_finite() {
        return Err(RtaError::Domain(format!("non-finite loss {value} at the check point")));
    }
    Ok(value)
}

/// Compares tape gradients of the scalar built by `loss_fn` with central
/// finite differences over every non-frozen parameter entry.
///
/// The relative error of a parameter is `‖a − n‖ / max(1e-8, ‖a‖ + ‖n‖)`
/// over its whole tensor; the report keeps the worst parameter and, within
/// it, the entry with the largest absolute difference.
pub fn grad_check<F>(params: &mut ParamStore, loss_fn: F, epsilon: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    eval_loss(params, &loss_fn)?;
    let mut grads = Gradients::new();
    {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss, &mut grads)?;
    }

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = grads.dense(params, id);
        let mut numeric = vec![0.0f64; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = params.tensor(id).data()[i];
            let (hi, lo) = (orig + epsilon, orig - epsilon);
            params.tensor_mut(id).data_mut()[i] = hi;
            let plus = eval_loss(params, &loss_fn)?;
            params.tensor_mut(id).data_mut()[i] = lo;
            let minus = eval_loss(params, &loss_fn)?;
            params.tensor_mut(id).data_mut()[i] = orig;
            // divide by the step actually taken after f32 rounding
            *n = (plus - minus) / (hi as f64 - lo as f64);
        }
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let mut worst = (0usize, -1.0f64);
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let d = (a as f64 - n).abs();
            diff += d * d;
            na += (a as f64).powi(2);
            nn += n * n;
            if d > worst.1 {
                worst = (i, d);
            }
        }
        let rel = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-8);
        report.checked += analytic.len();
        if rel > report.max_relative_error || report.worst_param.is_empty() {
            report.max_relative_error = rel;
            report.worst_param = params.get(id).name.clone();
            report.worst_index = worst.0;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn linear_scalar_model_is_exact() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::row_vector(vec![0.5, -1.0, 2.0]), false).unwrap();
        let x = Tensor::row_vector(vec![1.0, 2.0, -3.0]);
        let report = grad_check(
            &mut ps,
            |tape| {
                let wv = tape.param(w);
                let xv = tape.constant(x.clone());
                tape.matmul_nt(wv, xv)
            },
            0.5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::scalar(f32::NAN), false).unwrap();
        let r = grad_check(&mut ps, |tape| Ok(tape.param(w)), 1e-3);
        assert!(matches!(r, Err(RtaError::Domain(_))));
    }
}
