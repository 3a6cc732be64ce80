use super::{ParamId, Params, Tape, TensorError, Var};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter and flat coordinate of the worst disagreement.
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
}

/// Compare tape gradients of a scalar function against central differences
/// over every coordinate of every parameter.
pub fn grad_check<F>(params: &Params, epsilon: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let eval = |p: &Params| -> Result<f64, TensorError> {
        let mut tape = Tape::new(p);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut work = params.clone();
    let mut report = GradCheck { max_relative_error: 0.0, worst: None, coordinates: 0 };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((id, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::{GruVars, Tensor};
    use rand::Rng;

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_is_exact() {
        let mut p = Params::new();
        let id = p.add("x", Tensor::vector(vec![3.0]));
        let r = grad_check(&p, 1e-4, |t| {
            let x = t.param(id);
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-8);
    }

    #[test]
    fn every_primitive_passes_on_random_shapes() {
        for trial in 0..8u64 {
            let mut rng = stream_rng(trial, Stream::Init, &[]);
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let mut p = Params::new();
            let a = p.add("a", random(&mut rng, &[m, k]));
            let b = p.add("b", random(&mut rng, &[k, n]));
            let v = p.add("v", random(&mut rng, &[k]));
            let u = p.add("u", random(&mut rng, &[m]));
            let table = p.add("table", random(&mut rng, &[4, n]));
            let drop_mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.25 }).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let target = rng.random_range(0..n);
            let r = grad_check(&p, 1e-4, |t| {
                let (a, b, v, u, table) = (t.param(a), t.param(b), t.param(v), t.param(u), t.param(table));
                let ab = t.matmul(a, b)?; // m x n
                let av = t.matmul(a, v)?; // m
                let ua = t.matmul(u, a)?; // k
                let s1 = t.sigmoid(av);
                let s2 = t.tanh(ua);
                let prod = t.mul(av, u)?;
                let diff = t.sub(prod, s1)?;
                let sm = t.masked_softmax(diff, &mask)?;
                let o = t.matmul(sm, ab)?; // n
                let g = t.gather(table, &[1, 3, 1])?;
                let gr = t.row(g, 2)?;
                let d = t.dropout_apply(gr, drop_mask.clone())?;
                let mixed = t.add(o, d)?;
                let c = t.concat(&[mixed, s2])?;
                let st = t.stack_rows(&[mixed, o])?;
                let sr = t.row(st, 0)?;
                let ce = t.softmax_cross_entropy(sr, target)?;
                let cs = t.sum(c);
                let total = t.add(ce, cs)?;
                Ok(t.scale(total, 0.7))
            })
            .unwrap();
            assert!(r.max_relative_error < 1e-4, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn gru_sequence_and_column_ops() {
        for (trial, reverse) in [(0u64, false), (1, true), (2, false)] {
            let mut rng = stream_rng(40 + trial, Stream::Init, &[]);
            let (n, d, h) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
            let mut p = Params::new();
            let x = p.add("x", random(&mut rng, &[n, d]));
            let w: Vec<ParamId> = (0..3).map(|i| p.add(format!("w{i}"), random(&mut rng, &[d, h]))).collect();
            let u: Vec<ParamId> = (0..3).map(|i| p.add(format!("u{i}"), random(&mut rng, &[h, h]))).collect();
            let b: Vec<ParamId> = (0..3).map(|i| p.add(format!("b{i}"), random(&mut rng, &[h]))).collect();
            let side = p.add("side", random(&mut rng, &[n, 2]));
            let probe = p.add("probe", random(&mut rng, &[n + 2, h + 2]));
            let r = grad_check(&p, 1e-5, |t| {
                let vars = GruVars {
                    w: [t.param(w[0]), t.param(w[1]), t.param(w[2])],
                    u: [t.param(u[0]), t.param(u[1]), t.param(u[2])],
                    b: [t.param(b[0]), t.param(b[1]), t.param(b[2])],
                };
                let xv = t.param(x);
                let states = t.gru_sequence(xv, vars, reverse)?;
                let sv = t.param(side);
                let wide = t.concat_cols(states, sv)?;
                let padded = t.pad_rows(wide, n + 2)?;
                let pr = t.param(probe);
                let prod = t.mul(padded, pr)?;
                let s = t.sum(prod);
                Ok(s)
            })
            .unwrap();
            assert!(r.max_relative_error < 1e-5, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn three_layer_composition() {
        let mut rng = stream_rng(99, Stream::Init, &[]);
        let mut p = Params::new();
        let w1 = p.add("w1", random(&mut rng, &[6, 5]));
        let w2 = p.add("w2", random(&mut rng, &[4, 6]));
        let w3 = p.add("w3", random(&mut rng, &[3, 4]));
        let x = random(&mut rng, &[5]);
        let r = grad_check(&p, 1e-4, |t| {
            let x = t.constant(x.clone());
            let (w1, w2, w3) = (t.param(w1), t.param(w2), t.param(w3));
            let h1 = t.matmul(w1, x)?;
            let h1 = t.tanh(h1);
            let h2 = t.matmul(w2, h1)?;
            let h2 = t.sigmoid(h2);
            let h3 = t.matmul(w3, h2)?;
            t.softmax_cross_entropy(h3, 1)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
