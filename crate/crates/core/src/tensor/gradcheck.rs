//! Central finite-difference verification of analytic gradients.
//!
//! Every registered op is checked on random instances in double precision:
//! a scalar loss is built from the op output through fixed random weights,
//! the tape's gradient is compared coordinate-by-coordinate against
//! (L(x+eps) - L(x-eps)) / 2eps, and the worst relative error is reported.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Var};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-6)
}

/// Compare tape gradients of a scalar-valued builder against central
/// finite differences over the given inputs. `max_coords_per_input`
/// subsamples coordinates (seeded) for large tensors.
pub fn finite_diff_check<F>(
    name: &str,
    inputs: &[ArrayD<f64>],
    max_coords_per_input: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |arrays: &[ArrayD<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = arrays.iter().map(|a| g.input(a.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    // Analytic gradients from one taped run.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, a)| {
            g.grad(v)
                .map(|g| g.as_standard_layout().to_owned())
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let len = input.len();
        let coords: Vec<usize> = match max_coords_per_input {
            Some(m) if len > m => rand::seq::index::sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        for flat in coords {
            let orig = input.as_slice().expect("contiguous")[flat];
            work[i].as_slice_mut().expect("contiguous")[flat] = orig + DEFAULT_FD_EPS;
            let lp = eval(&work)?;
            work[i].as_slice_mut().expect("contiguous")[flat] = orig - DEFAULT_FD_EPS;
            let lm = eval(&work)?;
            work[i].as_slice_mut().expect("contiguous")[flat] = orig;
            let numeric = (lp - lm) / (2.0 * DEFAULT_FD_EPS);
            let a = analytic[i].as_slice().expect("contiguous")[flat];
            max_rel = max_rel.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| lo + (hi - lo) * rng.random::<f64>())
}

/// Scalarize an op output through fixed random weights so vector-valued
/// ops reduce to one differentiable number.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &ArrayD<f64>) -> Result<Var> {
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Check every registered op over `instances` random instances each.
pub fn run_op_checks(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let mut run = |name: &str,
                   builder: &mut dyn FnMut(u64) -> Result<GradCheckReport>|
     -> Result<()> {
        let mut worst = GradCheckReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            coords_checked: 0,
        };
        for k in 0..instances {
            let r = builder(crate::derive_seed(seed, k as u64))?;
            worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            worst.coords_checked += r.coords_checked;
        }
        reports.push(worst);
        Ok(())
    };

    macro_rules! dims {
        ($rng:expr) => {
            2 + ($rng.random::<u32>() % 4) as usize
        };
    }

    run("add", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let b = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("add", &[a, b], None, s, move |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("sub", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let b = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("sub", &[a, b], None, s, move |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("mul", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let b = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("mul", &[a, b], None, s, move |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("scale+add_scalar", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = dims!(rng);
        let a = rand_array(&mut rng, &[n], -1.0, 1.0);
        let w = rand_array(&mut rng, &[n], -1.0, 1.0);
        finite_diff_check("scale", &[a], None, s, move |g, v| {
            let y = g.scale(v[0], 1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("mul_scalar_var", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = dims!(rng);
        let a = rand_array(&mut rng, &[n], -1.0, 1.0);
        let sc = rand_array(&mut rng, &[], 0.5, 1.5);
        let w = rand_array(&mut rng, &[n], -1.0, 1.0);
        finite_diff_check("mul_scalar_var", &[a, sc], None, s, move |g, v| {
            let y = g.mul_scalar_var(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("matmul", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, k, n) = (dims!(rng), dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_array(&mut rng, &[k, n], -1.0, 1.0);
        let w = rand_array(&mut rng, &[m, n], -1.0, 1.0);
        finite_diff_check("matmul", &[a, b], None, s, move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("matvec", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let m = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let v1 = rand_array(&mut rng, &[c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r], -1.0, 1.0);
        finite_diff_check("matvec", &[m, v1], None, s, move |g, v| {
            let y = g.matvec(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("transpose", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[c, r], -1.0, 1.0);
        finite_diff_check("transpose", &[a], None, s, move |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("conv1d", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (cin, cout) = (dims!(rng), dims!(rng));
        let k = 2 + (rng.random::<u32>() % 3) as usize;
        let stride = 1 + (rng.random::<u32>() % 3) as usize;
        let t = k + stride * (2 + (rng.random::<u32>() % 4) as usize);
        let t_out = (t - k) / stride + 1;
        let x = rand_array(&mut rng, &[cin, t], -1.0, 1.0);
        let wt = rand_array(&mut rng, &[cout, cin, k], -1.0, 1.0);
        let w = rand_array(&mut rng, &[cout, t_out], -1.0, 1.0);
        finite_diff_check("conv1d", &[x, wt], None, s, move |g, v| {
            let y = g.conv1d(v[0], v[1], stride)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("add_row_vec", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let x = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let v1 = rand_array(&mut rng, &[c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("add_row_vec", &[x, v1], None, s, move |g, v| {
            let y = g.add_row_vec(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("add_col_vec", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let x = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let v1 = rand_array(&mut rng, &[r], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("add_col_vec", &[x, v1], None, s, move |g, v| {
            let y = g.add_col_vec(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("scale_rows", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let x = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let v1 = rand_array(&mut rng, &[r], 0.5, 1.5);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("scale_rows", &[x, v1], None, s, move |g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            weighted_sum(g, y, &w)
        })
    })?;

    for (name, act) in [
        ("sigmoid", 0usize),
        ("tanh", 1),
        ("gelu", 2),
    ] {
        run(name, &mut |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let n = dims!(rng);
            let a = rand_array(&mut rng, &[n], -2.0, 2.0);
            let w = rand_array(&mut rng, &[n], -1.0, 1.0);
            finite_diff_check(name, &[a], None, s, move |g, v| {
                let y = match act {
                    0 => g.sigmoid(v[0])?,
                    1 => g.tanh(v[0])?,
                    _ => g.gelu(v[0])?,
                };
                weighted_sum(g, y, &w)
            })
        })?;
    }

    run("log", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = dims!(rng);
        let a = rand_array(&mut rng, &[n], 0.2, 2.0);
        let w = rand_array(&mut rng, &[n], -1.0, 1.0);
        finite_diff_check("log", &[a], None, s, move |g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("softmax", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let axis = (rng.random::<u32>() % 2) as usize;
        let a = rand_array(&mut rng, &[r, c], -2.0, 2.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("softmax", &[a], None, s, move |g, v| {
            let y = g.softmax(v[0], axis)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("layernorm", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), 2 + dims!(rng));
        let x = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let gain = rand_array(&mut rng, &[c], 0.5, 1.5);
        let bias = rand_array(&mut rng, &[c], -0.5, 0.5);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("layernorm", &[x, gain, bias], None, s, move |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("l2_normalize", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let x = rand_array(&mut rng, &[r, c], 0.3, 1.3);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("l2_normalize", &[x], None, s, move |g, v| {
            let y = g.l2_normalize(v[0], 1)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("concat", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c1, c2) = (dims!(rng), dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c1], -1.0, 1.0);
        let b = rand_array(&mut rng, &[r, c2], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c1 + c2], -1.0, 1.0);
        finite_diff_check("concat", &[a, b], None, s, move |g, v| {
            let y = g.concat(v[0], v[1], 1)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("slice", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (2 + dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let start = (rng.random::<u32>() as usize) % (r - 1);
        let end = start + 1 + (rng.random::<u32>() as usize) % (r - start - 1).max(1);
        let w = rand_array(&mut rng, &[end - start, c], -1.0, 1.0);
        finite_diff_check("slice", &[a], None, s, move |g, v| {
            let y = g.slice(v[0], 0, start, end)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("reverse_rows", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("reverse_rows", &[a], None, s, move |g, v| {
            let y = g.reverse_rows(v[0])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("stack_rows", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let c = dims!(rng);
        let a = rand_array(&mut rng, &[c], -1.0, 1.0);
        let b = rand_array(&mut rng, &[c], -1.0, 1.0);
        let d = rand_array(&mut rng, &[c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[3, c], -1.0, 1.0);
        finite_diff_check("stack_rows", &[a, b, d], None, s, move |g, v| {
            let y = g.stack_rows(&[v[0], v[1], v[2]])?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("gather_rows", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let idx: Vec<usize> = (0..r + 1).map(|_| (rng.random::<u32>() as usize) % r).collect();
        let w = rand_array(&mut rng, &[idx.len(), c], -1.0, 1.0);
        finite_diff_check("gather_rows", &[a], None, s, move |g, v| {
            let y = g.gather_rows(v[0], &idx)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("gather_entries", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let coords: Vec<(usize, usize)> = (0..r)
            .map(|i| (i, (rng.random::<u32>() as usize) % c))
            .collect();
        let w = rand_array(&mut rng, &[coords.len()], -1.0, 1.0);
        finite_diff_check("gather_entries", &[a], None, s, move |g, v| {
            let y = g.gather_entries(v[0], &coords)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("gather", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let b = 2 + dims!(rng);
        let (r, c) = (dims!(rng), dims!(rng));
        let values = rand_array(&mut rng, &[b], -1.0, 1.0);
        let idx = ndarray::Array2::from_shape_fn((r, c), |_| (rng.random::<u32>() as usize) % b);
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("gather", &[values], None, s, move |g, v| {
            let y = g.gather(v[0], &idx)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("mask_rows", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (2 + dims!(rng), dims!(rng));
        let x = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let emb = rand_array(&mut rng, &[c], -1.0, 1.0);
        let idx: Vec<usize> = (0..r).filter(|_| rng.random::<f64>() < 0.4).collect();
        let w = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        finite_diff_check("mask_rows", &[x, emb], None, s, move |g, v| {
            let y = g.mask_rows(v[0], v[1], &idx)?;
            weighted_sum(g, y, &w)
        })
    })?;

    run("reductions", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c) = (dims!(rng), dims!(rng));
        let a = rand_array(&mut rng, &[r, c], -1.0, 1.0);
        let w = rand_array(&mut rng, &[c], -1.0, 1.0);
        finite_diff_check("reductions", &[a], None, s, move |g, v| {
            let m = g.mean_axis(v[0], 0)?;
            let ws = weighted_sum(g, m, &w)?;
            let sa = g.sum_all(v[0])?;
            let ma = g.mean_all(v[0])?;
            let t = g.add(sa, ma)?;
            g.add(ws, t)
        })
    })?;

    run("cosine_similarity", &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = 2 + dims!(rng);
        let a = rand_array(&mut rng, &[n], 0.3, 1.3);
        let b = rand_array(&mut rng, &[n], -1.3, -0.3);
        finite_diff_check("cosine_similarity", &[a, b], None, s, |g, v| {
            g.cosine_similarity(v[0], v[1])
        })
    })?;

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        let reports = run_op_checks(5, 1234).unwrap();
        assert!(reports.len() >= 20);
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-4,
                "{}: rel err {} over {} coords",
                r.name,
                r.max_rel_err,
                r.coords_checked
            );
        }
    }

    #[test]
    fn subsampling_limits_coordinate_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_array(&mut rng, &[10, 10], -1.0, 1.0);
        let r = finite_diff_check("sub", &[a], Some(7), 3, |g, v| g.mean_all(v[0])).unwrap();
        assert_eq!(r.coords_checked, 7);
        assert!(r.max_rel_err < 1e-6);
    }
}
