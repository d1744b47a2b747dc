//! End-to-end gradient verification: every autodiff op plus the composite
//! paths (classification loss, regression loss, restoration loss, full
//! backbone, full enhancement head), all against central finite
//! differences in double precision.

use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{BackboneConfig, Backbone, EnhancementHead, EnhancementHeadConfig, enhancement_forward};
use crate::objectives::{
    classification_loss, regression_loss, signal_restoration_loss, ClassificationHead, MaskSpec,
    RegressionHead,
};
use crate::tensor::{finite_diff_check, run_op_checks, GradCheckReport, ParamStore, TensorError};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct VerifyReport {
    pub reports: Vec<GradCheckReport>,
    pub max_rel_err: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| lo + (hi - lo) * rng.random::<f64>())
}

fn store_arrays(store: &ParamStore<f64>) -> Vec<ArrayD<f64>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

/// Run the op suite (`instances` random cases per op) and the composite
/// model/loss checks, with coordinate subsampling on the big composites.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<VerifyReport, TensorError> {
    let mut reports = run_op_checks(instances, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 0xC0FFEE));

    let r = classification_composite(&mut rng)?;
    reports.push(r);
    let r = regression_composite(&mut rng)?;
    reports.push(r);
    let r = restoration_composite(&mut rng)?;
    reports.push(r);
    let r = backbone_composite(&mut rng)?;
    reports.push(r);
    let r = head_composite(&mut rng)?;
    reports.push(r);

    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(VerifyReport {
        reports,
        max_rel_err,
    })
}

fn classification_composite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let (frames, dm, pd, classes) = (7usize, 6usize, 5usize, 4usize);
    let mut store = ParamStore::<f64>::new();
    let head = ClassificationHead::new(dm, pd, classes, "cls", &mut store, rng)
        .expect("head construction");
    let targets: Vec<usize> = (0..frames).map(|t| t % classes).collect();
    let mask = MaskSpec {
        masked_indices: vec![0, 2, 3, 6],
        span_length: 2,
        start_prob: 0.3,
    };
    let h = rand2(rng, frames, dm, -1.0, 1.0).into_dyn();
    let mut inputs = store_arrays(&store);
    inputs.push(h);
    finite_diff_check("composite.classification_loss", &inputs, None, 71, move |g, v| {
        let bind = head.bind_vars(&v[..2]);
        classification_loss(g, &head, &bind, v[2], &targets, &mask)
            .map_err(|e| TensorError::Invalid {
                op: "composite.classification_loss",
                msg: e.to_string(),
            })
    })
}

fn regression_composite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let (frames, dm, out) = (8usize, 6usize, 5usize);
    let mut store = ParamStore::<f64>::new();
    let head = RegressionHead::new(dm, out, "reg", &mut store, rng).expect("head construction");
    let mask = MaskSpec {
        masked_indices: vec![1, 4, 5],
        span_length: 2,
        start_prob: 0.3,
    };
    let h = rand2(rng, frames, dm, -1.0, 1.0).into_dyn();
    let t = rand2(rng, frames, out, -1.0, 1.0).into_dyn();
    let mut inputs = store_arrays(&store);
    inputs.push(h);
    inputs.push(t);
    finite_diff_check("composite.regression_loss", &inputs, None, 73, move |g, v| {
        let bind = head.bind_vars(&v[..1]);
        regression_loss(g, &head, &bind, v[1], v[2], &mask).map_err(|e| TensorError::Invalid {
            op: "composite.regression_loss",
            msg: e.to_string(),
        })
    })
}

fn restoration_composite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let (frames, bins) = (5usize, 7usize);
    let logits = rand2(rng, frames, bins, -2.0, 2.0).into_dyn();
    let noisy = rand2(rng, frames, bins, 0.1, 1.1).into_dyn();
    let clean = rand2(rng, frames, bins, 0.0, 1.0).into_dyn();
    finite_diff_check(
        "composite.restoration_loss",
        &[logits, noisy, clean],
        None,
        79,
        |g, v| {
            let mask = g.sigmoid(v[0])?;
            signal_restoration_loss(g, mask, v[1], v[2], 1.0).map_err(|e| TensorError::Invalid {
                op: "composite.restoration_loss",
                msg: e.to_string(),
            })
        },
    )
}

fn backbone_composite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let cfg = BackboneConfig::tiny();
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::new(cfg, "backbone", &mut store, rng).expect("backbone construction");
    let wave = rand2(rng, 1, 120, -0.5, 0.5).into_dyn();
    let masked_indices = vec![1usize, 3];
    let mut inputs = store_arrays(&store);
    let n_params = inputs.len();
    inputs.push(wave);
    finite_diff_check("composite.backbone", &inputs, Some(4), 83, move |g, v| {
        let bind = backbone.bind_vars(&v[..n_params]);
        let x = backbone.cnn_encode(g, &bind, v[n_params]).map_err(wrap("backbone"))?;
        let m = backbone
            .apply_mask(g, &bind, x, &masked_indices)
            .map_err(wrap("backbone"))?;
        let outs = backbone.transformer(g, &bind, m).map_err(wrap("backbone"))?;
        g.mean_all(*outs.last().expect("blocks"))
    })
}

fn head_composite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let (frames, bins, latent) = (6usize, 4usize, 3usize);
    let cfg = EnhancementHeadConfig {
        recurrent_layers: 1,
        hidden_units: 5,
        input_dim: bins + latent,
        output_bins: bins,
        tied: false,
    };
    let mut store = ParamStore::<f64>::new();
    let head = EnhancementHead::new(cfg, "head", &mut store, rng).expect("head construction");
    let mag = rand2(rng, frames, bins, 0.1, 1.0).into_dyn();
    let lat = rand2(rng, frames, latent, -1.0, 1.0).into_dyn();
    let clean = rand2(rng, frames, bins, 0.0, 0.9).into_dyn();
    let mut inputs = store_arrays(&store);
    let n_params = inputs.len();
    inputs.push(mag);
    inputs.push(lat);
    inputs.push(clean);
    finite_diff_check("composite.enhancement_head", &inputs, Some(6), 89, move |g, v| {
        let bind = head.bind_vars(&v[..n_params]);
        let mask = enhancement_forward(g, &head, &bind, v[n_params], Some(v[n_params + 1]))
            .map_err(wrap("head"))?;
        signal_restoration_loss(g, mask, v[n_params], v[n_params + 2], 1.0).map_err(|e| {
            TensorError::Invalid {
                op: "composite.enhancement_head",
                msg: e.to_string(),
            }
        })
    })
}

fn wrap<E: std::fmt::Display>(op: &'static str) -> impl Fn(E) -> TensorError {
    move |e| TensorError::Invalid {
        op,
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_gradcheck_passes_tolerance() {
        let report = run_gradcheck(3, 99).unwrap();
        assert!(report.reports.len() > 25);
        for r in &report.reports {
            assert!(
                r.max_rel_err < GRADCHECK_TOLERANCE,
                "{}: {}",
                r.name,
                r.max_rel_err
            );
        }
        assert!(report.passed());
    }
}
