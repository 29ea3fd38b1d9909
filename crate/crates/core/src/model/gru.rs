//! GRU forward and backward passes.
//!
//! Two routes compute the same function. `gru_cell_forward` /
//! `forward_sequence` are plain per-sample loops; `forward_batch` stacks a
//! mini-batch as a `(T*B) x D` matrix (row `t*B + b`) so the input
//! projections and all weight gradients are single matrix products.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{GruLayerParams, GruParameters};
use crate::error::{Error, Result};
use crate::numerics::{gemm, logistic, softmax_in_place, RealMatrix};
use crate::sim::ActivityClass;

/// One GRU step for a single sample.
pub fn gru_cell_forward(x: &[f64], h_prev: &[f64], p: &GruLayerParams) -> Result<Vec<f64>> {
    let (hd, d) = (p.hidden_dim(), p.input_dim());
    if x.len() != d || h_prev.len() != hd {
        return Err(Error::shape(format!(
            "cell expects x[{d}], h[{hd}], got x[{}], h[{}]",
            x.len(),
            h_prev.len()
        )));
    }
    if let Some(i) = x.iter().chain(h_prev).position(|v| !v.is_finite()) {
        let value = if i < d { x[i] } else { h_prev[i - d] };
        return Err(Error::NonFinite { index: i, value });
    }
    let affine = |w: &Array2<f64>, u: &Array2<f64>, b: &Array1<f64>, h: &[f64], i: usize| {
        let wx: f64 = w.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        let uh: f64 = u.row(i).iter().zip(h).map(|(a, b)| a * b).sum();
        wx + uh + b[i]
    };
    let z: Vec<f64> = (0..hd)
        .map(|i| logistic(affine(&p.w_z, &p.u_z, &p.b_z, h_prev, i)))
        .collect();
    let r: Vec<f64> = (0..hd)
        .map(|i| logistic(affine(&p.w_r, &p.u_r, &p.b_r, h_prev, i)))
        .collect();
    let q: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    Ok((0..hd)
        .map(|i| {
            let c = affine(&p.w_h, &p.u_h, &p.b_h, &q, i).tanh();
            (1.0 - z[i]) * h_prev[i] + z[i] * c
        })
        .collect())
}

/// Per-step output of `forward_sequence`.
#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// Class distribution after every step, `T x C`.
    pub probabilities: Array2<f64>,
    /// Hidden state of each layer after the last step.
    pub final_hidden: Vec<Vec<f64>>,
}

/// Runs a `T x D` window through the network one step at a time.
pub fn forward_sequence(
    params: &GruParameters,
    window: ArrayView2<'_, f64>,
) -> Result<SequenceOutput> {
    params.validate()?;
    if window.nrows() == 0 {
        return Err(Error::Empty("input window"));
    }
    if window.ncols() != params.input_dim() {
        return Err(Error::shape(format!(
            "window has {} features, model expects {}",
            window.ncols(),
            params.input_dim()
        )));
    }
    let mut hidden: Vec<Vec<f64>> = params
        .layers
        .iter()
        .map(|l| vec![0.0; l.hidden_dim()])
        .collect();
    let classes = params.num_classes();
    let mut probabilities = Array2::zeros((window.nrows(), classes));
    for (t, row) in window.rows().into_iter().enumerate() {
        let mut input = row.to_vec();
        for (layer, h) in params.layers.iter().zip(hidden.iter_mut()) {
            *h = gru_cell_forward(&input, h, layer)?;
            input.clone_from(h);
        }
        let mut logits: Vec<f64> = (0..classes)
            .map(|c| {
                params
                    .w_o
                    .row(c)
                    .iter()
                    .zip(&input)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + params.b_o[c]
            })
            .collect();
        softmax_in_place(&mut logits);
        probabilities.row_mut(t).assign(&Array1::from(logits));
    }
    Ok(SequenceOutput {
        probabilities,
        final_hidden: hidden,
    })
}

#[derive(Debug, Clone)]
struct LayerCache {
    z: Array2<f64>,
    r: Array2<f64>,
    c: Array2<f64>,
    q: Array2<f64>,
    h: Array2<f64>,
}

fn add_bias(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

fn layer_forward(
    p: &GruLayerParams,
    x: &ArrayView2<'_, f64>,
    steps: usize,
    batch: usize,
) -> LayerCache {
    let hd = p.hidden_dim();
    let n = steps * batch;
    let project = |w: &Array2<f64>, b: &Array1<f64>| {
        let mut out = Array2::zeros((n, hd));
        gemm(1.0, x, &w.t(), 0.0, &mut out.view_mut());
        add_bias(&mut out, b);
        out
    };
    let mut z = project(&p.w_z, &p.b_z);
    let mut r = project(&p.w_r, &p.b_r);
    let mut c = project(&p.w_h, &p.b_h);
    let mut q = Array2::zeros((n, hd));
    let mut h = Array2::<f64>::zeros((n, hd));
    let block = batch * hd;

    for t in 0..steps {
        let (lo, hi) = (t * batch, (t + 1) * batch);
        if t > 0 {
            let hp = h.slice(s![lo - batch..lo, ..]);
            gemm(1.0, &hp, &p.u_z.t(), 1.0, &mut z.slice_mut(s![lo..hi, ..]));
            gemm(1.0, &hp, &p.u_r.t(), 1.0, &mut r.slice_mut(s![lo..hi, ..]));
        }
        let zs = &mut z.as_slice_mut().expect("standard layout")[t * block..(t + 1) * block];
        zs.iter_mut().for_each(|v| *v = logistic(*v));
        let rs = &mut r.as_slice_mut().expect("standard layout")[t * block..(t + 1) * block];
        rs.iter_mut().for_each(|v| *v = logistic(*v));
        if t > 0 {
            let hp = &h.as_slice().expect("standard layout")[(t - 1) * block..t * block];
            let qs = &mut q.as_slice_mut().expect("standard layout")[t * block..(t + 1) * block];
            for ((q, r), h) in qs.iter_mut().zip(rs.iter()).zip(hp) {
                *q = r * h;
            }
            gemm(
                1.0,
                &q.slice(s![lo..hi, ..]),
                &p.u_h.t(),
                1.0,
                &mut c.slice_mut(s![lo..hi, ..]),
            );
        }
        let cs = &mut c.as_slice_mut().expect("standard layout")[t * block..(t + 1) * block];
        cs.iter_mut().for_each(|v| *v = v.tanh());
        let zs = &z.as_slice().expect("standard layout")[t * block..(t + 1) * block];
        let hall = h.as_slice_mut().expect("standard layout");
        let (before, after) = hall.split_at_mut(t * block);
        let hnew = &mut after[..block];
        if t > 0 {
            let hp = &before[(t - 1) * block..];
            for i in 0..block {
                hnew[i] = (1.0 - zs[i]) * hp[i] + zs[i] * cs[i];
            }
        } else {
            for i in 0..block {
                hnew[i] = zs[i] * cs[i];
            }
        }
    }
    LayerCache { z, r, c, q, h }
}

/// Accumulates the layer's weight gradients into `g` and returns the
/// gradient with respect to the layer input when `need_dx` is set.
fn layer_backward(
    p: &GruLayerParams,
    cache: &LayerCache,
    x: &ArrayView2<'_, f64>,
    dh_ext: &Array2<f64>,
    steps: usize,
    batch: usize,
    g: &mut GruLayerParams,
    need_dx: bool,
) -> Option<Array2<f64>> {
    let hd = p.hidden_dim();
    let n = steps * batch;
    let block = batch * hd;
    let mut daz = Array2::<f64>::zeros((n, hd));
    let mut dar = Array2::<f64>::zeros((n, hd));
    let mut dah = Array2::<f64>::zeros((n, hd));
    let mut carry = Array2::<f64>::zeros((batch, hd));
    let mut dq = Array2::<f64>::zeros((batch, hd));

    let hs = cache.h.as_slice().expect("standard layout");
    let zs = cache.z.as_slice().expect("standard layout");
    let rs = cache.r.as_slice().expect("standard layout");
    let cs = cache.c.as_slice().expect("standard layout");
    let ext = dh_ext.as_slice().expect("standard layout");

    for t in (0..steps).rev() {
        let (lo, hi) = (t * batch, (t + 1) * batch);
        let off = t * block;
        {
            let daz_s = &mut daz.as_slice_mut().expect("standard layout")[off..off + block];
            let dah_s = &mut dah.as_slice_mut().expect("standard layout")[off..off + block];
            let carry_s = carry.as_slice_mut().expect("standard layout");
            for i in 0..block {
                let k = off + i;
                let dh = ext[k] + carry_s[i];
                let hp = if t > 0 { hs[k - block] } else { 0.0 };
                let (z, c) = (zs[k], cs[k]);
                daz_s[i] = dh * (c - hp) * z * (1.0 - z);
                dah_s[i] = dh * z * (1.0 - c * c);
                carry_s[i] = dh * (1.0 - z);
            }
        }
        if t == 0 {
            break;
        }
        gemm(
            1.0,
            &dah.slice(s![lo..hi, ..]),
            &p.u_h.view(),
            0.0,
            &mut dq.view_mut(),
        );
        {
            let dar_s = &mut dar.as_slice_mut().expect("standard layout")[off..off + block];
            let carry_s = carry.as_slice_mut().expect("standard layout");
            let dq_s = dq.as_slice().expect("standard layout");
            for i in 0..block {
                let k = off + i;
                let r = rs[k];
                dar_s[i] = dq_s[i] * hs[k - block] * r * (1.0 - r);
                carry_s[i] += dq_s[i] * r;
            }
        }
        gemm(
            1.0,
            &daz.slice(s![lo..hi, ..]),
            &p.u_z.view(),
            1.0,
            &mut carry.view_mut(),
        );
        gemm(
            1.0,
            &dar.slice(s![lo..hi, ..]),
            &p.u_r.view(),
            1.0,
            &mut carry.view_mut(),
        );
    }

    let mut hprev = Array2::<f64>::zeros((n, hd));
    if steps > 1 {
        hprev
            .slice_mut(s![batch.., ..])
            .assign(&cache.h.slice(s![..n - batch, ..]));
    }
    gemm(1.0, &daz.t(), x, 1.0, &mut g.w_z.view_mut());
    gemm(1.0, &daz.t(), &hprev.view(), 1.0, &mut g.u_z.view_mut());
    g.b_z += &daz.sum_axis(Axis(0));
    gemm(1.0, &dar.t(), x, 1.0, &mut g.w_r.view_mut());
    gemm(1.0, &dar.t(), &hprev.view(), 1.0, &mut g.u_r.view_mut());
    g.b_r += &dar.sum_axis(Axis(0));
    gemm(1.0, &dah.t(), x, 1.0, &mut g.w_h.view_mut());
    gemm(1.0, &dah.t(), &cache.q.view(), 1.0, &mut g.u_h.view_mut());
    g.b_h += &dah.sum_axis(Axis(0));

    need_dx.then(|| {
        let mut dx = Array2::zeros((n, p.input_dim()));
        gemm(1.0, &daz.view(), &p.w_z.view(), 0.0, &mut dx.view_mut());
        gemm(1.0, &dar.view(), &p.w_r.view(), 1.0, &mut dx.view_mut());
        gemm(1.0, &dah.view(), &p.w_h.view(), 1.0, &mut dx.view_mut());
        dx
    })
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    steps: usize,
    batch: usize,
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    probabilities: Array2<f64>,
}

/// Batched forward pass over windows of identical shape `T x D`.
pub fn forward_batch(
    params: &GruParameters,
    windows: &[ArrayView2<'_, f64>],
) -> Result<ForwardPass> {
    params.validate()?;
    let first = windows.first().ok_or(Error::Empty("batch"))?;
    let (steps, d) = first.dim();
    if steps == 0 {
        return Err(Error::Empty("input window"));
    }
    if d != params.input_dim() {
        return Err(Error::shape(format!(
            "window has {d} features, model expects {}",
            params.input_dim()
        )));
    }
    if let Some(i) = windows.iter().position(|w| w.dim() != (steps, d)) {
        return Err(Error::shape(format!(
            "window {i} is {:?}, batch expects {:?}",
            windows[i].dim(),
            (steps, d)
        )));
    }
    let batch = windows.len();
    let mut input = Array2::zeros((steps * batch, d));
    for (b, w) in windows.iter().enumerate() {
        for t in 0..steps {
            input.row_mut(t * batch + b).assign(&w.row(t));
        }
    }
    if let Some(index) = input.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: input.as_slice().expect("standard layout")[index],
        });
    }

    let mut layers: Vec<LayerCache> = Vec::with_capacity(params.layers.len());
    for (l, p) in params.layers.iter().enumerate() {
        let cache = {
            let x = if l == 0 {
                input.view()
            } else {
                layers[l - 1].h.view()
            };
            layer_forward(p, &x, steps, batch)
        };
        layers.push(cache);
    }
    let top = &layers.last().expect("at least one layer").h;
    let last = top.slice(s![(steps - 1) * batch.., ..]);
    let mut probabilities = Array2::zeros((batch, params.num_classes()));
    gemm(
        1.0,
        &last,
        &params.w_o.t(),
        0.0,
        &mut probabilities.view_mut(),
    );
    add_bias(&mut probabilities, &params.b_o);
    for mut row in probabilities.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    Ok(ForwardPass {
        steps,
        batch,
        input,
        layers,
        probabilities,
    })
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(())
}

impl ForwardPass {
    /// Final-step class distribution, `B x C`.
    pub fn probabilities(&self) -> &Array2<f64> {
        &self.probabilities
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Mean cross-entropy of the final-step predictions.
    pub fn loss(&self, labels: &[usize]) -> Result<f64> {
        check_labels(labels, self.batch, self.probabilities.ncols())?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| -self.probabilities[[b, y]].max(f64::MIN_POSITIVE).ln())
            .sum();
        Ok(total / self.batch as f64)
    }

    /// Backpropagation through time. Returns the gradient of the mean loss
    /// (same layout as the parameters) and the loss itself.
    pub fn backward(
        &self,
        params: &GruParameters,
        labels: &[usize],
    ) -> Result<(GruParameters, f64)> {
        let loss = self.loss(labels)?;
        let (steps, batch) = (self.steps, self.batch);
        let mut grads = params.zeros_like();

        let mut dlogits = self.probabilities.clone();
        for (b, &y) in labels.iter().enumerate() {
            dlogits[[b, y]] -= 1.0;
        }
        dlogits /= batch as f64;
        let top = &self.layers.last().expect("at least one layer").h;
        let last = top.slice(s![(steps - 1) * batch.., ..]);
        gemm(1.0, &dlogits.t(), &last, 0.0, &mut grads.w_o.view_mut());
        grads.b_o = dlogits.sum_axis(Axis(0));

        let mut dh_ext = Array2::zeros(top.dim());
        gemm(
            1.0,
            &dlogits.view(),
            &params.w_o.view(),
            0.0,
            &mut dh_ext.slice_mut(s![(steps - 1) * batch.., ..]),
        );
        for l in (0..params.layers.len()).rev() {
            let x = if l == 0 {
                self.input.view()
            } else {
                self.layers[l - 1].h.view()
            };
            let dx = layer_backward(
                &params.layers[l],
                &self.layers[l],
                &x,
                &dh_ext,
                steps,
                batch,
                &mut grads.layers[l],
                l > 0,
            );
            if let Some(dx) = dx {
                dh_ext = dx;
            }
        }
        Ok((grads, loss))
    }
}

/// Gradient of the mean final-step cross-entropy over a batch.
pub fn bptt_gradients(
    params: &GruParameters,
    windows: &[ArrayView2<'_, f64>],
    labels: &[usize],
) -> Result<(GruParameters, f64)> {
    forward_batch(params, windows)?.backward(params, labels)
}

/// Mean final-step cross-entropy over a batch.
pub fn batch_loss(
    params: &GruParameters,
    windows: &[ArrayView2<'_, f64>],
    labels: &[usize],
) -> Result<f64> {
    forward_batch(params, windows)?.loss(labels)
}

/// Classifier output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_index: usize,
    /// Maximum softmax probability.
    pub confidence: f64,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    /// Argmax with ties resolved toward the lower index.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let (class_index, confidence) = probabilities.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, p)| if p > best.1 { (i, p) } else { best },
        );
        Self {
            class_index,
            confidence,
            probabilities,
        }
    }

    pub fn activity(&self) -> Result<ActivityClass> {
        ActivityClass::from_index(self.class_index)
    }
}

const PREDICT_CHUNK: usize = 128;

/// Predicts every window, batching internally.
pub fn predict_batch(params: &GruParameters, windows: &[&RealMatrix]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(PREDICT_CHUNK) {
        let views: Vec<_> = chunk.iter().map(|w| w.view()).collect();
        let pass = forward_batch(params, &views)?;
        out.extend(
            pass.probabilities
                .rows()
                .into_iter()
                .map(|row| Prediction::from_probabilities(row.to_vec())),
        );
    }
    Ok(out)
}

pub fn predict_with_confidence(params: &GruParameters, window: &RealMatrix) -> Result<Prediction> {
    Ok(predict_batch(params, &[window])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> GruParameters {
        GruParameters::init(
            &ModelConfig {
                input_dim: 4,
                hidden_dim: 5,
                layers: 3,
                classes: 3,
            },
            11,
        )
        .unwrap()
    }

    fn random_window(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let p = GruLayerParams::zeros(3, 4);
        let h = gru_cell_forward(&[1.0, -2.0, 0.5], &[0.0; 4], &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_matches_hand_computation() {
        let mut p = GruLayerParams::zeros(1, 1);
        p.w_z[[0, 0]] = 0.5;
        p.u_r[[0, 0]] = -1.0;
        p.w_h[[0, 0]] = 2.0;
        p.u_h[[0, 0]] = 0.3;
        p.b_h[0] = 0.1;
        let (x, hp) = (0.7, 0.4);
        let z = logistic(0.5 * x);
        let r = logistic(-hp);
        let c = (2.0 * x + 0.3 * r * hp + 0.1f64).tanh();
        let want = (1.0 - z) * hp + z * c;
        let got = gru_cell_forward(&[x], &[hp], &p).unwrap()[0];
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn cell_rejects_bad_input() {
        let p = GruLayerParams::zeros(2, 2);
        assert!(gru_cell_forward(&[1.0], &[0.0; 2], &p).is_err());
        assert!(gru_cell_forward(&[1.0, f64::NAN], &[0.0; 2], &p).is_err());
    }

    #[test]
    fn batched_matches_sequential() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let windows: Vec<Array2<f64>> = (0..6).map(|_| random_window(&mut rng, 9, 4)).collect();
        let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
        let pass = forward_batch(&p, &views).unwrap();
        for (b, w) in windows.iter().enumerate() {
            let seq = forward_sequence(&p, w.view()).unwrap();
            for c in 0..3 {
                let diff = (seq.probabilities[[8, c]] - pass.probabilities()[[b, c]]).abs();
                assert!(diff < 1e-12, "window {b} class {c}: {diff}");
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
        }
        let windows: Vec<Array2<f64>> = (0..3).map(|_| random_window(&mut rng, 5, 4)).collect();
        let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
        let labels = [0, 2, 1];
        let (grads, _) = bptt_gradients(&p, &views, &labels).unwrap();
        let analytic = grads.to_flat();
        let base = p.to_flat();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            p.copy_from_flat(&plus).unwrap();
            let lp = batch_loss(&p, &views, &labels).unwrap();
            p.copy_from_flat(&minus).unwrap();
            let lm = batch_loss(&p, &views, &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn single_step_window() {
        let p = small();
        let w = Array2::from_elem((1, 4), 0.5);
        let views = [w.view()];
        let (g, loss) = bptt_gradients(&p, &views, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(g.to_flat().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_validation() {
        let p = small();
        assert!(forward_batch(&p, &[]).is_err());
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((5, 4));
        assert!(forward_batch(&p, &[a.view(), b.view()]).is_err());
        let c = Array2::zeros((4, 3));
        assert!(forward_batch(&p, &[c.view()]).is_err());
        let pass = forward_batch(&p, &[a.view()]).unwrap();
        assert!(pass.loss(&[3]).is_err());
        assert!(pass.loss(&[0, 1]).is_err());
    }

    #[test]
    fn prediction_tie_breaks_low() {
        let pr = Prediction::from_probabilities(vec![0.4, 0.4, 0.2]);
        assert_eq!(pr.class_index, 0);
        assert_eq!(pr.confidence, 0.4);
    }
}
