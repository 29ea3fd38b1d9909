use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelSource, TeacherLabel};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, softmax_in_place, AdamHyper, AdamState};
use crate::sim::ActivityClass;

/// Side of the square spatial-attention kernel.
pub const SPATIAL_KERNEL: usize = 7;
const PAD: isize = (SPATIAL_KERNEL / 2) as isize;

fn sig(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `channels x height x width`, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("feature map dimensions must be >= 1"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let a = self.area();
        &self.data[c * a..(c + 1) * a]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams {
    /// `mid x channels`
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    /// `channels x mid`
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
    /// `2 x 7 x 7`: average-pool plane, then max-pool plane.
    pub conv_w: Array3<f64>,
    /// Length 1.
    pub conv_b: Array1<f64>,
    /// `classes x channels`
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type AttentionGradients = AttentionBlockParams;

impl AttentionBlockParams {
    pub fn zeros(channels: usize, mid: usize, classes: usize) -> Self {
        Self {
            fc1_w: Array2::zeros((mid, channels)),
            fc1_b: Array1::zeros(mid),
            fc2_w: Array2::zeros((channels, mid)),
            fc2_b: Array1::zeros(channels),
            conv_w: Array3::zeros((2, SPATIAL_KERNEL, SPATIAL_KERNEL)),
            conv_b: Array1::zeros(1),
            head_w: Array2::zeros((classes, channels)),
            head_b: Array1::zeros(classes),
        }
    }

    pub fn init(channels: usize, mid: usize, classes: usize, seed: u64) -> Result<Self> {
        let p = Self::zeros(channels, mid, classes);
        p.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = p;
        let fill = |m: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let k = 1.0 / (fan_in as f64).sqrt();
            m.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        };
        fill(
            p.fc1_w.as_slice_mut().expect("standard layout"),
            channels,
            &mut rng,
        );
        fill(
            p.fc2_w.as_slice_mut().expect("standard layout"),
            mid,
            &mut rng,
        );
        fill(
            p.conv_w.as_slice_mut().expect("standard layout"),
            2 * SPATIAL_KERNEL * SPATIAL_KERNEL,
            &mut rng,
        );
        fill(
            p.head_w.as_slice_mut().expect("standard layout"),
            channels,
            &mut rng,
        );
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.fc1_w.ncols()
    }

    pub fn mid(&self) -> usize {
        self.fc1_w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, m, k) = (self.channels(), self.mid(), self.classes());
        if m == 0 || m >= c {
            return Err(Error::shape(format!(
                "bottleneck width {m} must be in 1..{c}"
            )));
        }
        let ok = self.fc1_b.len() == m
            && self.fc2_w.dim() == (c, m)
            && self.fc2_b.len() == c
            && self.conv_w.dim() == (2, SPATIAL_KERNEL, SPATIAL_KERNEL)
            && self.conv_b.len() == 1
            && self.head_w.ncols() == c
            && self.head_b.len() == k;
        if !ok {
            return Err(Error::shape("inconsistent attention block shapes"));
        }
        if k < 2 {
            return Err(Error::invalid("classifier head needs at least two classes"));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            self.fc1_w.as_slice().expect("standard layout"),
            self.fc1_b.as_slice().expect("standard layout"),
            self.fc2_w.as_slice().expect("standard layout"),
            self.fc2_b.as_slice().expect("standard layout"),
            self.conv_w.as_slice().expect("standard layout"),
            self.conv_b.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.fc1_w.as_slice_mut().expect("standard layout"),
            self.fc1_b.as_slice_mut().expect("standard layout"),
            self.fc2_w.as_slice_mut().expect("standard layout"),
            self.fc2_b.as_slice_mut().expect("standard layout"),
            self.conv_w.as_slice_mut().expect("standard layout"),
            self.conv_b.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != n {
            return Err(Error::shape(format!(
                "flat vector of {} for {n} parameters",
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.channels(), self.mid(), self.classes())
    }
}

fn check_channels(f: &FeatureMap, p: &AttentionBlockParams) -> Result<()> {
    if f.channels != p.channels() {
        return Err(Error::shape(format!(
            "feature map has {} channels, attention block expects {}",
            f.channels,
            p.channels()
        )));
    }
    Ok(())
}

/// `sigmoid(FC2(relu(FC1(GAP(F)))))`, one weight per channel.
pub fn channel_attention(f: &FeatureMap, p: &AttentionBlockParams) -> Result<Vec<f64>> {
    check_channels(f, p)?;
    let g = gap(f);
    let (_, _, s) = channel_forward(&g, p);
    Ok(s)
}

fn gap(f: &FeatureMap) -> Vec<f64> {
    (0..f.channels)
        .map(|c| f.channel(c).iter().sum::<f64>() / f.area() as f64)
        .collect()
}

fn channel_forward(g: &[f64], p: &AttentionBlockParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let a1: Vec<f64> = (0..p.mid())
        .map(|m| p.fc1_b[m] + (0..g.len()).map(|c| p.fc1_w[[m, c]] * g[c]).sum::<f64>())
        .collect();
    let r: Vec<f64> = a1.iter().map(|&v| v.max(0.0)).collect();
    let s = (0..g.len())
        .map(|c| sig(p.fc2_b[c] + (0..r.len()).map(|m| p.fc2_w[[c, m]] * r[m]).sum::<f64>()))
        .collect();
    (a1, r, s)
}

/// Scales channel `c` of `f` by `s_c[c]`.
pub fn apply_attention(f: &FeatureMap, s_c: &[f64]) -> Result<FeatureMap> {
    if s_c.len() != f.channels {
        return Err(Error::shape(format!(
            "{} channel weights for a {}-channel map",
            s_c.len(),
            f.channels
        )));
    }
    let a = f.area();
    let data = f
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v * s_c[i / a])
        .collect();
    Ok(FeatureMap { data, ..*f })
}

struct Pooled {
    avg: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
}

fn pool_channels(f: &FeatureMap) -> Pooled {
    let a = f.area();
    let mut avg = vec![0.0; a];
    let mut max = vec![f64::NEG_INFINITY; a];
    let mut argmax = vec![0; a];
    for c in 0..f.channels {
        for (i, &v) in f.channel(c).iter().enumerate() {
            avg[i] += v;
            if v > max[i] {
                max[i] = v;
                argmax[i] = c;
            }
        }
    }
    avg.iter_mut().for_each(|v| *v /= f.channels as f64);
    Pooled { avg, max, argmax }
}

fn conv_forward(planes: [&[f64]; 2], h: usize, w: usize, p: &AttentionBlockParams) -> Vec<f64> {
    let mut out = vec![p.conv_b[0]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, plane) in planes.iter().enumerate() {
                for i in 0..SPATIAL_KERNEL {
                    let yy = y as isize + i as isize - PAD;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..SPATIAL_KERNEL {
                        let xx = x as isize + j as isize - PAD;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += p.conv_w[[k, i, j]] * plane[yy as usize * w + xx as usize];
                    }
                }
            }
            out[y * w + x] += acc;
        }
    }
    out
}

/// `sigmoid(conv7x7([avgpool_c(F), maxpool_c(F)]))` with zero padding 3.
pub fn spatial_attention(f: &FeatureMap, p: &AttentionBlockParams) -> Result<Vec<f64>> {
    p.validate()?;
    let pooled = pool_channels(f);
    let o = conv_forward([&pooled.avg, &pooled.max], f.height, f.width, p);
    Ok(o.into_iter().map(sig).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub mid: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub use_spatial: bool,
    /// Forces `s_c = 1`, removing channel attention.
    pub bypass_channel: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            mid: 2,
            height: 8,
            width: 8,
            classes: ActivityClass::COUNT,
            use_spatial: true,
            bypass_channel: false,
        }
    }
}

struct Trace {
    g: Vec<f64>,
    a1: Vec<f64>,
    r: Vec<f64>,
    s: Vec<f64>,
    attended: FeatureMap,
    pooled: Option<Pooled>,
    t: Option<Vec<f64>>,
    final_map: FeatureMap,
    summary: Vec<f64>,
    probs: Vec<f64>,
}

/// Attention block followed by global pooling and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionClassifier {
    pub params: AttentionBlockParams,
    pub use_spatial: bool,
    pub bypass_channel: bool,
    trained: bool,
}

impl AttentionClassifier {
    pub fn new(config: &AttentionConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: AttentionBlockParams::init(config.channels, config.mid, config.classes, seed)?,
            use_spatial: config.use_spatial,
            bypass_channel: config.bypass_channel,
            trained: false,
        })
    }

    /// Wraps externally obtained parameters and marks them usable.
    pub fn from_trained(
        params: AttentionBlockParams,
        use_spatial: bool,
        bypass_channel: bool,
    ) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            use_spatial,
            bypass_channel,
            trained: true,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn forward(&self, f: &FeatureMap) -> Result<Trace> {
        check_channels(f, &self.params)?;
        if f.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        let g = gap(f);
        let (a1, r, s) = if self.bypass_channel {
            (vec![], vec![], vec![1.0; f.channels])
        } else {
            channel_forward(&g, &self.params)
        };
        let attended = apply_attention(f, &s)?;
        let (pooled, t, final_map) = if self.use_spatial {
            let pooled = pool_channels(&attended);
            let o = conv_forward([&pooled.avg, &pooled.max], f.height, f.width, &self.params);
            let t: Vec<f64> = o.into_iter().map(sig).collect();
            let a = f.area();
            let data = attended
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| v * t[i % a])
                .collect();
            let fm = FeatureMap {
                data,
                ..attended.clone()
            };
            (Some(pooled), Some(t), fm)
        } else {
            (None, None, attended.clone())
        };
        let summary = gap(&final_map);
        let p = &self.params;
        let mut probs: Vec<f64> = (0..p.classes())
            .map(|k| {
                p.head_b[k]
                    + (0..summary.len())
                        .map(|c| p.head_w[[k, c]] * summary[c])
                        .sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut probs);
        Ok(Trace {
            g,
            a1,
            r,
            s,
            attended,
            pooled,
            t,
            final_map,
            summary,
            probs,
        })
    }

    /// Pre-softmax scores; available whether or not the model is trained.
    pub fn logits(&self, f: &FeatureMap) -> Result<Vec<f64>> {
        let tr = self.forward(f)?;
        let p = &self.params;
        Ok((0..p.classes())
            .map(|k| {
                p.head_b[k]
                    + (0..tr.summary.len())
                        .map(|c| p.head_w[[k, c]] * tr.summary[c])
                        .sum::<f64>()
            })
            .collect())
    }

    pub fn probabilities(&self, f: &FeatureMap) -> Result<Vec<f64>> {
        Ok(self.forward(f)?.probs)
    }

    /// Class index and its probability. Refuses untrained parameters.
    pub fn classify(&self, f: &FeatureMap) -> Result<(usize, f64)> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let probs = self.forward(f)?.probs;
        let (mut best, mut conf) = (0, probs[0]);
        for (i, &p) in probs.iter().enumerate().skip(1) {
            if p > conf {
                best = i;
                conf = p;
            }
        }
        Ok((best, conf))
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[(FeatureMap, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (f, y) in batch {
            self.check_label(*y)?;
            total -= self.forward(f)?.probs[*y].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / batch.len().max(1) as f64)
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.params.classes() {
            return Err(Error::InvalidLabel {
                label: y,
                classes: self.params.classes(),
            });
        }
        Ok(())
    }

    /// Analytic gradient of [`loss`](Self::loss) and the loss itself.
    pub fn gradients(&self, batch: &[(FeatureMap, usize)]) -> Result<(AttentionGradients, f64)> {
        if batch.is_empty() {
            return Err(Error::Empty("attention batch"));
        }
        let p = &self.params;
        let mut grad = p.zeros_like();
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for (f, y) in batch {
            self.check_label(*y)?;
            let tr = self.forward(f)?;
            loss -= tr.probs[*y].max(f64::MIN_POSITIVE).ln();
            let (ch, area) = (f.channels, f.area());

            let mut dz = tr.probs.clone();
            dz[*y] -= 1.0;
            dz.iter_mut().for_each(|v| *v /= n);
            let mut dsum = vec![0.0; ch];
            for k in 0..p.classes() {
                grad.head_b[k] += dz[k];
                for c in 0..ch {
                    grad.head_w[[k, c]] += dz[k] * tr.summary[c];
                    dsum[c] += p.head_w[[k, c]] * dz[k];
                }
            }
            // d loss / d final_map is constant per channel after pooling.
            let dfinal: Vec<f64> = dsum.iter().map(|v| v / area as f64).collect();

            let mut dattended = vec![0.0; ch * area];
            match (&tr.pooled, &tr.t) {
                (Some(pooled), Some(t)) => {
                    let mut dt = vec![0.0; area];
                    for c in 0..ch {
                        for i in 0..area {
                            dt[i] += dfinal[c] * tr.attended.data[c * area + i];
                            dattended[c * area + i] += dfinal[c] * t[i];
                        }
                    }
                    let d_o: Vec<f64> = dt.iter().zip(t).map(|(d, s)| d * s * (1.0 - s)).collect();
                    grad.conv_b[0] += d_o.iter().sum::<f64>();
                    let (h, w) = (f.height, f.width);
                    let planes = [&pooled.avg, &pooled.max];
                    let mut dplanes = [vec![0.0; area], vec![0.0; area]];
                    for yy in 0..h {
                        for xx in 0..w {
                            let d = d_o[yy * w + xx];
                            if d == 0.0 {
                                continue;
                            }
                            for (k, plane) in planes.iter().enumerate() {
                                for i in 0..SPATIAL_KERNEL {
                                    let sy = yy as isize + i as isize - PAD;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for j in 0..SPATIAL_KERNEL {
                                        let sx = xx as isize + j as isize - PAD;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let idx = sy as usize * w + sx as usize;
                                        grad.conv_w[[k, i, j]] += d * plane[idx];
                                        dplanes[k][idx] += d * p.conv_w[[k, i, j]];
                                    }
                                }
                            }
                        }
                    }
                    for i in 0..area {
                        for c in 0..ch {
                            dattended[c * area + i] += dplanes[0][i] / ch as f64;
                        }
                        dattended[pooled.argmax[i] * area + i] += dplanes[1][i];
                    }
                }
                _ => {
                    for c in 0..ch {
                        dattended[c * area..(c + 1) * area]
                            .iter_mut()
                            .for_each(|v| *v = dfinal[c]);
                    }
                }
            }

            if !self.bypass_channel {
                let ds: Vec<f64> = (0..ch)
                    .map(|c| {
                        (0..area)
                            .map(|i| dattended[c * area + i] * f.data[c * area + i])
                            .sum::<f64>()
                    })
                    .collect();
                let da2: Vec<f64> = ds
                    .iter()
                    .zip(&tr.s)
                    .map(|(d, s)| d * s * (1.0 - s))
                    .collect();
                let mut dr = vec![0.0; p.mid()];
                for c in 0..ch {
                    grad.fc2_b[c] += da2[c];
                    for m in 0..p.mid() {
                        grad.fc2_w[[c, m]] += da2[c] * tr.r[m];
                        dr[m] += p.fc2_w[[c, m]] * da2[c];
                    }
                }
                for m in 0..p.mid() {
                    let da1 = if tr.a1[m] > 0.0 { dr[m] } else { 0.0 };
                    grad.fc1_b[m] += da1;
                    for c in 0..ch {
                        grad.fc1_w[[m, c]] += da1 * tr.g[c];
                    }
                }
            }
        }
        Ok((grad, loss / n))
    }

    /// Mini-batch Adam; returns the mean loss of every epoch and marks the
    /// classifier trained.
    pub fn train(
        &mut self,
        data: &[(FeatureMap, usize)],
        epochs: usize,
        batch_size: usize,
        adam: &AdamHyper,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Empty("attention training set"));
        }
        if epochs == 0 || batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        let mut flat = self.params.to_flat();
        let mut state = AdamState::new(flat.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<(FeatureMap, usize)> =
                    chunk.iter().map(|&i| data[i].clone()).collect();
                let (g, l) = self.gradients(&batch)?;
                epoch_loss += l * chunk.len() as f64;
                adam_step(&mut flat, &g.to_flat(), &mut state, adam)?;
                self.params.copy_from_flat(&flat)?;
            }
            history.push(epoch_loss / data.len() as f64);
        }
        self.trained = true;
        Ok(history)
    }

    pub fn final_map(&self, f: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward(f)?.final_map)
    }
}

/// Per-class scene templates plus noise, standing in for camera frames.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    templates: Vec<FeatureMap>,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl SceneGenerator {
    pub const NOISE_STD: f64 = 0.8;

    pub fn new(config: &AttentionConfig, seed: u64) -> Result<Self> {
        if config.channels < 3 || config.classes > 1 << config.channels {
            return Err(Error::invalid(
                "scene templates need at least 3 channels and 2^channels >= classes",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, h, w) = (config.channels, config.height, config.width);
        // Distinct corners of the channel-mean hypercube, skipping all-low.
        let mut codes: Vec<usize> = (1..1usize << ch).collect();
        codes.shuffle(&mut rng);
        let templates = (0..config.classes)
            .map(|k| {
                let code = codes[k % codes.len()];
                let cy = rng.random_range(0..h) as f64;
                let cx = rng.random_range(0..w) as f64;
                let mut data = Vec::with_capacity(ch * h * w);
                for c in 0..ch {
                    let level = if code >> c & 1 == 1 { 0.8 } else { 0.2 };
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            let blob = if c == k % ch {
                                0.6 * (-d2 / 4.0).exp()
                            } else {
                                0.0
                            };
                            data.push(level + blob);
                        }
                    }
                }
                FeatureMap::new(ch, h, w, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            templates,
            noise: Normal::new(0.0, Self::NOISE_STD).expect("valid std"),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5CE9E),
        })
    }

    pub fn template(&self, class: usize) -> &FeatureMap {
        &self.templates[class]
    }

    pub fn sample(&mut self, class: usize) -> Result<FeatureMap> {
        let t = self.templates.get(class).ok_or(Error::InvalidLabel {
            label: class,
            classes: self.templates.len(),
        })?;
        let data = t
            .data
            .iter()
            .map(|v| v + self.noise.sample(&mut self.rng))
            .collect();
        Ok(FeatureMap { data, ..*t })
    }

    pub fn dataset(&mut self, per_class: usize) -> Result<Vec<(FeatureMap, usize)>> {
        let classes = self.templates.len();
        (0..per_class * classes)
            .map(|i| Ok((self.sample(i % classes)?, i % classes)))
            .collect()
    }
}

/// Attention classifier looking at generated scenes.
#[derive(Debug, Clone)]
pub struct AttentionTeacher {
    classifier: AttentionClassifier,
    scenes: SceneGenerator,
    rate_hz: f64,
    calls: u64,
}

impl AttentionTeacher {
    pub fn new(
        classifier: AttentionClassifier,
        scenes: SceneGenerator,
        rate_hz: f64,
    ) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::invalid(format!(
                "teacher rate {rate_hz} must be > 0"
            )));
        }
        Ok(Self {
            classifier,
            scenes,
            rate_hz,
            calls: 0,
        })
    }

    /// Trains a classifier on `per_class` scenes per class and wraps it.
    pub fn train(
        config: &AttentionConfig,
        per_class: usize,
        epochs: usize,
        rate_hz: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut scenes = SceneGenerator::new(config, seed)?;
        let data = scenes.dataset(per_class)?;
        let mut classifier = AttentionClassifier::new(config, seed.wrapping_add(1))?;
        classifier.train(
            &data,
            epochs,
            16,
            &AdamHyper::with_learning_rate(2e-2),
            seed.wrapping_add(2),
        )?;
        Self::new(classifier, scenes, rate_hz)
    }

    pub fn classifier(&self) -> &AttentionClassifier {
        &self.classifier
    }

    pub fn scenes_mut(&mut self) -> &mut SceneGenerator {
        &mut self.scenes
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl LabelSource for AttentionTeacher {
    fn label(&mut self, truth: ActivityClass, timestamp_ns: u64) -> Result<TeacherLabel> {
        self.calls += 1;
        let scene = self.scenes.sample(truth.index())?;
        let (class, confidence) = self.classifier.classify(&scene)?;
        Ok(TeacherLabel {
            class: ActivityClass::from_index(class)?,
            confidence,
            timestamp_ns,
        })
    }

    fn rate_hz(&self) -> f64 {
        self.rate_hz
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(ch: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            ch,
            h,
            w,
            (0..ch * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn small_params(seed: u64) -> AttentionBlockParams {
        let mut p = AttentionBlockParams::init(3, 2, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        p
    }

    #[test]
    fn zero_weights_give_half() {
        let p = AttentionBlockParams::zeros(4, 2, 8);
        let f = random_map(4, 5, 6, 1);
        assert!(channel_attention(&f, &p).unwrap().iter().all(|&v| v == 0.5));
        assert!(spatial_attention(&f, &p).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_attention_matches_hand_transcription() {
        let mut p = AttentionBlockParams::zeros(2, 1, 2);
        p.fc1_w = Array2::from_shape_vec((1, 2), vec![0.5, -1.5]).unwrap();
        p.fc1_b[0] = 0.25;
        p.fc2_w = Array2::from_shape_vec((2, 1), vec![2.0, -0.75]).unwrap();
        p.fc2_b = Array1::from(vec![0.1, 0.3]);
        let f = FeatureMap::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 0.5]).unwrap();
        // GAP = (2.5, 0.0); FC1 = 0.5*2.5 + 0.25 = 1.5; relu = 1.5
        let s0 = 1.0 / (1.0 + (-(2.0 * 1.5 + 0.1f64)).exp());
        let s1 = 1.0 / (1.0 + (-(-0.75 * 1.5 + 0.3f64)).exp());
        let got = channel_attention(&f, &p).unwrap();
        assert!((got[0] - s0).abs() < 1e-12 && (got[1] - s1).abs() < 1e-12);
    }

    #[test]
    fn spatial_attention_matches_direct_convolution() {
        let mut p = small_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.conv_w
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let f = random_map(1, 8, 8, 5);
        let got = spatial_attention(&f, &p).unwrap();
        for y in 0..8i64 {
            for x in 0..8i64 {
                let mut acc = p.conv_b[0];
                for k in 0..2 {
                    for i in 0..7i64 {
                        for j in 0..7i64 {
                            let (yy, xx) = (y + i - 3, x + j - 3);
                            if (0..8).contains(&yy) && (0..8).contains(&xx) {
                                // one channel: average and max pools are the input itself
                                acc += p.conv_w[[k, i as usize, j as usize]]
                                    * f.get(0, yy as usize, xx as usize);
                            }
                        }
                    }
                }
                let want = 1.0 / (1.0 + (-acc).exp());
                assert!((got[(y * 8 + x) as usize] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_input_pools_identically() {
        let f = FeatureMap::new(3, 4, 4, vec![0.7; 48]).unwrap();
        let pooled = pool_channels(&f);
        assert!(pooled
            .avg
            .iter()
            .zip(&pooled.max)
            .all(|(a, m)| (a - m).abs() < 1e-15));
    }

    #[test]
    fn apply_attention_is_elementwise() {
        let f = random_map(3, 4, 5, 6);
        let s = [0.2, 0.9, 0.5];
        let out = apply_attention(&f, &s).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert!((out.get(c, y, x) - s[c] * f.get(c, y, x)).abs() <= 1e-15);
                }
            }
        }
        let k = apply_attention(&f, &[0.3; 3]).unwrap();
        assert!(k
            .as_slice()
            .iter()
            .zip(f.as_slice())
            .all(|(a, b)| *a == 0.3 * b));
        let z = apply_attention(&FeatureMap::zeros(3, 2, 2), &s).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(apply_attention(&f, &[1.0; 2]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = AttentionBlockParams::zeros(4, 2, 8);
        assert!(channel_attention(&random_map(3, 2, 2, 1), &p).is_err());
        assert!(FeatureMap::new(0, 2, 2, vec![]).is_err());
        assert!(AttentionBlockParams::zeros(4, 4, 8).validate().is_err());
    }

    fn finite_difference_check(use_spatial: bool, bypass: bool, seed: u64) -> f64 {
        let clf = AttentionClassifier {
            params: small_params(seed),
            use_spatial,
            bypass_channel: bypass,
            trained: false,
        };
        let batch: Vec<(FeatureMap, usize)> = (0..3)
            .map(|i| (random_map(3, 5, 4, seed * 10 + i), i as usize))
            .collect();
        let (g, _) = clf.gradients(&batch).unwrap();
        let analytic = g.to_flat();
        let base = clf.params.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut c = clf.clone();
            let mut v = base.clone();
            v[i] += h;
            c.params.copy_from_flat(&v).unwrap();
            let lp = c.loss(&batch).unwrap();
            v[i] -= 2.0 * h;
            c.params.copy_from_flat(&v).unwrap();
            let lm = c.loss(&batch).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let denom = (num.abs() + analytic[i].abs()).max(1e-6);
            worst = worst.max((num - analytic[i]).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (spatial, bypass) in [(true, false), (false, false), (true, true)] {
            for seed in 1..4 {
                let err = finite_difference_check(spatial, bypass, seed);
                assert!(
                    err < 1e-4,
                    "spatial {spatial} bypass {bypass} seed {seed}: {err}"
                );
            }
        }
    }

    #[test]
    fn untrained_classifier_refuses() {
        let clf = AttentionClassifier::new(&AttentionConfig::default(), 1).unwrap();
        assert!(matches!(
            clf.classify(&random_map(4, 8, 8, 1)),
            Err(Error::Untrained)
        ));
    }

    #[test]
    fn bypass_changes_logits() {
        let cfg = AttentionConfig::default();
        let on = AttentionClassifier::new(&cfg, 9).unwrap();
        let mut off = on.clone();
        off.bypass_channel = true;
        let f = random_map(4, 8, 8, 2);
        let a = on.logits(&f).unwrap();
        let b = off.logits(&f).unwrap();
        let l2: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(l2 > 0.0);
    }

    #[test]
    fn trained_teacher_beats_sixty_percent() {
        let cfg = AttentionConfig::default();
        let mut teacher = AttentionTeacher::train(&cfg, 40, 30, 30.0, 11).unwrap();
        let mut hits = 0;
        let n = 800;
        for i in 0..n {
            let truth = ActivityClass::ALL[i % 8];
            let l = teacher.label(truth, i as u64).unwrap();
            assert!(l.class.index() < 8);
            assert!(l.confidence > 0.0 && l.confidence <= 1.0);
            hits += usize::from(l.class == truth);
        }
        assert!(
            hits as f64 / n as f64 > 0.6,
            "accuracy {}",
            hits as f64 / n as f64
        );
    }
}
