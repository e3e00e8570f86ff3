use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fusion::{self, GruWeights};
use super::{DnmError, Fusion, Mode, ModelConfig};
use crate::scalar::Real;
use crate::tensor::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Graph, Gradients, ParamId, ParamStore, Tensor, TensorError, Var,
};

#[derive(Clone, Debug)]
struct GruIds {
    z_w: ParamId,
    z_b: ParamId,
    r_w: ParamId,
    r_b: ParamId,
    n_x_w: ParamId,
    n_h_w: ParamId,
    n_b: ParamId,
}

impl GruIds {
    fn bind(&self, p: &[Var]) -> GruWeights {
        GruWeights {
            z_w: p[self.z_w.index()],
            z_b: p[self.z_b.index()],
            r_w: p[self.r_w.index()],
            r_b: p[self.r_b.index()],
            n_x_w: p[self.n_x_w.index()],
            n_h_w: p[self.n_h_w.index()],
            n_b: p[self.n_b.index()],
        }
    }
}

#[derive(Clone, Debug)]
struct ParamIds {
    v1_w: ParamId,
    v1_b: ParamId,
    v2_w: ParamId,
    v2_b: ParamId,
    vc_w: ParamId,
    vc_b: ParamId,
    a1_w: ParamId,
    a1_b: ParamId,
    a2_w: ParamId,
    a2_b: ParamId,
    recurrent: Option<(GruIds, GruIds)>,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Names of the classification-head parameters, which only the
/// classification loss reaches.
pub const CLASSIFIER_PARAMS: [&str; 4] = ["visual.cls.weight", "visual.cls.bias", "head.fc.weight", "head.fc.bias"];

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[D, T, I]`
    pub v: Var,
    /// `[D, T]`
    pub a: Var,
    /// `[D', I]`
    pub v_cls: Var,
    pub m_static: Var,
    pub m_dynamic: Option<Var>,
    /// The similarity map both heads read.
    pub s: Var,
    pub m_loc: Var,
    pub z_avc: Var,
    pub w_att: Var,
    pub v_att: Var,
    pub logits: Var,
}

/// Forward results as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub m_loc: Vec<T>,
    pub z_avc: T,
    pub w_att: Vec<T>,
    pub class_logits: Vec<T>,
    pub v_att: Vec<T>,
    pub avsm: Vec<T>,
    pub m_static: Vec<T>,
    pub m_dynamic: Option<Vec<T>>,
    /// Equal to `avsm` in CDF mode.
    pub m_cdf: Option<Vec<T>>,
}

impl<T: Real> ModelOutput<T> {
    fn collect(g: &Graph<T>, f: &ForwardVars) -> Self {
        let vals = |v: Var| g.value(v).data().to_vec();
        Self {
            m_loc: vals(f.m_loc),
            z_avc: g.value(f.z_avc).data()[0],
            w_att: vals(f.w_att),
            class_logits: vals(f.logits),
            v_att: vals(f.v_att),
            avsm: vals(f.s),
            m_static: vals(f.m_static),
            m_dynamic: f.m_dynamic.map(vals),
            m_cdf: f.m_dynamic.map(|_| vals(f.s)),
        }
    }

    /// The map the given training mode localizes with.
    pub fn localization(&self, mode: Mode) -> &[T] {
        match mode {
            Mode::Cls => &self.w_att,
            Mode::Avc | Mode::Dnm => &self.m_loc,
        }
    }
}

/// DNM network: parameters plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    ids: ParamIds,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Real> Model<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DnmError> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut weight = |store: &mut ParamStore<T>, name: &str, shape: &[usize]| {
            let fan_in: usize = shape[1..].iter().product();
            store.add(name, uniform(&mut rng, shape, fan_in))
        };
        let zeros = |store: &mut ParamStore<T>, name: &str, n: usize| store.add(name, Tensor::zeros(&[n]));
        let (kv, ka, kg) = (c.visual_kernel, c.audio_kernel, c.gru_kernel);
        let d = c.feature_dim;

        let v1_w = weight(&mut store, "visual.conv1.weight", &[c.visual_hidden, c.channels, kv, kv, kv]);
        let v1_b = zeros(&mut store, "visual.conv1.bias", c.visual_hidden);
        let v2_w = weight(&mut store, "visual.conv2.weight", &[d, c.visual_hidden, kv, kv, kv]);
        let v2_b = zeros(&mut store, "visual.conv2.bias", d);
        let vc_w = weight(&mut store, "visual.cls.weight", &[c.cls_dim, c.visual_hidden, kv, kv, kv]);
        let vc_b = zeros(&mut store, "visual.cls.bias", c.cls_dim);
        let a1_w = weight(&mut store, "audio.conv1.weight", &[c.audio_hidden, 1, ka, ka]);
        let a1_b = zeros(&mut store, "audio.conv1.bias", c.audio_hidden);
        let a2_w = weight(&mut store, "audio.conv2.weight", &[d, c.audio_hidden, ka, ka]);
        let a2_b = zeros(&mut store, "audio.conv2.bias", d);
        let recurrent = match c.fusion {
            Fusion::Static => None,
            Fusion::Cdf => {
                let mut cell = |store: &mut ParamStore<T>, prefix: &str, gates: &[usize], cand: &[usize]| GruIds {
                    z_w: weight(store, &format!("{prefix}.z.weight"), gates),
                    z_b: zeros(store, &format!("{prefix}.z.bias"), d),
                    r_w: weight(store, &format!("{prefix}.r.weight"), gates),
                    r_b: zeros(store, &format!("{prefix}.r.bias"), d),
                    n_x_w: weight(store, &format!("{prefix}.n_x.weight"), cand),
                    n_h_w: weight(store, &format!("{prefix}.n_h.weight"), cand),
                    n_b: zeros(store, &format!("{prefix}.n.bias"), d),
                };
                let conv = cell(&mut store, "convgru", &[d, 2 * d, kg, kg], &[d, d, kg, kg]);
                let plain = cell(&mut store, "gru", &[d, 2 * d], &[d, d]);
                Some((conv, plain))
            }
        };
        let fc_w = weight(&mut store, "head.fc.weight", &[c.num_classes, c.cls_dim]);
        let fc_b = zeros(&mut store, "head.fc.bias", c.num_classes);
        let ids = ParamIds {
            v1_w,
            v1_b,
            v2_w,
            v2_b,
            vc_w,
            vc_b,
            a1_w,
            a1_b,
            a2_w,
            a2_b,
            recurrent,
            fc_w,
            fc_b,
        };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Reorders a `[frames, H, W, C]` clip into the `[C, frames, H, W]` encoder input.
    pub fn prepare_video(&self, video: &Tensor<T>) -> Result<Tensor<T>, DnmError> {
        let c = &self.config;
        let expected = [c.frames, c.image_h, c.image_w, c.channels];
        if video.shape() != expected {
            return Err(DnmError::Shape {
                what: "video",
                expected: expected.to_vec(),
                got: video.shape().to_vec(),
            });
        }
        let (f, h, w, ch) = (c.frames, c.image_h, c.image_w, c.channels);
        let src = video.data();
        let mut out = vec![T::zero(); src.len()];
        for t in 0..f {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..ch {
                        out[((k * f + t) * h + y) * w + x] = src[((t * h + y) * w + x) * ch + k];
                    }
                }
            }
        }
        Ok(Tensor::new(vec![ch, f, h, w], out)?)
    }

    fn check_logmel(&self, logmel: &Tensor<T>) -> Result<(), DnmError> {
        let expected = [self.config.mel_bins, self.config.audio_steps];
        if logmel.shape() != expected {
            return Err(DnmError::Shape {
                what: "log-mel grid",
                expected: expected.to_vec(),
                got: logmel.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn pool(g: &mut Graph<T>, mut x: Var, factors: &[(usize, usize)]) -> crate::tensor::Result<Var> {
        for &(axis, f) in factors {
            if f > 1 {
                x = g.avg_pool(x, axis, f)?;
            }
        }
        Ok(x)
    }

    /// Visual encoder on a `[C, frames, H, W]` input: `(v [D, T, I], v_cls [D', I])`.
    pub fn encode_visual_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> crate::tensor::Result<(Var, Var)> {
        let c = &self.config;
        let ids = &self.ids;
        let (fh1, fh2) = ModelConfig::spatial_factors(c.image_h, c.grid_h);
        let (fw1, fw2) = ModelConfig::spatial_factors(c.image_w, c.grid_w);
        let ft = c.frames / c.time_steps;

        let h = g.conv3d(x, p[ids.v1_w.index()])?;
        let h = g.add_bias(h, p[ids.v1_b.index()], 0)?;
        let h = g.tanh(h)?;
        let h = Self::pool(g, h, &[(1, ft), (2, fh1), (3, fw1)])?;

        let v = g.conv3d(h, p[ids.v2_w.index()])?;
        let v = g.add_bias(v, p[ids.v2_b.index()], 0)?;
        let v = g.tanh(v)?;
        let v = Self::pool(g, v, &[(2, fh2), (3, fw2)])?;
        let v = g.reshape(v, &[c.feature_dim, c.time_steps, c.cells()])?;

        let vc = g.conv3d(h, p[ids.vc_w.index()])?;
        let vc = g.add_bias(vc, p[ids.vc_b.index()], 0)?;
        let vc = g.tanh(vc)?;
        let vc = Self::pool(g, vc, &[(2, fh2), (3, fw2)])?;
        let vc = g.mean(vc, 1)?;
        let vc = g.reshape(vc, &[c.cls_dim, c.cells()])?;
        Ok((v, vc))
    }

    /// Audio encoder on a `[mel, steps]` grid: `a [D, T]`.
    pub fn encode_audio_graph(&self, g: &mut Graph<T>, p: &[Var], logmel: Var) -> crate::tensor::Result<Var> {
        let c = &self.config;
        let ids = &self.ids;
        let x = g.reshape(logmel, &[1, c.mel_bins, c.audio_steps])?;
        let h = g.conv2d(x, p[ids.a1_w.index()])?;
        let h = g.add_bias(h, p[ids.a1_b.index()], 0)?;
        let h = g.tanh(h)?;
        let h = g.conv2d(h, p[ids.a2_w.index()])?;
        let h = g.add_bias(h, p[ids.a2_b.index()], 0)?;
        let h = g.tanh(h)?;
        let a = g.mean(h, 1)?;
        Self::pool(g, a, &[(1, c.audio_steps / c.time_steps)])
    }

    /// Full forward pass. `p` holds one var per parameter, indexed by
    /// [`ParamId::index`]; `video` is the prepared `[C, frames, H, W]` input.
    /// `dynamic_override` replaces the dynamic map (CDF mode only).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        video: Var,
        logmel: Var,
        dynamic_override: Option<Var>,
    ) -> crate::tensor::Result<ForwardVars> {
        let ids = &self.ids;
        let (v, v_cls) = self.encode_visual_graph(g, p, video)?;
        let a = self.encode_audio_graph(g, p, logmel)?;
        let m_static = fusion::static_fusion(g, v, a)?;
        let (s, m_dynamic) = match &ids.recurrent {
            None => (m_static, None),
            Some((conv, plain)) => {
                let m_dyn = match dynamic_override {
                    Some(d) => d,
                    None => fusion::dynamic_fusion(
                        g,
                        &conv.bind(p),
                        &plain.bind(p),
                        v,
                        a,
                        (self.config.grid_w, self.config.grid_h),
                    )?,
                };
                (fusion::cdf(g, m_static, m_dyn)?, Some(m_dyn))
            }
        };
        let (m_loc, z_avc) = fusion::local_normalize(g, s)?;
        let (w_att, v_att, logits) = fusion::global_attend(g, s, v_cls, p[ids.fc_w.index()], p[ids.fc_b.index()])?;
        Ok(ForwardVars {
            v,
            a,
            v_cls,
            m_static,
            m_dynamic,
            s,
            m_loc,
            z_avc,
            w_att,
            v_att,
            logits,
        })
    }

    fn start(&self, g: &mut Graph<T>, video: &Tensor<T>, logmel: &Tensor<T>) -> Result<(Vec<Var>, Var, Var), DnmError> {
        self.check_logmel(logmel)?;
        let x = self.prepare_video(video)?;
        let p = g.bind_params(&self.store);
        let x = g.constant(x);
        let m = g.constant(logmel.clone());
        Ok((p, x, m))
    }

    /// Forward pass on a `[frames, H, W, C]` clip and a `[mel, steps]` grid.
    pub fn forward(&self, video: &Tensor<T>, logmel: &Tensor<T>) -> Result<ModelOutput<T>, DnmError> {
        let mut g = Graph::new();
        let (p, x, m) = self.start(&mut g, video, logmel)?;
        let f = self.forward_graph(&mut g, &p, x, m, None)?;
        Ok(ModelOutput::collect(&g, &f))
    }

    /// Forward pass with the dynamic map replaced by `dynamic` (CDF mode).
    #[doc(hidden)]
    pub fn forward_with_dynamic(
        &self,
        video: &Tensor<T>,
        logmel: &Tensor<T>,
        dynamic: &[T],
    ) -> Result<ModelOutput<T>, DnmError> {
        let mut g = Graph::new();
        let (p, x, m) = self.start(&mut g, video, logmel)?;
        let d = g.constant(Tensor::from_vec(dynamic.to_vec()));
        let f = self.forward_graph(&mut g, &p, x, m, Some(d))?;
        Ok(ModelOutput::collect(&g, &f))
    }

    /// Visual features as values: `v` reordered to `[I, T, D]` and `v_cls` to `[I, D']`.
    pub fn encode_visual(&self, video: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), DnmError> {
        let mut g = Graph::new();
        let x = self.prepare_video(video)?;
        let p = g.bind_params(&self.store);
        let x = g.constant(x);
        let (v, vc) = self.encode_visual_graph(&mut g, &p, x)?;
        Ok((reverse_axes(g.value(v)), reverse_axes(g.value(vc))))
    }

    /// Audio features as values, reordered to `[T, D]`.
    pub fn encode_audio(&self, logmel: &Tensor<T>) -> Result<Tensor<T>, DnmError> {
        self.check_logmel(logmel)?;
        let mut g = Graph::new();
        let p = g.bind_params(&self.store);
        let m = g.constant(logmel.clone());
        let a = self.encode_audio_graph(&mut g, &p, m)?;
        Ok(reverse_axes(g.value(a)))
    }

    /// Loss value, parameter gradients and forward output for one pair.
    pub fn loss_and_grads(
        &self,
        video: &Tensor<T>,
        logmel: &Tensor<T>,
        avc_label: bool,
        class_label: Option<&[T]>,
        mode: Mode,
    ) -> Result<(T, Gradients<T>, ModelOutput<T>), DnmError> {
        let mut g = Graph::new();
        let (p, x, m) = self.start(&mut g, video, logmel)?;
        let f = self.forward_graph(&mut g, &p, x, m, None)?;
        let loss = super::multitask_loss(&mut g, f.z_avc, f.logits, avc_label, class_label, mode)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        Ok((value, grads, ModelOutput::collect(&g, &f)))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<(), DnmError> {
        Ok(write_checkpoint(&self.store, out)?)
    }

    /// Builds the model for `config` and loads checkpoint values into it; names
    /// and shapes must match exactly.
    pub fn load<R: Read>(config: ModelConfig, input: R) -> Result<Self, DnmError> {
        let mut model = Self::new(config, 0)?;
        let entries = read_checkpoint::<T, R>(input)?;
        model.store.load_values(entries)?;
        Ok(model)
    }
}

/// Reverses the axis order: `[D, T, I] -> [I, T, D]`, `[D, T] -> [T, D]`.
fn reverse_axes<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let new_shape: Vec<usize> = shape.iter().rev().copied().collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.numel() {
        // idx walks the output shape in row-major order.
        let src: usize = (0..rank).map(|k| idx[k] * strides[rank - 1 - k]).sum();
        out.push(t.data()[src]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < new_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(new_shape, out).expect("same element count")
}

impl Model<f64> {
    /// Central finite-difference check of the whole forward pass and loss,
    /// with every parameter, the video and the log-mel grid as inputs.
    /// Inputs are listed parameters first, in store order, then video and audio.
    pub fn grad_check_loss(
        &self,
        video: &Tensor<f64>,
        logmel: &Tensor<f64>,
        avc_label: bool,
        class_label: Option<&[f64]>,
        options: &GradCheckOptions,
    ) -> Result<GradCheckReport, DnmError> {
        self.check_logmel(logmel)?;
        let mode = self.config.mode;
        if avc_label && mode.uses_cls() && class_label.is_none() {
            return Err(DnmError::MissingClassLabel);
        }
        let mut inputs: Vec<Tensor<f64>> = self.store.iter().map(|p| p.value().clone()).collect();
        let n = inputs.len();
        inputs.push(self.prepare_video(video)?);
        inputs.push(logmel.clone());
        let report = grad_check_with(&inputs, options, |g, vars| {
            let f = self.forward_graph(g, &vars[..n], vars[n], vars[n + 1], None)?;
            super::multitask_loss(g, f.z_avc, f.logits, avc_label, class_label, mode).map_err(|e| match e {
                DnmError::Tensor(t) => t,
                other => TensorError::InvalidArgument {
                    op: "multitask_loss",
                    msg: other.to_string(),
                },
            })
        })?;
        Ok(report)
    }
}
