//! Scaled-down residual temporal-convolution classifier.
//!
//! Input spectrograms are treated as 1-D sequences: mel bins are the input
//! channels and convolutions run over frames. A stem conv feeds a stack of
//! residual blocks, each entered at stride 2 with a 1x1 strided projection
//! on the skip path; logits come from a dense head on the globally
//! frame-averaged features. With batchnorm off, every conv carries a bias
//! instead and the forward pass is per-example independent.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{derive_rng, TAG_MODEL_INIT};
use crate::tape::{conv1d_raw, dense_raw, NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic folded into the running average per step.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_mels: usize,
    pub n_frames: usize,
    pub n_classes: usize,
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    pub use_batchnorm: bool,
}

impl ModelSpec {
    /// Default-scale classifier for the given input geometry.
    pub fn lite(n_mels: usize, n_frames: usize, n_classes: usize) -> ModelSpec {
        ModelSpec {
            n_mels,
            n_frames,
            n_classes,
            block_channels: vec![16, 24, 32],
            kernel_size: 9,
            use_batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.n_frames == 0 {
            return Err(Error::config(format!(
                "input geometry must be positive, got {}x{}",
                self.n_mels, self.n_frames
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.block_channels.is_empty() {
            return Err(Error::config("block_channels must be non-empty"));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("block channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Parameters ordered exactly as registered here; the order is part of the
/// serialized format and of federated aggregation.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = derive_rng(seed, &[TAG_MODEL_INIT]);
    let mut params = ParamSet::new();
    let k = spec.kernel_size;

    let conv = |params: &mut ParamSet,
                    name: &str,
                    c_out: usize,
                    c_in: usize,
                    kernel: usize,
                    rng: &mut rand_chacha::ChaCha8Rng|
     -> Result<()> {
        let fan_in = (c_in * kernel) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid stddev");
        let data: Vec<f64> = (0..c_out * c_in * kernel).map(|_| dist.sample(rng)).collect();
        params.register(name, Tensor::from_vec(&[c_out, c_in, kernel], data)?, true)?;
        if !spec.use_batchnorm {
            params.register(&format!("{name}.bias"), Tensor::zeros(&[c_out]), true)?;
        }
        Ok(())
    };
    let bn = |params: &mut ParamSet, prefix: &str, ch: usize| -> Result<()> {
        let mut ones = Tensor::zeros(&[ch]);
        ones.fill(1.0);
        params.register(&format!("{prefix}.gamma"), ones.clone(), true)?;
        params.register(&format!("{prefix}.beta"), Tensor::zeros(&[ch]), true)?;
        params.register(&format!("{prefix}.mean"), Tensor::zeros(&[ch]), false)?;
        params.register(&format!("{prefix}.var"), ones, false)?;
        Ok(())
    };

    let c0 = spec.block_channels[0];
    conv(&mut params, "stem.conv", c0, spec.n_mels, k, &mut rng)?;
    if spec.use_batchnorm {
        bn(&mut params, "stem.bn", c0)?;
    }
    let mut c_in = c0;
    for (i, &c_out) in spec.block_channels.iter().enumerate() {
        conv(&mut params, &format!("block{i}.conv1"), c_out, c_in, k, &mut rng)?;
        if spec.use_batchnorm {
            bn(&mut params, &format!("block{i}.bn1"), c_out)?;
        }
        conv(&mut params, &format!("block{i}.conv2"), c_out, c_out, k, &mut rng)?;
        if spec.use_batchnorm {
            bn(&mut params, &format!("block{i}.bn2"), c_out)?;
        }
        conv(&mut params, &format!("block{i}.skip"), c_out, c_in, 1, &mut rng)?;
        if spec.use_batchnorm {
            bn(&mut params, &format!("block{i}.skip_bn"), c_out)?;
        }
        c_in = c_out;
    }

    let dist = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("valid stddev");
    let data: Vec<f64> = (0..spec.n_classes * c_in).map(|_| dist.sample(&mut rng)).collect();
    params.register("head.w", Tensor::from_vec(&[spec.n_classes, c_in], data)?, true)?;
    params.register("head.b", Tensor::zeros(&[spec.n_classes]), true)?;
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    pub params: ParamSet,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Model> {
        Ok(Model {
            spec: spec.clone(),
            params: build_model(spec, seed)?,
        })
    }

    /// Wraps externally produced parameters (aggregation, deserialization).
    /// The set must have come from the same spec; a reference build is used
    /// to check structure.
    pub fn with_params(spec: &ModelSpec, params: ParamSet) -> Result<Model> {
        let reference = build_model(spec, 0)?;
        reference.max_abs_diff(&params).map_err(|_| {
            Error::shape("parameter set does not match the model spec")
        })?;
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let s = features.shape();
        if s.len() != 3 || s[1] != self.spec.n_mels || s[2] != self.spec.n_frames {
            return Err(Error::shape(format!(
                "features {:?} do not match model input (B, {}, {})",
                s, self.spec.n_mels, self.spec.n_frames
            )));
        }
        Ok(())
    }

    fn push_param(&self, tape: &mut Tape, name: &str) -> NodeId {
        let idx = self.params.index_of(name).expect("model parameter exists");
        tape.param(idx, self.params.value(idx).clone())
    }

    fn conv_train(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        name: &str,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        let w = self.push_param(tape, name);
        let b = if self.spec.use_batchnorm {
            None
        } else {
            Some(self.push_param(tape, &format!("{name}.bias")))
        };
        tape.conv1d(x, w, b, stride, padding)
    }

    /// Batchnorm in training mode; folds the batch statistics into the
    /// running averages as a side effect.
    fn bn_train(&mut self, tape: &mut Tape, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.push_param(tape, &format!("{prefix}.gamma"));
        let beta = self.push_param(tape, &format!("{prefix}.beta"));
        let (y, mean, var) = tape.batchnorm(x, gamma, beta, BN_EPS);
        let rm = self.params.get_mut(&format!("{prefix}.mean")).expect("bn stats");
        for (r, m) in rm.value.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = self.params.get_mut(&format!("{prefix}.var")).expect("bn stats");
        for (r, v) in rv.value.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        y
    }

    /// Records the forward pass on `tape` and returns the logits node.
    /// May be called more than once on one tape (the gradients of shared
    /// parameters accumulate).
    pub fn forward_train(&mut self, tape: &mut Tape, features: &Tensor) -> Result<NodeId> {
        self.check_features(features)?;
        let pad = (self.spec.kernel_size - 1) / 2;
        let x = tape.input(features.clone());

        let mut h = self.conv_train(tape, x, "stem.conv", 1, pad);
        if self.spec.use_batchnorm {
            h = self.bn_train(tape, h, "stem.bn");
        }
        h = tape.relu(h);

        for i in 0..self.spec.block_channels.len() {
            let mut main = self.conv_train(tape, h, &format!("block{i}.conv1"), 2, pad);
            if self.spec.use_batchnorm {
                main = self.bn_train(tape, main, &format!("block{i}.bn1"));
            }
            main = tape.relu(main);
            main = self.conv_train(tape, main, &format!("block{i}.conv2"), 1, pad);
            if self.spec.use_batchnorm {
                main = self.bn_train(tape, main, &format!("block{i}.bn2"));
            }
            let mut skip = self.conv_train(tape, h, &format!("block{i}.skip"), 2, 0);
            if self.spec.use_batchnorm {
                skip = self.bn_train(tape, skip, &format!("block{i}.skip_bn"));
            }
            let joined = tape.add(main, skip);
            h = tape.relu(joined);
        }

        let pooled = tape.global_avg_pool(h);
        let w = self.push_param(tape, "head.w");
        let b = self.push_param(tape, "head.b");
        Ok(tape.dense(pooled, w, b))
    }

    fn conv_eval(&self, x: &Tensor, name: &str, stride: usize, padding: usize) -> Tensor {
        let w = &self.params.get(name).expect("model parameter exists").value;
        let bias = if self.spec.use_batchnorm {
            None
        } else {
            Some(&self.params.get(&format!("{name}.bias")).expect("conv bias").value)
        };
        conv1d_raw(x, w, bias, stride, padding)
    }

    fn bn_eval(&self, x: &Tensor, prefix: &str) -> Tensor {
        let get = |suffix: &str| {
            self.params
                .get(&format!("{prefix}.{suffix}"))
                .expect("bn stats")
                .value
                .data()
        };
        let (gamma, beta, mean, var) = (get("gamma"), get("beta"), get("mean"), get("var"));
        let (batch, ch, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(x.shape());
        let ov = out.data_mut();
        let xv = x.data();
        for bi in 0..batch {
            for c in 0..ch {
                let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
                let shift = beta[c] - mean[c] * scale;
                let base = (bi * ch + c) * t;
                for ti in 0..t {
                    ov[base + ti] = scale * xv[base + ti] + shift;
                }
            }
        }
        out
    }

    /// Logits using batchnorm running statistics; no state is touched.
    pub fn forward_eval(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        let pad = (self.spec.kernel_size - 1) / 2;
        let relu = |mut t: Tensor| {
            for v in t.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            t
        };

        let mut h = self.conv_eval(features, "stem.conv", 1, pad);
        if self.spec.use_batchnorm {
            h = self.bn_eval(&h, "stem.bn");
        }
        h = relu(h);

        for i in 0..self.spec.block_channels.len() {
            let mut main = self.conv_eval(&h, &format!("block{i}.conv1"), 2, pad);
            if self.spec.use_batchnorm {
                main = self.bn_eval(&main, &format!("block{i}.bn1"));
            }
            main = relu(main);
            main = self.conv_eval(&main, &format!("block{i}.conv2"), 1, pad);
            if self.spec.use_batchnorm {
                main = self.bn_eval(&main, &format!("block{i}.bn2"));
            }
            let mut skip = self.conv_eval(&h, &format!("block{i}.skip"), 2, 0);
            if self.spec.use_batchnorm {
                skip = self.bn_eval(&skip, &format!("block{i}.skip_bn"));
            }
            main.add_assign(&skip);
            h = relu(main);
        }

        let (batch, ch, t) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let mut pooled = Tensor::zeros(&[batch, ch]);
        {
            let hv = h.data();
            let pv = pooled.data_mut();
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * t;
                    pv[bi * ch + c] = hv[base..base + t].iter().sum::<f64>() / t as f64;
                }
            }
        }
        let w = &self.params.get("head.w").expect("head").value;
        let b = &self.params.get("head.b").expect("head").value;
        Ok(dense_raw(&pooled, w, b))
    }
}

/// Row-wise softmax of a (B, C) logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    debug_assert_eq!(logits.shape().len(), 2);
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    let lv = logits.data();
    let ov = out.data_mut();
    for bi in 0..batch {
        let row = &lv[bi * classes..(bi + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        for (c, &z) in row.iter().enumerate() {
            ov[bi * classes + c] = (z - max).exp() / denom;
        }
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
