//! GIN-E style Q-network over the edge-featured road graph.
//!
//! Junctions carry no raw features, so each node starts from a learned
//! projection of the mean features of its incoming and outgoing edges.
//! Each layer then computes, for node `i`,
//!
//! ```text
//! m_i  = sum over edges (j -> i) of act(W_e x_ji + b_e + h_j)
//! h_i' = MLP((1 + eps) h_i + m_i)        MLP = act(W2 act(W1 . + b1) + b2)
//! ```
//!
//! and a mean (or sum) readout followed by a one-hidden-layer head gives the
//! scalar Q-value. Backward is hand-derived and exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{FeatureMatrix, GraphTopology, FEATURE_COUNT};

#[derive(Debug, Error, PartialEq)]
pub enum GnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache was produced by a different parameter version")]
    StaleCache,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub readout: Readout,
    pub epsilon_learnable: bool,
    pub activation: Activation,
    pub features: usize,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 32,
            readout: Readout::Mean,
            epsilon_learnable: true,
            activation: Activation::Tanh,
            features: FEATURE_COUNT,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        if self.layers == 0 || self.hidden == 0 || self.features == 0 {
            return Err(GnnError::InvalidConfig(format!(
                "layers {}, hidden {}, features {} must all be at least 1",
                self.layers, self.hidden, self.features
            )));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (h, f) = (self.hidden, self.features);
        let input = h * 2 * f + h;
        let layer = (h * f + h) + 2 * (h * h + h) + 1;
        let head = h * h + h;
        let out = h + 1;
        input + self.layers * layer + head + out
    }
}

/// Affine map `y = W x + b` with `W` stored row-major (`out x inp`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { out, inp, w: vec![0.0; out * inp], b: vec![0.0; out] }
    }

    fn glorot(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (out + inp) as f64).sqrt();
        let w = (0..out * inp).map(|_| rng.gen_range(-limit..limit)).collect();
        Self { out, inp, w, b: vec![0.0; out] }
    }

    #[inline]
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &self.w[r * self.inp..(r + 1) * self.inp];
            *yr = self.b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates `dW += dy x^T`, `db += dy`.
    #[inline]
    fn accumulate(&mut self, dy: &[f64], x: &[f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.b[r] += g;
            let row = &mut self.w[r * self.inp..(r + 1) * self.inp];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }

    /// `dx += W^T dy`
    #[inline]
    fn backprop(&self, dy: &[f64], dx: &mut [f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.w[r * self.inp..(r + 1) * self.inp];
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageLayer {
    pub edge: Dense,
    pub mlp1: Dense,
    pub mlp2: Dense,
    pub epsilon: f64,
}

/// All trainable tensors. Gradients share this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTree {
    pub input: Dense,
    pub layers: Vec<MessageLayer>,
    pub head: Dense,
    pub out: Dense,
}

impl ParamTree {
    fn zeros(cfg: &GnnConfig) -> Self {
        let (h, f) = (cfg.hidden, cfg.features);
        Self {
            input: Dense::zeros(h, 2 * f),
            layers: (0..cfg.layers)
                .map(|_| MessageLayer {
                    edge: Dense::zeros(h, f),
                    mlp1: Dense::zeros(h, h),
                    mlp2: Dense::zeros(h, h),
                    epsilon: 0.0,
                })
                .collect(),
            head: Dense::zeros(h, h),
            out: Dense::zeros(1, h),
        }
    }

    /// Named flat views in a fixed order: `(name, shape, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut dense: Vec<(String, &Dense)> = vec![("input".into(), &self.input)];
        for (l, layer) in self.layers.iter().enumerate() {
            dense.push((format!("layer{l}.edge"), &layer.edge));
            dense.push((format!("layer{l}.mlp1"), &layer.mlp1));
            dense.push((format!("layer{l}.mlp2"), &layer.mlp2));
        }
        dense.push(("head".into(), &self.head));
        dense.push(("out".into(), &self.out));
        let mut v: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (name, d) in dense {
            v.push((format!("{name}.w"), vec![d.out, d.inp], &d.w));
            v.push((format!("{name}.b"), vec![d.out], &d.b));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            v.push((format!("layer{l}.epsilon"), vec![1], std::slice::from_ref(&layer.epsilon)));
        }
        v
    }

    /// Mutable flat views in the same order as [`ParamTree::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        let mut eps: Vec<&mut [f64]> = Vec::new();
        v.push(&mut self.input.w);
        v.push(&mut self.input.b);
        for layer in self.layers.iter_mut() {
            let MessageLayer { edge, mlp1, mlp2, epsilon } = layer;
            v.push(&mut edge.w);
            v.push(&mut edge.b);
            v.push(&mut mlp1.w);
            v.push(&mut mlp1.b);
            v.push(&mut mlp2.w);
            v.push(&mut mlp2.b);
            eps.push(std::slice::from_mut(epsilon));
        }
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v.push(&mut self.out.w);
        v.push(&mut self.out.b);
        v.extend(eps);
        v
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, d)| d.iter().copied()).collect()
    }

    fn same_shape(&self, other: &ParamTree) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1 && x.2.len() == y.2.len())
    }

    /// `self += scale * other`
    fn axpy(&mut self, scale: f64, other: &ParamTree) {
        let src = other.flatten();
        let mut k = 0;
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x += scale * src[k];
                k += 1;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Network parameters plus the config they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub config: GnnConfig,
    pub tree: ParamTree,
    /// bumped on every update; forward caches remember it
    #[serde(default)]
    pub generation: u64,
}

/// Gradient of Q (or a loss) with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tree: ParamTree,
}

impl Gradients {
    pub fn zeros(config: &GnnConfig) -> Self {
        Self { tree: ParamTree::zeros(config) }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Gradients) {
        self.tree.axpy(scale, &other.tree);
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tree.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tree.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Seeded Glorot-uniform weights, zero biases, zero epsilon.
pub fn init(config: &GnnConfig) -> Result<GnnParams, GnnError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, f) = (config.hidden, config.features);
    let input = Dense::glorot(h, 2 * f, &mut rng);
    let layers = (0..config.layers)
        .map(|_| MessageLayer {
            edge: Dense::glorot(h, f, &mut rng),
            mlp1: Dense::glorot(h, h, &mut rng),
            mlp2: Dense::glorot(h, h, &mut rng),
            epsilon: 0.0,
        })
        .collect();
    let head = Dense::glorot(h, h, &mut rng);
    let out = Dense::glorot(1, h, &mut rng);
    Ok(GnnParams { config: *config, tree: ParamTree { input, layers, head, out }, generation: 0 })
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<f64>,
    /// per node `[mean incoming features, mean outgoing features]`
    node_input: Vec<f64>,
    /// `h^0 .. h^L`, each `V x H`
    h: Vec<Vec<f64>>,
    /// per layer: edge message activations `E x H`
    msg: Vec<Vec<f64>>,
    /// per layer: MLP input `(1+eps) h + m`, `V x H`
    g: Vec<Vec<f64>>,
    /// per layer: first MLP activation `V x H`
    a1: Vec<Vec<f64>>,
    readout: Vec<f64>,
    head_act: Vec<f64>,
    pub q: f64,
}

fn check_inputs(params: &GnnParams, x: &FeatureMatrix, topo: &GraphTopology) -> Result<(), GnnError> {
    if x.cols != params.config.features {
        return Err(GnnError::ShapeMismatch(format!(
            "feature matrix has {} columns, network expects {}",
            x.cols, params.config.features
        )));
    }
    if x.rows != topo.edges.len() || x.data.len() != x.rows * x.cols {
        return Err(GnnError::ShapeMismatch(format!(
            "feature matrix has {} rows for {} edges",
            x.rows,
            topo.edges.len()
        )));
    }
    if topo.num_nodes == 0 {
        return Err(GnnError::ShapeMismatch("graph has no nodes".into()));
    }
    if let Some(&(a, b)) = topo.edges.iter().find(|(a, b)| *a >= topo.num_nodes || *b >= topo.num_nodes) {
        return Err(GnnError::ShapeMismatch(format!("edge ({a}, {b}) outside {} nodes", topo.num_nodes)));
    }
    Ok(())
}

/// Q-value of a (state, selected path) encoding, with the cache for [`backward`].
pub fn forward(params: &GnnParams, x: &FeatureMatrix, topo: &GraphTopology) -> Result<ForwardCache, GnnError> {
    check_inputs(params, x, topo)?;
    let cfg = &params.config;
    let p = &params.tree;
    let act = cfg.activation;
    let (n, h, f) = (topo.num_nodes, cfg.hidden, cfg.features);
    let m = topo.edges.len();

    let mut node_input = vec![0.0; n * 2 * f];
    let mut deg_in = vec![0usize; n];
    let mut deg_out = vec![0usize; n];
    for (e, &(a, b)) in topo.edges.iter().enumerate() {
        let row = x.row(e);
        deg_in[b] += 1;
        deg_out[a] += 1;
        for k in 0..f {
            node_input[b * 2 * f + k] += row[k];
            node_input[a * 2 * f + f + k] += row[k];
        }
    }
    for i in 0..n {
        let (di, dout) = (deg_in[i].max(1) as f64, deg_out[i].max(1) as f64);
        for k in 0..f {
            node_input[i * 2 * f + k] /= di;
            node_input[i * 2 * f + f + k] /= dout;
        }
    }

    let mut h0 = vec![0.0; n * h];
    for i in 0..n {
        let out = &mut h0[i * h..(i + 1) * h];
        p.input.apply(&node_input[i * 2 * f..(i + 1) * 2 * f], out);
        out.iter_mut().for_each(|v| *v = act.apply(*v));
    }

    let mut hs = vec![h0];
    let mut msgs = Vec::with_capacity(cfg.layers);
    let mut gs = Vec::with_capacity(cfg.layers);
    let mut a1s = Vec::with_capacity(cfg.layers);
    let mut tmp = vec![0.0; h];
    for layer in &p.layers {
        let prev = hs.last().unwrap();
        let mut msg = vec![0.0; m * h];
        let mut g: Vec<f64> = prev.iter().map(|v| (1.0 + layer.epsilon) * v).collect();
        for (e, &(src, dst)) in topo.edges.iter().enumerate() {
            let s = &mut msg[e * h..(e + 1) * h];
            layer.edge.apply(x.row(e), s);
            for k in 0..h {
                s[k] = act.apply(s[k] + prev[src * h + k]);
                g[dst * h + k] += s[k];
            }
        }
        let mut a1 = vec![0.0; n * h];
        let mut next = vec![0.0; n * h];
        for i in 0..n {
            let a = &mut a1[i * h..(i + 1) * h];
            layer.mlp1.apply(&g[i * h..(i + 1) * h], a);
            a.iter_mut().for_each(|v| *v = act.apply(*v));
            layer.mlp2.apply(a, &mut tmp);
            for k in 0..h {
                next[i * h + k] = act.apply(tmp[k]);
            }
        }
        msgs.push(msg);
        gs.push(g);
        a1s.push(a1);
        hs.push(next);
    }

    let last = hs.last().unwrap();
    let mut readout = vec![0.0; h];
    for i in 0..n {
        for k in 0..h {
            readout[k] += last[i * h + k];
        }
    }
    if cfg.readout == Readout::Mean {
        readout.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut head_act = vec![0.0; h];
    p.head.apply(&readout, &mut head_act);
    head_act.iter_mut().for_each(|v| *v = act.apply(*v));
    let mut q = [0.0];
    p.out.apply(&head_act, &mut q);

    Ok(ForwardCache {
        generation: params.generation,
        num_nodes: n,
        edges: topo.edges.clone(),
        features: x.data.clone(),
        node_input,
        h: hs,
        msg: msgs,
        g: gs,
        a1: a1s,
        readout,
        head_act,
        q: q[0],
    })
}

/// Convenience wrapper returning only Q.
pub fn q_value(params: &GnnParams, x: &FeatureMatrix, topo: &GraphTopology) -> Result<f64, GnnError> {
    forward(params, x, topo).map(|c| c.q)
}

/// Exact gradient of `d_q * Q` with respect to every parameter.
pub fn backward(params: &GnnParams, cache: &ForwardCache, d_q: f64) -> Result<Gradients, GnnError> {
    if cache.generation != params.generation {
        return Err(GnnError::StaleCache);
    }
    let cfg = &params.config;
    let p = &params.tree;
    let act = cfg.activation;
    let (n, h, f) = (cache.num_nodes, cfg.hidden, cfg.features);
    let mut grads = Gradients::zeros(cfg);
    let gt = &mut grads.tree;
    if d_q == 0.0 {
        return Ok(grads);
    }

    // scalar head
    gt.out.accumulate(&[d_q], &cache.head_act);
    let mut d_head = vec![0.0; h];
    p.out.backprop(&[d_q], &mut d_head);
    for k in 0..h {
        d_head[k] *= act.grad_from_output(cache.head_act[k]);
    }
    gt.head.accumulate(&d_head, &cache.readout);
    let mut d_readout = vec![0.0; h];
    p.head.backprop(&d_head, &mut d_readout);
    if cfg.readout == Readout::Mean {
        d_readout.iter_mut().for_each(|v| *v /= n as f64);
    }

    let mut dh: Vec<f64> = (0..n).flat_map(|_| d_readout.iter().copied()).collect();
    let mut dz = vec![0.0; h];
    let mut da = vec![0.0; h];
    for l in (0..cfg.layers).rev() {
        let layer = &p.layers[l];
        let glayer = &mut gt.layers[l];
        let h_out = &cache.h[l + 1];
        let h_in = &cache.h[l];
        let a1 = &cache.a1[l];
        let g = &cache.g[l];
        let msg = &cache.msg[l];
        let mut dg = vec![0.0; n * h];
        for i in 0..n {
            for k in 0..h {
                dz[k] = dh[i * h + k] * act.grad_from_output(h_out[i * h + k]);
            }
            glayer.mlp2.accumulate(&dz, &a1[i * h..(i + 1) * h]);
            da.iter_mut().for_each(|v| *v = 0.0);
            layer.mlp2.backprop(&dz, &mut da);
            for k in 0..h {
                da[k] *= act.grad_from_output(a1[i * h + k]);
            }
            glayer.mlp1.accumulate(&da, &g[i * h..(i + 1) * h]);
            layer.mlp1.backprop(&da, &mut dg[i * h..(i + 1) * h]);
        }
        if cfg.epsilon_learnable {
            glayer.epsilon = dg.iter().zip(h_in).map(|(a, b)| a * b).sum();
        }
        let mut dh_prev: Vec<f64> = dg.iter().map(|v| (1.0 + layer.epsilon) * v).collect();
        for (e, &(src, dst)) in cache.edges.iter().enumerate() {
            for k in 0..h {
                dz[k] = dg[dst * h + k] * act.grad_from_output(msg[e * h + k]);
            }
            glayer.edge.accumulate(&dz, &cache.features[e * f..(e + 1) * f]);
            for k in 0..h {
                dh_prev[src * h + k] += dz[k];
            }
        }
        dh = dh_prev;
    }

    let h0 = &cache.h[0];
    for i in 0..n {
        for k in 0..h {
            dz[k] = dh[i * h + k] * act.grad_from_output(h0[i * h + k]);
        }
        gt.input.accumulate(&dz, &cache.node_input[i * 2 * f..(i + 1) * 2 * f]);
    }
    Ok(grads)
}

/// Plain SGD step: `params - lr * grads`.
pub fn apply_update(params: &GnnParams, grads: &Gradients, lr: f64) -> Result<GnnParams, GnnError> {
    if !params.tree.same_shape(&grads.tree) {
        return Err(GnnError::ShapeMismatch("gradients do not match parameters".into()));
    }
    let mut next = params.clone();
    next.tree.axpy(-lr, &grads.tree);
    next.generation = params.generation + 1;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Stateful optimizer applying gradients in place.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &GnnParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let n = params.tree.len();
                Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
            }
        }
    }

    pub fn step(&mut self, params: &mut GnnParams, grads: &Gradients) -> Result<(), GnnError> {
        match self {
            Optimizer::Sgd { lr } => {
                *params = apply_update(params, grads, *lr)?;
            }
            Optimizer::Adam { lr, beta1, beta2, eps, m, v, t } => {
                if !params.tree.same_shape(&grads.tree) {
                    return Err(GnnError::ShapeMismatch("gradients do not match parameters".into()));
                }
                *t += 1;
                let g = grads.tree.flatten();
                let (b1, b2) = (*beta1, *beta2);
                let c1 = 1.0 - b1.powi(*t as i32);
                let c2 = 1.0 - b2.powi(*t as i32);
                let learnable_eps = params.config.epsilon_learnable;
                let eps_start = g.len() - params.config.layers;
                let mut k = 0;
                for tensor in params.tree.tensors_mut() {
                    for x in tensor.iter_mut() {
                        if k >= eps_start && !learnable_eps {
                            k += 1;
                            continue;
                        }
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        *x -= *lr * (m[k] / c1) / ((v[k] / c2).sqrt() + *eps);
                        k += 1;
                    }
                }
                params.generation += 1;
            }
        }
        Ok(())
    }
}
