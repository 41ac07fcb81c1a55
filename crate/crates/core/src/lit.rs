//! Local feature integration transformer: learned templates iteratively
//! attend over local features and are refined into an ordered set of
//! super-features.

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LocalFeatureSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::params::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::whitening::WhiteningTransform;

/// Added to attention column sums before the l1 normalization.
pub const COLUMN_EPS: f64 = 1e-12;
/// Whitened magnitude below which a super-feature is unusable.
pub const ZERO_FEATURE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    Residual,
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LitConfig {
    /// Number of templates N.
    pub templates: usize,
    /// Attention width d.
    pub dim: usize,
    /// Local feature width D.
    pub input_dim: usize,
    /// Iteration count T.
    pub iterations: usize,
    pub update: UpdateRule,
    pub template_std: f64,
    pub freeze_templates: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LitConfig {
    fn default() -> Self {
        Self {
            templates: 32,
            dim: 256,
            input_dim: 256,
            iterations: 3,
            update: UpdateRule::Residual,
            template_std: 0.02,
            freeze_templates: false,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct GruLayout {
    input_update: Linear,
    input_reset: Linear,
    input_candidate: Linear,
    hidden_update: Linear,
    hidden_reset: Linear,
    hidden_candidate: Linear,
}

#[derive(Clone, Copy, Debug)]
struct LitLayout {
    templates: ParamId,
    norm_kv: LayerNorm,
    norm_q: LayerNorm,
    key: Linear,
    value: Linear,
    query: Linear,
    mlp_norm: LayerNorm,
    mlp_hidden: Linear,
    mlp_out: Linear,
    gru: Option<GruLayout>,
}

/// Learned initial templates plus every LIT parameter; shared by all
/// iterations, so the parameter count does not depend on T.
#[derive(Clone, Debug)]
pub struct TemplateBank {
    pub config: LitConfig,
    pub store: ParamStore,
    layout: LitLayout,
}

impl TemplateBank {
    pub fn new(config: LitConfig) -> Result<Self> {
        if config.templates == 0 || config.iterations == 0 || config.dim < 2 || config.input_dim == 0 {
            return Err(Error::invalid("LIT needs N >= 1, T >= 1, d >= 2, D >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (n, d, din) = (config.templates, config.dim, config.input_dim);
        let templates = store.add_normal("lit.templates", (n, d), config.template_std, &mut rng);
        store.set_frozen(templates, config.freeze_templates);
        let norm_kv = LayerNorm::new(&mut store, "lit.norm_kv", din);
        let norm_q = LayerNorm::new(&mut store, "lit.norm_q", d);
        let key = Linear::new(&mut store, "lit.key", din, d, &mut rng);
        let value = Linear::new(&mut store, "lit.value", din, d, &mut rng);
        let query = Linear::new(&mut store, "lit.query", d, d, &mut rng);
        let mlp_norm = LayerNorm::new(&mut store, "lit.mlp.norm", d);
        let mlp_hidden = Linear::new(&mut store, "lit.mlp.hidden", d, d / 2, &mut rng);
        let mlp_out = Linear::new(&mut store, "lit.mlp.out", d / 2, d, &mut rng);
        let gru = (config.update == UpdateRule::Gru).then(|| {
            let mut lin = |name: &str| Linear::new(&mut store, &format!("lit.gru.{name}"), d, d, &mut rng);
            GruLayout {
                input_update: lin("input_update"),
                input_reset: lin("input_reset"),
                input_candidate: lin("input_candidate"),
                hidden_update: lin("hidden_update"),
                hidden_reset: lin("hidden_reset"),
                hidden_candidate: lin("hidden_candidate"),
            }
        });
        Ok(Self {
            config,
            store,
            layout: LitLayout {
                templates,
                norm_kv,
                norm_q,
                key,
                value,
                query,
                mlp_norm,
                mlp_hidden,
                mlp_out,
                gru,
            },
        })
    }

    /// Same layout as `new(config)` with values taken from `store`.
    pub fn from_store(config: LitConfig, store: ParamStore) -> Result<Self> {
        let mut bank = Self::new(config)?;
        if store.len() != bank.store.len() {
            return Err(Error::Format("LIT parameter count mismatch".into()));
        }
        for (dst, src) in bank.store.params_mut().iter_mut().zip(store.params()) {
            if dst.name != src.name || dst.value.dim() != src.value.dim() {
                return Err(Error::Format(format!("LIT parameter {} mismatch", src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(bank)
    }

    pub fn templates(&self) -> &Mat {
        self.store.get(self.layout.templates)
    }

    pub fn templates_id(&self) -> ParamId {
        self.layout.templates
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }

    /// Keys and values of the local features (shared pre-projection norm).
    fn keys_values(&self, g: &mut Graph, b: &Bound, u: Var) -> (Var, Var) {
        let normed = self.layout.norm_kv.forward(g, b, u);
        let k = self.layout.key.forward(g, b, normed);
        let v = self.layout.value.forward(g, b, normed);
        (k, v)
    }

    fn attention_graph(&self, g: &mut Graph, b: &Bound, keys: Var, q: Var, iteration: usize) -> Result<Var> {
        let qn = self.layout.norm_q.forward(g, b, q);
        let qp = self.layout.query.forward(g, b, qn);
        let qt = g.transpose(qp);
        let scores = g.matmul(keys, qt);
        let m = g.scale(scores, 1.0 / (self.config.dim as f64).sqrt());
        let responsibilities = g.softmax_rows(m);
        for (column, col) in g.value(responsibilities).axis_iter(Axis(1)).enumerate() {
            let s = col.sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::DegenerateColumn { iteration, column });
            }
        }
        Ok(g.col_l1_normalize(responsibilities, COLUMN_EPS))
    }

    fn mlp_residual(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let h = self.layout.mlp_norm.forward(g, b, x);
        let h = self.layout.mlp_hidden.forward(g, b, h);
        let h = g.relu(h);
        let h = self.layout.mlp_out.forward(g, b, h);
        g.add(h, x)
    }

    fn aggregate(&self, g: &mut Graph, alpha: Var, values: Var) -> Var {
        let at = g.transpose(alpha);
        g.matmul(at, values)
    }

    fn gru_update(&self, g: &mut Graph, b: &Bound, gru: &GruLayout, input: Var, hidden: Var) -> Var {
        let zi = gru.input_update.forward(g, b, input);
        let zh = gru.hidden_update.forward(g, b, hidden);
        let zs = g.add(zi, zh);
        let z = g.sigmoid(zs);
        let ri = gru.input_reset.forward(g, b, input);
        let rh = gru.hidden_reset.forward(g, b, hidden);
        let rs = g.add(ri, rh);
        let r = g.sigmoid(rs);
        let ni = gru.input_candidate.forward(g, b, input);
        let nh = gru.hidden_candidate.forward(g, b, hidden);
        let gated = g.mul(r, nh);
        let ns = g.add(ni, gated);
        let candidate = g.tanh(ns);
        // h' = candidate + z * (hidden - candidate)
        let diff = g.sub(hidden, candidate);
        let kept = g.mul(z, diff);
        g.add(candidate, kept)
    }

    fn step_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        keys: Var,
        values: Var,
        q: Var,
        iteration: usize,
        rule: UpdateRule,
    ) -> Result<(Var, Var)> {
        let alpha = self.attention_graph(g, b, keys, q, iteration)?;
        let agg = self.aggregate(g, alpha, values);
        let pre_mlp = match rule {
            UpdateRule::Residual => g.add(agg, q),
            UpdateRule::Gru => {
                let gru = self
                    .layout
                    .gru
                    .ok_or_else(|| Error::invalid("bank has no gated-recurrent parameters"))?;
                self.gru_update(g, b, &gru, agg, q)
            }
        };
        Ok((self.mlp_residual(g, b, pre_mlp), alpha))
    }

    /// Full T-iteration unroll on the graph, starting from the bound templates.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, u: Var) -> Result<LitTrace> {
        let q0 = b.var(self.layout.templates);
        self.forward_from(g, b, u, q0, self.config.iterations)
    }

    fn forward_from(&self, g: &mut Graph, b: &Bound, u: Var, q0: Var, iterations: usize) -> Result<LitTrace> {
        let (keys, values) = self.keys_values(g, b, u);
        let mut q = q0;
        let mut alphas = Vec::with_capacity(iterations);
        for t in 0..iterations {
            let (next, alpha) = self.step_graph(g, b, keys, values, q, t, self.config.update)?;
            alphas.push(alpha);
            q = next;
        }
        Ok(LitTrace {
            raw: q,
            alpha: *alphas.last().expect("T >= 1"),
            alphas,
        })
    }

    fn check_input(&self, u: &LocalFeatureSet) -> Result<()> {
        if u.is_empty() {
            return Err(Error::invalid("local feature set is empty"));
        }
        if u.dim() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "local features have dim {}, LIT expects {}",
                u.dim(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn check_templates(&self, templates: &Mat) -> Result<()> {
        if templates.ncols() != self.config.dim || templates.nrows() == 0 {
            return Err(Error::invalid(format!(
                "templates must be N x {}, got {:?}",
                self.config.dim,
                templates.dim()
            )));
        }
        Ok(())
    }
}

/// Graph handles produced by one LIT unroll.
#[derive(Clone, Debug)]
pub struct LitTrace {
    /// `N x d` refined templates after the last iteration.
    pub raw: Var,
    /// Final-iteration attention.
    pub alpha: Var,
    pub alphas: Vec<Var>,
}

/// `L x N` attention: nonnegative, every column sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub alpha: Mat,
}

impl AttentionMatrix {
    pub fn locations(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn maps(&self) -> usize {
        self.alpha.ncols()
    }

    /// Largest deviation of a column sum from one.
    pub fn max_column_error(&self) -> f64 {
        self.alpha
            .axis_iter(Axis(1))
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.alpha.iter().all(|&v| v >= 0.0)
    }
}

fn bind_with_templates(bank: &TemplateBank, templates: &Mat, u: &LocalFeatureSet) -> (Graph, Bound, Var, Var) {
    let mut g = Graph::new();
    let b = bank.store.bind(&mut g, false);
    let uv = g.constant(u.features.clone());
    let q = g.constant(templates.clone());
    (g, b, uv, q)
}

pub fn attention_maps(u: &LocalFeatureSet, templates: &Mat, bank: &TemplateBank) -> Result<AttentionMatrix> {
    bank.check_input(u)?;
    bank.check_templates(templates)?;
    let (mut g, b, uv, q) = bind_with_templates(bank, templates, u);
    let (keys, _) = bank.keys_values(&mut g, &b, uv);
    let alpha = bank.attention_graph(&mut g, &b, keys, q, 0)?;
    Ok(AttentionMatrix {
        alpha: g.value(alpha).clone(),
    })
}

fn single_step(
    u: &LocalFeatureSet,
    templates: &Mat,
    bank: &TemplateBank,
    rule: UpdateRule,
) -> Result<(Mat, AttentionMatrix)> {
    bank.check_input(u)?;
    bank.check_templates(templates)?;
    let (mut g, b, uv, q) = bind_with_templates(bank, templates, u);
    let (keys, values) = bank.keys_values(&mut g, &b, uv);
    let (next, alpha) = bank.step_graph(&mut g, &b, keys, values, q, 0, rule)?;
    Ok((
        g.value(next).clone(),
        AttentionMatrix {
            alpha: g.value(alpha).clone(),
        },
    ))
}

/// One residual refinement: `MLP(a) + a` with `a = αᵀ·V(U) + templates`.
pub fn phi_step(u: &LocalFeatureSet, templates: &Mat, bank: &TemplateBank) -> Result<(Mat, AttentionMatrix)> {
    single_step(u, templates, bank, UpdateRule::Residual)
}

/// One refinement where a gated recurrent unit replaces the residual sum.
pub fn phi_step_gru(u: &LocalFeatureSet, templates: &Mat, bank: &TemplateBank) -> Result<(Mat, AttentionMatrix)> {
    single_step(u, templates, bank, UpdateRule::Gru)
}

/// Runs T refinements from the learned templates; returns the raw `N x d`
/// output and the final-iteration attention.
pub fn lit_forward(u: &LocalFeatureSet, bank: &TemplateBank) -> Result<(Mat, AttentionMatrix)> {
    bank.check_input(u)?;
    let mut g = Graph::new();
    let b = bank.store.bind(&mut g, false);
    let uv = g.constant(u.features.clone());
    let trace = bank.forward_graph(&mut g, &b, uv)?;
    Ok((
        g.value(trace.raw).clone(),
        AttentionMatrix {
            alpha: g.value(trace.alpha).clone(),
        },
    ))
}

/// Ordered, whitened, unit-norm super-features of one image at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperFeatureSet {
    /// `N x 128`, row `n` is super-feature ID `n`.
    pub features: Mat,
    /// Whitened magnitude before normalization.
    pub strengths: Vec<f64>,
    pub attention: AttentionMatrix,
    pub scale: f64,
    /// Local feature grid `(width, height)` the attention is defined on.
    pub grid: (usize, usize),
}

impl SuperFeatureSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_usable(&self, id: usize) -> bool {
        self.strengths[id] >= ZERO_FEATURE_EPS
    }

    /// IDs flagged as unusable (zero magnitude after whitening).
    pub fn zero_features(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_usable(i)).collect()
    }

    pub fn require_all_usable(&self) -> Result<()> {
        match self.zero_features().first() {
            Some(&id) => Err(Error::ZeroFeature(id)),
            None => Ok(()),
        }
    }
}

/// `s_n = o(ŝ_n) / ‖o(ŝ_n)‖`, keeping `‖o(ŝ_n)‖` as the strength. Rows with
/// a vanishing magnitude are zeroed and flagged instead of divided.
pub fn postprocess_superfeatures(
    raw: &Mat,
    whitener: &WhiteningTransform,
    alpha: &AttentionMatrix,
) -> Result<SuperFeatureSet> {
    if raw.ncols() != whitener.input_dim() {
        return Err(Error::invalid(format!(
            "whitener expects {} dims, raw super-features have {}",
            whitener.input_dim(),
            raw.ncols()
        )));
    }
    let mut features = whitener.apply(raw);
    let mut strengths = Vec::with_capacity(raw.nrows());
    for (n, mut row) in features.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        strengths.push(norm);
        if norm < ZERO_FEATURE_EPS {
            log::warn!("super-feature {n} has zero magnitude; flagged unusable");
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok(SuperFeatureSet {
        features,
        strengths,
        attention: alpha.clone(),
        scale: 1.0,
        grid: (alpha.locations(), 1),
    })
}

/// Builds the `(features, strengths)` nodes for training.
pub fn postprocess_graph(g: &mut Graph, raw: Var, whitener: &WhiteningTransform) -> (Var, Var) {
    let o = whitener.apply_graph(g, raw);
    let strengths = g.row_norms(o);
    let features = g.row_l2_normalize(o);
    (features, strengths)
}

/// LIT plus postprocessing on one local feature set.
pub fn extract_superfeatures(
    u: &LocalFeatureSet,
    bank: &TemplateBank,
    whitener: &WhiteningTransform,
) -> Result<SuperFeatureSet> {
    let (raw, alpha) = lit_forward(u, bank)?;
    let mut set = postprocess_superfeatures(&raw, whitener, &alpha)?;
    set.scale = u.scale;
    set.grid = (u.width, u.height);
    Ok(set)
}
