//! Causal hidden-stream transformer.
//!
//! The stream is materialized incrementally: the context prefix (prompt
//! tokens, then optional perception tokens) is processed as one causal
//! block, and every latent action or the sentinel is appended as a single
//! new position whose keys and values extend the per-layer caches. Earlier
//! positions are never recomputed, so appending cannot change them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::rng::normal_tensor;
use crate::numerics::{Bind, Graph, ParamId, ParamStore, Tensor, Var};
use crate::role::Role;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Width of perception tokens.
    pub perception_dim: usize,
    pub mlp_ratio: usize,
    /// Rows of the per-role step embedding tables.
    pub max_role_steps: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 28,
            max_positions: 32,
            perception_dim: 32,
            mlp_ratio: 4,
            max_role_steps: 6,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.max_positions == 0 || self.perception_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid("stream dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub perception_in: ParamId,
    pub perception_type: ParamId,
    pub latent_in: ParamId,
    pub latent_in_b: ParamId,
    pub role_in: ParamId,
    pub step_in: ParamId,
    pub sentinel: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

pub(crate) fn linear_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    normal_tensor(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt())
}

pub(crate) fn resolve(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
}

impl BackboneIds {
    pub fn init(store: &mut ParamStore, cfg: &StreamConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let h = d * cfg.mlp_ratio;
        let residual_gain = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut add = |name: &str, t: Tensor| store.add(format!("backbone.{name}"), t, false);
        let tok_emb = add("tok_emb", normal_tensor(rng, cfg.vocab_size, d, 0.1));
        let pos_emb = add("pos_emb", normal_tensor(rng, cfg.max_positions, d, 0.1));
        let perception_in = add("perception_in", linear_init(rng, cfg.perception_dim, d, 1.0));
        let perception_type = add("perception_type", normal_tensor(rng, 1, d, 0.1));
        let latent_in = add("latent_in", linear_init(rng, d, d, 1.0));
        let latent_in_b = add("latent_in_b", Tensor::zeros(1, d));
        let role_in = add("role_in", normal_tensor(rng, 4, d, 0.1));
        let step_in = add("step_in", normal_tensor(rng, cfg.max_role_steps, d, 0.1));
        let sentinel = add("sentinel", normal_tensor(rng, 1, d, 0.1));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut add = |name: &str, t: Tensor| add(&format!("layer{l}.{name}"), t);
            layers.push(LayerIds {
                ln1_g: add("ln1_g", Tensor::filled(1, d, 1.0)),
                ln1_b: add("ln1_b", Tensor::zeros(1, d)),
                w_qkv: add("w_qkv", linear_init(rng, d, 3 * d, 1.0)),
                b_qkv: add("b_qkv", Tensor::zeros(1, 3 * d)),
                w_o: add("w_o", linear_init(rng, d, d, residual_gain)),
                b_o: add("b_o", Tensor::zeros(1, d)),
                ln2_g: add("ln2_g", Tensor::filled(1, d, 1.0)),
                ln2_b: add("ln2_b", Tensor::zeros(1, d)),
                w_1: add("w_1", linear_init(rng, d, h, 1.0)),
                b_1: add("b_1", Tensor::zeros(1, h)),
                w_2: add("w_2", linear_init(rng, h, d, residual_gain)),
                b_2: add("b_2", Tensor::zeros(1, d)),
            });
        }
        let lnf_g = add("lnf_g", Tensor::filled(1, d, 1.0));
        let lnf_b = add("lnf_b", Tensor::zeros(1, d));
        Self {
            tok_emb,
            pos_emb,
            perception_in,
            perception_type,
            latent_in,
            latent_in_b,
            role_in,
            step_in,
            sentinel,
            layers,
            lnf_g,
            lnf_b,
        }
    }

    pub fn resolve(store: &ParamStore, cfg: &StreamConfig) -> Result<Self> {
        let r = |name: &str| resolve(store, &format!("backbone.{name}"));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let r = |name: &str| r(&format!("layer{l}.{name}"));
                Ok(LayerIds {
                    ln1_g: r("ln1_g")?,
                    ln1_b: r("ln1_b")?,
                    w_qkv: r("w_qkv")?,
                    b_qkv: r("b_qkv")?,
                    w_o: r("w_o")?,
                    b_o: r("b_o")?,
                    ln2_g: r("ln2_g")?,
                    ln2_b: r("ln2_b")?,
                    w_1: r("w_1")?,
                    b_1: r("b_1")?,
                    w_2: r("w_2")?,
                    b_2: r("b_2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: r("tok_emb")?,
            pos_emb: r("pos_emb")?,
            perception_in: r("perception_in")?,
            perception_type: r("perception_type")?,
            latent_in: r("latent_in")?,
            latent_in_b: r("latent_in_b")?,
            role_in: r("role_in")?,
            step_in: r("step_in")?,
            sentinel: r("sentinel")?,
            layers,
            lnf_g: r("lnf_g")?,
            lnf_b: r("lnf_b")?,
        })
    }
}

/// Layer norm with learned gain and bias.
pub(crate) fn ln_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let n = g.layer_norm_rows(x, LN_EPS);
    let s = g.mul_row(n, gain);
    g.add_row(s, bias)
}

/// Contiguous spans of a materialized stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub prompt: (usize, usize),
    pub perception: Option<(usize, usize)>,
    /// `(role, start, len)` for every role with a nonzero length.
    pub latents: Vec<(Role, usize, usize)>,
    pub sentinel: Option<usize>,
}

impl TokenLayout {
    pub fn context_len(&self) -> usize {
        self.perception.map_or(self.prompt.1, |p| p.1)
    }
}

/// One materialized stream inside a graph.
pub struct Stream<'a> {
    cfg: StreamConfig,
    ids: &'a BackboneIds,
    bind: Bind<'a>,
    keys: Vec<Var>,
    values: Vec<Var>,
    prefix_top: Var,
    prefix_len: usize,
    pushed: Vec<Var>,
    pub layout: TokenLayout,
}

fn run_layers(g: &mut Graph, bind: Bind<'_>, cfg: &StreamConfig, ids: &BackboneIds, x: Var, caches: &mut [(Option<Var>, Option<Var>)]) -> Var {
    let d = cfg.d_model;
    let mut x = x;
    for (l, p) in ids.layers.iter().enumerate() {
        let (ln1_g, ln1_b) = (g.param(bind, p.ln1_g), g.param(bind, p.ln1_b));
        let xn = ln_affine(g, x, ln1_g, ln1_b);
        let (w_qkv, b_qkv) = (g.param(bind, p.w_qkv), g.param(bind, p.b_qkv));
        let qkv = g.linear(xn, w_qkv, b_qkv);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let (kc, vc) = &mut caches[l];
        let keys = match *kc {
            Some(prev) => g.concat_rows(&[prev, k]),
            None => k,
        };
        let values = match *vc {
            Some(prev) => g.concat_rows(&[prev, v]),
            None => v,
        };
        *kc = Some(keys);
        *vc = Some(values);
        let a = g.causal_attention(q, keys, values, cfg.n_heads);
        let (w_o, b_o) = (g.param(bind, p.w_o), g.param(bind, p.b_o));
        let o = g.linear(a, w_o, b_o);
        x = g.add(x, o);
        let (ln2_g, ln2_b) = (g.param(bind, p.ln2_g), g.param(bind, p.ln2_b));
        let xn = ln_affine(g, x, ln2_g, ln2_b);
        let (w_1, b_1) = (g.param(bind, p.w_1), g.param(bind, p.b_1));
        let hdn = g.linear(xn, w_1, b_1);
        let hdn = g.gelu(hdn);
        let (w_2, b_2) = (g.param(bind, p.w_2), g.param(bind, p.b_2));
        let m = g.linear(hdn, w_2, b_2);
        x = g.add(x, m);
    }
    let (lnf_g, lnf_b) = (g.param(bind, ids.lnf_g), g.param(bind, ids.lnf_b));
    ln_affine(g, x, lnf_g, lnf_b)
}

impl<'a> Stream<'a> {
    /// Process the context: prompt tokens, then perception rows if given.
    pub fn begin(
        g: &mut Graph,
        bind: Bind<'a>,
        cfg: &StreamConfig,
        ids: &'a BackboneIds,
        prompt: &[usize],
        perception: Option<&Tensor>,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(invalid("empty prompt"));
        }
        if let Some(t) = prompt.iter().find(|t| **t >= cfg.vocab_size) {
            return Err(invalid(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        let n_perc = perception.map_or(0, Tensor::rows);
        let n = prompt.len() + n_perc;
        if n > cfg.max_positions {
            return Err(invalid(format!("context of {n} positions exceeds max_positions {}", cfg.max_positions)));
        }
        let tok = g.param(bind, ids.tok_emb);
        let mut x = g.gather_rows(tok, prompt);
        if let Some(p) = perception {
            if p.cols() != cfg.perception_dim {
                return Err(Error::Shape(format!("perception width {} != {}", p.cols(), cfg.perception_dim)));
            }
            let pv = g.constant(p.clone());
            let (w, t) = (g.param(bind, ids.perception_in), g.param(bind, ids.perception_type));
            let proj = g.matmul(pv, w);
            let proj = g.add_row(proj, t);
            x = g.concat_rows(&[x, proj]);
        }
        let pos = g.param(bind, ids.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.gather_rows(pos, &positions);
        let x = g.add(x, pe);
        let mut caches = vec![(None, None); cfg.n_layers];
        let top = run_layers(g, bind, cfg, ids, x, &mut caches);
        let layout = TokenLayout {
            prompt: (0, prompt.len()),
            perception: perception.map(|_| (prompt.len(), n)),
            latents: Vec::new(),
            sentinel: None,
        };
        Ok(Self {
            cfg: *cfg,
            ids,
            bind,
            keys: caches.iter().map(|c| c.0.expect("layer ran")).collect(),
            values: caches.iter().map(|c| c.1.expect("layer ran")).collect(),
            prefix_top: top,
            prefix_len: n,
            pushed: Vec::new(),
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.prefix_len + self.pushed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-layer state at position `n`.
    pub fn hidden_at(&self, g: &mut Graph, n: usize) -> Result<Var> {
        if n < self.prefix_len {
            Ok(g.row(self.prefix_top, n))
        } else {
            self.pushed.get(n - self.prefix_len).copied().ok_or_else(|| invalid(format!("position {n} not materialized")))
        }
    }

    /// State at the last materialized position.
    pub fn last(&self, g: &mut Graph) -> Var {
        match self.pushed.last() {
            Some(v) => *v,
            None => g.row(self.prefix_top, self.prefix_len - 1),
        }
    }

    fn push_row(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = self.len();
        if n >= self.cfg.max_positions {
            return Err(invalid(format!("stream overflow at max_positions {}", self.cfg.max_positions)));
        }
        let pos = g.param(self.bind, self.ids.pos_emb);
        let pe = g.row(pos, n);
        let x = g.add(x, pe);
        let mut caches: Vec<(Option<Var>, Option<Var>)> =
            self.keys.iter().zip(&self.values).map(|(k, v)| (Some(*k), Some(*v))).collect();
        let top = run_layers(g, self.bind, &self.cfg, self.ids, x, &mut caches);
        for (l, (k, v)) in caches.into_iter().enumerate() {
            self.keys[l] = k.expect("cache");
            self.values[l] = v.expect("cache");
        }
        self.pushed.push(top);
        Ok(top)
    }

    /// Inject latent `z` (a `1 × d` row) as role `role`, step `k` (1-based).
    pub fn push_latent(&mut self, g: &mut Graph, z: Var, role: Role, k: usize) -> Result<Var> {
        if self.layout.sentinel.is_some() {
            return Err(invalid("stream already terminated"));
        }
        if k == 0 || k > self.cfg.max_role_steps {
            return Err(invalid(format!("step {k} outside step table of {}", self.cfg.max_role_steps)));
        }
        let (w, b) = (g.param(self.bind, self.ids.latent_in), g.param(self.bind, self.ids.latent_in_b));
        let x = g.linear(z, w, b);
        let roles = g.param(self.bind, self.ids.role_in);
        let re = g.row(roles, role.index());
        let steps = g.param(self.bind, self.ids.step_in);
        let se = g.row(steps, k - 1);
        let x = g.add(x, re);
        let x = g.add(x, se);
        let pos = self.len();
        let top = self.push_row(g, x)?;
        match self.layout.latents.last_mut() {
            Some((r, _, len)) if *r == role => *len += 1,
            _ => self.layout.latents.push((role, pos, 1)),
        }
        Ok(top)
    }

    pub fn push_sentinel(&mut self, g: &mut Graph) -> Result<Var> {
        if self.layout.sentinel.is_some() {
            return Err(invalid("sentinel already inserted"));
        }
        let s = g.param(self.bind, self.ids.sentinel);
        let pos = self.len();
        let top = self.push_row(g, s)?;
        self.layout.sentinel = Some(pos);
        Ok(top)
    }

    /// Conditioning states: top states at every latent position followed by
    /// the sentinel, one row each.
    pub fn conditioning(&self, g: &mut Graph) -> Result<Var> {
        if self.layout.sentinel.is_none() {
            return Err(invalid("rollout not terminated"));
        }
        Ok(g.concat_rows(&self.pushed))
    }

    /// Latent-position top states (excluding the sentinel).
    pub fn latent_states(&self) -> &[Var] {
        let n = self.pushed.len() - usize::from(self.layout.sentinel.is_some());
        &self.pushed[..n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from;

    fn setup() -> (ParamStore, BackboneIds, StreamConfig) {
        let cfg = StreamConfig { d_model: 16, n_layers: 2, n_heads: 2, ..StreamConfig::default() };
        let mut store = ParamStore::new();
        let ids = BackboneIds::init(&mut store, &cfg, &mut rng_from(0, &[]));
        (store, ids, cfg)
    }

    fn row(g: &mut Graph, seed: u64, d: usize) -> Var {
        g.constant(normal_tensor(&mut rng_from(seed, &[]), 1, d, 1.0))
    }

    #[test]
    fn appending_leaves_prefix_states_unchanged() {
        let (store, ids, cfg) = setup();
        let mut g = Graph::new();
        let mut s = Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &[1, 3, 9, 14, 2], None).unwrap();
        let h0 = s.last(&mut g);
        let before = g.value(h0).clone();
        let z = row(&mut g, 1, 16);
        let h1 = s.push_latent(&mut g, z, Role::Plan, 1).unwrap();
        let h1v = g.value(h1).clone();
        let z2 = row(&mut g, 2, 16);
        s.push_latent(&mut g, z2, Role::Plan, 2).unwrap();
        let again = s.hidden_at(&mut g, 4).unwrap();
        assert_eq!(g.value(again), &before);
        let h5 = s.hidden_at(&mut g, 5).unwrap();
        assert_eq!(g.value(h5), &h1v);
    }

    #[test]
    fn perception_does_not_touch_prompt_states() {
        let (store, ids, cfg) = setup();
        let prompt = [1, 3, 9, 14, 2];
        let mut g = Graph::new();
        let a = Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &prompt, None).unwrap();
        let perc = normal_tensor(&mut rng_from(3, &[]), 4, cfg.perception_dim, 1.0);
        let b = Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &prompt, Some(&perc)).unwrap();
        for n in 0..prompt.len() {
            let (x, y) = (a.hidden_at(&mut g, n).unwrap(), b.hidden_at(&mut g, n).unwrap());
            assert_eq!(g.value(x), g.value(y));
        }
        assert_eq!(b.layout.perception, Some((5, 9)));
        assert_eq!(b.len(), 9);
    }

    #[test]
    fn latent_changes_state_and_conditioning_shape() {
        let (store, ids, cfg) = setup();
        let run = |seed: u64| {
            let mut g = Graph::new();
            let mut s = Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &[1, 4, 2], None).unwrap();
            let z = row(&mut g, seed, 16);
            let h = s.push_latent(&mut g, z, Role::Draft, 1).unwrap();
            assert!(s.conditioning(&mut g).is_err());
            s.push_sentinel(&mut g).unwrap();
            let c = s.conditioning(&mut g).unwrap();
            (g.value(h).clone(), g.value(c).clone())
        };
        let (h1, c1) = run(1);
        let (h2, _) = run(2);
        assert_ne!(h1, h2);
        assert_eq!(c1.shape(), [2, 16]);
        assert_eq!(run(1).1, c1);
    }

    #[test]
    fn overflow_and_bad_tokens_rejected() {
        let (store, ids, cfg) = setup();
        let mut g = Graph::new();
        assert!(Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &[99], None).is_err());
        let long = vec![1; cfg.max_positions + 1];
        assert!(Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &long, None).is_err());
        let mut s = Stream::begin(&mut g, Bind::constant(&store), &cfg, &ids, &vec![1; cfg.max_positions], None).unwrap();
        assert!(s.push_sentinel(&mut g).is_err());
    }

    #[test]
    fn resolve_matches_init() {
        let (store, ids, cfg) = setup();
        let r = BackboneIds::resolve(&store, &cfg).unwrap();
        assert_eq!(r.layers[1].w_2, ids.layers[1].w_2);
        assert_eq!(r.sentinel, ids.sentinel);
    }
}
