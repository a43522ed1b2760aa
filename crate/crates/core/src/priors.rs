//! Teacher-induced Gaussian prior over latent actions (training only).
//!
//! Semantic roles take their base target from a frozen field-embedding
//! table, mean-pooled over a record's triples and mapped by a trainable
//! adapter. The draft role takes its base target from the candidate scene's
//! perception tokens: presence-gated pooling, parameter-free layer norm, a
//! frozen projection and a fixed rescale. Every base target is then shifted
//! by trainable role and step embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{linear_init, resolve, LN_EPS};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, Net};
use crate::numerics::gaussian::HALF_LN_2PI;
use crate::numerics::rng::normal_tensor;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::role::{Role, RoleLengths, RoleSchedule};
use crate::toyscene::records::{Field, FieldTag, TeacherRecord};
use crate::toyscene::WorldConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Fixed prior standard deviation.
    pub sigma_q: f64,
    /// Draft-target rescale.
    pub alpha_ld: f64,
    /// Width of the frozen field embeddings.
    pub d_prior: usize,
    /// Standard deviation of the frozen field embeddings.
    pub field_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { sigma_q: 0.1, alpha_ld: 1.0, d_prior: 64, field_std: 1.0 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_q > 0.0 && self.alpha_ld > 0.0 && self.field_std > 0.0 && self.d_prior > 0) {
            return Err(invalid("prior sigma_q, alpha_ld, field_std and d_prior must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PriorIds {
    /// Frozen `(field triple) → d_prior` table.
    pub field_table: ParamId,
    /// Frozen `d_v → d` projection of pooled draft features.
    pub draft_proj: ParamId,
    /// Trainable `d_prior → d` adapter.
    pub adapter: ParamId,
    pub role_emb: ParamId,
    pub step_emb: ParamId,
    /// Linear probe from a latent action to record field tags, used only by
    /// the probe variant of the anchor loss.
    pub probe_w: ParamId,
    pub probe_b: ParamId,
}

/// Seed of the frozen prior tables, independent of the model seed.
pub const FROZEN_SEED: u64 = 0;

impl PriorIds {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let p = &cfg.priors;
        let d = cfg.stream.d_model;
        let dv = cfg.stream.perception_dim;
        let mut frozen = crate::numerics::rng::rng_from(FROZEN_SEED, &[0xf1e1d]);
        let table = normal_tensor(&mut frozen, Field::table_rows(&cfg.world), p.d_prior, p.field_std);
        let proj = normal_tensor(&mut frozen, dv, d, 1.0 / (dv as f64).sqrt());
        let adapter = Tensor::from_parts(
            p.d_prior,
            d,
            (0..p.d_prior * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect(),
        );
        Self {
            field_table: store.add("prior.field_table", table, true),
            draft_proj: store.add("prior.draft_proj", proj, true),
            adapter: store.add("prior.adapter", adapter, false),
            role_emb: store.add("prior.role_emb", normal_tensor(rng, 4, d, 0.1), false),
            step_emb: store.add("prior.step_emb", normal_tensor(rng, cfg.stream.max_role_steps, d, 0.1), false),
            probe_w: store.add("prior.probe_w", linear_init(rng, d, FieldTag::COUNT, 0.1), false),
            probe_b: store.add("prior.probe_b", Tensor::zeros(1, FieldTag::COUNT), false),
        }
    }

    pub fn resolve(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            field_table: resolve(store, "prior.field_table")?,
            draft_proj: resolve(store, "prior.draft_proj")?,
            adapter: resolve(store, "prior.adapter")?,
            role_emb: resolve(store, "prior.role_emb")?,
            step_emb: resolve(store, "prior.step_emb")?,
            probe_w: resolve(store, "prior.probe_w")?,
            probe_b: resolve(store, "prior.probe_b")?,
        })
    }
}

/// Mean of the frozen embeddings of a record's triples.
pub fn encode_record(table: &Tensor, world: &WorldConfig, record: &TeacherRecord) -> Result<Vec<f64>> {
    if !record.role.is_semantic() {
        return Err(invalid("draft role has no teacher record"));
    }
    if record.fields.is_empty() {
        return Err(invalid("empty teacher record"));
    }
    let mut out = vec![0.0; table.cols()];
    for f in &record.fields {
        for (o, v) in out.iter_mut().zip(table.row(f.table_index(world)?)) {
            *o += v;
        }
    }
    let n = record.fields.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// `A_prior · pooled(record)` as a `1 × d` graph row.
pub fn semantic_target(g: &mut Graph, net: &Net<'_>, record: &TeacherRecord) -> Result<Var> {
    let ids = &net.ids.priors;
    let table = net.bind.store.get(ids.field_table);
    let pooled = encode_record(table, &net.cfg.world, record)?;
    let p = g.constant_row(&pooled);
    let a = g.param(net.bind, ids.adapter);
    Ok(g.matmul(p, a))
}

/// Draft base target: pool presence-active perception rows (all rows if none
/// is active), normalize without affine parameters, project through the
/// frozen map and scale by `alpha_ld`.
pub fn draft_target(proj: &Tensor, tokens: &Tensor, presence: &[f64], alpha_ld: f64) -> Result<Vec<f64>> {
    if tokens.rows() != presence.len() || tokens.rows() == 0 {
        return Err(Error::Shape(format!("{} draft tokens for {} presence flags", tokens.rows(), presence.len())));
    }
    if tokens.cols() != proj.rows() {
        return Err(Error::Shape(format!("draft width {} != projection input {}", tokens.cols(), proj.rows())));
    }
    let active: Vec<usize> = (0..tokens.rows()).filter(|&i| presence[i] > 0.5).collect();
    let rows = if active.is_empty() { (0..tokens.rows()).collect() } else { active };
    let mut pooled = vec![0.0; tokens.cols()];
    for &r in &rows {
        for (o, v) in pooled.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= rows.len() as f64);
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let normed: Vec<f64> = pooled.iter().map(|v| (v - mean) * inv).collect();
    let out = Tensor::from_parts(1, normed.len(), normed).matmul(proj);
    Ok(out.data().iter().map(|v| v * alpha_ld).collect())
}

/// `η + e_role + e_step`.
pub fn add_identity(g: &mut Graph, net: &Net<'_>, eta: Var, role: Role, step: usize) -> Result<Var> {
    if step == 0 || step > net.cfg.stream.max_role_steps {
        return Err(invalid(format!("step {step} outside the step table")));
    }
    let ids = &net.ids.priors;
    let roles = g.param(net.bind, ids.role_emb);
    let r = g.row(roles, role.index());
    let steps = g.param(net.bind, ids.step_emb);
    let s = g.row(steps, step - 1);
    let x = g.add(eta, r);
    Ok(g.add(x, s))
}

/// Training-only prior information for one task.
pub struct PriorInputs<'a> {
    pub records: &'a [TeacherRecord],
    /// Perception tokens of the candidate scene and their presence weights.
    pub draft_tokens: &'a Tensor,
    pub draft_presence: &'a [f64],
}

/// Target means in rollout order, as graph rows.
pub struct TargetVars {
    pub e: Vec<Var>,
    pub layout: Vec<(Role, usize)>,
}

/// Collect `e_n` for every latent position of the schedule under the
/// teacher `lengths` (masked roles contribute nothing; the sentinel has no
/// target).
pub fn build_targets(
    g: &mut Graph,
    net: &Net<'_>,
    inputs: &PriorInputs<'_>,
    schedule: &RoleSchedule,
    lengths: &RoleLengths,
) -> Result<TargetVars> {
    schedule.check_lengths(lengths)?;
    let proj = net.bind.store.get(net.ids.priors.draft_proj);
    let mut e = Vec::new();
    let mut layout = Vec::new();
    for (role, k) in lengths.layout() {
        let eta = if role == Role::Draft {
            let v = draft_target(proj, inputs.draft_tokens, inputs.draft_presence, net.cfg.priors.alpha_ld)?;
            g.constant_row(&v)
        } else {
            let rec = inputs
                .records
                .iter()
                .find(|r| r.role == role && r.step == k)
                .ok_or_else(|| invalid(format!("no teacher record for {role} step {k}")))?;
            semantic_target(g, net, rec)?
        };
        e.push(add_identity(g, net, eta, role, k)?);
        layout.push((role, k));
    }
    Ok(TargetVars { e, layout })
}

/// Value-level targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTargets {
    pub e: Vec<Vec<f64>>,
    pub layout: Vec<(Role, usize)>,
    pub lengths: RoleLengths,
    pub sigma_q: f64,
}

pub fn prior_targets(
    net: &Net<'_>,
    inputs: &PriorInputs<'_>,
    schedule: &RoleSchedule,
    lengths: &RoleLengths,
) -> Result<PriorTargets> {
    let mut g = Graph::new();
    let t = build_targets(&mut g, net, inputs, schedule, lengths)?;
    Ok(PriorTargets {
        e: t.e.iter().map(|v| g.value(*v).data().to_vec()).collect(),
        layout: t.layout,
        lengths: *lengths,
        sigma_q: net.cfg.priors.sigma_q,
    })
}

/// `Σ_n log N(z_n; e_n, σ_q² I)`, summed over dimensions.
pub fn prior_logdensity(z: &[Vec<f64>], targets: &PriorTargets) -> Result<f64> {
    if z.len() != targets.e.len() {
        return Err(invalid(format!("{} actions for {} targets", z.len(), targets.e.len())));
    }
    let s = targets.sigma_q;
    let mut total = 0.0;
    for (zn, en) in z.iter().zip(&targets.e) {
        if zn.len() != en.len() {
            return Err(Error::Shape(format!("action width {} != target width {}", zn.len(), en.len())));
        }
        for (a, b) in zn.iter().zip(en) {
            total += -s.ln() - HALF_LN_2PI - (a - b) * (a - b) / (2.0 * s * s);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LacModel;
    use crate::toyscene::records::make_teacher_records;
    use crate::toyscene::{corrupt, sample_task, Category, SceneEncoder};

    fn rec(fields: Vec<Field>) -> TeacherRecord {
        TeacherRecord { role: Role::Plan, step: 1, fields }
    }

    #[test]
    fn record_pooling() {
        let w = WorldConfig::default();
        let m = LacModel::new(ModelConfig::small(), 0).unwrap();
        let table = m.store.get(m.ids.priors.field_table);
        let f1 = Field::new(FieldTag::Color, 0, 2);
        let f2 = Field::new(FieldTag::Kind, 0, 1);
        let one = encode_record(table, &w, &rec(vec![f1])).unwrap();
        assert_eq!(one, table.row(f1.table_index(&w).unwrap()));
        let ab = encode_record(table, &w, &rec(vec![f1, f2])).unwrap();
        let ba = encode_record(table, &w, &rec(vec![f2, f1])).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-15);
        }
        let other = encode_record(table, &w, &rec(vec![f1, Field::new(FieldTag::Kind, 0, 2)])).unwrap();
        assert_ne!(ab, other);
        let mut draft = rec(vec![f1]);
        draft.role = Role::Draft;
        assert!(encode_record(table, &w, &draft).is_err());
    }

    #[test]
    fn identity_adapter_passes_pooled_feature() {
        let m = LacModel::new(ModelConfig::small(), 0).unwrap();
        let net = m.net_constant();
        let r = rec(vec![Field::new(FieldTag::Count, 1, 3)]);
        let mut g = Graph::new();
        let eta = semantic_target(&mut g, &net, &r).unwrap();
        let pooled = encode_record(m.store.get(m.ids.priors.field_table), &m.config.world, &r).unwrap();
        assert_eq!(g.value(eta).data(), pooled.as_slice());
    }

    #[test]
    fn draft_target_properties() {
        let proj = normal_tensor(&mut crate::numerics::rng::rng_from(1, &[]), 4, 6, 0.5);
        let same = Tensor::new(2, 4, vec![0.3; 8]).unwrap();
        assert!(draft_target(&proj, &same, &[1.0, 1.0], 1.0).unwrap().iter().all(|v| v.abs() < 1e-12));
        let t = normal_tensor(&mut crate::numerics::rng::rng_from(2, &[]), 3, 4, 1.0);
        let a = draft_target(&proj, &t, &[1.0, 0.0, 1.0], 1.0).unwrap();
        let t2 = t.map(|v| 2.0 * v);
        let b = draft_target(&proj, &t2, &[1.0, 0.0, 1.0], 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
        let c = draft_target(&proj, &t, &[1.0, 0.0, 1.0], 2.0).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&c) - 2.0 * norm(&a)).abs() < 1e-12);
        // no active rows: pool everything
        let all = draft_target(&proj, &t, &[0.0, 0.0, 0.0], 1.0).unwrap();
        let all_active = draft_target(&proj, &t, &[1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(all, all_active);
    }

    #[test]
    fn targets_follow_layout() {
        let m = LacModel::new(ModelConfig::small(), 0).unwrap();
        let net = m.net_constant();
        let w = m.config.world;
        let s = m.config.schedule;
        let (spec, reference) = sample_task(&w, 3, Category::TwoObject);
        let draft = corrupt(&w, &spec, &reference, 3);
        let (records, _) = make_teacher_records(&w, &s, &spec, &reference, &draft);
        let enc = SceneEncoder::new(&w, m.config.stream.perception_dim);
        let (_, tokens) = enc.encode(&draft);
        let presence: Vec<f64> = draft.slots.iter().map(|s| s.presence).collect();
        let inputs = PriorInputs { records: &records, draft_tokens: &tokens, draft_presence: &presence };
        let lengths = RoleLengths([2, 1, 1, 1]);
        let t = prior_targets(&net, &inputs, &s, &lengths).unwrap();
        assert_eq!(t.e.len(), 5);
        let roles: Vec<Role> = t.layout.iter().map(|x| x.0).collect();
        assert_eq!(roles, vec![Role::Plan, Role::Plan, Role::Draft, Role::Diagnosis, Role::Refine]);
        // draft slot = draft target + identities
        let dt = draft_target(m.store.get(m.ids.priors.draft_proj), &tokens, &presence, 1.0).unwrap();
        let re = m.store.get(m.ids.priors.role_emb).row(Role::Draft.index());
        let se = m.store.get(m.ids.priors.step_emb).row(0);
        for j in 0..dt.len() {
            assert!((t.e[2][j] - (dt[j] + re[j] + se[j])).abs() < 1e-12);
        }
        let no_diag: Vec<TeacherRecord> = records.iter().filter(|r| r.role != Role::Diagnosis).cloned().collect();
        let inputs = PriorInputs { records: &no_diag, draft_tokens: &tokens, draft_presence: &presence };
        assert!(prior_targets(&net, &inputs, &s, &lengths).is_err());

        // log-density at the mode, and the quadratic penalty of one move
        let d = t.e[0].len() as f64;
        let at_mode = prior_logdensity(&t.e, &t).unwrap();
        assert!((at_mode - 5.0 * d * (-(0.1f64).ln() - HALF_LN_2PI)).abs() < 1e-9);
        let mut moved = t.e.clone();
        moved[1][0] += 0.3;
        let delta = prior_logdensity(&moved, &t).unwrap() - at_mode;
        assert!((delta + 0.09 / (2.0 * 0.01)).abs() < 1e-9);
        let mut wide = t.clone();
        wide.sigma_q = 1.0;
        let far: Vec<Vec<f64>> = t.e.iter().map(|e| e.iter().map(|v| v + 2.0).collect()).collect();
        assert!(prior_logdensity(&far, &wide).unwrap() > prior_logdensity(&far, &t).unwrap());
    }
}
