//! The five loss terms and their analytically derived gradients with
//! respect to every learnable parameter, plus the weighted combined
//! batch objective.
//!
//! Each term function takes a `coeff` that scales its gradient
//! contributions (the batch objective passes `weight / batch_len`) and
//! returns the raw, unweighted term value. Gradients accumulate into a
//! [`GradAccumulator`] whose tensors mirror [`ModelParams`] exactly.
//!
//! Derivatives of the Euclidean distance use d(u,v) gradients
//! (u−v)/d with a zero subgradient at coincident points. The inverse
//! consistency term differentiates through the operator inverse with the
//! identity dM⁻¹ = −M⁻¹ dM M⁻¹ unless detached.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{
    distance_grad, euclidean_distance, lu_invert, matvec, matvec_transpose, softmax_cross_entropy,
    Matrix, Vector, DIST_EPS,
};
use crate::model::{ModelParams, PairId};

/// Nonnegative weights for the combined objective and the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_triplet: f64,
    pub w_aux: f64,
    pub w_inv: f64,
    pub w_comm: f64,
    pub w_ant: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_triplet: 1.0,
            w_aux: 1.0,
            w_inv: 1.0,
            w_comm: 1.0,
            w_ant: 1.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            self.w_triplet,
            self.w_aux,
            self.w_inv,
            self.w_comm,
            self.w_ant,
        ];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::validation("loss weights must be nonnegative"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::validation("margin must be positive"));
        }
        Ok(())
    }
}

/// Manually curated antonym attribute pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AntonymList {
    pub pairs: Vec<(usize, usize)>,
}

impl AntonymList {
    pub fn new(pairs: Vec<(usize, usize)>, num_attrs: usize) -> Result<Self> {
        for &(a, b) in &pairs {
            if a >= num_attrs || b >= num_attrs {
                return Err(Error::validation(format!(
                    "antonym pair ({a}, {b}) out of range for {num_attrs} attributes"
                )));
            }
            if a == b {
                return Err(Error::validation(format!(
                    "antonym pair ({a}, {b}) pairs an attribute with itself"
                )));
            }
        }
        Ok(AntonymList { pairs })
    }

    /// Antonym partners of attribute `a`, in list order.
    pub fn partners_of(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().filter_map(move |&(p, q)| {
            if p == a {
                Some(q)
            } else if q == a {
                Some(p)
            } else {
                None
            }
        })
    }
}

/// Gradient buffers mirroring every tensor in [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub objects: Vec<Vector>,
    pub operators: Vec<Matrix>,
    pub emb_weight: Matrix,
    pub emb_bias: Vector,
    pub attr_weight: Matrix,
    pub attr_bias: Vector,
    pub obj_weight: Matrix,
    pub obj_bias: Vector,
}

impl GradAccumulator {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradAccumulator {
            objects: params
                .objects
                .vectors
                .iter()
                .map(|v| Vector::zeros(v.len()))
                .collect(),
            operators: params
                .attrs
                .operators
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
            emb_weight: Matrix::zeros(params.embedder.weight.rows, params.embedder.weight.cols),
            emb_bias: Vector::zeros(params.embedder.bias.len()),
            attr_weight: Matrix::zeros(params.aux.attr_weight.rows, params.aux.attr_weight.cols),
            attr_bias: Vector::zeros(params.aux.attr_bias.len()),
            obj_weight: Matrix::zeros(params.aux.obj_weight.rows, params.aux.obj_weight.cols),
            obj_bias: Vector::zeros(params.aux.obj_bias.len()),
        }
    }

    /// Flat view in the same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for v in &self.objects {
            out.extend_from_slice(&v.data);
        }
        for m in &self.operators {
            out.extend_from_slice(&m.data);
        }
        out.extend_from_slice(&self.emb_weight.data);
        out.extend_from_slice(&self.emb_bias.data);
        out.extend_from_slice(&self.attr_weight.data);
        out.extend_from_slice(&self.attr_bias.data);
        out.extend_from_slice(&self.obj_weight.data);
        out.extend_from_slice(&self.obj_bias.data);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.objects.iter().all(Vector::is_finite)
            && self.operators.iter().all(Matrix::is_finite)
            && self.emb_weight.is_finite()
            && self.emb_bias.is_finite()
            && self.attr_weight.is_finite()
            && self.attr_bias.is_finite()
            && self.obj_weight.is_finite()
            && self.obj_bias.is_finite()
    }

    /// self += coeff * other, tensor by tensor.
    pub fn add_scaled(&mut self, other: &GradAccumulator, coeff: f64) {
        for (d, s) in self.objects.iter_mut().zip(&other.objects) {
            d.axpy(coeff, s);
        }
        for (d, s) in self.operators.iter_mut().zip(&other.operators) {
            for (x, y) in d.data.iter_mut().zip(&s.data) {
                *x += coeff * y;
            }
        }
        for (x, y) in self.emb_weight.data.iter_mut().zip(&other.emb_weight.data) {
            *x += coeff * y;
        }
        self.emb_bias.axpy(coeff, &other.emb_bias);
        for (x, y) in self.attr_weight.data.iter_mut().zip(&other.attr_weight.data) {
            *x += coeff * y;
        }
        self.attr_bias.axpy(coeff, &other.attr_bias);
        for (x, y) in self.obj_weight.data.iter_mut().zip(&other.obj_weight.data) {
            *x += coeff * y;
        }
        self.obj_bias.axpy(coeff, &other.obj_bias);
    }

    fn add_embedder(&mut self, coeff: f64, gf: &Vector, feat: &Vector) {
        self.emb_weight.add_outer(coeff, gf, feat);
        self.emb_bias.axpy(coeff, gf);
    }
}

/// Triplet hinge: max(0, d(f(x), M_a o) − d(f(x), M_{a'} o') + m).
///
/// Gradients accumulate only when the hinge is active.
pub fn triplet_term(
    params: &ModelParams,
    feat: &Vector,
    pos: PairId,
    neg: PairId,
    margin: f64,
    coeff: f64,
    grads: &mut GradAccumulator,
) -> f64 {
    let f = params.embed_image(feat);
    let g_pos = params.compose(pos);
    let g_neg = params.compose(neg);
    let d_pos = euclidean_distance(&f, &g_pos);
    let d_neg = euclidean_distance(&f, &g_neg);
    let value = d_pos - d_neg + margin;
    if value <= 0.0 {
        return 0.0;
    }

    let u_pos = distance_grad(&f, &g_pos);
    let u_neg = distance_grad(&f, &g_neg);

    let mut gf = u_pos.clone();
    gf.axpy(-1.0, &u_neg);
    grads.add_embedder(coeff, &gf, feat);

    // positive branch: dL/dg_pos = -u_pos
    let o_pos = &params.objects.vectors[pos.obj];
    grads.operators[pos.attr].add_outer(-coeff, &u_pos, o_pos);
    let back_pos = matvec_transpose(&params.attrs.operators[pos.attr], &u_pos);
    grads.objects[pos.obj].axpy(-coeff, &back_pos);

    // negative branch: dL/dg_neg = +u_neg
    let o_neg = &params.objects.vectors[neg.obj];
    grads.operators[neg.attr].add_outer(coeff, &u_neg, o_neg);
    let back_neg = matvec_transpose(&params.attrs.operators[neg.attr], &u_neg);
    grads.objects[neg.obj].axpy(coeff, &back_neg);

    value
}

/// Auxiliary classification on the composed representation: cross-entropy
/// of both heads, with gradients flowing into the heads and back through
/// the composition into the operator and object vector.
pub fn aux_term(
    params: &ModelParams,
    pair: PairId,
    coeff: f64,
    grads: &mut GradAccumulator,
) -> f64 {
    let composed = params.compose(pair);

    let mut attr_logits = matvec(&params.aux.attr_weight, &composed);
    attr_logits.axpy(1.0, &params.aux.attr_bias);
    let (loss_a, grad_a) = softmax_cross_entropy(&attr_logits, pair.attr);

    let mut obj_logits = matvec(&params.aux.obj_weight, &composed);
    obj_logits.axpy(1.0, &params.aux.obj_bias);
    let (loss_o, grad_o) = softmax_cross_entropy(&obj_logits, pair.obj);

    grads.attr_weight.add_outer(coeff, &grad_a, &composed);
    grads.attr_bias.axpy(coeff, &grad_a);
    grads.obj_weight.add_outer(coeff, &grad_o, &composed);
    grads.obj_bias.axpy(coeff, &grad_o);

    // back into the composed vector, then into M_a and o
    let mut gc = matvec_transpose(&params.aux.attr_weight, &grad_a);
    gc.axpy(1.0, &matvec_transpose(&params.aux.obj_weight, &grad_o));

    let o = &params.objects.vectors[pair.obj];
    grads.operators[pair.attr].add_outer(coeff, &gc, o);
    let back = matvec_transpose(&params.attrs.operators[pair.attr], &gc);
    grads.objects[pair.obj].axpy(coeff, &back);

    loss_a + loss_o
}

/// Inverse consistency: build the pseudo-instance h = M_{a'} M_a⁻¹ f(x)
/// and evaluate the hinge with positive (a', o) and negative (a, o).
///
/// Gradients flow through M_{a'}, M_a (including the inverse path), the
/// object vector, and the embedder, unless `detach_pseudo` treats h as a
/// constant.
pub fn inv_term(
    params: &ModelParams,
    feat: &Vector,
    a: usize,
    a_prime: usize,
    obj: usize,
    margin: f64,
    detach_pseudo: bool,
    coeff: f64,
    grads: &mut GradAccumulator,
) -> Result<f64> {
    assert_ne!(a, a_prime, "inv_term: swapped attribute must differ");
    let m_a = &params.attrs.operators[a];
    let m_ap = &params.attrs.operators[a_prime];
    let inv = lu_invert(m_a).map_err(|e| match e {
        Error::SingularMatrix { .. } => Error::SingularMatrix {
            attribute: Some(params.vocab.attributes[a].clone()),
        },
        other => other,
    })?;

    let f = params.embed_image(feat);
    let q = matvec(&inv, &f);
    let h = matvec(m_ap, &q);

    let o = &params.objects.vectors[obj];
    let g_pos = matvec(m_ap, o);
    let g_neg = matvec(m_a, o);

    let d_pos = euclidean_distance(&h, &g_pos);
    let d_neg = euclidean_distance(&h, &g_neg);
    let value = d_pos - d_neg + margin;
    if value <= 0.0 {
        return Ok(0.0);
    }

    let u_pos = distance_grad(&h, &g_pos);
    let u_neg = distance_grad(&h, &g_neg);

    // candidate branches
    grads.operators[a_prime].add_outer(-coeff, &u_pos, o);
    grads.objects[obj].axpy(-coeff, &matvec_transpose(m_ap, &u_pos));
    grads.operators[a].add_outer(coeff, &u_neg, o);
    grads.objects[obj].axpy(coeff, &matvec_transpose(m_a, &u_neg));

    if !detach_pseudo {
        let mut gh = u_pos.clone();
        gh.axpy(-1.0, &u_neg);

        // h = M_{a'} q
        grads.operators[a_prime].add_outer(coeff, &gh, &q);
        let gq = matvec_transpose(m_ap, &gh);

        // q = M_a⁻¹ f: gradient w.r.t. f, and w.r.t. M_a via
        // d(M⁻¹) = −M⁻¹ dM M⁻¹, giving grad_M = −(M⁻ᵀ gq) qᵀ.
        let gf = matvec_transpose(&inv, &gq);
        grads.add_embedder(coeff, &gf, feat);
        let back = matvec_transpose(&inv, &gq);
        grads.operators[a].add_outer(-coeff, &back, &q);
    }

    Ok(value)
}

/// Commutativity penalty: ‖M_a(M_b o) − M_b(M_a o)‖₂.
pub fn comm_term(
    params: &ModelParams,
    a: usize,
    b: usize,
    obj: usize,
    coeff: f64,
    grads: &mut GradAccumulator,
) -> f64 {
    assert_ne!(a, b, "comm_term: attributes must differ");
    let m_a = &params.attrs.operators[a];
    let m_b = &params.attrs.operators[b];
    let o = &params.objects.vectors[obj];

    let v_a = matvec(m_a, o);
    let v_b = matvec(m_b, o);
    let r = matvec(m_a, &v_b).sub(&matvec(m_b, &v_a));
    let norm = r.norm();
    if norm < DIST_EPS {
        return norm;
    }
    let u = r.scale(1.0 / norm);

    let bt_u = matvec_transpose(m_b, &u);
    let at_u = matvec_transpose(m_a, &u);

    grads.operators[a].add_outer(coeff, &u, &v_b);
    grads.operators[a].add_outer(-coeff, &bt_u, o);
    grads.operators[b].add_outer(-coeff, &u, &v_a);
    grads.operators[b].add_outer(coeff, &at_u, o);

    let mut go = matvec_transpose(m_b, &at_u);
    go.axpy(-1.0, &matvec_transpose(m_a, &bt_u));
    grads.objects[obj].axpy(coeff, &go);

    norm
}

/// Antonym consistency: ‖M_{a'}(M_a o) − o‖₂.
pub fn ant_term(
    params: &ModelParams,
    a: usize,
    a_prime: usize,
    obj: usize,
    coeff: f64,
    grads: &mut GradAccumulator,
) -> f64 {
    let m_a = &params.attrs.operators[a];
    let m_ap = &params.attrs.operators[a_prime];
    let o = &params.objects.vectors[obj];

    let v = matvec(m_a, o);
    let r = matvec(m_ap, &v).sub(o);
    let norm = r.norm();
    if norm < DIST_EPS {
        return norm;
    }
    let u = r.scale(1.0 / norm);

    grads.operators[a_prime].add_outer(coeff, &u, &v);
    let apt_u = matvec_transpose(m_ap, &u);
    grads.operators[a].add_outer(coeff, &apt_u, o);

    let mut go = matvec_transpose(m_a, &apt_u);
    go.axpy(-1.0, &u);
    grads.objects[obj].axpy(coeff, &go);

    norm
}

/// Per-term (weighted) means over a batch; columns sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub aux: f64,
    pub inv: f64,
    pub comm: f64,
    pub ant: f64,
}

/// Pre-sampled random choices for one batch: the swapped-in attribute for
/// the inverse term and the partner attribute for the commutativity term,
/// per example. `None` when the term is skipped (weight 0 or single
/// attribute).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub inv_partners: Vec<Option<usize>>,
    pub comm_partners: Vec<Option<usize>>,
}

fn sample_other_attr(rng: &mut ChaCha8Rng, num_attrs: usize, avoid: usize) -> usize {
    let k = rng.gen_range(0..num_attrs - 1);
    if k >= avoid {
        k + 1
    } else {
        k
    }
}

/// Draw the per-example random partners for a batch. Terms with zero
/// weight consume no randomness.
pub fn plan_batch(
    batch: &[(Vector, PairId)],
    num_attrs: usize,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> BatchPlan {
    let mut inv_partners = Vec::with_capacity(batch.len());
    let mut comm_partners = Vec::with_capacity(batch.len());
    for (_, pair) in batch {
        inv_partners.push(if weights.w_inv > 0.0 && num_attrs >= 2 {
            Some(sample_other_attr(rng, num_attrs, pair.attr))
        } else {
            None
        });
        comm_partners.push(if weights.w_comm > 0.0 && num_attrs >= 2 {
            Some(sample_other_attr(rng, num_attrs, pair.attr))
        } else {
            None
        });
    }
    BatchPlan {
        inv_partners,
        comm_partners,
    }
}

/// Combined objective for a batch with the random choices already fixed.
///
/// Deterministic given its inputs; the finite-difference oracle re-evaluates
/// this with the same plan while perturbing parameters.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_planned(
    params: &ModelParams,
    batch: &[(Vector, PairId)],
    negatives: &[PairId],
    plan: &BatchPlan,
    weights: &LossWeights,
    antonyms: &AntonymList,
    detach_inverse: bool,
) -> Result<(LossBreakdown, GradAccumulator)> {
    assert!(!batch.is_empty(), "batch_loss: empty batch");
    assert_eq!(
        batch.len(),
        negatives.len(),
        "batch_loss: {} examples but {} negatives",
        batch.len(),
        negatives.len()
    );
    let n = batch.len() as f64;
    let mut grads = GradAccumulator::zeros_like(params);
    let mut bd = LossBreakdown::default();

    for (i, (feat, pair)) in batch.iter().enumerate() {
        if weights.w_triplet > 0.0 {
            let v = triplet_term(
                params,
                feat,
                *pair,
                negatives[i],
                weights.margin,
                weights.w_triplet / n,
                &mut grads,
            );
            bd.triplet += weights.w_triplet * v / n;
        }
        if weights.w_aux > 0.0 {
            let v = aux_term(params, *pair, weights.w_aux / n, &mut grads);
            bd.aux += weights.w_aux * v / n;
        }
        if let Some(a_prime) = plan.inv_partners[i] {
            let v = inv_term(
                params,
                feat,
                pair.attr,
                a_prime,
                pair.obj,
                weights.margin,
                detach_inverse,
                weights.w_inv / n,
                &mut grads,
            )?;
            bd.inv += weights.w_inv * v / n;
        }
        if let Some(b) = plan.comm_partners[i] {
            let v = comm_term(params, pair.attr, b, pair.obj, weights.w_comm / n, &mut grads);
            bd.comm += weights.w_comm * v / n;
        }
        if weights.w_ant > 0.0 {
            // each antonym pair containing this attribute, both orderings
            let partners: Vec<usize> = antonyms.partners_of(pair.attr).collect();
            for p in partners {
                let v1 = ant_term(params, pair.attr, p, pair.obj, weights.w_ant / n, &mut grads);
                let v2 = ant_term(params, p, pair.attr, pair.obj, weights.w_ant / n, &mut grads);
                bd.ant += weights.w_ant * (v1 + v2) / n;
            }
        }
    }

    bd.total = bd.triplet + bd.aux + bd.inv + bd.comm + bd.ant;
    if !bd.total.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("batch gradients".into()));
    }
    Ok((bd, grads))
}

/// Mean weighted objective over a batch, sampling the inverse and
/// commutativity partners from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    params: &ModelParams,
    batch: &[(Vector, PairId)],
    negatives: &[PairId],
    weights: &LossWeights,
    antonyms: &AntonymList,
    detach_inverse: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, GradAccumulator)> {
    let plan = plan_batch(batch, params.vocab.num_attrs(), weights, rng);
    batch_loss_planned(
        params,
        batch,
        negatives,
        &plan,
        weights,
        antonyms,
        detach_inverse,
    )
}
