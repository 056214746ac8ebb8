//! Masked-input construction and the contrastive auxiliary loss.
//!
//! The loss couples InfoNCE terms over transformer outputs and encoder
//! targets with a stop-gradient KL invariance penalty. Negatives are drawn
//! from all B*T flattened positions, the penalty is computed on unmasked
//! logits, and self-pairs are suppressed with -1e9.

use numerics::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::error::{CoberlError, Result};
use crate::model::{bind_all_const, ParamVars};

/// Suppression constant for self-pair logits.
pub const SELF_PAIR_SUPPRESSION: f64 = -1e9;

/// Row-norm tolerance for the "already normalized" input contract.
const NORM_TOLERANCE: f64 = 1e-3;

/// Time indices masked per sequence.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub masked_indices: Vec<Vec<usize>>,
    pub mask_rate: f64,
    pub t_len: usize,
}

impl MaskPlan {
    pub fn count_per_sequence(&self) -> usize {
        (self.mask_rate * self.t_len as f64).ceil() as usize
    }

    /// 0/1 indicator of shape `[B, T]`.
    pub fn mask_ext(&self) -> Tensor {
        let b = self.masked_indices.len();
        let mut m = Tensor::zeros(&[b, self.t_len]);
        for (i, indices) in self.masked_indices.iter().enumerate() {
            for &t in indices {
                m.data_mut()[i * self.t_len + t] = 1.0;
            }
        }
        m
    }
}

/// Draw `ceil(rate * T)` positions per sequence, uniform without replacement.
pub fn plan_masks(
    batch: usize,
    t_len: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(CoberlError::Config(format!(
            "mask rate {rate} outside (0, 1]"
        )));
    }
    if t_len == 0 {
        return Err(CoberlError::Config("cannot mask an empty sequence".into()));
    }
    let count = ((rate * t_len as f64).ceil() as usize).min(t_len);
    let mut masked_indices = Vec::with_capacity(batch);
    for _ in 0..batch {
        // partial Fisher-Yates
        let mut pool: Vec<usize> = (0..t_len).collect();
        for i in 0..count {
            let j = rng.gen_range(i..t_len);
            pool.swap(i, j);
        }
        let mut chosen: Vec<usize> = pool[..count].to_vec();
        chosen.sort_unstable();
        masked_indices.push(chosen);
    }
    Ok(MaskPlan {
        masked_indices,
        mask_rate: rate,
        t_len,
    })
}

/// Masked inputs, unmasked targets and the mask indicator.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    /// `[B*T, d]`, masked positions replaced by the mask token
    pub masked_inputs: Tensor,
    /// `[B*T, d]`, originals
    pub targets: Tensor,
    /// `[B, T]` of {0, 1}
    pub mask_ext: Tensor,
}

/// Substitute the mask token at planned positions. `y` is sequence-major
/// `[B*T, d]`.
pub fn apply_masking(
    y: &Tensor,
    batch: usize,
    t_len: usize,
    plan: &MaskPlan,
    mask_token: &Tensor,
) -> Result<MaskedBatch> {
    let d = y.cols();
    if y.rows() != batch * t_len {
        return Err(CoberlError::Input(format!(
            "embedding rows {} != B*T = {}",
            y.rows(),
            batch * t_len
        )));
    }
    if mask_token.len() != d {
        return Err(CoberlError::Input(format!(
            "mask token width {} != embedding width {d}",
            mask_token.len()
        )));
    }
    if plan.masked_indices.len() != batch || plan.t_len != t_len {
        return Err(CoberlError::Input("mask plan does not match batch".into()));
    }
    let mut masked = y.clone();
    for (i, indices) in plan.masked_indices.iter().enumerate() {
        for &t in indices {
            let row = i * t_len + t;
            masked.data_mut()[row * d..(row + 1) * d].copy_from_slice(mask_token.data());
        }
    }
    Ok(MaskedBatch {
        masked_inputs: masked,
        targets: y.clone(),
        mask_ext: plan.mask_ext(),
    })
}

/// Critic projection followed by L2 normalization (epsilon floor 1e-12).
pub fn critic_embed_graph(graph: &mut Graph, params: &ParamVars, v: Var) -> Var {
    let projected = graph.linear(v, params["critic.w"], params["critic.b"]);
    graph.l2_normalize_rows(projected, 1e-12)
}

/// Tensor-level critic embedding.
pub fn critic_embed(v: &Tensor, params: &ParameterSet) -> Tensor {
    let mut graph = Graph::new();
    let pv = bind_all_const(&mut graph, params);
    let x = graph.constant(v.clone());
    let out = critic_embed_graph(&mut graph, &pv, x);
    graph.value(out).clone()
}

/// `KL(softmax(p) || softmax(q))` for flat logit vectors.
pub fn kl_with_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    assert_eq!(p_logits.len(), q_logits.len(), "kl length mismatch");
    let mut graph = Graph::new();
    let p = graph.constant(Tensor::new(vec![1, p_logits.len()], p_logits.to_vec()).unwrap());
    let q = graph.constant(Tensor::new(vec![1, q_logits.len()], q_logits.to_vec()).unwrap());
    let kl = graph.kl_rows(p, q);
    graph.value(kl).item()
}

fn check_normalized(t: &Tensor, what: &str) -> Result<()> {
    let (n, d) = (t.rows(), t.cols());
    for i in 0..n {
        let norm: f64 = t.data()[i * d..(i + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(CoberlError::Input(format!(
                "{what} row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

/// The masked contrastive objective over critic-embedded rows.
///
/// `x_out` and `y_in` are `[B*T, d]` vars with (approximately) unit rows;
/// `mask_ext` is a `[B, T]` 0/1 tensor. The reference computation adds the
/// invariance penalty unweighted; `kl_weight` scales it and is 1 by default.
/// Returns `(total, invariance-penalty contribution)` as scalar vars — the
/// penalty output is only for metrics.
pub fn compute_aux_loss_graph_weighted(
    graph: &mut Graph,
    x_out: Var,
    y_in: Var,
    mask_ext: &Tensor,
    batch: usize,
    t_len: usize,
    kl_weight: f64,
) -> Result<(Var, Var)> {
    let n = batch * t_len;
    if graph.value(x_out).rows() != n || graph.value(y_in).rows() != n {
        return Err(CoberlError::Input(format!(
            "aux loss expects {} rows, got {} and {}",
            n,
            graph.value(x_out).rows(),
            graph.value(y_in).rows()
        )));
    }
    if graph.value(x_out).cols() != graph.value(y_in).cols() {
        return Err(CoberlError::Input("embedding width mismatch".into()));
    }
    if mask_ext.shape() != [batch, t_len] {
        return Err(CoberlError::Input(format!(
            "mask_ext shape {:?} != [{batch}, {t_len}]",
            mask_ext.shape()
        )));
    }
    check_normalized(graph.value(x_out), "x_out")?;
    check_normalized(graph.value(y_in), "y_in")?;

    let x = graph.l2_normalize_rows(x_out, 1e-12);
    let y = graph.l2_normalize_rows(y_in, 1e-12);

    let logits_11 = graph.matmul_t(x, x, false, true);
    let logits_22 = graph.matmul_t(y, y, false, true);
    let logits_12 = graph.matmul_t(x, y, false, true);
    let logits_21 = graph.matmul_t(y, x, false, true);

    // invariance penalty on the unmasked logits
    let sg_11 = graph.stop_gradient(logits_11);
    let sg_12 = graph.stop_gradient(logits_12);
    let sg_21 = graph.stop_gradient(logits_21);
    let k1 = graph.kl_rows(sg_11, logits_22);
    let k2 = graph.kl_rows(sg_12, logits_22);
    let k3 = graph.kl_rows(sg_21, logits_11);
    let k4 = graph.kl_rows(sg_12, logits_21);
    let mut inv = graph.add(k1, k2);
    inv = graph.add(inv, k3);
    inv = graph.add(inv, k4);
    let inv = graph.scale(inv, 0.25 * kl_weight);

    // suppress self pairs, then InfoNCE over [cross || within] logits
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let l11 = graph.add_masked_const(logits_11, eye.clone(), SELF_PAIR_SUPPRESSION);
    let l22 = graph.add_masked_const(logits_22, eye, SELF_PAIR_SUPPRESSION);
    let l_1211 = graph.concat_cols(&[logits_12, l11]);
    let l_2122 = graph.concat_cols(&[logits_21, l22]);
    let ls_12 = graph.log_softmax_rows(l_1211);
    let ls_21 = graph.log_softmax_rows(l_2122);
    let aligned: Vec<usize> = (0..n).collect();
    let pick_12 = graph.select_col_per_row(ls_12, &aligned);
    let pick_21 = graph.select_col_per_row(ls_21, &aligned);
    let loss_12 = graph.scale(pick_12, -1.0);
    let loss_21 = graph.scale(pick_21, -1.0);

    let mask_col = mask_ext
        .clone()
        .reshape(vec![n, 1])
        .expect("mask reshape");
    let nce = graph.add(loss_12, loss_21);
    let per_pos = graph.add(nce, inv);
    let masked = graph.mul_const(per_pos, mask_col.clone());
    let total = graph.mean_all(masked);

    let inv_masked = graph.mul_const(inv, mask_col);
    let inv_total = graph.mean_all(inv_masked);
    Ok((total, inv_total))
}

/// The reference form: penalty added unweighted.
pub fn compute_aux_loss_graph(
    graph: &mut Graph,
    x_out: Var,
    y_in: Var,
    mask_ext: &Tensor,
    batch: usize,
    t_len: usize,
) -> Result<(Var, Var)> {
    compute_aux_loss_graph_weighted(graph, x_out, y_in, mask_ext, batch, t_len, 1.0)
}

/// Tensor-level aux loss for already-embedded inputs.
pub fn compute_aux_loss(
    x_out: &Tensor,
    y_in: &Tensor,
    mask_ext: &Tensor,
    batch: usize,
    t_len: usize,
) -> Result<f64> {
    let mut graph = Graph::new();
    let x = graph.constant(x_out.clone());
    let y = graph.constant(y_in.clone());
    let (total, _) = compute_aux_loss_graph(&mut graph, x, y, mask_ext, batch, t_len)?;
    Ok(graph.value(total).item())
}
