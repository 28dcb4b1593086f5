//! Tape construction for the graph Transformer forward pass and exact
//! reverse-mode gradients.

use super::*;
use crate::autodiff::{NodeId, Tape};
use crate::graph_core::{common_neighbor_counts, DistanceMatrix};
use crate::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dropout rates at the three training-time sites; all zero at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub attention: f64,
    pub ffn: f64,
    pub gnn: f64,
}

impl DropoutRates {
    pub const ZERO: DropoutRates = DropoutRates { attention: 0.0, ffn: 0.0, gnn: 0.0 };
}

/// Training targets; the variant selects the task.
#[derive(Debug, Clone)]
pub enum Targets<'a> {
    Node { labels: &'a [usize], mask: &'a [bool] },
    Graph { target: f64 },
}

/// Per-block activations and attention matrices of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub block_inputs: Vec<Mat>,
    pub block_attentions: Vec<Vec<Mat>>,
    pub block_states: Vec<Mat>,
    pub final_states: Mat,
    /// Node-level readout (n x output_dim). The graph-level prediction is
    /// the row mean (the readout is affine, so pooling commutes with it).
    pub output: Mat,
}

impl ForwardTrace {
    /// Every attention row sums to 1 within `tol`.
    pub fn attention_rows_stochastic(&self, tol: f64) -> bool {
        self.block_attentions.iter().flatten().all(|a| {
            (0..a.rows).all(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs() <= tol)
        })
    }

    pub fn graph_prediction(&self) -> f64 {
        let n = self.output.rows as f64;
        self.output.data.iter().sum::<f64>() / (n * self.output.cols as f64)
    }
}

struct Builder<'m> {
    model: &'m GraphTransformerModel,
    tape: Tape,
    param_nodes: Vec<NodeId>,
    dropout: Option<(DropoutRates, ChaCha8Rng)>,
}

struct Built {
    x0: NodeId,
    block_inputs: Vec<NodeId>,
    block_attentions: Vec<Vec<NodeId>>,
    states: Vec<NodeId>,
    final_node: NodeId,
    output: NodeId,
}

impl<'m> Builder<'m> {
    fn new(model: &'m GraphTransformerModel, dropout: Option<(DropoutRates, u64)>) -> Self {
        let mut tape = Tape::new();
        let param_nodes = model
            .params
            .entries
            .iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect();
        Builder {
            model,
            tape,
            param_nodes,
            dropout: dropout.map(|(r, seed)| (r, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    fn param(&self, name: &str) -> NodeId {
        let idx = self
            .model
            .params
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.param_nodes[idx]
    }

    fn apply_dropout(&mut self, x: NodeId, site: fn(&DropoutRates) -> f64) -> NodeId {
        let Some((rates, rng)) = self.dropout.as_mut() else { return x };
        let p = site(rates);
        if p <= 0.0 {
            return x;
        }
        let v = self.tape.value(x);
        let keep = 1.0 / (1.0 - p);
        let mut mask = Mat::zeros(v.rows, v.cols);
        for m in &mut mask.data {
            *m = if rng.gen::<f64>() < p { 0.0 } else { keep };
        }
        let mask = self.tape.constant(mask);
        self.tape.mul_elem(x, mask)
    }

    /// X^0: raw features with LE/SVD columns concatenated then projected
    /// to d; DC degree embeddings added after the projection.
    fn build_x0(&mut self, g: &GraphInstance, precomp: &GraphPrecomp) -> NodeId {
        let mut parts = vec![self.tape.constant(g.features.clone())];
        if let Some(le) = &precomp.spectral {
            parts.push(self.tape.constant(le.clone()));
        }
        if let Some(svd) = &precomp.svd {
            parts.push(self.tape.constant(svd.clone()));
        }
        let cat = if parts.len() == 1 { parts[0] } else { self.tape.concat_cols(&parts) };
        let w = self.param("input.w");
        let b = self.param("input.b");
        let proj = self.tape.matmul(cat, w);
        let mut x0 = self.tape.add_row(proj, b);
        if self.model.typed.pe.dc {
            let max_b = self.model.config.max_distance_bucket as usize;
            let idx: Vec<usize> = precomp.degrees.iter().map(|&d| d.min(max_b)).collect();
            let z_in = self.param("pe.deg_in");
            let z_out = self.param("pe.deg_out");
            let gi = self.tape.gather_rows(z_in, &idx);
            let go = self.tape.gather_rows(z_out, &idx);
            x0 = self.tape.add(x0, gi);
            x0 = self.tape.add(x0, go);
        }
        x0
    }

    /// Sum of the enabled attention-bias terms; None when the set is empty.
    fn build_bias(&mut self, precomp: &GraphPrecomp) -> Option<NodeId> {
        let am = &self.model.typed.am;
        if am.is_empty() {
            return None;
        }
        let dists = precomp.dists.as_ref().expect("distances required for AM ops");
        let n = dists.n;
        let max_b = self.model.config.max_distance_bucket;
        let pair_buckets: Vec<usize> = (0..n * n)
            .map(|r| distance_bucket(dists.dist[r], max_b))
            .collect();
        let mut terms: Vec<NodeId> = Vec::new();
        if am.se {
            let table = self.param("am.se_table");
            let gathered = self.tape.gather_rows(table, &pair_buckets);
            terms.push(self.tape.reshape(gathered, n, n));
        }
        if am.pem {
            let cn = precomp.common_neighbors.as_ref().expect("common neighbors for PEM");
            let cn_idx: Vec<usize> = cn.iter().map(|&c| c.min(CN_CLAMP)).collect();
            let dist_table = self.param("am.pem_dist");
            let cn_table = self.param("am.pem_cn");
            let b = self.param("am.pem_b");
            let gd = self.tape.gather_rows(dist_table, &pair_buckets);
            let gc = self.tape.gather_rows(cn_table, &cn_idx);
            let psi = self.tape.concat_cols(&[gd, gc]);
            let dot = self.tape.matmul(psi, b);
            terms.push(self.tape.reshape(dot, n, n));
        }
        if am.mask {
            let m = self.model.config.mask_threshold;
            let mask = Mat::from_fn(n, n, |i, j| {
                let d = dists.get(i, j);
                if d != crate::graph_core::UNREACHABLE && d <= m {
                    0.0
                } else {
                    MASK_CONST
                }
            });
            terms.push(self.tape.constant(mask));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.tape.add(acc, t);
        }
        Some(acc)
    }

    /// Eq. (1)-(2): multi-head attention with shared additive bias and
    /// the residual connection.
    fn mha(&mut self, l: usize, x: NodeId, bias: Option<NodeId>) -> (NodeId, Vec<NodeId>) {
        let scale = 1.0 / (self.model.scale.hidden_dim as f64).sqrt();
        let mut head_outs = Vec::new();
        let mut attns = Vec::new();
        for h in 0..self.model.scale.heads {
            let wq = self.param(&format!("block{l}.head{h}.wq"));
            let wk = self.param(&format!("block{l}.head{h}.wk"));
            let wv = self.param(&format!("block{l}.head{h}.wv"));
            let q = self.tape.matmul(x, wq);
            let k = self.tape.matmul(x, wk);
            let kt = self.tape.transpose(k);
            let raw = self.tape.matmul(q, kt);
            let mut scores = self.tape.scale(raw, scale);
            if let Some(b) = bias {
                scores = self.tape.add(scores, b);
            }
            let att = self.tape.softmax_rows(scores);
            attns.push(att);
            let att_d = self.apply_dropout(att, |r| r.attention);
            let v = self.tape.matmul(x, wv);
            head_outs.push(self.tape.matmul(att_d, v));
        }
        let cat = self.tape.concat_cols(&head_outs);
        let wo = self.param(&format!("block{l}.wo"));
        let proj = self.tape.matmul(cat, wo);
        (self.tape.add(proj, x), attns)
    }

    /// Eq. (3): position-wise FFN with GELU.
    fn ffn(&mut self, l: usize, x: NodeId) -> NodeId {
        let w1 = self.param(&format!("block{l}.ffn.w1"));
        let b1 = self.param(&format!("block{l}.ffn.b1"));
        let w2 = self.param(&format!("block{l}.ffn.w2"));
        let b2 = self.param(&format!("block{l}.ffn.b2"));
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.gelu(h);
        let h = self.apply_dropout(h, |r| r.ffn);
        let out = self.tape.matmul(h, w2);
        self.tape.add_row(out, b2)
    }

    /// One round of the selected neighborhood aggregation.
    fn gnn(&mut self, l: usize, x: NodeId, precomp: &GraphPrecomp) -> NodeId {
        let kind = self.model.typed.gnn.expect("gnn() called without a GNN block");
        let out = match (kind, precomp.gnn.as_ref().expect("missing GNN precomp")) {
            (GnnKind::Gcn, GnnPrecomp::Gcn(norm)) => {
                let nc = self.tape.constant(norm.clone());
                let agg = self.tape.matmul(nc, x);
                let w = self.param(&format!("block{l}.gnn.w"));
                let lin = self.tape.matmul(agg, w);
                self.tape.relu(lin)
            }
            (GnnKind::Sage, GnnPrecomp::Sage(mean)) => {
                let mc = self.tape.constant(mean.clone());
                let nbr = self.tape.matmul(mc, x);
                let cat = self.tape.concat_cols(&[x, nbr]);
                let w = self.param(&format!("block{l}.gnn.w"));
                let lin = self.tape.matmul(cat, w);
                self.tape.relu(lin)
            }
            (GnnKind::Gat, GnnPrecomp::GatMask(mask)) => {
                let w = self.param(&format!("block{l}.gnn.w"));
                let al = self.param(&format!("block{l}.gnn.a_l"));
                let ar = self.param(&format!("block{l}.gnn.a_r"));
                let h = self.tape.matmul(x, w);
                let n = self.tape.value(h).rows;
                let sl = self.tape.matmul(h, al);
                let sr = self.tape.matmul(h, ar);
                let srt = self.tape.transpose(sr);
                let bl = self.tape.broadcast_col(sl, n);
                let br = self.tape.broadcast_row(srt, n);
                let e = self.tape.add(bl, br);
                let e = self.tape.leaky_relu(e, 0.2);
                let mc = self.tape.constant(mask.clone());
                let e = self.tape.add(e, mc);
                let att = self.tape.softmax_rows(e);
                let agg = self.tape.matmul(att, h);
                self.tape.relu(agg)
            }
            (GnnKind::GatV2, GnnPrecomp::GatMask(mask)) => {
                let wl = self.param(&format!("block{l}.gnn.wl"));
                let wr = self.param(&format!("block{l}.gnn.wr"));
                let a = self.param(&format!("block{l}.gnn.a"));
                let u = self.tape.matmul(x, wl);
                let v = self.tape.matmul(x, wr);
                let n = self.tape.value(u).rows;
                // nonlinearity before the scoring vector
                let pair = self.tape.pairwise_row_sum(u, v);
                let pair = self.tape.leaky_relu(pair, 0.2);
                let s = self.tape.matmul(pair, a);
                let e = self.tape.reshape(s, n, n);
                let mc = self.tape.constant(mask.clone());
                let e = self.tape.add(e, mc);
                let att = self.tape.softmax_rows(e);
                let agg = self.tape.matmul(att, v);
                self.tape.relu(agg)
            }
            (GnnKind::Gin, GnnPrecomp::Gin(aggm)) => {
                let ac = self.tape.constant(aggm.clone());
                let agg = self.tape.matmul(ac, x);
                let w1 = self.param(&format!("block{l}.gnn.w1"));
                let b1 = self.param(&format!("block{l}.gnn.b1"));
                let w2 = self.param(&format!("block{l}.gnn.w2"));
                let b2 = self.param(&format!("block{l}.gnn.b2"));
                let h = self.tape.matmul(agg, w1);
                let h = self.tape.add_row(h, b1);
                let h = self.tape.relu(h);
                let out = self.tape.matmul(h, w2);
                self.tape.add_row(out, b2)
            }
            _ => unreachable!("GNN precomp does not match the spec's block kind"),
        };
        self.apply_dropout(out, |r| r.gnn)
    }

    /// One graph-Transformer block under the active combination mode.
    fn block(
        &mut self,
        l: usize,
        x: NodeId,
        bias: Option<NodeId>,
        precomp: &GraphPrecomp,
    ) -> (NodeId, Vec<NodeId>) {
        let has_gnn = self.model.typed.gnn.is_some();
        match self.model.typed.combination {
            // Before: GNN rounds already ran ahead of the topology loop
            _ if !has_gnn => {
                let (o, attns) = self.mha(l, x, bias);
                (self.ffn(l, o), attns)
            }
            Combination::Before => {
                let (o, attns) = self.mha(l, x, bias);
                (self.ffn(l, o), attns)
            }
            Combination::Alternate => {
                let xg = self.gnn(l, x, precomp);
                let (o, attns) = self.mha(l, xg, bias);
                (self.ffn(l, o), attns)
            }
            Combination::Parallel => {
                let (o, attns) = self.mha(l, x, bias);
                let gq = self.gnn(l, x, precomp);
                let merged = self.tape.add(o, gq);
                (self.ffn(l, merged), attns)
            }
        }
    }

    fn build(&mut self, g: &GraphInstance, precomp: &GraphPrecomp) -> Built {
        let layers = self.model.scale.layers;
        let mut x0 = self.build_x0(g, precomp);
        if self.model.typed.combination == Combination::Before && self.model.typed.gnn.is_some()
        {
            for l in 0..layers {
                x0 = self.gnn(l, x0, precomp);
            }
        }
        let bias = self.build_bias(precomp);

        let alpha = self.model.config.gcnii_alpha;
        let mut states = vec![x0];
        let mut block_inputs = Vec::new();
        let mut block_attentions = Vec::new();
        for l in 0..layers {
            let input = match self.model.typed.topology {
                Topology::Residual if l > 0 => self.tape.add(states[l], states[l - 1]),
                _ => states[l],
            };
            block_inputs.push(input);
            let (out, attns) = self.block(l, input, bias, precomp);
            let next = if self.model.typed.topology == Topology::Gcnii {
                let a0 = self.tape.scale(x0, alpha);
                let fo = self.tape.scale(out, 1.0 - alpha);
                self.tape.add(a0, fo)
            } else {
                out
            };
            states.push(next);
            block_attentions.push(attns);
        }

        let final_node = match self.model.typed.topology {
            Topology::Jk => {
                if layers == 1 {
                    states[0]
                } else {
                    let cat = self.tape.concat_cols(&states[..layers]);
                    let w = self.param("jk.w");
                    let b = self.param("jk.b");
                    let proj = self.tape.matmul(cat, w);
                    self.tape.add_row(proj, b)
                }
            }
            _ => states[layers],
        };

        let rw = self.param("readout.w");
        let rb = self.param("readout.b");
        let logits = self.tape.matmul(final_node, rw);
        let output = self.tape.add_row(logits, rb);

        Built { x0, block_inputs, block_attentions, states, final_node, output }
    }
}

/// X^0 for a graph: projected features plus the enabled positional terms.
pub fn apply_positional_embeddings(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    precomp: &GraphPrecomp,
) -> Result<Mat, ModelError> {
    if g.features.cols != model.input_dim {
        return Err(ModelError::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            g.features.cols, model.input_dim
        )));
    }
    let mut b = Builder::new(model, None);
    let x0 = b.build_x0(g, precomp);
    Ok(b.tape.value(x0).clone())
}

/// The shared additive attention-bias matrix for a graph.
pub fn attention_bias(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    dists: &DistanceMatrix,
) -> Mat {
    if model.typed.am.is_empty() {
        return Mat::zeros(g.n, g.n);
    }
    let precomp = GraphPrecomp {
        spectral: None,
        svd: None,
        degrees: g.degrees(),
        dists: Some(dists.clone()),
        common_neighbors: model.typed.am.pem.then(|| common_neighbor_counts(g)),
        gnn: None,
    };
    let mut b = Builder::new(model, None);
    let bias = b.build_bias(&precomp).expect("non-empty AM set");
    b.tape.value(bias).clone()
}

/// One Transformer block applied to an explicit state and bias.
pub fn transformer_block_forward(
    model: &GraphTransformerModel,
    block_index: usize,
    x: &Mat,
    bias: &Mat,
) -> Result<(Mat, Vec<Mat>), ModelError> {
    let mut b = Builder::new(model, None);
    let xn = b.tape.constant(x.clone());
    let bn = b.tape.constant(bias.clone());
    let (o, attns) = b.mha(block_index, xn, Some(bn));
    let out = b.ffn(block_index, o);
    if !b.tape.value(out).is_finite() {
        return Err(ModelError::NonFinite);
    }
    let attn_values = attns.iter().map(|&a| b.tape.value(a).clone()).collect();
    Ok((b.tape.value(out).clone(), attn_values))
}

/// One GNN round applied to an explicit state.
pub fn gnn_block_forward(
    model: &GraphTransformerModel,
    block_index: usize,
    x: &Mat,
    g: &GraphInstance,
) -> Result<Mat, ModelError> {
    if model.typed.gnn.is_none() {
        return Err(ModelError::NoGnnBlock);
    }
    let precomp = precompute(g, model)?;
    let mut b = Builder::new(model, None);
    let xn = b.tape.constant(x.clone());
    let out = b.gnn(block_index, xn, &precomp);
    Ok(b.tape.value(out).clone())
}

/// Full forward pass under the chosen topology and combination mode.
pub fn assemble_forward(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    precomp: &GraphPrecomp,
) -> Result<ForwardTrace, ModelError> {
    let mut b = Builder::new(model, None);
    let built = b.build(g, precomp);
    if !b.tape.value(built.output).is_finite() {
        return Err(ModelError::NonFinite);
    }
    let _ = built.x0;
    Ok(ForwardTrace {
        block_inputs: built.block_inputs.iter().map(|&n| b.tape.value(n).clone()).collect(),
        block_attentions: built
            .block_attentions
            .iter()
            .map(|v| v.iter().map(|&n| b.tape.value(n).clone()).collect())
            .collect(),
        block_states: built.states.iter().map(|&n| b.tape.value(n).clone()).collect(),
        final_states: b.tape.value(built.final_node).clone(),
        output: b.tape.value(built.output).clone(),
    })
}

/// Node-level readout without trace materialization.
pub fn forward_output(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    precomp: &GraphPrecomp,
) -> Result<Mat, ModelError> {
    let mut b = Builder::new(model, None);
    let built = b.build(g, precomp);
    let out = b.tape.value(built.output);
    if !out.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(out.clone())
}

fn attach_loss(
    builder: &mut Builder,
    output: NodeId,
    targets: &Targets,
) -> Result<NodeId, ModelError> {
    match targets {
        Targets::Node { labels, mask } => {
            if !mask.iter().any(|&m| m) {
                return Err(ModelError::EmptyMask);
            }
            Ok(builder.tape.nll_masked(output, labels, mask))
        }
        Targets::Graph { target } => {
            let pooled = builder.tape.mean_rows(output);
            Ok(builder
                .tape
                .mean_squared_error(pooled, Mat { rows: 1, cols: 1, data: vec![*target] }))
        }
    }
}

/// Loss and exact gradients for every parameter, optionally with training
/// dropout (rates plus a per-call mask seed).
pub fn loss_and_gradients_with(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    precomp: &GraphPrecomp,
    targets: &Targets,
    dropout: Option<(DropoutRates, u64)>,
) -> Result<(f64, ParameterSet), ModelError> {
    let mut b = Builder::new(model, dropout);
    let built = b.build(g, precomp);
    let loss = attach_loss(&mut b, built.output, targets)?;
    let loss_value = b.tape.value(loss).data[0];
    if !loss_value.is_finite() {
        return Err(ModelError::NonFinite);
    }
    let grads = b.tape.backward(loss);
    let mut out = model.params.zeros_like();
    for (i, node) in b.param_nodes.iter().enumerate() {
        out.entries[i].1 = grads[node.0].clone();
    }
    Ok((loss_value, out))
}

/// Evaluation-mode loss and gradients (no dropout).
pub fn loss_and_gradients(
    model: &GraphTransformerModel,
    g: &GraphInstance,
    targets: &Targets,
) -> Result<(f64, ParameterSet), ModelError> {
    let precomp = precompute(g, model)?;
    loss_and_gradients_with(model, g, &precomp, targets, None)
}
