//! Condition encoders that produce the six prefix rows.
//!
//! Row 1 embeds a binding-pocket point cloud through a stack of geometric
//! vector layers with a global attention step; rows 2..6 embed the scalar
//! chemistry properties through small per-property MLPs. Any condition can
//! be absent, in which case its row is a learned null vector.
//!
//! Vector (3-component) node and edge features live in `(3n, channels)`
//! tensors, one spatial component per row, grouped three rows per node or
//! edge. All learned maps mix channels only (right multiplication), norms
//! contract the spatial rows, and gates are built from invariant scalars,
//! so scalar outputs are rotation-invariant and vector outputs rotate with
//! the input.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;

use crate::props::PropVec;
use crate::tensor::{Tensor, TensorError};

/// Scalar node feature width inside the pocket stack.
pub const POCKET_NODE_WIDTH: usize = 64;
/// Scalar edge feature width inside the pocket stack.
pub const POCKET_EDGE_WIDTH: usize = 32;
/// Stacked geometric layers in the pocket encoder.
pub const POCKET_LAYERS: usize = 3;
/// Neighbors per node before symmetrization.
pub const POCKET_KNN: usize = 8;
/// Radial basis bins for interatomic distances.
pub const RBF_BINS: usize = 16;
/// Candidate anchors must lie within this distance of a ligand reference.
pub const ANCHOR_RADIUS: f64 = 5.0;
/// Prefix rows, in order: pocket, vina, qed, sa, logp, lipinski.
pub const CONDITION_ROWS: usize = 6;

const RBF_SPAN: f64 = 10.0;
const RBF_WIDTH: f64 = 0.625;
const VEC_CHANNELS: usize = 4;
const INIT_VEC_CHANNELS: usize = 2;
const ELEMENT_CLASSES: [&str; 9] = ["C", "N", "O", "S", "P", "F", "Cl", "Br", "I"];
const NODE_INPUT_WIDTH: usize = ELEMENT_CLASSES.len() + 2;
const PROP_HIDDEN: usize = 32;
const NORM_EPS: f32 = 1e-8;

pub const CONDITION_LABELS: [&str; CONDITION_ROWS] =
    ["pocket", "vina", "qed", "sa", "logp", "lipinski"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("pocket line {line}: {reason}")]
    BadPocketLine { line: usize, reason: String },
    #[error("pocket has no atoms")]
    EmptyPocket,
    #[error("no anchor available: pocket has no ligand reference points")]
    MissingAnchor,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Raw pocket file contents: atom records plus ligand reference points.
#[derive(Debug, Clone, PartialEq)]
pub struct PocketCloud {
    pub elements: Vec<String>,
    pub coords: Vec<[f64; 3]>,
    pub ligand_refs: Vec<[f64; 3]>,
}

/// Parses the plain-text pocket format: one `ELEMENT X Y Z` per line,
/// `#`-prefixed comment lines, and an optional `LIGAND` sentinel after
/// which each line is a reference point (three floats, optionally preceded
/// by an element symbol that is ignored).
pub fn parse_pocket_file(text: &str) -> Result<PocketCloud, EncoderError> {
    let mut cloud =
        PocketCloud { elements: Vec::new(), coords: Vec::new(), ligand_refs: Vec::new() };
    let mut in_ligand = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "LIGAND" {
            in_ligand = true;
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| EncoderError::BadPocketLine { line: idx + 1, reason };
        if in_ligand {
            let nums = if fields.len() == 3 {
                &fields[..]
            } else if fields.len() == 4 {
                &fields[1..]
            } else {
                return Err(bad(format!("expected 3 or 4 fields, got {}", fields.len())));
            };
            cloud.ligand_refs.push(parse_point(nums, idx + 1)?);
        } else {
            if fields.len() != 4 {
                return Err(bad(format!("expected ELEMENT X Y Z, got {} fields", fields.len())));
            }
            cloud.elements.push(fields[0].to_string());
            cloud.coords.push(parse_point(&fields[1..], idx + 1)?);
        }
    }
    Ok(cloud)
}

fn parse_point(fields: &[&str], line: usize) -> Result<[f64; 3], EncoderError> {
    let mut p = [0.0f64; 3];
    for (k, f) in fields.iter().enumerate() {
        let v: f64 = f.parse().map_err(|_| EncoderError::BadPocketLine {
            line,
            reason: format!("bad coordinate {f:?}"),
        })?;
        if !v.is_finite() {
            return Err(EncoderError::BadPocketLine {
                line,
                reason: format!("coordinate {f:?} is not finite"),
            });
        }
        p[k] = v;
    }
    Ok(p)
}

/// Pocket atoms with a symmetrized k-nearest-neighbor edge set.
#[derive(Debug, Clone)]
pub struct PocketGraph {
    pub elements: Vec<String>,
    pub coords: Vec<[f64; 3]>,
    /// Directed edges, sorted; (i, j) present iff (j, i) is.
    pub edges: Vec<(usize, usize)>,
    pub anchor: Option<usize>,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl PocketGraph {
    pub fn build(cloud: &PocketCloud) -> Result<PocketGraph, EncoderError> {
        let n = cloud.coords.len();
        if n == 0 {
            return Err(EncoderError::EmptyPocket);
        }
        let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                let da = dist(cloud.coords[i], cloud.coords[a]);
                let db = dist(cloud.coords[i], cloud.coords[b]);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            for &j in order.iter().take(POCKET_KNN) {
                set.insert((i, j));
                set.insert((j, i));
            }
        }
        Ok(PocketGraph {
            elements: cloud.elements.clone(),
            coords: cloud.coords.clone(),
            edges: set.into_iter().collect(),
            anchor: None,
        })
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }
}

/// Training-time anchor: a seeded uniform pick among pocket atoms within
/// [`ANCHOR_RADIUS`] of any ligand reference point. Falls back to the
/// nearest-to-centroid rule when nothing is in range.
pub fn select_anchor_training<R: Rng>(
    g: &PocketGraph,
    refs: &[[f64; 3]],
    rng: &mut R,
) -> Result<usize, EncoderError> {
    if refs.is_empty() {
        return Err(EncoderError::MissingAnchor);
    }
    let near: Vec<usize> = (0..g.n())
        .filter(|&i| refs.iter().any(|&r| dist(g.coords[i], r) <= ANCHOR_RADIUS))
        .collect();
    if near.is_empty() {
        return select_anchor_inference(g, refs);
    }
    Ok(near[rng.gen_range(0..near.len())])
}

/// Inference-time anchor: the pocket atom nearest the ligand reference
/// centroid.
pub fn select_anchor_inference(g: &PocketGraph, refs: &[[f64; 3]]) -> Result<usize, EncoderError> {
    if refs.is_empty() {
        return Err(EncoderError::MissingAnchor);
    }
    let m = refs.len() as f64;
    let centroid = [
        refs.iter().map(|r| r[0]).sum::<f64>() / m,
        refs.iter().map(|r| r[1]).sum::<f64>() / m,
        refs.iter().map(|r| r[2]).sum::<f64>() / m,
    ];
    Ok((0..g.n())
        .min_by(|&a, &b| {
            let da = dist(g.coords[a], centroid);
            let db = dist(g.coords[b], centroid);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
        .unwrap())
}

/// Gaussian radial basis over [0, 10] with fixed width.
pub fn rbf(d: f64) -> [f64; RBF_BINS] {
    let mut out = [0.0f64; RBF_BINS];
    for (k, slot) in out.iter_mut().enumerate() {
        let mu = RBF_SPAN * k as f64 / (RBF_BINS - 1) as f64;
        let z = (d - mu) / RBF_WIDTH;
        *slot = (-0.5 * z * z).exp();
    }
    out
}

fn element_class(symbol: &str) -> usize {
    ELEMENT_CLASSES.iter().position(|&e| e == symbol).unwrap_or(ELEMENT_CLASSES.len())
}

struct PocketState {
    node_s: Tensor,
    node_v: Tensor,
    edge_s: Option<Tensor>,
    edge_v: Option<Tensor>,
}

/// Two-layer perceptron on scalar features.
pub(crate) struct Mlp {
    pub(crate) w1: Tensor,
    pub(crate) b1: Tensor,
    pub(crate) w2: Tensor,
    pub(crate) b2: Tensor,
}

impl Mlp {
    pub(crate) fn init<R: Rng>(din: usize, hidden: usize, dout: usize, rng: &mut R) -> Mlp {
        Mlp {
            w1: Tensor::randn(din, hidden, 1.0 / (din as f32).sqrt(), rng).with_grad(),
            b1: Tensor::zeros(1, hidden).with_grad(),
            w2: Tensor::randn(hidden, dout, 1.0 / (hidden as f32).sqrt(), rng).with_grad(),
            b2: Tensor::zeros(1, dout).with_grad(),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.rows();
        let h = x.matmul(&self.w1).add(&self.b1.tile_rows(n)).relu();
        h.matmul(&self.w2).add(&self.b2.tile_rows(n))
    }

    pub(crate) fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// Geometric vector perceptron: maps (scalars, vectors) to (scalars,
/// vectors). Scalars see the channel-mixed vector norms; output vectors are
/// channel mixes gated by a sigmoid of the output scalars.
struct Gvp {
    w_h: Tensor,
    w_mu: Tensor,
    w_m: Tensor,
    b_m: Tensor,
    w_g: Tensor,
    b_g: Tensor,
}

impl Gvp {
    fn init<R: Rng>(ds_in: usize, nu_in: usize, ds_out: usize, nu_out: usize, rng: &mut R) -> Gvp {
        let nu_h = nu_in.max(nu_out);
        Gvp {
            w_h: Tensor::randn(nu_in, nu_h, 1.0 / (nu_in as f32).sqrt(), rng).with_grad(),
            w_mu: Tensor::randn(nu_h, nu_out, 1.0 / (nu_h as f32).sqrt(), rng).with_grad(),
            w_m: Tensor::randn(ds_in + nu_h, ds_out, 1.0 / ((ds_in + nu_h) as f32).sqrt(), rng)
                .with_grad(),
            b_m: Tensor::zeros(1, ds_out).with_grad(),
            w_g: Tensor::randn(ds_out, nu_out, 1.0 / (ds_out as f32).sqrt(), rng).with_grad(),
            b_g: Tensor::zeros(1, nu_out).with_grad(),
        }
    }

    /// `s`: (n, ds_in), `v`: (3n, nu_in) -> ((n, ds_out), (3n, nu_out)).
    fn forward(&self, s: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let n = s.rows();
        let v_h = v.matmul(&self.w_h);
        let norms = v_h.square().sum_row_groups(3).add_scalar(NORM_EPS).sqrt_elem();
        let s_out =
            s.concat_cols(&norms).matmul(&self.w_m).add(&self.b_m.tile_rows(n)).relu();
        let gate = s_out.matmul(&self.w_g).add(&self.b_g.tile_rows(n)).sigmoid();
        let v_out = v_h.matmul(&self.w_mu).mul(&gate.repeat_rows(3));
        (s_out, v_out)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wh"), self.w_h.clone()));
        out.push((format!("{prefix}.wmu"), self.w_mu.clone()));
        out.push((format!("{prefix}.wm"), self.w_m.clone()));
        out.push((format!("{prefix}.bm"), self.b_m.clone()));
        out.push((format!("{prefix}.wg"), self.w_g.clone()));
        out.push((format!("{prefix}.bg"), self.b_g.clone()));
    }
}

/// Feature widths of the pocket stack. The defaults are the production
/// sizes; narrow stacks keep finite-difference gradient checks above the
/// f32 noise floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PocketDims {
    pub node: usize,
    pub edge: usize,
    pub vec: usize,
}

impl Default for PocketDims {
    fn default() -> Self {
        PocketDims { node: POCKET_NODE_WIDTH, edge: POCKET_EDGE_WIDTH, vec: VEC_CHANNELS }
    }
}

/// One pocket layer: local message passing over the k-NN graph followed by
/// a global attention mix whose logits contract vector features over the
/// spatial axis, keeping them rotation-invariant.
struct GvfLayer {
    dims: PocketDims,
    node_tf: Gvp,
    edge_tf: Gvp,
    msg_gate: Mlp,
    vec_gate_edge: Mlp,
    vec_gate_node: Mlp,
    msg_tf: Gvp,
    w_q: Tensor,
    w_k: Tensor,
    ffn_node: Mlp,
    ffn_edge: Mlp,
}

impl GvfLayer {
    fn init<R: Rng>(
        ds_in: usize,
        nu_in: usize,
        de_in: usize,
        ne_in: usize,
        dims: PocketDims,
        rng: &mut R,
    ) -> GvfLayer {
        let d = dims.node;
        let de = dims.edge;
        let nu = dims.vec;
        GvfLayer {
            dims,
            node_tf: Gvp::init(ds_in, nu_in, d, nu, rng),
            edge_tf: Gvp::init(de_in, ne_in, de, nu, rng),
            msg_gate: Mlp::init(de, de, d, rng),
            vec_gate_edge: Mlp::init(de, de, nu, rng),
            vec_gate_node: Mlp::init(d, de, nu, rng),
            msg_tf: Gvp::init(d, nu, d, nu, rng),
            w_q: Tensor::randn(nu, nu, 1.0 / (nu as f32).sqrt(), rng).with_grad(),
            w_k: Tensor::randn(nu, nu, 1.0 / (nu as f32).sqrt(), rng).with_grad(),
            ffn_node: Mlp::init(d, d, d, rng),
            ffn_edge: Mlp::init(d + de, de, de, rng),
        }
    }

    fn forward(&self, g: &PocketGraph, state: &PocketState) -> PocketState {
        let n = g.n();
        let (vs, vv) = self.node_tf.forward(&state.node_s, &state.node_v);
        let d = self.dims.node;
        let nu = self.dims.vec;

        let (msg_s, msg_v, es, ev) = match (&state.edge_s, &state.edge_v) {
            (Some(e_s), Some(e_v)) => {
                let (es, ev) = self.edge_tf.forward(e_s, e_v);
                let dst: Vec<usize> = g.edges.iter().map(|&(_, j)| j).collect();
                let src: Vec<usize> = g.edges.iter().map(|&(i, _)| i).collect();
                let dst3 = triple_indices(&dst);
                let src3 = triple_indices(&src);
                let vj_s = vs.select_rows(&Rc::new(dst));
                let vj_v = vv.select_rows(&Rc::new(dst3));
                let m_s = vj_s.mul(&self.msg_gate.forward(&es));
                let m_v = vj_v
                    .mul(&self.vec_gate_edge.forward(&es).repeat_rows(3))
                    .add(&ev.mul(&self.vec_gate_node.forward(&vj_s).repeat_rows(3)));
                let (gm_s, gm_v) = self.msg_tf.forward(&m_s, &m_v);
                (
                    gm_s.scatter_add_rows(&Rc::new(src), n),
                    gm_v.scatter_add_rows(&Rc::new(src3), 3 * n),
                    Some(es),
                    Some(ev),
                )
            }
            // No edges: every neighborhood sum is zero.
            _ => (Tensor::zeros(n, d), Tensor::zeros(3 * n, nu), None, None),
        };

        let s1 = vs.add(&msg_s);
        let v1 = vv.add(&msg_v);

        let q = v1.matmul(&self.w_q).reshape(n, 3 * nu);
        let k = v1.matmul(&self.w_k).reshape(n, 3 * nu);
        let logits = q.matmul(&k.transpose()).scale(1.0 / ((3 * nu) as f32).sqrt());
        let mixed = logits.softmax_rows().matmul(&s1);
        let s2 = self.ffn_node.forward(&mixed);

        let e2 = es.map(|es| {
            let src: Vec<usize> = g.edges.iter().map(|&(i, _)| i).collect();
            self.ffn_edge.forward(&mixed.select_rows(&Rc::new(src)).concat_cols(&es))
        });

        PocketState { node_s: s2, node_v: v1, edge_s: e2, edge_v: ev }
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.node_tf.push_params(&format!("{prefix}.node"), out);
        self.edge_tf.push_params(&format!("{prefix}.edge"), out);
        self.msg_gate.push_params(&format!("{prefix}.msg_gate"), out);
        self.vec_gate_edge.push_params(&format!("{prefix}.vgate_e"), out);
        self.vec_gate_node.push_params(&format!("{prefix}.vgate_n"), out);
        self.msg_tf.push_params(&format!("{prefix}.msg"), out);
        out.push((format!("{prefix}.wq"), self.w_q.clone()));
        out.push((format!("{prefix}.wk"), self.w_k.clone()));
        self.ffn_node.push_params(&format!("{prefix}.ffn_node"), out);
        self.ffn_edge.push_params(&format!("{prefix}.ffn_edge"), out);
    }
}

fn triple_indices(idx: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        out.extend_from_slice(&[3 * i, 3 * i + 1, 3 * i + 2]);
    }
    out
}

/// Stacked geometric layers plus anchor-attention pooling and a projection
/// to the model width.
pub struct PocketEncoder {
    layers: Vec<GvfLayer>,
    att: Mlp,
    proj_w: Tensor,
    proj_b: Tensor,
}

impl PocketEncoder {
    pub fn init<R: Rng>(d_model: usize, n_layers: usize, rng: &mut R) -> PocketEncoder {
        Self::init_with_dims(d_model, n_layers, PocketDims::default(), rng)
    }

    pub fn init_with_dims<R: Rng>(
        d_model: usize,
        n_layers: usize,
        dims: PocketDims,
        rng: &mut R,
    ) -> PocketEncoder {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            if l == 0 {
                layers.push(GvfLayer::init(
                    NODE_INPUT_WIDTH,
                    INIT_VEC_CHANNELS,
                    RBF_BINS,
                    1,
                    dims,
                    rng,
                ));
            } else {
                layers.push(GvfLayer::init(dims.node, dims.vec, dims.edge, dims.vec, dims, rng));
            }
        }
        PocketEncoder {
            layers,
            att: Mlp::init(RBF_BINS + 2 * dims.node, dims.node, 1, rng),
            proj_w: Tensor::randn(dims.node, d_model, 1.0 / (dims.node as f32).sqrt(), rng)
                .with_grad(),
            proj_b: Tensor::zeros(1, d_model).with_grad(),
        }
    }

    /// Fixed featurization: element class one-hot plus degree for scalars;
    /// centroid offset and mean neighbor offset as the two vector channels.
    /// Everything is built from relative positions, so a rigid translation
    /// changes nothing.
    fn initial_state(&self, g: &PocketGraph) -> PocketState {
        let n = g.n();
        let mut centroid = [0.0f64; 3];
        for c in &g.coords {
            for k in 0..3 {
                centroid[k] += c[k] / n as f64;
            }
        }
        let mut deg = vec![0usize; n];
        let mut nbr_sum = vec![[0.0f64; 3]; n];
        for &(i, j) in &g.edges {
            deg[i] += 1;
            for k in 0..3 {
                nbr_sum[i][k] += g.coords[j][k] - g.coords[i][k];
            }
        }

        let mut s = vec![0.0f32; n * NODE_INPUT_WIDTH];
        let mut v = vec![0.0f32; 3 * n * INIT_VEC_CHANNELS];
        for i in 0..n {
            s[i * NODE_INPUT_WIDTH + element_class(&g.elements[i])] = 1.0;
            s[i * NODE_INPUT_WIDTH + ELEMENT_CLASSES.len()] = 1.0;
            s[i * NODE_INPUT_WIDTH + ELEMENT_CLASSES.len() + 1] =
                deg[i] as f32 / POCKET_KNN as f32;
            for k in 0..3 {
                v[(3 * i + k) * INIT_VEC_CHANNELS] = (g.coords[i][k] - centroid[k]) as f32;
                if deg[i] > 0 {
                    v[(3 * i + k) * INIT_VEC_CHANNELS + 1] =
                        (nbr_sum[i][k] / deg[i] as f64) as f32;
                }
            }
        }

        let (edge_s, edge_v) = if g.edges.is_empty() {
            (None, None)
        } else {
            let ne = g.edges.len();
            let mut es = vec![0.0f32; ne * RBF_BINS];
            let mut ev = vec![0.0f32; 3 * ne];
            for (e, &(i, j)) in g.edges.iter().enumerate() {
                let d = dist(g.coords[i], g.coords[j]);
                for (b, w) in rbf(d).into_iter().enumerate() {
                    es[e * RBF_BINS + b] = w as f32;
                }
                if d > 0.0 {
                    for k in 0..3 {
                        ev[3 * e + k] = ((g.coords[j][k] - g.coords[i][k]) / d) as f32;
                    }
                }
            }
            (
                Some(Tensor::from_vec(g.edges.len(), RBF_BINS, es)),
                Some(Tensor::from_vec(3 * g.edges.len(), 1, ev)),
            )
        };

        PocketState {
            node_s: Tensor::from_vec(n, NODE_INPUT_WIDTH, s),
            node_v: Tensor::from_vec(3 * n, INIT_VEC_CHANNELS, v),
            edge_s,
            edge_v,
        }
    }

    fn run_layers(&self, g: &PocketGraph) -> PocketState {
        let mut state = self.initial_state(g);
        for layer in &self.layers {
            state = layer.forward(g, &state);
        }
        state
    }

    /// Node features after the full stack: scalars as one row per node,
    /// vectors packed three rows per node (x, y, z), one column per channel.
    /// Scalars are rotation-invariant; vectors rotate with the coordinates.
    pub fn node_features(&self, g: &PocketGraph) -> (Tensor, Tensor) {
        let state = self.run_layers(g);
        (state.node_s, state.node_v)
    }

    /// Pools node features into a single row via softmax attention from the
    /// anchor, then projects to the model width.
    pub fn embed(&self, g: &PocketGraph) -> Result<Tensor, EncoderError> {
        let anchor = g.anchor.ok_or(EncoderError::MissingAnchor)?;
        let n = g.n();
        let state = self.run_layers(g);
        let v = &state.node_s;
        let vi = v.slice_rows(anchor, 1);

        let mut rbf_rows = vec![0.0f32; n * RBF_BINS];
        for j in 0..n {
            let d = dist(g.coords[anchor], g.coords[j]);
            for (b, w) in rbf(d).into_iter().enumerate() {
                rbf_rows[j * RBF_BINS + b] = w as f32;
            }
        }
        let att_in =
            Tensor::from_vec(n, RBF_BINS, rbf_rows).concat_cols(&vi.tile_rows(n)).concat_cols(v);
        let weights = self.att.forward(&att_in).reshape(1, n).softmax_rows();
        // The pooled sum weights copies of the anchor row, so it collapses
        // to the anchor feature; kept in this form to match the stated
        // pooling rule.
        let pooled = weights.matmul(&vi.tile_rows(n));
        Ok(pooled.matmul(&self.proj_w).add(&self.proj_b))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.push_params(&format!("pocket.l{l}"), &mut out);
        }
        self.att.push_params("pocket.att", &mut out);
        out.push(("pocket.proj.w".into(), self.proj_w.clone()));
        out.push(("pocket.proj.b".into(), self.proj_b.clone()));
        out
    }
}

/// All six condition encoders plus the learned null rows.
pub struct ConditionEncoder {
    pub pocket: PocketEncoder,
    props: Vec<Mlp>,
    nulls: Tensor,
    d_model: usize,
}

impl ConditionEncoder {
    pub fn init<R: Rng>(d_model: usize, rng: &mut R) -> ConditionEncoder {
        let pocket = PocketEncoder::init(d_model, POCKET_LAYERS, rng);
        let props = (0..CONDITION_ROWS - 1)
            .map(|_| Mlp::init(1, PROP_HIDDEN, d_model, rng))
            .collect();
        ConditionEncoder {
            pocket,
            props,
            nulls: Tensor::randn(CONDITION_ROWS, d_model, 1.0 / (d_model as f32).sqrt(), rng)
                .with_grad(),
            d_model,
        }
    }

    pub fn width(&self) -> usize {
        self.d_model
    }

    /// Rows 2..6: per-property MLP embeddings, null rows where masked.
    pub fn embed_properties(&self, c: &PropVec) -> Vec<Tensor> {
        let values = c.values();
        (0..CONDITION_ROWS - 1)
            .map(|i| {
                if c.mask[i] {
                    let x = Tensor::from_vec(1, 1, vec![values[i] as f32]);
                    self.props[i].forward(&x)
                } else {
                    self.nulls.slice_rows(i + 1, 1)
                }
            })
            .collect()
    }

    /// The full prefix matrix, rows in the fixed condition order. A missing
    /// pocket or masked property contributes its null row.
    pub fn assemble_prefix(
        &self,
        pocket: Option<&PocketGraph>,
        c: &PropVec,
    ) -> Result<Tensor, EncoderError> {
        let p1 = match pocket {
            Some(g) => self.pocket.embed(g)?,
            None => self.nulls.slice_rows(0, 1),
        };
        let mut prefix = p1;
        for row in self.embed_properties(c) {
            prefix = prefix.concat_rows(&row);
        }
        Ok(prefix)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.pocket.parameters();
        for (i, p) in self.props.iter().enumerate() {
            p.push_params(&format!("cond.{}", CONDITION_LABELS[i + 1]), &mut out);
        }
        out.push(("cond.null".into(), self.nulls.clone()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::props::PropVec;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cloud(n: usize, seed: u64) -> PocketCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let elems = ["C", "N", "O", "S"];
        let mut cloud =
            PocketCloud { elements: Vec::new(), coords: Vec::new(), ligand_refs: Vec::new() };
        for i in 0..n {
            cloud.elements.push(elems[i % elems.len()].to_string());
            cloud.coords.push([
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            ]);
        }
        cloud.ligand_refs.push([0.5, -0.5, 0.0]);
        cloud
    }

    fn graph_with_anchor(cloud: &PocketCloud) -> PocketGraph {
        let mut g = PocketGraph::build(cloud).unwrap();
        g.anchor = Some(select_anchor_inference(&g, &cloud.ligand_refs).unwrap());
        g
    }

    fn all_props() -> PropVec {
        PropVec {
            vina: -7.5,
            qed: 0.62,
            sa: 0.8,
            logp: 1.3,
            lipinski: 5,
            mask: [true; 5],
        }
    }

    #[test]
    fn pocket_file_parses_atoms_comments_and_refs() {
        let text = "# pocket extracted from a synthetic complex\n\
                    C 0.0 0.0 0.0\n\
                    N 1.5 0.0 0.0\n\
                    \n\
                    O 0.0 1.5 0.0\n\
                    LIGAND\n\
                    0.5 0.5 0.5\n\
                    C 1.0 1.0 1.0\n";
        let cloud = parse_pocket_file(text).unwrap();
        assert_eq!(cloud.elements, vec!["C", "N", "O"]);
        assert_eq!(cloud.coords[1], [1.5, 0.0, 0.0]);
        assert_eq!(cloud.ligand_refs, vec![[0.5, 0.5, 0.5], [1.0, 1.0, 1.0]]);
    }

    #[test]
    fn pocket_file_rejects_malformed_lines() {
        assert!(matches!(
            parse_pocket_file("C 0.0 0.0\n"),
            Err(EncoderError::BadPocketLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_pocket_file("C 0.0 x 0.0\n"),
            Err(EncoderError::BadPocketLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_pocket_file("# ok\nC 0.0 inf 0.0\n"),
            Err(EncoderError::BadPocketLine { line: 2, .. })
        ));
        assert!(matches!(
            PocketGraph::build(&parse_pocket_file("LIGAND\n0 0 0\n").unwrap()),
            Err(EncoderError::EmptyPocket)
        ));
    }

    #[test]
    fn knn_graph_is_symmetric_and_covers_nearest() {
        let cloud = test_cloud(12, 3);
        let g = PocketGraph::build(&cloud).unwrap();
        let set: BTreeSet<(usize, usize)> = g.edges.iter().copied().collect();
        for &(i, j) in &g.edges {
            assert!(set.contains(&(j, i)), "missing reverse of ({i},{j})");
            assert_ne!(i, j);
        }
        // Every node keeps an edge to each of its k nearest others.
        for i in 0..g.n() {
            let mut order: Vec<usize> = (0..g.n()).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                dist(cloud.coords[i], cloud.coords[a])
                    .partial_cmp(&dist(cloud.coords[i], cloud.coords[b]))
                    .unwrap()
            });
            for &j in order.iter().take(POCKET_KNN) {
                assert!(set.contains(&(i, j)));
            }
        }
    }

    #[test]
    fn single_atom_pocket_embeds_without_edges() {
        let cloud = PocketCloud {
            elements: vec!["C".into()],
            coords: vec![[1.0, 2.0, 3.0]],
            ligand_refs: vec![[1.0, 2.0, 3.0]],
        };
        let g = graph_with_anchor(&cloud);
        assert!(g.edges.is_empty());
        let enc = PocketEncoder::init(16, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(7));
        let row = enc.embed(&g).unwrap();
        assert_eq!(row.shape(), (1, 16));
        assert!(row.to_vec().iter().all(|x| x.is_finite()));
    }

    fn rotate(p: [f64; 3], r: &[[f64; 3]; 3]) -> [f64; 3] {
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Rodrigues rotation about a fixed skew axis.
    fn test_rotation() -> [[f64; 3]; 3] {
        let axis = [1.0f64, 2.0, -0.5];
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
        let theta: f64 = 1.1;
        let (c, s) = (theta.cos(), theta.sin());
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    fn transformed_cloud(
        cloud: &PocketCloud,
        r: Option<&[[f64; 3]; 3]>,
        t: [f64; 3],
    ) -> PocketCloud {
        let map = |p: &[f64; 3]| {
            let q = match r {
                Some(r) => rotate(*p, r),
                None => *p,
            };
            [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
        };
        PocketCloud {
            elements: cloud.elements.clone(),
            coords: cloud.coords.iter().map(map).collect(),
            ligand_refs: cloud.ligand_refs.iter().map(map).collect(),
        }
    }

    fn max_rel_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-6))
            .fold(0.0, f32::max)
    }

    #[test]
    fn rotation_leaves_scalars_and_rotates_vectors() {
        let cloud = test_cloud(10, 11);
        let r = test_rotation();
        let rot = transformed_cloud(&cloud, Some(&r), [0.0; 3]);
        let g = graph_with_anchor(&cloud);
        let g_rot = graph_with_anchor(&rot);
        assert_eq!(g.edges, g_rot.edges);
        assert_eq!(g.anchor, g_rot.anchor);

        let enc = PocketEncoder::init(24, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(21));
        let emb = enc.embed(&g).unwrap().to_vec();
        let emb_rot = enc.embed(&g_rot).unwrap().to_vec();
        assert!(max_rel_diff(&emb, &emb_rot) < 1e-5, "rel {}", max_rel_diff(&emb, &emb_rot));

        // Vector node features after the full stack rotate with the input.
        let v = enc.run_layers(&g).node_v.to_vec();
        let v_rot = enc.run_layers(&g_rot).node_v.to_vec();
        let nu = VEC_CHANNELS;
        let mut expected = vec![0.0f32; v.len()];
        for node in 0..g.n() {
            for ch in 0..nu {
                let p = [
                    v[(3 * node) * nu + ch] as f64,
                    v[(3 * node + 1) * nu + ch] as f64,
                    v[(3 * node + 2) * nu + ch] as f64,
                ];
                let q = rotate(p, &r);
                for k in 0..3 {
                    expected[(3 * node + k) * nu + ch] = q[k] as f32;
                }
            }
        }
        assert!(
            max_rel_diff(&expected, &v_rot) < 1e-4,
            "vector rel {}",
            max_rel_diff(&expected, &v_rot)
        );
    }

    #[test]
    fn translation_leaves_embedding_unchanged() {
        let cloud = test_cloud(9, 13);
        let moved = transformed_cloud(&cloud, None, [12.0, -7.0, 3.5]);
        let enc = PocketEncoder::init(24, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(29));
        let a = enc.embed(&graph_with_anchor(&cloud)).unwrap().to_vec();
        let b = enc.embed(&graph_with_anchor(&moved)).unwrap().to_vec();
        assert!(max_rel_diff(&a, &b) < 1e-5, "rel {}", max_rel_diff(&a, &b));
    }

    #[test]
    fn anchor_pooling_collapses_to_anchor_row() {
        let cloud = test_cloud(8, 17);
        let g = graph_with_anchor(&cloud);
        let enc = PocketEncoder::init(12, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(5));
        let emb = enc.embed(&g).unwrap();

        // Weighted sum of identical anchor copies with weights summing to 1.
        let state = enc.run_layers(&g);
        let vi = state.node_s.slice_rows(g.anchor.unwrap(), 1);
        let direct = vi.matmul(&enc.proj_w).add(&enc.proj_b);
        let rel = max_rel_diff(&emb.to_vec(), &direct.to_vec());
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn anchor_attention_weights_are_a_distribution() {
        let cloud = test_cloud(7, 19);
        let g = graph_with_anchor(&cloud);
        let enc = PocketEncoder::init(12, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(9));
        let state = enc.run_layers(&g);
        let v = &state.node_s;
        let vi = v.slice_rows(g.anchor.unwrap(), 1);
        let n = g.n();
        let mut rbf_rows = vec![0.0f32; n * RBF_BINS];
        for j in 0..n {
            let d = dist(g.coords[g.anchor.unwrap()], g.coords[j]);
            for (b, w) in rbf(d).into_iter().enumerate() {
                rbf_rows[j * RBF_BINS + b] = w as f32;
            }
        }
        let att_in =
            Tensor::from_vec(n, RBF_BINS, rbf_rows).concat_cols(&vi.tile_rows(n)).concat_cols(v);
        let w = enc.att.forward(&att_in).reshape(1, n).softmax_rows().to_vec();
        assert!(w.iter().all(|&x| x >= 0.0));
        let total: f64 = w.iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn training_anchor_stays_within_radius() {
        let mut cloud = test_cloud(10, 23);
        cloud.ligand_refs = vec![[0.0, 0.0, 0.0]];
        let g = PocketGraph::build(&cloud).unwrap();
        let near: Vec<usize> =
            (0..g.n()).filter(|&i| dist(g.coords[i], [0.0, 0.0, 0.0]) <= ANCHOR_RADIUS).collect();
        assert!(!near.is_empty());
        let mut seen = BTreeSet::new();
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = select_anchor_training(&g, &cloud.ligand_refs, &mut rng).unwrap();
            assert!(near.contains(&a));
            seen.insert(a);
        }
        if near.len() > 1 {
            assert!(seen.len() > 1, "sampling never left the first candidate");
        }
    }

    #[test]
    fn inference_anchor_is_nearest_to_ref_centroid() {
        let cloud = PocketCloud {
            elements: vec!["C".into(), "N".into(), "O".into()],
            coords: vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [10.0, 0.0, 0.0]],
            ligand_refs: vec![[3.0, 0.0, 0.0], [5.0, 0.0, 0.0]],
        };
        let g = PocketGraph::build(&cloud).unwrap();
        assert_eq!(select_anchor_inference(&g, &cloud.ligand_refs).unwrap(), 1);
        assert!(matches!(
            select_anchor_inference(&g, &[]),
            Err(EncoderError::MissingAnchor)
        ));
        // Out-of-range refs fall back to the nearest-centroid rule.
        let far = [[100.0, 0.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_anchor_training(&g, &far, &mut rng).unwrap(), 2);
    }

    #[test]
    fn rbf_peaks_at_each_center() {
        let bins = rbf(0.0);
        assert!((bins[0] - 1.0).abs() < 1e-12);
        // Center spacing is 10/15; at the third center the third bin peaks.
        let d = 2.0 * RBF_SPAN / (RBF_BINS - 1) as f64;
        let bins = rbf(d);
        assert!((bins[2] - 1.0).abs() < 1e-12);
        assert!(bins.iter().enumerate().all(|(k, &w)| k == 2 || w < 1.0));
    }

    #[test]
    fn masked_conditions_use_null_rows_exactly() {
        let enc = ConditionEncoder::init(16, &mut ChaCha8Rng::seed_from_u64(31));
        let mut c = all_props();
        c.mask = [false; 5];
        let prefix = enc.assemble_prefix(None, &c).unwrap();
        assert_eq!(prefix.shape(), (CONDITION_ROWS, 16));
        assert_eq!(prefix.to_vec(), enc.nulls.to_vec());
    }

    #[test]
    fn zero_weight_property_net_yields_its_bias() {
        let enc = ConditionEncoder::init(8, &mut ChaCha8Rng::seed_from_u64(37));
        let net = &enc.props[0];
        net.w1.set_data(&vec![0.0; net.w1.len()]);
        net.w2.set_data(&vec![0.0; net.w2.len()]);
        let bias: Vec<f32> = (0..8).map(|i| 0.25 * i as f32).collect();
        net.b2.set_data(&bias);
        for vina in [-12.0, 0.0, 3.5] {
            let mut c = all_props();
            c.vina = vina;
            assert_eq!(enc.embed_properties(&c)[0].to_vec(), bias);
        }
    }

    #[test]
    fn hand_set_property_net_matches_manual_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let net = Mlp::init(1, 2, 3, &mut rng);
        net.w1.set_data(&[0.8, -1.2]);
        net.b1.set_data(&[0.1, 0.3]);
        net.w2.set_data(&[1.0, 0.5, -0.5, 2.0, -1.0, 0.25]);
        net.b2.set_data(&[0.05, -0.05, 0.0]);
        let out = net.forward(&Tensor::from_vec(1, 1, vec![0.5])).to_vec();
        // Hidden: relu([0.4+0.1, -0.6+0.3]) = [0.5, 0.0].
        let expected = [0.5 * 1.0 + 0.05, 0.5 * 0.5 - 0.05, 0.5 * -0.5];
        for (a, e) in out.iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn prefix_rows_follow_canonical_order() {
        let enc = ConditionEncoder::init(8, &mut ChaCha8Rng::seed_from_u64(43));
        let c = all_props();
        let prefix = enc.assemble_prefix(None, &c).unwrap();
        assert_eq!(prefix.to_vec()[..8], enc.nulls.slice_rows(0, 1).to_vec()[..]);
        let rows = enc.embed_properties(&c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(
                prefix.slice_rows(i + 1, 1).to_vec(),
                row.to_vec(),
                "row {} ({})",
                i + 1,
                CONDITION_LABELS[i + 1]
            );
        }
        // Masking one property swaps in exactly that null row.
        let mut masked = c.clone();
        masked.mask[2] = false;
        let prefix2 = enc.assemble_prefix(None, &masked).unwrap();
        assert_eq!(prefix2.slice_rows(3, 1).to_vec(), enc.nulls.slice_rows(3, 1).to_vec());
        assert_eq!(prefix2.slice_rows(1, 1).to_vec(), prefix.slice_rows(1, 1).to_vec());
    }

    #[test]
    fn prefix_round_trips_through_container() {
        let enc = ConditionEncoder::init(12, &mut ChaCha8Rng::seed_from_u64(47));
        let params = enc.parameters();
        let mut buf = Vec::new();
        crate::tensor::store::write_container(&mut buf, serde_json::json!({}), &params).unwrap();
        let (_, loaded) = crate::tensor::store::read_container(&mut buf.as_slice()).unwrap();

        let cloud = test_cloud(6, 53);
        let g = graph_with_anchor(&cloud);
        let c = all_props();
        let before = enc.assemble_prefix(Some(&g), &c).unwrap().to_vec();

        let enc2 = ConditionEncoder::init(12, &mut ChaCha8Rng::seed_from_u64(999));
        for (name, t) in enc2.parameters() {
            let l = loaded.iter().find(|l| l.name == name).unwrap();
            assert_eq!((l.rows, l.cols), t.shape(), "{name}");
            t.set_data(&l.data);
        }
        let after = enc2.assemble_prefix(Some(&g), &c).unwrap().to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn embedding_is_deterministic() {
        let cloud = test_cloud(8, 59);
        let g = graph_with_anchor(&cloud);
        let enc = PocketEncoder::init(16, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(61));
        assert_eq!(enc.embed(&g).unwrap().to_vec(), enc.embed(&g).unwrap().to_vec());
        let enc2 = PocketEncoder::init(16, POCKET_LAYERS, &mut ChaCha8Rng::seed_from_u64(61));
        assert_eq!(enc.embed(&g).unwrap().to_vec(), enc2.embed(&g).unwrap().to_vec());
    }

    #[test]
    fn gradients_flow_through_pocket_path() {
        let cloud = test_cloud(4, 67);
        let g = graph_with_anchor(&cloud);
        // A narrow stack keeps the check above the f32 central-difference
        // noise floor: wide layers leave some per-element gradients tiny
        // through sign cancellation, and those drown in rounding noise.
        let dims = PocketDims { node: 8, edge: 8, vec: 2 };
        let enc = PocketEncoder::init_with_dims(6, 1, dims, &mut ChaCha8Rng::seed_from_u64(76));
        // Positive pre-relu biases keep units in their active region; a
        // kink inside the probe interval voids the comparison.
        for (name, t) in enc.parameters() {
            if name.ends_with(".b1") || name.ends_with(".bm") {
                t.set_data(&vec![0.5; t.len()]);
            }
        }
        // Probes span the scalar spine of the layer: message gate, vector
        // gate, post-attention FFN, output projection. The global attention
        // mixers are skipped; their true gradients at this scale stay below
        // the noise floor.
        let inputs = [
            enc.proj_w.clone(),
            enc.layers[0].ffn_node.b2.clone(),
            enc.layers[0].msg_gate.b2.clone(),
            enc.layers[0].vec_gate_edge.b2.clone(),
        ];
        let err = grad_check(|_| enc.embed(&g).unwrap().sum(), &inputs, 3e-3).unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn gradients_flow_through_property_path() {
        let enc = ConditionEncoder::init(5, &mut ChaCha8Rng::seed_from_u64(73));
        let mut c = all_props();
        c.mask = [true, false, true, true, true];
        let inputs = [enc.props[0].w2.clone(), enc.nulls.clone()];
        let err = grad_check(|_| enc.assemble_prefix(None, &c).unwrap().sum(), &inputs, 1e-2)
            .unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }
}
