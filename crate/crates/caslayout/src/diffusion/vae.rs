//! Bidirectional relation VAE: an encoder of in-out-attention blocks mapping
//! a sparse relation graph to node-aligned latent vectors, and a
//! self-attention decoder with one classification head per relation
//! category (each with a None output class).

use std::collections::BTreeMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{randn, Array, AttentionMask, Ctx, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention, NnError, ParamStore, TensorId};
use crate::relations::{RelationCategory, RelationGraph, RelationLabel};
use crate::scene::{Scene, LATENT_DIM};
use crate::sparse::{Zone, ZoneType};

/// KL regularization weight.
pub const KL_WEIGHT: f64 = 0.001;

const EDGE_PE_DIM: usize = 16;
const SUBCAT_UNION: usize = 16;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("edge references node `{0}` which is not in the scene")]
    DanglingEdge(String),
    #[error("{0}")]
    Input(String),
}

/// Encoder attention variants; the reduced modes back the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaeAttentionMode {
    InOut,
    InOnly,
    OutOnly,
}

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub class_count: usize,
    pub n_max: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mode: VaeAttentionMode,
}

impl VaeConfig {
    pub fn desk(class_count: usize, n_max: usize) -> Self {
        VaeConfig { class_count, n_max, width: 64, heads: 4, enc_blocks: 2, dec_blocks: 2, mode: VaeAttentionMode::InOut }
    }

    pub fn paper(class_count: usize, n_max: usize) -> Self {
        VaeConfig { class_count, n_max, width: 128, heads: 4, enc_blocks: 3, dec_blocks: 3, mode: VaeAttentionMode::InOut }
    }
}

struct EncBlock {
    ln_in: LayerNorm,
    cross_in: MultiHeadAttention,
    ln_out: LayerNorm,
    cross_out: MultiHeadAttention,
    ln_self: LayerNorm,
    attn_self: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

struct DecBlock {
    ln_self: LayerNorm,
    attn_self: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

pub struct VaeModel {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    node_class: Linear,
    node_obb: Linear,
    node_pe: Embedding,
    edge_pe: Embedding,
    edge_proj: Linear,
    enc_blocks: Vec<EncBlock>,
    mu_head: Linear,
    logvar_head: Linear,
    dec_in: Linear,
    dec_pe: Embedding,
    dec_blocks: Vec<DecBlock>,
    rel_heads: BTreeMap<RelationCategory, Mlp>,
}

impl VaeModel {
    pub fn new(cfg: VaeConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let node_class = Linear::new(&mut store, "vae.node_class", cfg.class_count, w, &mut rng);
        let node_obb = Linear::new(&mut store, "vae.node_obb", 8, w, &mut rng);
        let node_pe = Embedding::new(&mut store, "vae.node_pe", cfg.n_max, w, &mut rng);
        let edge_pe = Embedding::new(&mut store, "vae.edge_pe", cfg.n_max, EDGE_PE_DIM, &mut rng);
        let edge_in = 2 * EDGE_PE_DIM + RelationCategory::ALL.len() + SUBCAT_UNION;
        let edge_proj = Linear::new(&mut store, "vae.edge_proj", edge_in, w, &mut rng);
        let mut enc_blocks = Vec::new();
        for b in 0..cfg.enc_blocks {
            let p = format!("vae.enc{b}");
            enc_blocks.push(EncBlock {
                ln_in: LayerNorm::new(&mut store, &format!("{p}.ln_in"), w, &mut rng),
                cross_in: MultiHeadAttention::new(&mut store, &format!("{p}.cross_in"), w, w, cfg.heads, &mut rng),
                ln_out: LayerNorm::new(&mut store, &format!("{p}.ln_out"), w, &mut rng),
                cross_out: MultiHeadAttention::new(&mut store, &format!("{p}.cross_out"), w, w, cfg.heads, &mut rng),
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), w, &mut rng),
                attn_self: MultiHeadAttention::new(&mut store, &format!("{p}.self"), w, w, cfg.heads, &mut rng),
                ln_mlp: LayerNorm::new(&mut store, &format!("{p}.ln_mlp"), w, &mut rng),
                mlp: Mlp::new(&mut store, &format!("{p}.mlp"), w, 2 * w, w, &mut rng),
            });
        }
        let mu_head = Linear::new(&mut store, "vae.mu", w, LATENT_DIM, &mut rng);
        let logvar_head = Linear::new(&mut store, "vae.logvar", w, LATENT_DIM, &mut rng);
        let dec_in = Linear::new(&mut store, "vae.dec_in", LATENT_DIM, w, &mut rng);
        let dec_pe = Embedding::new(&mut store, "vae.dec_pe", cfg.n_max, w, &mut rng);
        let mut dec_blocks = Vec::new();
        for b in 0..cfg.dec_blocks {
            let p = format!("vae.dec{b}");
            dec_blocks.push(DecBlock {
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), w, &mut rng),
                attn_self: MultiHeadAttention::new(&mut store, &format!("{p}.self"), w, w, cfg.heads, &mut rng),
                ln_mlp: LayerNorm::new(&mut store, &format!("{p}.ln_mlp"), w, &mut rng),
                mlp: Mlp::new(&mut store, &format!("{p}.mlp"), w, 2 * w, w, &mut rng),
            });
        }
        let mut rel_heads = BTreeMap::new();
        for cat in RelationCategory::ALL {
            let out = cat.subcategory_count() + 1;
            rel_heads.insert(
                cat,
                Mlp::new(&mut store, &format!("vae.head_{}", crate::relations::category_name(cat)), 2 * w, w, out, &mut rng),
            );
        }
        VaeModel {
            cfg,
            store,
            node_class,
            node_obb,
            node_pe,
            edge_pe,
            edge_proj,
            enc_blocks,
            mu_head,
            logvar_head,
            dec_in,
            dec_pe,
            dec_blocks,
            rel_heads,
        }
    }
}

/// Node ordering and graph layout shared by encoder and decoder: occupied
/// scene slots in slot order.
pub struct GraphView {
    pub ids: Vec<String>,
    pub pe: Vec<usize>,
    pub class_onehot: Vec<Vec<f64>>,
    pub obb8: Vec<[f64; 8]>,
    pub edges: Vec<EdgeView>,
}

pub struct EdgeView {
    pub src_row: usize,
    pub dst_row: usize,
    pub category: RelationCategory,
    pub subcategory: usize,
}

/// Index into the 16-wide union one-hot of all subcategories.
fn subcat_union_index(label: &RelationLabel) -> usize {
    let offset = match label.category() {
        RelationCategory::Direction => 0,
        RelationCategory::Distance => 6,
        RelationCategory::Alignment => 9,
        RelationCategory::Symmetry => 12,
        RelationCategory::ArchDistance => 13,
    };
    offset + label.subcategory_index()
}

impl GraphView {
    /// Furniture nodes contribute only class and slot index; architectural
    /// nodes keep their boxes as conditions.
    pub fn build(scene: &Scene, graph: &RelationGraph) -> Result<GraphView, VaeError> {
        let mut rows: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ids = Vec::new();
        let mut pe = Vec::new();
        let mut class_onehot = Vec::new();
        let mut obb8 = Vec::new();
        for (slot, e) in scene.occupied() {
            rows.insert(e.id.as_str(), ids.len());
            ids.push(e.id.clone());
            pe.push(slot);
            let mut oh = vec![0.0; scene.vocab.class_count()];
            oh[e.class.index(&scene.vocab)] = 1.0;
            class_onehot.push(oh);
            let mut b = [0.0; 8];
            if e.class.is_arch() {
                b[..3].copy_from_slice(&e.obb.size);
                b[3..6].copy_from_slice(&e.obb.translation);
                b[6] = e.obb.rotation[0];
                b[7] = e.obb.rotation[1];
            }
            obb8.push(b);
        }
        let mut edges = Vec::new();
        for e in &graph.edges {
            let src_row = *rows.get(e.src.as_str()).ok_or_else(|| VaeError::DanglingEdge(e.src.clone()))?;
            let dst_row = *rows.get(e.dst.as_str()).ok_or_else(|| VaeError::DanglingEdge(e.dst.clone()))?;
            edges.push(EdgeView {
                src_row,
                dst_row,
                category: e.label.category(),
                subcategory: subcat_union_index(&e.label),
            });
        }
        Ok(GraphView { ids, pe, class_onehot, obb8, edges })
    }
}

/// Tape handles of one encoder pass.
pub struct VaeEncodeOut {
    pub mu: TensorId,
    pub logvar: TensorId,
    pub z: TensorId,
}

impl VaeModel {
    fn node_tokens(&self, ctx: &mut Ctx, view: &GraphView) -> Result<TensorId, VaeError> {
        let class = ctx.tape.constant(Array::from_rows(&view.class_onehot));
        let obbs = ctx.tape.constant(Array::from_rows(&view.obb8.iter().map(|b| b.to_vec()).collect::<Vec<_>>()));
        let a = self.node_class.forward(ctx, class)?;
        let b = self.node_obb.forward(ctx, obbs)?;
        let ab = ctx.tape.add(a, b)?;
        let p = self.node_pe.forward(ctx, &view.pe)?;
        Ok(ctx.tape.add(ab, p)?)
    }

    fn edge_tokens(&self, ctx: &mut Ctx, view: &GraphView) -> Result<Option<TensorId>, VaeError> {
        if view.edges.is_empty() {
            return Ok(None);
        }
        let src_pe: Vec<usize> = view.edges.iter().map(|e| view.pe[e.src_row]).collect();
        let dst_pe: Vec<usize> = view.edges.iter().map(|e| view.pe[e.dst_row]).collect();
        let src_emb = self.edge_pe.forward(ctx, &src_pe)?;
        let dst_emb = self.edge_pe.forward(ctx, &dst_pe)?;
        let mut feats = Array::zeros(view.edges.len(), RelationCategory::ALL.len() + SUBCAT_UNION);
        for (r, e) in view.edges.iter().enumerate() {
            let cat_idx = RelationCategory::ALL.iter().position(|c| *c == e.category).unwrap();
            feats.set(r, cat_idx, 1.0);
            feats.set(r, RelationCategory::ALL.len() + e.subcategory, 1.0);
        }
        let f = ctx.tape.constant(feats);
        let cat = ctx.tape.concat_cols(&[src_emb, dst_emb, f])?;
        Ok(Some(self.edge_proj.forward(ctx, cat)?))
    }

    /// Encoder: in-out cross attention over incoming then outgoing edge
    /// tokens, then node self-attention. With no edges the cross steps
    /// vanish and the encoder degenerates to self-attention.
    pub fn encode(
        &self,
        ctx: &mut Ctx,
        view: &GraphView,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VaeEncodeOut, VaeError> {
        let n = view.ids.len();
        let mut x = self.node_tokens(ctx, view)?;
        let edges = self.edge_tokens(ctx, view)?;
        let (mask_in, mask_out) = if edges.is_some() {
            let mut min = vec![vec![false; view.edges.len()]; n];
            let mut mout = vec![vec![false; view.edges.len()]; n];
            for (j, e) in view.edges.iter().enumerate() {
                min[e.dst_row][j] = true;
                mout[e.src_row][j] = true;
            }
            (Some(Rc::new(AttentionMask { valid: min })), Some(Rc::new(AttentionMask { valid: mout })))
        } else {
            (None, None)
        };
        for block in &self.enc_blocks {
            if let Some(kv) = edges {
                if self.cfg.mode != VaeAttentionMode::OutOnly {
                    let h = block.ln_in.forward(ctx, x)?;
                    let a = block.cross_in.forward(ctx, h, kv, mask_in.clone())?;
                    x = ctx.tape.add(x, a)?;
                }
                if self.cfg.mode != VaeAttentionMode::InOnly {
                    let h = block.ln_out.forward(ctx, x)?;
                    let a = block.cross_out.forward(ctx, h, kv, mask_out.clone())?;
                    x = ctx.tape.add(x, a)?;
                }
            }
            let h = block.ln_self.forward(ctx, x)?;
            let a = block.attn_self.forward(ctx, h, h, None)?;
            x = ctx.tape.add(x, a)?;
            let h = block.ln_mlp.forward(ctx, x)?;
            let m = block.mlp.forward(ctx, h)?;
            x = ctx.tape.add(x, m)?;
        }
        let mu = self.mu_head.forward(ctx, x)?;
        let logvar = self.logvar_head.forward(ctx, x)?;
        let z = match rng {
            Some(rng) => {
                // reparameterization: z = mu + exp(logvar / 2) * eps
                let mut eps = Array::zeros(n, LATENT_DIM);
                for v in eps.data.iter_mut() {
                    *v = randn(rng);
                }
                let half = ctx.tape.scale(logvar, 0.5);
                let sigma = ctx.tape.exp(half);
                let e = ctx.tape.constant(eps);
                let se = ctx.tape.mul(sigma, e)?;
                ctx.tape.add(mu, se)?
            }
            None => mu,
        };
        Ok(VaeEncodeOut { mu, logvar, z })
    }

    /// Deterministic latents (z = mu) as plain per-node vectors.
    pub fn encode_deterministic(&self, scene: &Scene, graph: &RelationGraph) -> Result<Vec<Vec<f64>>, VaeError> {
        let view = GraphView::build(scene, graph)?;
        let mut ctx = Ctx::new(&self.store);
        let out = self.encode(&mut ctx, &view, None)?;
        let mu = ctx.tape.value(out.mu);
        Ok((0..mu.rows).map(|r| mu.row(r).to_vec()).collect())
    }

    /// Decoder trunk and per-candidate logits: node features are produced by
    /// self-attention blocks over the latents, then the two endpoint feature
    /// rows of each candidate pair feed the category head.
    pub fn decode(
        &self,
        ctx: &mut Ctx,
        z: TensorId,
        pe: &[usize],
        candidates: &[Candidate],
    ) -> Result<BTreeMap<RelationCategory, TensorId>, VaeError> {
        let mut x = self.dec_in.forward(ctx, z)?;
        let p = self.dec_pe.forward(ctx, pe)?;
        x = ctx.tape.add(x, p)?;
        for block in &self.dec_blocks {
            let h = block.ln_self.forward(ctx, x)?;
            let a = block.attn_self.forward(ctx, h, h, None)?;
            x = ctx.tape.add(x, a)?;
            let h = block.ln_mlp.forward(ctx, x)?;
            let m = block.mlp.forward(ctx, h)?;
            x = ctx.tape.add(x, m)?;
        }
        let mut out = BTreeMap::new();
        for cat in RelationCategory::ALL {
            let rows: Vec<usize> = candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.category == cat)
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let src_rows: Vec<usize> = rows.iter().map(|&i| candidates[i].src_row).collect();
            let dst_rows: Vec<usize> = rows.iter().map(|&i| candidates[i].dst_row).collect();
            let src_feat = gather_token_rows(ctx, x, &src_rows)?;
            let dst_feat = gather_token_rows(ctx, x, &dst_rows)?;
            let pair = ctx.tape.concat_cols(&[src_feat, dst_feat])?;
            let logits = self.rel_heads[&cat].forward(ctx, pair)?;
            out.insert(cat, logits);
        }
        Ok(out)
    }
}

/// Select token rows by index through a constant 0/1 matrix so gradients
/// flow back to the tokens.
fn gather_token_rows(ctx: &mut Ctx, x: TensorId, rows: &[usize]) -> Result<TensorId, NnError> {
    let n = ctx.tape.shape(x)[0];
    let mut sel = Array::zeros(rows.len(), n);
    for (r, &i) in rows.iter().enumerate() {
        sel.set(r, i, 1.0);
    }
    let s = ctx.tape.constant(sel);
    ctx.tape.matmul(s, x)
}

/// One supervised (ordered pair, category) slot. `target` indexes the
/// category's subcategories, with the None class last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub src_row: usize,
    pub dst_row: usize,
    pub category: RelationCategory,
    pub target: usize,
}

/// Candidate pairs admitted by the sparsity rules: ordered furniture pairs
/// in the same cluster or between anchors, alignment-only slots for
/// lighting, and all furniture-to-architecture distance slots. Targets come
/// from the sparse graph; absent edges map to the None class.
pub fn candidate_set(scene: &Scene, zones: &[Zone], sparse: &RelationGraph) -> Result<Vec<Candidate>, VaeError> {
    let mut row_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rows: Vec<(&str, bool)> = Vec::new(); // (id, is_arch)
    for (_, e) in scene.occupied() {
        row_of.insert(e.id.as_str(), rows.len());
        rows.push((e.id.as_str(), e.class.is_arch()));
    }
    let mut cluster: BTreeMap<&str, usize> = BTreeMap::new();
    let mut anchor: BTreeMap<&str, bool> = BTreeMap::new();
    let mut ztype: BTreeMap<&str, ZoneType> = BTreeMap::new();
    for (ci, z) in zones.iter().enumerate() {
        for m in &z.members {
            cluster.insert(m.as_str(), ci);
            anchor.insert(m.as_str(), z.anchor.as_deref() == Some(m.as_str()));
            ztype.insert(m.as_str(), z.zone_type);
        }
    }
    let target_of = |src: &str, dst: &str, cat: RelationCategory| -> usize {
        for e in sparse.edges.iter() {
            if e.src == src && e.dst == dst && e.label.category() == cat {
                return e.label.subcategory_index();
            }
        }
        cat.subcategory_count() // None class
    };
    let mut out = Vec::new();
    let furniture: Vec<&str> = rows.iter().filter(|(_, a)| !a).map(|(id, _)| *id).collect();
    let arch: Vec<&str> = rows.iter().filter(|(_, a)| *a).map(|(id, _)| *id).collect();
    for &a in &furniture {
        for &b in &furniture {
            if a == b {
                continue;
            }
            let (za, zb) = match (ztype.get(a), ztype.get(b)) {
                (Some(x), Some(y)) => (*x, *y),
                _ => return Err(VaeError::Input(format!("node `{a}`/`{b}` missing zone assignment"))),
            };
            if za == ZoneType::Other || zb == ZoneType::Other {
                continue;
            }
            let (ra, rb) = (row_of[a], row_of[b]);
            if za == ZoneType::Lighting || zb == ZoneType::Lighting {
                out.push(Candidate { src_row: ra, dst_row: rb, category: RelationCategory::Alignment, target: target_of(a, b, RelationCategory::Alignment) });
                continue;
            }
            let same = cluster.get(a) == cluster.get(b);
            let anchors = anchor.get(a).copied().unwrap_or(false) && anchor.get(b).copied().unwrap_or(false);
            if !(same || anchors) {
                continue;
            }
            for cat in [RelationCategory::Direction, RelationCategory::Distance, RelationCategory::Alignment] {
                out.push(Candidate { src_row: ra, dst_row: rb, category: cat, target: target_of(a, b, cat) });
            }
            if a < b {
                out.push(Candidate {
                    src_row: ra,
                    dst_row: rb,
                    category: RelationCategory::Symmetry,
                    target: target_of(a, b, RelationCategory::Symmetry),
                });
            }
        }
    }
    for &f in &furniture {
        for &w in &arch {
            out.push(Candidate {
                src_row: row_of[f],
                dst_row: row_of[w],
                category: RelationCategory::ArchDistance,
                target: target_of(f, w, RelationCategory::ArchDistance),
            });
        }
    }
    Ok(out)
}

/// Cross-entropy over candidate slots plus the KL regularizer
/// `0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)` (summed over latent
/// dimensions, averaged over nodes), weighted by [`KL_WEIGHT`].
pub fn vae_loss(
    model: &VaeModel,
    ctx: &mut Ctx,
    view: &GraphView,
    candidates: &[Candidate],
    enc: &VaeEncodeOut,
) -> Result<TensorId, VaeError> {
    let logits = model.decode(ctx, enc.z, &view.pe, candidates)?;
    let mut terms: Vec<TensorId> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let total: usize = candidates.len();
    for cat in RelationCategory::ALL {
        let targets: Vec<usize> = candidates.iter().filter(|c| c.category == cat).map(|c| c.target).collect();
        if targets.is_empty() {
            continue;
        }
        let ce = ctx.tape.cross_entropy(logits[&cat], &targets)?;
        weights.push(targets.len() as f64 / total as f64);
        terms.push(ce);
    }
    let mut ce_total = ctx.tape.constant(Array::scalar(0.0));
    for (term, w) in terms.into_iter().zip(weights) {
        let scaled = ctx.tape.scale(term, w);
        ce_total = ctx.tape.add(ce_total, scaled)?;
    }
    let kl = kl_divergence(ctx, enc.mu, enc.logvar)?;
    let kl_scaled = ctx.tape.scale(kl, KL_WEIGHT);
    Ok(ctx.tape.add(ce_total, kl_scaled)?)
}

/// `KL(N(mu, sigma^2) || N(0, I))`, summed over latent dimensions and
/// averaged over nodes.
pub fn kl_divergence(ctx: &mut Ctx, mu: TensorId, logvar: TensorId) -> Result<TensorId, NnError> {
    let n = ctx.tape.shape(mu)[0] as f64;
    let mu2 = ctx.tape.mul(mu, mu)?;
    let var = ctx.tape.exp(logvar);
    let a = ctx.tape.add(mu2, var)?;
    let b = ctx.tape.sub(a, logvar)?;
    let c = ctx.tape.add_scalar(b, -1.0);
    let s = ctx.tape.sum_all(c);
    Ok(ctx.tape.scale(s, 0.5 / n))
}

/// Argmax predictions per candidate, for reconstruction accuracy.
pub fn decode_predictions(
    model: &VaeModel,
    view: &GraphView,
    z: &[Vec<f64>],
    candidates: &[Candidate],
) -> Result<Vec<usize>, VaeError> {
    let mut ctx = Ctx::new(&model.store);
    let zc = ctx.tape.constant(Array::from_rows(z));
    let logits = model.decode(&mut ctx, zc, &view.pe, candidates)?;
    let mut per_cat_cursor: BTreeMap<RelationCategory, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let cursor = per_cat_cursor.entry(c.category).or_insert(0);
        let l = ctx.tape.value(logits[&c.category]);
        let row = l.row(*cursor);
        *cursor += 1;
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        out.push(argmax);
    }
    Ok(out)
}

/// Fraction of candidates whose argmax prediction matches the target.
pub fn reconstruction_accuracy(predictions: &[usize], candidates: &[Candidate]) -> f64 {
    if candidates.is_empty() {
        return 1.0;
    }
    let hits = predictions.iter().zip(candidates).filter(|(p, c)| **p == c.target).count();
    hits as f64 / candidates.len() as f64
}
