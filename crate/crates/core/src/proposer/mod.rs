//! First-stage 3D detection over painted point clouds: farthest-point
//! sampling, ball grouping, a two-round set-abstraction encoder, per-seed
//! center voting, vote clustering, proposal heads, and the stage loss.
//!
//! Absolute coordinates never enter a learned layer — neighbors are encoded
//! as offsets from their group center — so the whole stage is equivariant to
//! global translation of the input cloud.

use crate::data::GtBox;
use crate::fusion::PaintedCloud;
use crate::geom3d::wrap_angle;
use crate::nncore::{
    cross_entropy, l1, maxpool_backward, maxpool_segments, sigmoid, smooth_l1,
    softmax_in_place, Dense, Mat, MlpStack, ParamSource, ParamTensor,
};
use crate::{Box3D, Proposal, Vec3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Greedy farthest-point sampling: repeatedly picks the point with the
/// largest distance to the already-selected set, ties broken by lowest
/// index. If `m` exceeds the point count the selection wraps around by
/// re-picking index 0 (every min-distance is zero by then).
pub fn fps(points: &[Vec3], m: usize, start: usize) -> Vec<usize> {
    assert!(!points.is_empty() && start < points.len());
    let mut picked = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut cur = start;
    for _ in 0..m {
        picked.push(cur);
        let p = points[cur];
        let mut best = 0usize;
        let mut best_d2 = -1.0;
        for (i, q) in points.iter().enumerate() {
            let d2 = p.dist_sq(*q);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        cur = best;
    }
    picked
}

/// For every center, up to `k` neighbor indices within `radius`, scanned in
/// index order; short groups are padded by repeating the nearest point
/// (lowest index on distance ties). Flat layout: group `j` occupies
/// `[j*k, (j+1)*k)`.
pub fn ball_group(points: &[Vec3], centers: &[Vec3], radius: f64, k: usize) -> Vec<usize> {
    assert!(k > 0);
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len() * k);
    for c in centers {
        let mut found = 0usize;
        let mut nearest = 0usize;
        let mut nearest_d2 = f64::INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d2 = c.dist_sq(*p);
            if d2 < nearest_d2 {
                nearest_d2 = d2;
                nearest = i;
            }
            if d2 <= r2 && found < k {
                out.push(i);
                found += 1;
            }
        }
        if found == 0 {
            // Nothing in range (callers normally guarantee the center is one
            // of the points): fall back to the nearest so groups stay full.
            out.push(nearest);
            found = 1;
        }
        for _ in found..k {
            out.push(nearest);
        }
    }
    out
}

/// One sampling-and-grouping round.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaConfig {
    pub n_centers: usize,
    pub radius: f64,
    pub k: usize,
    /// Hidden/output widths of the shared per-neighbor MLP (input width is
    /// derived from the incoming features).
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub num_classes: usize,
    pub sa1: SaConfig,
    pub sa2: SaConfig,
    /// Hidden widths of the per-seed voting MLP.
    pub vote_widths: Vec<usize>,
    pub n_proposals: usize,
    pub cluster_radius: f64,
    pub cluster_k: usize,
    pub cluster_widths: Vec<usize>,
    pub lambda_obj: f64,
    pub lambda_box: f64,
    pub lambda_sem: f64,
    /// Proposals closer than this to a GT center are objectness positives.
    pub near_thresh: f64,
    /// Proposals farther than this from every GT center are negatives;
    /// the band in between is ignored.
    pub far_thresh: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            num_classes: 3,
            sa1: SaConfig { n_centers: 1024, radius: 0.2, k: 16, widths: vec![64, 64] },
            sa2: SaConfig { n_centers: 256, radius: 0.4, k: 16, widths: vec![64, 128] },
            vote_widths: vec![128],
            n_proposals: 32,
            cluster_radius: 0.3,
            cluster_k: 16,
            cluster_widths: vec![128, 128],
            lambda_obj: 0.5,
            lambda_box: 1.0,
            lambda_sem: 0.1,
            near_thresh: 0.3,
            far_thresh: 0.6,
        }
    }
}

/// Downsampled encoder output: one position and feature row per seed.
#[derive(Clone, Debug)]
pub struct Seeds {
    pub positions: Vec<Vec3>,
    pub features: Mat,
}

/// A seed shifted toward a predicted object center.
#[derive(Clone, Debug)]
pub struct Vote {
    pub position: Vec3,
    pub feature: Vec<f64>,
    pub source: usize,
}

pub struct ProposerOutput {
    pub proposals: Vec<Proposal>,
    pub seeds: Seeds,
    pub votes: Vec<Vote>,
    /// Vote-cluster aggregation points, one per proposal. Positive/negative
    /// assignment keys off these rather than the decoded centers: they are
    /// grounded in geometry from the first step, while decoded centers add a
    /// still-untrained offset.
    pub cluster_centers: Vec<Vec3>,
    /// Raw head values kept for the loss.
    pub obj_logits: Vec<f64>,
    pub class_logits: Mat,
}

/// Gradients of a scalar loss with respect to the decoded proposal
/// parameters and vote positions; [`Proposer::backward`] pulls these back
/// into the network weights.
pub struct ProposerGrads {
    pub d_center: Vec<[f64; 3]>,
    /// With respect to the decoded (l, h, w) extents.
    pub d_size: Vec<[f64; 3]>,
    pub d_heading: Vec<f64>,
    pub d_obj_logit: Vec<f64>,
    pub d_class_logits: Mat,
    pub d_votes: Vec<[f64; 3]>,
}

impl ProposerGrads {
    pub fn zeros(n_proposals: usize, num_classes: usize, n_votes: usize) -> Self {
        ProposerGrads {
            d_center: vec![[0.0; 3]; n_proposals],
            d_size: vec![[0.0; 3]; n_proposals],
            d_heading: vec![0.0; n_proposals],
            d_obj_logit: vec![0.0; n_proposals],
            d_class_logits: Mat::zeros(n_proposals, num_classes),
            d_votes: vec![[0.0; 3]; n_votes],
        }
    }
}

struct Tape {
    rows1: usize,
    arg1: Vec<usize>,
    rows2: usize,
    groups2: Vec<usize>,
    arg2: Vec<usize>,
    n_sa1: usize,
    d1: usize,
    n_votes: usize,
    d_vote: usize,
    cluster_center_idx: Vec<usize>,
    kc: usize,
    groups_c: Vec<usize>,
    arg_c: Vec<usize>,
    sizes: Vec<[f64; 3]>,
}

pub struct Proposer {
    pub cfg: ProposerConfig,
    sa1_mlp: MlpStack,
    sa2_mlp: MlpStack,
    vote_mlp: MlpStack,
    vote_head: Dense,
    cluster_mlp: MlpStack,
    head: Dense,
    tape: Option<Tape>,
}

fn widths_with_input(input: usize, rest: &[usize]) -> Vec<usize> {
    let mut w = Vec::with_capacity(rest.len() + 1);
    w.push(input);
    w.extend_from_slice(rest);
    w
}

impl Proposer {
    pub fn new(cfg: ProposerConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.num_classes;
        // Per-neighbor rows: offset(3) + height(1) + semantic(C).
        let sa1_in = 3 + 1 + c;
        let sa1_mlp = MlpStack::new("prop.sa1", &widths_with_input(sa1_in, &cfg.sa1.widths), true, rng);
        let d1 = sa1_mlp.out_dim();
        let sa2_mlp = MlpStack::new("prop.sa2", &widths_with_input(3 + d1, &cfg.sa2.widths), true, rng);
        let d_seed = sa2_mlp.out_dim();
        let vote_mlp =
            MlpStack::new("prop.vote", &widths_with_input(d_seed, &cfg.vote_widths), true, rng);
        let vote_head = Dense::new("prop.vote_head", vote_mlp.out_dim(), 3 + d_seed, 1.0, rng);
        let cluster_mlp = MlpStack::new(
            "prop.cluster",
            &widths_with_input(3 + d_seed, &cfg.cluster_widths),
            true,
            rng,
        );
        // Head layout: [objectness, center offset(3), log extents(3), heading, class logits(C)].
        let head = Dense::new("prop.head", cluster_mlp.out_dim(), 8 + c, 1.0, rng);
        Proposer { cfg, sa1_mlp, sa2_mlp, vote_mlp, vote_head, cluster_mlp, head, tape: None }
    }

    pub fn forward(&mut self, painted: &PaintedCloud) -> ProposerOutput {
        assert!(!painted.is_empty(), "proposer needs a non-empty cloud");
        assert_eq!(painted.num_classes, self.cfg.num_classes);
        let c = self.cfg.num_classes;

        // Round 1: group raw painted points around sampled centers.
        let (k1, k2) = (self.cfg.sa1.k, self.cfg.sa2.k);
        let idx1 = fps(&painted.positions, self.cfg.sa1.n_centers, 0);
        let c1: Vec<Vec3> = idx1.iter().map(|&i| painted.positions[i]).collect();
        let groups1 = ball_group(&painted.positions, &c1, self.cfg.sa1.radius, k1);
        let mut rows1 = Mat::zeros(c1.len() * k1, 4 + c);
        for (t, center) in c1.iter().enumerate() {
            for s in 0..k1 {
                let m = groups1[t * k1 + s];
                let o = painted.positions[m].sub(*center);
                let row = rows1.row_mut(t * k1 + s);
                row[0] = o.x;
                row[1] = o.y;
                row[2] = o.z;
                row[3] = painted.height[m];
                row[4..4 + c].copy_from_slice(painted.sem_row(m));
            }
        }
        let h1 = self.sa1_mlp.forward(&rows1, true);
        let (g1, arg1) = maxpool_segments(&h1, k1);

        // Round 2: group round-1 centers.
        let idx2 = fps(&c1, self.cfg.sa2.n_centers, 0);
        let c2: Vec<Vec3> = idx2.iter().map(|&i| c1[i]).collect();
        let groups2 = ball_group(&c1, &c2, self.cfg.sa2.radius, k2);
        let d1 = g1.cols;
        let mut rows2 = Mat::zeros(c2.len() * k2, 3 + d1);
        for (t, center) in c2.iter().enumerate() {
            for s in 0..k2 {
                let m = groups2[t * k2 + s];
                let o = c1[m].sub(*center);
                let row = rows2.row_mut(t * k2 + s);
                row[0] = o.x;
                row[1] = o.y;
                row[2] = o.z;
                row[3..].copy_from_slice(g1.row(m));
            }
        }
        let h2 = self.sa2_mlp.forward(&rows2, true);
        let (seed_feats, arg2) = maxpool_segments(&h2, k2);
        let d_seed = seed_feats.cols;

        // Votes: per-seed offset plus feature residual.
        let vh = self.vote_mlp.forward(&seed_feats, true);
        let vo = self.vote_head.forward(&vh, true);
        let n_votes = c2.len();
        let mut vote_pos = Vec::with_capacity(n_votes);
        let mut vote_feats = Mat::zeros(n_votes, d_seed);
        for j in 0..n_votes {
            let o = vo.row(j);
            vote_pos.push(c2[j].add(Vec3::new(o[0], o[1], o[2])));
            let fr = vote_feats.row_mut(j);
            for (d, f) in fr.iter_mut().enumerate() {
                *f = seed_feats.get(j, d) + o[3 + d];
            }
        }

        // Cluster votes by location and run the proposal heads.
        let p = self.cfg.n_proposals;
        let kc = self.cfg.cluster_k;
        let idxp = fps(&vote_pos, p, 0);
        let q: Vec<Vec3> = idxp.iter().map(|&i| vote_pos[i]).collect();
        let groups_c = ball_group(&vote_pos, &q, self.cfg.cluster_radius, kc);
        let mut rows_c = Mat::zeros(p * kc, 3 + d_seed);
        for (t, center) in q.iter().enumerate() {
            for s in 0..kc {
                let m = groups_c[t * kc + s];
                let o = vote_pos[m].sub(*center);
                let row = rows_c.row_mut(t * kc + s);
                row[0] = o.x;
                row[1] = o.y;
                row[2] = o.z;
                row[3..].copy_from_slice(vote_feats.row(m));
            }
        }
        let hc = self.cluster_mlp.forward(&rows_c, true);
        let (pooled, arg_c) = maxpool_segments(&hc, kc);
        let ho = self.head.forward(&pooled, true);

        let mut proposals = Vec::with_capacity(p);
        let mut obj_logits = Vec::with_capacity(p);
        let mut class_logits = Mat::zeros(p, c);
        let mut sizes = Vec::with_capacity(p);
        for t in 0..p {
            let o = ho.row(t);
            let center = q[t].add(Vec3::new(o[1], o[2], o[3]));
            let (l, h, w) = (o[4].exp(), o[5].exp(), o[6].exp());
            sizes.push([l, h, w]);
            let yaw = wrap_angle(o[7]);
            let mut probs = o[8..8 + c].to_vec();
            class_logits.row_mut(t).copy_from_slice(&o[8..8 + c]);
            softmax_in_place(&mut probs);
            obj_logits.push(o[0]);
            proposals.push(Proposal::new(Box3D::new(center, l, h, w, yaw), sigmoid(o[0]), probs));
        }

        self.tape = Some(Tape {
            rows1: rows1.rows,
            arg1,
            rows2: rows2.rows,
            groups2,
            arg2,
            n_sa1: c1.len(),
            d1,
            n_votes,
            d_vote: d_seed,
            cluster_center_idx: idxp,
            kc,
            groups_c,
            arg_c,
            sizes,
        });

        let votes = vote_pos
            .iter()
            .enumerate()
            .map(|(j, &pos)| Vote { position: pos, feature: vote_feats.row(j).to_vec(), source: j })
            .collect();
        ProposerOutput {
            proposals,
            seeds: Seeds { positions: c2, features: seed_feats },
            votes,
            cluster_centers: q,
            obj_logits,
            class_logits,
        }
    }

    /// Accumulates parameter gradients for the most recent forward pass.
    /// Sampling and grouping choices are treated as constants; gradients
    /// flow through offsets, features, and the residual connections.
    pub fn backward(&mut self, g: &ProposerGrads) {
        let tape = self.tape.take().expect("forward before backward");
        let p = self.cfg.n_proposals;
        let c = self.cfg.num_classes;
        assert_eq!(g.d_center.len(), p);
        assert_eq!(g.d_votes.len(), tape.n_votes);

        // Proposal heads.
        let mut dy = Mat::zeros(p, 8 + c);
        for t in 0..p {
            let row = dy.row_mut(t);
            row[0] = g.d_obj_logit[t];
            row[1] = g.d_center[t][0];
            row[2] = g.d_center[t][1];
            row[3] = g.d_center[t][2];
            // Extents are exp(raw): chain through the decoded size.
            row[4] = g.d_size[t][0] * tape.sizes[t][0];
            row[5] = g.d_size[t][1] * tape.sizes[t][1];
            row[6] = g.d_size[t][2] * tape.sizes[t][2];
            row[7] = g.d_heading[t];
            row[8..].copy_from_slice(g.d_class_logits.row(t));
        }
        let dpool = self.head.backward(&dy);
        let dhc = maxpool_backward(&dpool, &tape.arg_c, p * tape.kc);
        let drows_c = self.cluster_mlp.backward(&dhc);

        // Collect vote gradients: cluster offsets/features, the direct
        // center = q + offset path, and the external vote-position grads.
        let mut d_vote_pos = vec![[0.0f64; 3]; tape.n_votes];
        let mut d_vote_feat = Mat::zeros(tape.n_votes, tape.d_vote);
        for t in 0..p {
            let qi = tape.cluster_center_idx[t];
            for a in 0..3 {
                d_vote_pos[qi][a] += g.d_center[t][a];
            }
            for s in 0..tape.kc {
                let r = t * tape.kc + s;
                let m = tape.groups_c[r];
                let dr = drows_c.row(r);
                for a in 0..3 {
                    d_vote_pos[m][a] += dr[a];
                    d_vote_pos[qi][a] -= dr[a];
                }
                let fr = d_vote_feat.row_mut(m);
                for d in 0..tape.d_vote {
                    fr[d] += dr[3 + d];
                }
            }
        }
        for (dv, ext) in d_vote_pos.iter_mut().zip(&g.d_votes) {
            for a in 0..3 {
                dv[a] += ext[a];
            }
        }

        // Vote head (offset, feature residual) and the residual skip.
        let mut dy_v = Mat::zeros(tape.n_votes, 3 + tape.d_vote);
        for j in 0..tape.n_votes {
            let row = dy_v.row_mut(j);
            row[0] = d_vote_pos[j][0];
            row[1] = d_vote_pos[j][1];
            row[2] = d_vote_pos[j][2];
            row[3..].copy_from_slice(d_vote_feat.row(j));
        }
        let dvh = self.vote_head.backward(&dy_v);
        let mut d_seed = self.vote_mlp.backward(&dvh);
        for j in 0..tape.n_votes {
            let sr = d_seed.row_mut(j);
            let fr = d_vote_feat.row(j);
            for d in 0..tape.d_vote {
                sr[d] += fr[d];
            }
        }

        // Set-abstraction rounds, deepest first.
        let dh2 = maxpool_backward(&d_seed, &tape.arg2, tape.rows2);
        let drows2 = self.sa2_mlp.backward(&dh2);
        let mut dg1 = Mat::zeros(tape.n_sa1, tape.d1);
        for r in 0..tape.rows2 {
            let m = tape.groups2[r];
            let src = drows2.row(r);
            let dst = dg1.row_mut(m);
            for d in 0..tape.d1 {
                dst[d] += src[3 + d];
            }
        }
        let dh1 = maxpool_backward(&dg1, &tape.arg1, tape.rows1);
        let _ = self.sa1_mlp.backward(&dh1);
    }
}

impl ParamSource for Proposer {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.sa1_mlp.visit(f);
        self.sa2_mlp.visit(f);
        self.vote_mlp.visit(f);
        self.vote_head.visit(f);
        self.cluster_mlp.visit(f);
        self.head.visit(f);
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RpnLossParts {
    pub vote_reg: f64,
    pub objectness: f64,
    pub box_reg: f64,
    pub semantic: f64,
    pub total: f64,
}

/// First-stage loss: vote regression toward object centers, near/far
/// objectness (assigned by cluster-point distance to the nearest ground
/// truth center), box regression and classification for positive proposals.
/// Total = vote + lambda_obj*obj + lambda_box*box + lambda_sem*sem. Every
/// part is a mean over its contributing set (empty set contributes zero).
pub fn rpn_loss(
    out: &ProposerOutput,
    gt: &[GtBox],
    cfg: &ProposerConfig,
) -> (RpnLossParts, ProposerGrads) {
    let p = out.proposals.len();
    let c = cfg.num_classes;
    let mut g = ProposerGrads::zeros(p, c, out.votes.len());
    let mut parts = RpnLossParts::default();

    // Vote regression: seeds inside a GT box vote for the nearest GT center.
    let mut object_votes: Vec<(usize, Vec3)> = Vec::new();
    for (j, vote) in out.votes.iter().enumerate() {
        let seed_pos = out.seeds.positions[vote.source];
        let target = gt
            .iter()
            .filter(|b| b.box3.contains(seed_pos))
            .map(|b| b.box3.center)
            .min_by(|a, b| a.dist_sq(seed_pos).total_cmp(&b.dist_sq(seed_pos)));
        if let Some(t) = target {
            object_votes.push((j, t));
        }
    }
    if !object_votes.is_empty() {
        let inv = 1.0 / object_votes.len() as f64;
        for (j, target) in object_votes {
            let v = out.votes[j].position;
            let (loss, grad) =
                l1(&[v.x, v.y, v.z], &[target.x, target.y, target.z]);
            parts.vote_reg += loss * inv;
            for a in 0..3 {
                g.d_votes[j][a] += grad[a] * inv;
            }
        }
    }

    // Near/far objectness assignment on the cluster aggregation points.
    let mut labeled: Vec<(usize, f64, Option<usize>)> = Vec::new();
    for (t, agg) in out.cluster_centers.iter().enumerate() {
        let nearest = (0..gt.len())
            .min_by(|&a, &b| {
                gt[a].box3.center.dist_sq(*agg)
                    .total_cmp(&gt[b].box3.center.dist_sq(*agg))
            });
        let dist = nearest.map_or(f64::INFINITY, |i| gt[i].box3.center.dist(*agg));
        if dist < cfg.near_thresh {
            labeled.push((t, 1.0, nearest));
        } else if dist > cfg.far_thresh {
            labeled.push((t, 0.0, None));
        }
    }
    if !labeled.is_empty() {
        let inv = 1.0 / labeled.len() as f64;
        for &(t, target, _) in &labeled {
            let prob = out.proposals[t].objectness;
            let (loss, dprob) = crate::nncore::bce(prob, target);
            parts.objectness += loss * inv;
            g.d_obj_logit[t] += cfg.lambda_obj * dprob * prob * (1.0 - prob) * inv;
        }
    }

    // Box regression + classification for positives.
    let positives: Vec<(usize, usize)> =
        labeled.iter().filter_map(|&(t, _, m)| m.map(|gi| (t, gi))).collect();
    if !positives.is_empty() {
        let inv = 1.0 / positives.len() as f64;
        for &(t, gi) in &positives {
            let pb = &out.proposals[t].box3;
            let gb = &gt[gi].box3;
            let pred = [
                pb.center.x,
                pb.center.y,
                pb.center.z,
                pb.l,
                pb.h,
                pb.w,
                wrap_angle(pb.yaw - gb.yaw),
            ];
            let target = [gb.center.x, gb.center.y, gb.center.z, gb.l, gb.h, gb.w, 0.0];
            let (loss, grad) = smooth_l1(&pred, &target);
            parts.box_reg += loss * inv;
            for a in 0..3 {
                g.d_center[t][a] += cfg.lambda_box * grad[a] * inv;
                g.d_size[t][a] += cfg.lambda_box * grad[3 + a] * inv;
            }
            g.d_heading[t] += cfg.lambda_box * grad[6] * inv;

            let (sem, dsem) = cross_entropy(out.class_logits.row(t), Some(gt[gi].class as usize));
            parts.semantic += sem * inv;
            let row = g.d_class_logits.row_mut(t);
            for (dst, d) in row.iter_mut().zip(&dsem) {
                *dst += cfg.lambda_sem * d * inv;
            }
        }
    }

    parts.total = parts.vote_reg
        + cfg.lambda_obj * parts.objectness
        + cfg.lambda_box * parts.box_reg
        + cfg.lambda_sem * parts.semantic;
    (parts, g)
}
