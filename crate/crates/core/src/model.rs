//! The three-stream lifting model: bone and limb features feed an N-layer
//! stack where an anatomy mixer (cross-attention from bone tokens onto limb
//! tokens), a joint attention branch, and a joint graph branch are blended
//! per position, followed by a regression head mapping features to 3D.
//!
//! All per-layer state lives in frame-major (T*J) x d matrices; spatial
//! mixing groups rows by frame, temporal mixing groups rows by joint.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{KasError, Result};
use crate::kinematics::{extract_bones, fuse_limbs, LimbComposer, LimbTable, BONE_EPS};
use crate::nn::{
    self, AttnVars, FfnVars, GcnVars, LayerNormVars,
};
use crate::optim::ParameterStore;
use crate::pose::{Pose2DClip, Pose3DClip, SkeletonTopology};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Clip length T.
    pub frames: usize,
    /// Joint count J; bone and limb token counts equal it.
    pub joints: usize,
    /// Feature dimension d.
    pub dim: usize,
    /// Layer count N.
    pub layers: usize,
    /// Attention heads h.
    pub heads: usize,
    /// Temporal graph neighbour count K.
    pub gcn_k: usize,
    /// Hidden width of the limb composer networks.
    pub limb_hidden: usize,
    /// Feed-forward expansion factor.
    pub ff_expansion: usize,
    /// Velocity-loss weight.
    pub lambda_v: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 27,
            joints: 17,
            dim: 128,
            layers: 26,
            heads: 8,
            gcn_k: 2,
            limb_hidden: 16,
            ff_expansion: 4,
            lambda_v: 20.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the finite-difference suite.
    pub fn tiny() -> Self {
        Self {
            frames: 3,
            joints: 5,
            dim: 8,
            layers: 2,
            heads: 2,
            gcn_k: 2,
            limb_hidden: 4,
            ff_expansion: 4,
            lambda_v: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(KasError::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(KasError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.frames < 2 {
            return Err(KasError::InvalidConfig(
                "frames must be >= 2 for the velocity loss".into(),
            ));
        }
        if self.gcn_k == 0 || self.gcn_k >= self.frames {
            return Err(KasError::InvalidConfig(format!(
                "gcn_k {} must satisfy 1 <= k < frames {}",
                self.gcn_k, self.frames
            )));
        }
        if self.joints == 0 || self.limb_hidden == 0 || self.ff_expansion == 0 {
            return Err(KasError::InvalidConfig(
                "joints, limb_hidden and ff_expansion must be positive".into(),
            ));
        }
        if self.lambda_v < 0.0 || !self.lambda_v.is_finite() {
            return Err(KasError::InvalidConfig(
                "lambda_v must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Forward products beyond the 3D output: per-layer blending weights,
/// each a (T*J) x 3 row-stochastic matrix.
#[derive(Debug, Clone)]
pub struct ForwardAux {
    pub alphas: Vec<Array2<f64>>,
}

/// Tape nodes produced by one forward build.
pub struct ForwardVars {
    /// (T*J) x 3 predicted coordinates, frame-major.
    pub output: Var,
    /// Per-layer blending-weight nodes.
    pub alphas: Vec<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub topo: SkeletonTopology,
    pub table: LimbTable,
    pub store: ParameterStore,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl Model {
    pub fn new(
        config: ModelConfig,
        topo: SkeletonTopology,
        table: LimbTable,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if topo.joint_count() != config.joints {
            return Err(KasError::InvalidConfig(format!(
                "topology has {} joints, config says {}",
                topo.joint_count(),
                config.joints
            )));
        }
        if table.len() != config.joints {
            return Err(KasError::InvalidConfig(format!(
                "limb table has {} entries, config says {}",
                table.len(),
                config.joints
            )));
        }
        let mut model = Self {
            config,
            topo,
            table,
            store: ParameterStore::new(),
        };
        model.init_params(seed);
        Ok(model)
    }

    /// Builds a model whose parameter values come from a checkpoint file.
    pub fn from_checkpoint(
        config: ModelConfig,
        topo: SkeletonTopology,
        table: LimbTable,
        path: &Path,
    ) -> Result<Self> {
        let mut model = Self::new(config, topo, table, 0)?;
        let loaded = load_checkpoint(path)?;
        let expected: Vec<String> = model.store.names().map(str::to_string).collect();
        let got: Vec<String> = loaded.names().map(str::to_string).collect();
        if expected != got {
            return Err(KasError::Checkpoint(
                "checkpoint parameter names do not match this configuration".into(),
            ));
        }
        for name in &expected {
            let value = loaded.get(name)?.clone();
            if value.dim() != model.store.get(name)?.dim() {
                return Err(KasError::Checkpoint(format!(
                    "checkpoint tensor {name:?} has shape {:?}, expected {:?}",
                    value.dim(),
                    model.store.get(name)?.dim()
                )));
            }
            model.store.set(name, value)?;
        }
        Ok(model)
    }

    fn insert_linear(&mut self, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
        self.store
            .insert(&format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
        self.store
            .insert(&format!("{prefix}.b"), Array2::zeros((1, fan_out)));
    }

    fn insert_ln(&mut self, prefix: &str, d: usize) {
        self.store
            .insert(&format!("{prefix}.gain"), Array2::ones((1, d)));
        self.store
            .insert(&format!("{prefix}.bias"), Array2::zeros((1, d)));
    }

    fn insert_attn(&mut self, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.insert_linear(rng, &format!("{prefix}.{p}"), d, d);
        }
    }

    fn insert_ffn(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
    ) {
        self.insert_linear(rng, &format!("{prefix}.l1"), fan_in, hidden);
        self.insert_linear(rng, &format!("{prefix}.l2"), hidden, fan_out);
    }

    fn insert_gcn(&mut self, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
        self.store
            .insert(&format!("{prefix}.w1"), xavier(rng, d, d));
        self.store
            .insert(&format!("{prefix}.w2"), xavier(rng, d, d));
        self.insert_ln(&format!("{prefix}.ln"), d);
    }

    fn insert_attn_block(&mut self, rng: &mut ChaCha8Rng, prefix: &str, d: usize, cross: bool) {
        self.insert_ln(&format!("{prefix}.ln"), d);
        if cross {
            self.insert_ln(&format!("{prefix}.kv_ln"), d);
        }
        self.insert_attn(rng, &format!("{prefix}.attn"), d);
        self.insert_ln(&format!("{prefix}.ffn_ln"), d);
        self.insert_ffn(rng, &format!("{prefix}.ffn"), d, d * self.config.ff_expansion, d);
    }

    fn init_params(&mut self, seed: u64) {
        let c = self.config;
        let d = c.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // limb composers: one network per limb and channel
        let bone_counts: Vec<usize> = (0..self.table.len())
            .map(|l| self.table.bones(l).len())
            .collect();
        for (limb, &m) in bone_counts.iter().enumerate() {
            for channel in ["dirx", "diry", "len"] {
                let prefix = format!("limbfus.{limb}.{channel}");
                self.insert_linear(&mut rng, &format!("{prefix}.l1"), m, c.limb_hidden);
                self.insert_linear(&mut rng, &format!("{prefix}.l2"), c.limb_hidden, 1);
            }
        }

        for stream in ["joint", "bone", "limb"] {
            self.insert_linear(&mut rng, &format!("embed.{stream}"), 3, d);
            self.store
                .insert(&format!("pos.{stream}.spatial"), xavier(&mut rng, c.joints, d));
            self.store
                .insert(&format!("pos.{stream}.temporal"), xavier(&mut rng, c.frames, d));
        }

        for layer in 0..c.layers {
            let p = format!("layer{layer}");
            if layer > 0 {
                // fresh limb embedding: the limb stream always restarts from
                // the raw limb features, never from the blended state
                self.insert_linear(&mut rng, &format!("{p}.limb_embed"), 3, d);
            }
            self.insert_attn_block(&mut rng, &format!("{p}.anat.spat"), d, true);
            self.insert_attn_block(&mut rng, &format!("{p}.anat.temp"), d, true);
            self.insert_attn_block(&mut rng, &format!("{p}.joint.spat"), d, false);
            self.insert_attn_block(&mut rng, &format!("{p}.joint.temp"), d, false);
            self.insert_gcn(&mut rng, &format!("{p}.gcn.spat"), d);
            self.insert_gcn(&mut rng, &format!("{p}.gcn.temp"), d);
            self.store
                .insert(&format!("{p}.blend.w"), xavier(&mut rng, 3 * d, 3));
        }

        self.insert_ln("final.ln", d);
        self.insert_ffn(&mut rng, "head", d, d, 3);
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn bind_ln(&self, tape: &mut Tape, prefix: &str) -> Result<LayerNormVars> {
        Ok(LayerNormVars {
            gain: self.store.bind(tape, &format!("{prefix}.gain"))?,
            bias: self.store.bind(tape, &format!("{prefix}.bias"))?,
        })
    }

    fn bind_attn(&self, tape: &mut Tape, prefix: &str) -> Result<AttnVars> {
        Ok(AttnVars {
            wq: self.store.bind(tape, &format!("{prefix}.q.w"))?,
            bq: self.store.bind(tape, &format!("{prefix}.q.b"))?,
            wk: self.store.bind(tape, &format!("{prefix}.k.w"))?,
            bk: self.store.bind(tape, &format!("{prefix}.k.b"))?,
            wv: self.store.bind(tape, &format!("{prefix}.v.w"))?,
            bv: self.store.bind(tape, &format!("{prefix}.v.b"))?,
            wo: self.store.bind(tape, &format!("{prefix}.o.w"))?,
            bo: self.store.bind(tape, &format!("{prefix}.o.b"))?,
        })
    }

    fn bind_ffn(&self, tape: &mut Tape, prefix: &str) -> Result<FfnVars> {
        Ok(FfnVars {
            w1: self.store.bind(tape, &format!("{prefix}.l1.w"))?,
            b1: self.store.bind(tape, &format!("{prefix}.l1.b"))?,
            w2: self.store.bind(tape, &format!("{prefix}.l2.w"))?,
            b2: self.store.bind(tape, &format!("{prefix}.l2.b"))?,
        })
    }

    fn bind_gcn(&self, tape: &mut Tape, prefix: &str) -> Result<GcnVars> {
        Ok(GcnVars {
            w1: self.store.bind(tape, &format!("{prefix}.w1"))?,
            w2: self.store.bind(tape, &format!("{prefix}.w2"))?,
            ln: self.bind_ln(tape, &format!("{prefix}.ln"))?,
        })
    }

    /// One pre-norm residual attention sub-block plus its feed-forward
    /// residual: x + Attn(LN(x), kv) followed by x + FFN(LN(x)).
    fn attn_block(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        kv: Option<Var>,
        groups: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<Var> {
        let ln = self.bind_ln(tape, &format!("{prefix}.ln"))?;
        let xn = nn::layer_norm_affine(tape, x, &ln)?;
        let kvn = match kv {
            Some(kv) => {
                let kv_ln = self.bind_ln(tape, &format!("{prefix}.kv_ln"))?;
                nn::layer_norm_affine(tape, kv, &kv_ln)?
            }
            None => xn,
        };
        let attn = self.bind_attn(tape, &format!("{prefix}.attn"))?;
        let (mixed, _) = nn::grouped_attention(tape, xn, kvn, &attn, self.config.heads, groups)?;
        let x = tape.add(x, mixed)?;

        let ffn_ln = self.bind_ln(tape, &format!("{prefix}.ffn_ln"))?;
        let xn = nn::layer_norm_affine(tape, x, &ffn_ln)?;
        let ffn = self.bind_ffn(tape, &format!("{prefix}.ffn"))?;
        let h = nn::ffn(tape, xn, &ffn)?;
        tape.add(x, h)
    }

    /// Graph propagation over row groups sharing projection weights; one
    /// normalized adjacency per group.
    fn gcn_block(
        &self,
        tape: &mut Tape,
        prefix: &str,
        h: Var,
        groups: &[Vec<usize>],
        adjacencies: &[Array2<f64>],
    ) -> Result<Var> {
        let vars = self.bind_gcn(tape, prefix)?;
        let hw1 = tape.matmul(h, vars.w1)?;
        let hw2 = tape.matmul(h, vars.w2)?;
        let n = tape.shape(h).0;
        let mut outputs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(n);
        for (rows, a) in groups.iter().zip(adjacencies) {
            order.extend_from_slice(rows);
            let hg = tape.gather_rows(h, rows.clone())?;
            let g1 = tape.gather_rows(hw1, rows.clone())?;
            let g2 = tape.gather_rows(hw2, rows.clone())?;
            let s = tape.constant(nn::normalized_adjacency(a)?);
            outputs.push(nn::gcn_propagate_projected(tape, hg, g1, g2, s, &vars.ln)?);
        }
        let stacked = tape.concat_rows(&outputs)?;
        let mut inverse = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        tape.gather_rows(stacked, inverse)
    }

    fn bind_composers(&self, tape: &mut Tape) -> Result<Vec<LimbComposer>> {
        (0..self.table.len())
            .map(|limb| {
                let mut chans = Vec::with_capacity(3);
                for channel in ["dirx", "diry", "len"] {
                    chans.push(self.bind_ffn(tape, &format!("limbfus.{limb}.{channel}"))?);
                }
                Ok([chans[0], chans[1], chans[2]])
            })
            .collect()
    }

    /// Linear 3 -> d embedding plus spatial and temporal positional
    /// embeddings tiled over the frame-major row layout.
    fn embed_stream(&self, tape: &mut Tape, x: Var, stream: &str) -> Result<Var> {
        let (t, j) = (self.config.frames, self.config.joints);
        let w = self.store.bind(tape, &format!("embed.{stream}.w"))?;
        let b = self.store.bind(tape, &format!("embed.{stream}.b"))?;
        let mut h = nn::linear(tape, x, w, b)?;
        let spatial = self.store.bind(tape, &format!("pos.{stream}.spatial"))?;
        let temporal = self.store.bind(tape, &format!("pos.{stream}.temporal"))?;
        let mut sp_idx = Vec::with_capacity(t * j);
        let mut tm_idx = Vec::with_capacity(t * j);
        for frame in 0..t {
            for joint in 0..j {
                sp_idx.push(joint);
                tm_idx.push(frame);
            }
        }
        let sp = tape.gather_rows(spatial, sp_idx)?;
        let tm = tape.gather_rows(temporal, tm_idx)?;
        h = tape.add(h, sp)?;
        tape.add(h, tm)
    }

    fn frame_groups(&self) -> Vec<Vec<usize>> {
        let (t, j) = (self.config.frames, self.config.joints);
        (0..t)
            .map(|frame| (frame * j..(frame + 1) * j).collect())
            .collect()
    }

    fn token_groups(&self) -> Vec<Vec<usize>> {
        let (t, j) = (self.config.frames, self.config.joints);
        (0..j)
            .map(|joint| (0..t).map(|frame| frame * j + joint).collect())
            .collect()
    }

    /// Builds the full forward graph for one clip on `tape`.
    pub fn build_forward(&self, tape: &mut Tape, clip2d: &Pose2DClip) -> Result<ForwardVars> {
        let c = self.config;
        if clip2d.frames() != c.frames || clip2d.joints() != c.joints {
            return Err(KasError::ShapeMismatch {
                expected: format!("clip {}x{}x3", c.frames, c.joints),
                got: format!("{}x{}x3", clip2d.frames(), clip2d.joints()),
            });
        }
        let bones = extract_bones(clip2d, &self.topo, BONE_EPS)?;
        let x_joint = tape.constant(flatten_clip(clip2d.data()));
        let x_bone = tape.constant(flatten_clip(&bones.features()));
        let composers = self.bind_composers(tape)?;
        let x_limb = fuse_limbs(tape, &bones, &self.table, &composers)?;

        let mut h_joint = self.embed_stream(tape, x_joint, "joint")?;
        let mut h_bone = self.embed_stream(tape, x_bone, "bone")?;
        let mut h_limb = self.embed_stream(tape, x_limb, "limb")?;

        let frame_rows = self.frame_groups();
        let token_rows = self.token_groups();
        let spatial_pairs: Vec<(Vec<usize>, Vec<usize>)> = frame_rows
            .iter()
            .map(|r| (r.clone(), r.clone()))
            .collect();
        let temporal_pairs: Vec<(Vec<usize>, Vec<usize>)> = token_rows
            .iter()
            .map(|r| (r.clone(), r.clone()))
            .collect();
        let skeleton = self.topo.adjacency();
        let spatial_adj: Vec<Array2<f64>> = frame_rows.iter().map(|_| skeleton.clone()).collect();

        let mut alphas = Vec::with_capacity(c.layers);
        for layer in 0..c.layers {
            let p = format!("layer{layer}");
            if layer > 0 {
                let w = self.store.bind(tape, &format!("{p}.limb_embed.w"))?;
                let b = self.store.bind(tape, &format!("{p}.limb_embed.b"))?;
                h_limb = nn::linear(tape, x_limb, w, b)?;
            }

            // anatomy mixer: bone queries, limb keys/values
            let mut h_ac = self.attn_block(
                tape,
                &format!("{p}.anat.spat"),
                h_bone,
                Some(h_limb),
                &spatial_pairs,
            )?;
            h_ac = self.attn_block(
                tape,
                &format!("{p}.anat.temp"),
                h_ac,
                Some(h_limb),
                &temporal_pairs,
            )?;

            // joint mixer, attention branch
            let mut h_as =
                self.attn_block(tape, &format!("{p}.joint.spat"), h_joint, None, &spatial_pairs)?;
            h_as =
                self.attn_block(tape, &format!("{p}.joint.temp"), h_as, None, &temporal_pairs)?;

            // joint mixer, graph branch: skeleton graph then frame-similarity
            // graph rebuilt from the current values (selection not
            // differentiated through)
            let h_g = self.gcn_block(
                tape,
                &format!("{p}.gcn.spat"),
                h_joint,
                &frame_rows,
                &spatial_adj,
            )?;
            let temporal_adj: Vec<Array2<f64>> = {
                let values = tape.value(h_g);
                token_rows
                    .iter()
                    .map(|rows| {
                        let mut sub = Array2::zeros((rows.len(), c.dim));
                        for (i, &r) in rows.iter().enumerate() {
                            sub.row_mut(i).assign(&values.row(r));
                        }
                        nn::topk_adjacency(&sub, c.gcn_k)
                    })
                    .collect::<Result<_>>()?
            };
            let h_g = self.gcn_block(
                tape,
                &format!("{p}.gcn.temp"),
                h_g,
                &token_rows,
                &temporal_adj,
            )?;

            let w = self.store.bind(tape, &format!("{p}.blend.w"))?;
            let (blended, alpha) = nn::blend3(tape, h_ac, h_as, h_g, w)?;
            alphas.push(alpha);
            h_joint = blended;
            h_bone = blended;
        }

        let final_ln = self.bind_ln(tape, "final.ln")?;
        let normed = nn::layer_norm_affine(tape, h_joint, &final_ln)?;
        let head = self.bind_ffn(tape, "head")?;
        let output = nn::ffn(tape, normed, &head)?;
        Ok(ForwardVars { output, alphas })
    }

    /// Evaluates the model on one clip.
    pub fn forward(&self, clip2d: &Pose2DClip) -> Result<(Pose3DClip, ForwardAux)> {
        let mut tape = Tape::new();
        let vars = self.build_forward(&mut tape, clip2d)?;
        let out = unflatten_clip(
            tape.value(vars.output),
            self.config.frames,
            self.config.joints,
        );
        let alphas = vars
            .alphas
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect();
        Ok((Pose3DClip::new(out)?, ForwardAux { alphas }))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }
}

/// T x J x c -> (T*J) x c, frame-major.
pub fn flatten_clip(data: &Array3<f64>) -> Array2<f64> {
    let (t, j, c) = data.dim();
    let mut out = Array2::zeros((t * j, c));
    for frame in 0..t {
        for joint in 0..j {
            for k in 0..c {
                out[(frame * j + joint, k)] = data[(frame, joint, k)];
            }
        }
    }
    out
}

/// (T*J) x c -> T x J x c.
pub fn unflatten_clip(data: &Array2<f64>, t: usize, j: usize) -> Array3<f64> {
    let c = data.dim().1;
    let mut out = Array3::zeros((t, j, c));
    for frame in 0..t {
        for joint in 0..j {
            for k in 0..c {
                out[(frame, joint, k)] = data[(frame * j + joint, k)];
            }
        }
    }
    out
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut container = Container::new();
    for name in store.names() {
        let value = store.get(name)?;
        let (r, c) = value.dim();
        container.push(name, vec![r, c], value.iter().map(|&v| v as f32).collect())?;
    }
    container.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let container = Container::load(path)?;
    let mut store = ParameterStore::new();
    for entry in container.entries() {
        if entry.dims.len() != 2 {
            return Err(KasError::Checkpoint(format!(
                "parameter {:?} must be rank 2, got rank {}",
                entry.name,
                entry.dims.len()
            )));
        }
        let data: Vec<f64> = entry.values.iter().map(|&v| v as f64).collect();
        let value = Array2::from_shape_vec((entry.dims[0], entry.dims[1]), data)
            .map_err(|e| KasError::Checkpoint(format!("parameter {:?}: {e}", entry.name)))?;
        store.insert(&entry.name, value);
    }
    Ok(store)
}
