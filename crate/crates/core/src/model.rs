//! SiamWCA: shared pillar encoder for both frames, windowed cross-attention
//! fusion, dense diffusion and the point reconstruction head.

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sra_block, srca_block, AttnBlockParams, PosEncoding};
use crate::error::{Error, Result};
use crate::geometry::{concat_frames, PointFrame};
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::pillars::{
    assign_pillars, embed_pillars, mask_pillars, sample_targets, EmbedVars, GridConfig, MaskSplit,
    PillarSet, POINT_FEATURES,
};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, GroupScores, Tape, Tensor, Var};
use crate::windows::{joint_group, self_group};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// SRA blocks; odd-numbered blocks use the shifted partition.
    pub encoder_blocks: usize,
    pub diffusion_layers: usize,
    /// Predicted points per masked pillar.
    pub k_pred: usize,
    /// Target points sampled per masked pillar.
    pub k_gt: usize,
    pub mask_ratio: f64,
    /// Window extent in cells.
    pub window: [usize; 2],
    pub pe_temperature: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            encoder_blocks: 4,
            diffusion_layers: 3,
            k_pred: 16,
            k_gt: 64,
            mask_ratio: 0.75,
            window: [8, 8],
            pe_temperature: 10000.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("diffusion_layers", self.diffusion_layers),
            ("k_pred", self.k_pred),
            ("k_gt", self.k_gt),
            ("window[0]", self.window[0]),
            ("window[1]", self.window[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(4) || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_model = {} must be divisible by 4 and by heads = {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "model.mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.pe_temperature > 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Config(
                "model.pe_temperature and model.ln_eps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pos_encoding(&self) -> Result<PosEncoding> {
        PosEncoding::new(self.d_model, self.pe_temperature)
    }
}

/// Which network a parameter store holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Siamese encoder plus WCA fusion.
    Temporal,
    /// Single-frame network fed the union of both frames; no WCA blocks.
    Concat,
}

/// Fresh parameters for `arch`, reproducible from `seed`.
pub fn init_params(cfg: &ModelConfig, arch: Architecture, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.insert("embed.fc1.w", xavier_uniform(&mut rng, POINT_FEATURES, d / 2));
    s.insert("embed.fc1.b", Tensor::zeros(&[d / 2]));
    s.insert("embed.fc2.w", xavier_uniform(&mut rng, d / 2, d));
    s.insert("embed.fc2.b", Tensor::zeros(&[d]));
    for i in 0..cfg.encoder_blocks {
        AttnBlockParams::init(&mut s, &format!("encoder.{i}"), d, &mut rng);
    }
    if arch == Architecture::Temporal {
        for j in 0..2 {
            AttnBlockParams::init(&mut s, &format!("wca.{j}"), d, &mut rng);
        }
    }
    // LeCun-uniform 3×3 kernels
    let a = (3.0 / (9 * d) as f64).sqrt();
    for i in 0..cfg.diffusion_layers {
        let w = (0..d * d * 9).map(|_| rng.gen_range(-a..a)).collect();
        s.insert(format!("diffuse.{i}.w"), Tensor::new(vec![d, d, 3, 3], w)?);
        s.insert(format!("diffuse.{i}.b"), Tensor::zeros(&[d]));
    }
    s.insert("head.fc1.w", xavier_uniform(&mut rng, d, 2 * d));
    s.insert("head.fc1.b", Tensor::zeros(&[2 * d]));
    s.insert("head.fc2.w", xavier_uniform(&mut rng, 2 * d, 3 * cfg.k_pred));
    s.insert("head.fc2.b", Tensor::zeros(&[3 * cfg.k_pred]));
    Ok(s)
}

/// Architecture implied by the parameter names of a store.
pub fn architecture_of(store: &ParamStore) -> Architecture {
    if store.names().any(|n| n.starts_with("wca.")) {
        Architecture::Temporal
    } else {
        Architecture::Concat
    }
}

/// Embed one frame's pillars and run the encoder stack over them.
pub fn encode_frame(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    grid: &GridConfig,
    frame: &PointFrame,
    pillars: &PillarSet,
) -> Result<Var> {
    let embed = EmbedVars::from_bound(bound, "embed")?;
    let mut x = embed_pillars(tape, &embed, frame, pillars, grid)?;
    let pe = cfg.pos_encoding()?;
    for i in 0..cfg.encoder_blocks {
        let p = AttnBlockParams::from_bound(bound, &format!("encoder.{i}"), cfg.heads, cfg.ln_eps)?;
        let part = self_group(&pillars.coords, cfg.window, i % 2 == 1)?;
        x = sra_block(tape, x, &pillars.coords, &part, &p, &pe)?;
    }
    Ok(x)
}

/// Both frames through the one shared encoder, independently.
pub fn siam_encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    grid: &GridConfig,
    prev: (&PointFrame, &PillarSet),
    cur_visible: (&PointFrame, &PillarSet),
) -> Result<(Var, Var)> {
    if cur_visible.1.is_empty() {
        return Err(Error::EmptyFrame("no visible pillars in the current frame".into()));
    }
    let tp = encode_frame(tape, bound, cfg, grid, prev.0, prev.1)?;
    let tc = encode_frame(tape, bound, cfg, grid, cur_visible.0, cur_visible.1)?;
    Ok((tp, tc))
}

/// Two SRCA passes, unshifted then shifted; prev tokens stay fixed. Also
/// returns the first pass's attention scores.
pub fn wca(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    prev: (Var, &[[usize; 2]]),
    cur: (Var, &[[usize; 2]]),
) -> Result<(Var, Vec<GroupScores>)> {
    let pe = cfg.pos_encoding()?;
    let mut x = cur.0;
    let mut first = Vec::new();
    for j in 0..2 {
        let p = AttnBlockParams::from_bound(bound, &format!("wca.{j}"), cfg.heads, cfg.ln_eps)?;
        let part = joint_group(prev.1, cur.1, cfg.window, j == 1)?;
        let (y, scores) = srca_block(tape, prev.0, prev.1, x, cur.1, &part, &p, &pe)?;
        if j == 0 {
            first = scores;
        }
        x = y;
    }
    Ok((x, first))
}

/// Scatter tokens into a zero `d×H×W` map (`H` rows along y, `W` along x).
pub fn densify(tape: &mut Tape, tokens: Var, coords: &[[usize; 2]], grid: &GridConfig) -> Result<Var> {
    let [nx, ny] = grid.dims();
    let cells = flat_cells(coords, grid)?;
    tape.scatter_to_map(tokens, &cells, ny, nx)
}

fn flat_cells(coords: &[[usize; 2]], grid: &GridConfig) -> Result<Vec<usize>> {
    let [nx, ny] = grid.dims();
    coords
        .iter()
        .map(|c| {
            if c[0] >= nx || c[1] >= ny {
                Err(Error::InvalidArgument(format!("cell {c:?} outside {nx}×{ny} grid")))
            } else {
                Ok(grid.flat(*c))
            }
        })
        .collect()
}

/// `diffusion_layers` 3×3 convolutions with ReLU between them.
pub fn diffuse(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, map: Var) -> Result<Var> {
    let mut x = map;
    for i in 0..cfg.diffusion_layers {
        let w = bound.get(&format!("diffuse.{i}.w"))?;
        let b = bound.get(&format!("diffuse.{i}.b"))?;
        x = tape.conv2d_3x3(x, w, b)?;
        if i + 1 < cfg.diffusion_layers {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Predicted points for the given cells as `M × 3·k_pred` rows of
/// pillar-normalized `(x, y, z)` triples bounded by tanh.
pub fn reconstruct(
    tape: &mut Tape,
    bound: &Bound,
    map: Var,
    coords: &[[usize; 2]],
    grid: &GridConfig,
) -> Result<Var> {
    let cells = flat_cells(coords, grid)?;
    let t = tape.gather_from_map(map, &cells)?;
    let h = tape.linear(t, bound.get("head.fc1.w")?, bound.get("head.fc1.b")?)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, bound.get("head.fc2.w")?, bound.get("head.fc2.b")?)?;
    Ok(tape.tanh(h))
}

/// Mean over pillars of the squared-distance Chamfer distance. With no
/// pillars the loss is a constant zero.
pub fn chamfer_loss(tape: &mut Tape, pred: Var, targets: &[f64], k_pred: usize) -> Result<Var> {
    if tape.shape(pred)[0] == 0 {
        warn!("no masked pillars; reconstruction loss defined as 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.chamfer(pred, targets, k_pred)
}

/// `mean_p min_t ‖p−t‖² + mean_t min_p ‖p−t‖²` of two point sets.
pub fn chamfer_distance(pred: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let nearest = |a: &[f64; 3], set: &[[f64; 3]]| set.iter().map(|b| d2(a, b)).fold(f64::INFINITY, f64::min);
    let fwd: f64 = pred.iter().map(|p| nearest(p, target)).sum();
    let bwd: f64 = target.iter().map(|t| nearest(t, pred)).sum();
    fwd / pred.len() as f64 + bwd / target.len() as f64
}

/// Everything a forward pass produces besides the loss value.
#[derive(Debug)]
pub struct ForwardOutput {
    pub loss: Var,
    pub cur_pillars: PillarSet,
    pub prev_pillars: PillarSet,
    pub split: MaskSplit,
    /// `|masked| × 3·k_pred`, absent when nothing is masked.
    pub predictions: Option<Var>,
    /// `|masked| × k_gt × 3`, flat.
    pub targets: Vec<f64>,
    /// Head-averageable scores of the first cross-attention pass.
    pub attention: Vec<GroupScores>,
}

/// Full temporal pipeline: voxelize both frames, mask cur, encode, fuse,
/// densify the visible tokens, diffuse, reconstruct masked pillars and
/// score them with Chamfer. `prev` must already be in cur's coordinates.
/// `rng` draws the mask and then the targets.
pub fn forward_tmae<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    grid: &GridConfig,
    prev: &PointFrame,
    cur: &PointFrame,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let prev_p = assign_pillars(prev, grid)?;
    let cur_p = assign_pillars(cur, grid)?;
    if cur_p.is_empty() {
        return Err(Error::EmptyFrame(format!(
            "frame {} has no points inside the grid",
            cur.timestamp_index
        )));
    }
    let split = mask_pillars(&cur_p, cfg.mask_ratio, rng)?;
    let visible = cur_p.subset(&split.visible);
    let (tp, tc) = siam_encode(tape, bound, cfg, grid, (prev, &prev_p), (cur, &visible))?;
    let (fused, attention) = wca(tape, bound, cfg, (tp, &prev_p.coords), (tc, &visible.coords))?;
    decode(tape, bound, cfg, grid, cur, cur_p, prev_p, split, visible, fused, attention, rng)
}

/// Single-frame network on the union of both frames (prev already aligned
/// to cur). Pillars, masking and targets all refer to the merged frame.
pub fn forward_concat<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    grid: &GridConfig,
    prev: &PointFrame,
    cur: &PointFrame,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let merged = concat_frames(prev, cur);
    let merged_p = assign_pillars(&merged, grid)?;
    if merged_p.is_empty() {
        return Err(Error::EmptyFrame(format!(
            "frame {} has no points inside the grid",
            cur.timestamp_index
        )));
    }
    let split = mask_pillars(&merged_p, cfg.mask_ratio, rng)?;
    let visible = merged_p.subset(&split.visible);
    let tokens = encode_frame(tape, bound, cfg, grid, &merged, &visible)?;
    decode(
        tape,
        bound,
        cfg,
        grid,
        &merged,
        merged_p,
        PillarSet::default(),
        split,
        visible,
        tokens,
        Vec::new(),
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn decode<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    grid: &GridConfig,
    target_frame: &PointFrame,
    cur_p: PillarSet,
    prev_p: PillarSet,
    split: MaskSplit,
    visible: PillarSet,
    tokens: Var,
    attention: Vec<GroupScores>,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let map = densify(tape, tokens, &visible.coords, grid)?;
    let map = diffuse(tape, bound, cfg, map)?;
    let masked_coords: Vec<[usize; 2]> = split.masked.iter().map(|&i| cur_p.coords[i]).collect();
    let targets = sample_targets(target_frame, &cur_p, &split.masked, cfg.k_gt, grid, rng)?;
    let pred = reconstruct(tape, bound, map, &masked_coords, grid)?;
    let loss = chamfer_loss(tape, pred, &targets, cfg.k_pred)?;
    let predictions = (!masked_coords.is_empty()).then_some(pred);
    Ok(ForwardOutput {
        loss,
        cur_pillars: cur_p,
        prev_pillars: prev_p,
        split,
        predictions,
        targets,
        attention,
    })
}

/// Outcome of [`pipeline_grad_check`].
#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub report: GradCheckReport,
    /// Seed of the instance the report belongs to.
    pub instance_seed: u64,
    /// Instances tried before one without branch switches was found.
    pub attempts: usize,
    /// Occupied pillars of the current frame.
    pub pillars: usize,
}

/// Gradient check of the full temporal loss on a small random instance:
/// two frames of `points` uniform points inside `grid`, parameters from
/// [`init_params`] jittered by `U(-0.1, 0.1)` so no bias or gain sits at a
/// special value.
///
/// Central differences are only meaningful where the loss is smooth over
/// `±eps`. Instances whose perturbed evaluations cross a ReLU or a Chamfer
/// nearest-neighbour switch are discarded and the next seed is tried, up to
/// `max_attempts`; the last report is returned either way.
pub fn pipeline_grad_check(
    cfg: &ModelConfig,
    grid: &GridConfig,
    points: usize,
    seed: u64,
    opts: &GradCheckOptions,
    max_attempts: usize,
) -> Result<PipelineCheck> {
    grid.validate()?;
    let mut last = None;
    for attempt in 0..max_attempts.max(1) {
        let instance_seed = seed.wrapping_add(attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
        let mut params = init_params(cfg, Architecture::Temporal, rng.gen())?;
        let names: Vec<String> = params.names().map(String::from).collect();
        for n in names {
            if let Some(t) = params.get_mut(&n) {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
        }
        let mut frame = |idx: u32| -> Result<PointFrame> {
            let pts = (0..points)
                .map(|_| [0, 1, 2].map(|k| rng.gen_range(grid.range_min[k]..grid.range_max[k])))
                .collect();
            let inten = (0..points).map(|_| rng.gen_range(0.0..1.0)).collect();
            PointFrame::new(idx, pts, inten, crate::geometry::Pose::identity())
        };
        let prev = frame(0)?;
        let cur = frame(1)?;
        let mask_seed: u64 = rng.gen();
        let report = grad_check(
            |tape, b| {
                let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
                Ok(forward_tmae(tape, b, cfg, grid, &prev, &cur, &mut rng)?.loss)
            },
            &params,
            opts,
        )?;
        let check = PipelineCheck {
            pillars: assign_pillars(&cur, grid)?.len(),
            report,
            instance_seed,
            attempts: attempt + 1,
        };
        if check.report.kinks() == 0 {
            return Ok(check);
        }
        log::info!(
            "gradcheck instance {instance_seed} crosses {} branch switches; trying the next",
            check.report.kinks()
        );
        last = Some(check);
    }
    Ok(last.expect("at least one attempt"))
}
