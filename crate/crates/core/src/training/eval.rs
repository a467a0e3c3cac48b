use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{transform_to_frame, PointFrame};
use crate::model::{architecture_of, forward_concat, forward_tmae, siam_encode, wca, Architecture};
use crate::params::ParamStore;
use crate::pillars::assign_pillars;
use crate::tensor::Tape;

pub const MAX_GAP: usize = 5;

/// How far back the previous frame lies at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gap {
    Fixed(usize),
    /// Uniform over `1..=5`, drawn per frame from the eval seed.
    Random,
}

impl FromStr for Gap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            return Ok(Gap::Random);
        }
        match s.parse::<usize>() {
            Ok(g) if (1..=MAX_GAP).contains(&g) => Ok(Gap::Fixed(g)),
            _ => Err(Error::InvalidArgument(format!(
                "gap must be 1..={MAX_GAP} or `random`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for Gap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gap::Fixed(g) => write!(f, "{g}"),
            Gap::Random => f.write_str("random"),
        }
    }
}

/// Where the previous frame comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrevSource {
    /// The same sequence, aligned to the current pose.
    True,
    /// The same index of the next sequence, left in its own ego coordinates.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub sequence: usize,
    pub frame: usize,
    pub prev_frame: usize,
    pub masked: usize,
    pub chamfer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub gap: Gap,
    pub source: PrevSource,
    pub frames: Vec<FrameEval>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl EvalReport {
    pub fn chamfers(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.chamfer).collect()
    }
}

fn frame_rng(seed: u64, sequence: usize, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sequence as u64) << 32) | frame as u64);
    rng
}

/// Index of the previous frame for `frame`, clamped to the sequence start.
pub fn prev_index(frame: usize, gap: Gap, seed: u64, sequence: usize) -> usize {
    let g = match gap {
        Gap::Fixed(g) => g,
        Gap::Random => frame_rng(seed ^ 0x5EED_6A90, sequence, frame).gen_range(1..=MAX_GAP),
    };
    frame.saturating_sub(g)
}

/// Mean Chamfer over masked pillars of every frame that has history
/// (frame index ≥ 1) in every sequence.
///
/// The mask and targets of frame `t` in sequence `s` depend only on
/// `(eval_seed, s, t)`, so reports for different gaps and sources pair up
/// frame by frame. Frames are spread over threads; results do not depend on
/// the thread count.
pub fn eval_recon(
    params: &ParamStore,
    cfg: &RunConfig,
    dataset: &[Vec<PointFrame>],
    gap: Gap,
    source: PrevSource,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if source == PrevSource::Shuffled && dataset.len() < 2 {
        return Err(Error::InvalidArgument("shuffled previous frames need at least two sequences".into()));
    }
    let seed = cfg.train.eval_seed;
    let jobs: Vec<(usize, usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.len()).map(move |t| (s, t, prev_index(t, gap, seed, s))))
        .collect();
    let arch = architecture_of(params);

    let run = |&(s, t, p): &(usize, usize, usize)| -> Result<FrameEval> {
        let cur = &dataset[s][t];
        let prev = match source {
            PrevSource::True => transform_to_frame(&dataset[s][p], &cur.pose)?,
            PrevSource::Shuffled => {
                let other = &dataset[(s + 1) % dataset.len()];
                let mut f = other[p.min(other.len() - 1)].clone();
                f.pose = cur.pose;
                f
            }
        };
        let mut rng = frame_rng(seed, s, t);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = match arch {
            Architecture::Temporal => forward_tmae(&mut tape, &bound, &cfg.model, &cfg.grid, &prev, cur, &mut rng)?,
            Architecture::Concat => forward_concat(&mut tape, &bound, &cfg.model, &cfg.grid, &prev, cur, &mut rng)?,
        };
        Ok(FrameEval {
            sequence: s,
            frame: t,
            prev_frame: p,
            masked: out.split.masked.len(),
            chamfer: tape.value(out.loss).item(),
        })
    };

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<FrameEval>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut frames = Vec::with_capacity(jobs.len());
    for r in results {
        frames.extend(r?.into_iter().filter(|f| f.masked > 0));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frame had masked pillars to evaluate".into()));
    }
    let n = frames.len() as f64;
    let mean = frames.iter().map(|f| f.chamfer).sum::<f64>() / n;
    let std = if frames.len() > 1 {
        (frames.iter().map(|f| (f.chamfer - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        gap,
        source,
        frames,
        mean,
        std,
    })
}

/// Paired one-sided sign test of `a < b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    /// Pairs with `a < b`.
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "sign test needs paired samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let ties = a.len() as u64 - wins - losses;
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        bin.sf(wins - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// Restricts which current-frame pillars appear in an attention dump.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnFilter {
    /// Pillars whose center lies in `[min, max]` (ego meters).
    Region { min: [f64; 2], max: [f64; 2] },
    Cells(BTreeSet<[usize; 2]>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnRow {
    pub cur: [usize; 2],
    pub prev: [usize; 2],
    pub score: f64,
}

/// Head-averaged scores of the first cross-attention pass, with every
/// current pillar visible. `prev` must already be in `cur`'s coordinates.
pub fn dump_attention(
    params: &ParamStore,
    cfg: &RunConfig,
    prev: &PointFrame,
    cur: &PointFrame,
    filter: Option<&AttnFilter>,
) -> Result<Vec<AttnRow>> {
    if architecture_of(params) != Architecture::Temporal {
        return Err(Error::InvalidArgument("attention dumps need a temporal checkpoint".into()));
    }
    let prev_p = assign_pillars(prev, &cfg.grid)?;
    let cur_p = assign_pillars(cur, &cfg.grid)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (tp, tc) = siam_encode(&mut tape, &bound, &cfg.model, &cfg.grid, (prev, &prev_p), (cur, &cur_p))?;
    let (_, scores) = wca(&mut tape, &bound, &cfg.model, (tp, &prev_p.coords), (tc, &cur_p.coords))?;
    let keep = |c: [usize; 2]| match filter {
        None => true,
        Some(AttnFilter::Cells(set)) => set.contains(&c),
        Some(AttnFilter::Region { min, max }) => {
            let p = cfg.grid.cell_center(c);
            (0..2).all(|k| p[k] >= min[k] && p[k] <= max[k])
        }
    };
    let mut rows = Vec::new();
    for g in &scores {
        let mean = g.head_mean();
        for (qi, &q) in g.queries.iter().enumerate() {
            let c = cur_p.coords[q];
            if !keep(c) {
                continue;
            }
            for (ki, &k) in g.keys.iter().enumerate() {
                rows.push(AttnRow {
                    cur: c,
                    prev: prev_p.coords[k],
                    score: mean[qi * g.keys.len() + ki],
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_attention_csv<W: Write>(mut out: W, rows: &[AttnRow]) -> std::io::Result<()> {
    writeln!(out, "cur_ix,cur_iy,prev_ix,prev_iy,score")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{:.9e}", r.cur[0], r.cur[1], r.prev[0], r.prev[1], r.score)?;
    }
    Ok(())
}
