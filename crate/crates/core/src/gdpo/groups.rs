use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::io::{atomic_write, header_shape, header_value, parse_header, push_condition, push_floats, ClipShape, Fields};
use crate::physics::{score, Condition, PhysicsScore, Trajectory, WorldConfig};
use crate::rng::{child_seed, seeded};

/// One winner and `m` scored losers for a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceGroup {
    pub condition: Condition,
    pub winner: Trajectory,
    pub losers: Vec<Trajectory>,
    pub loser_scores: Vec<PhysicsScore>,
}

impl PreferenceGroup {
    pub fn validate(&self) -> Result<()> {
        if self.losers.is_empty() {
            return Err(Error::Precondition("a preference group needs at least one loser".into()));
        }
        if self.losers.len() != self.loser_scores.len() {
            return Err(Error::shape("loser scores", self.losers.len(), self.loser_scores.len()));
        }
        if let Some(s) = self.loser_scores.iter().find(|s| !s.is_valid()) {
            return Err(Error::Precondition(format!("loser score {s:?} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBuild {
    pub groups: Vec<PreferenceGroup>,
    /// One message per condition dropped because sampling failed.
    pub skipped: Vec<String>,
}

/// Samples `m` losers per training pair with the adapter off, each from its
/// own seed, and scores them. Conditions whose sampling fails numerically are
/// skipped and reported.
pub fn build_groups<R: Rng + ?Sized>(
    model: &FlowModel,
    training_set: &[(Condition, Trajectory)],
    m: usize,
    steps: usize,
    world: &WorldConfig,
    rng: &mut R,
) -> Result<GroupBuild> {
    if m == 0 {
        return Err(Error::Precondition("m must be at least 1".into()));
    }
    let base: u64 = rng.random();
    let built: Vec<std::result::Result<PreferenceGroup, String>> = training_set
        .par_iter()
        .enumerate()
        .map(|(i, (condition, winner))| {
            let seed = child_seed(base, i as u64);
            let mut losers = Vec::with_capacity(m);
            let mut loser_scores = Vec::with_capacity(m);
            for j in 0..m {
                let mut r = seeded(child_seed(seed, j as u64));
                match model.sample(condition, steps, &mut r, false) {
                    Ok(clip) => {
                        loser_scores.push(score(&clip, condition, world));
                        losers.push(clip);
                    }
                    Err(e) if e.is_numeric() => return Ok(Err(format!("condition {i}, loser {j}: {e}"))),
                    Err(e) => return Err(e),
                }
            }
            Ok(Ok(PreferenceGroup {
                condition: condition.clone(),
                winner: winner.clone(),
                losers,
                loser_scores,
            }))
        })
        .collect::<Result<_>>()?;
    let mut out = GroupBuild {
        groups: Vec::new(),
        skipped: Vec::new(),
    };
    for b in built {
        match b {
            Ok(g) => out.groups.push(g),
            Err(msg) => out.skipped.push(msg),
        }
    }
    Ok(out)
}

const MAGIC: &str = "gdpo-groups";
const VERSION: u32 = 1;
const WHAT: &str = "group cache";

/// Group cache text: the dataset layout extended with the loser clips and
/// their `(s_sa, s_pc)` scores.
pub fn encode_groups(groups: &[PreferenceGroup]) -> Result<String> {
    let Some(first) = groups.first() else {
        return Err(Error::Precondition("refusing to write an empty group cache".into()));
    };
    let shape = ClipShape::of(&first.winner);
    let m = first.losers.len();
    let d = shape.dims;
    let n = shape.frames * d;
    let mut out = format!(
        "{MAGIC} {VERSION} {} losers={m} fields=category,position[{d}],velocity[{d}],winner[{n}],{{s_sa,s_pc,loser[{n}]}}[{m}]\n",
        shape.header_fields()
    );
    for g in groups {
        g.validate()?;
        if g.losers.len() != m {
            return Err(Error::shape("losers per group", m, g.losers.len()));
        }
        for t in std::iter::once(&g.winner).chain(&g.losers) {
            if ClipShape::of(t) != shape {
                return Err(Error::Precondition("all clips in a cache must share geometry".into()));
            }
        }
        push_condition(&mut out, &g.condition);
        push_floats(&mut out, g.winner.flat());
        for (l, s) in g.losers.iter().zip(&g.loser_scores) {
            write!(out, ",{},{}", s.s_sa, s.s_pc).unwrap();
            push_floats(&mut out, l.flat());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_groups(text: &str) -> Result<Vec<PreferenceGroup>> {
    let mut lines = text.lines();
    let pairs = parse_header(WHAT, MAGIC, VERSION, lines.next())?;
    let shape = header_shape(WHAT, &pairs)?;
    let m: usize = header_value(WHAT, &pairs, "losers")?;
    let mut groups = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(WHAT, i + 2, line);
        let condition = f.condition(shape.dims)?;
        let winner = f.trajectory(&shape)?;
        let mut losers = Vec::with_capacity(m);
        let mut loser_scores = Vec::with_capacity(m);
        for _ in 0..m {
            loser_scores.push(PhysicsScore::new(f.next()?, f.next()?));
            losers.push(f.trajectory(&shape)?);
        }
        f.finish()?;
        let g = PreferenceGroup {
            condition,
            winner,
            losers,
            loser_scores,
        };
        g.validate().map_err(|e| Error::Format {
            what: WHAT,
            line: i + 2,
            msg: e.to_string(),
        })?;
        groups.push(g);
    }
    Ok(groups)
}

pub fn write_groups(path: &Path, groups: &[PreferenceGroup]) -> Result<()> {
    atomic_write(path, encode_groups(groups)?.as_bytes())
}

pub fn read_groups(path: &Path) -> Result<Vec<PreferenceGroup>> {
    decode_groups(&fs::read_to_string(path)?)
}
