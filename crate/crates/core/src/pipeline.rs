//! Training-set curation: physics-richness filtering, per-category difficulty
//! from a pretrained generator, and difficulty-weighted sampling.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::Generator;
use crate::physics::{overall_score, score, simulate, Condition, PoolRecord, Trajectory, WorldConfig};
use crate::rng::{child_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Temperature on difficulty.
    pub tau: f64,
    /// Total number of training pairs requested.
    pub budget: usize,
    /// Representatives scored per category.
    pub n_reps: usize,
    pub richness_threshold: f64,
    /// Capped shortfall is never redistributed; only `false` is accepted.
    pub redistribute: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            tau: 3.0,
            budget: 100,
            n_reps: 8,
            richness_threshold: 0.60,
            redistribute: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be finite and ≥ 0, got {}", self.tau)));
        }
        if self.budget == 0 || self.n_reps == 0 {
            return Err(Error::Config("budget and n_reps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.richness_threshold) {
            return Err(Error::Config(format!(
                "richness threshold {} outside [0, 1]",
                self.richness_threshold
            )));
        }
        if self.redistribute {
            return Err(Error::Config("redistribution of capped budget is not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichnessRecord {
    pub record: PoolRecord,
    pub physics_richness: f64,
    pub physics_label: bool,
}

/// `0.5·s_pc + 0.5·min(1, mean displacement / motion_scale)`.
pub fn richness_score(record: &PoolRecord, world: &WorldConfig) -> f64 {
    let s_pc = score(&record.trajectory, &record.condition, world).s_pc;
    let disp = record.trajectory.mean_displacement();
    let motion = if disp.is_finite() && world.motion_scale > 0.0 {
        (disp / world.motion_scale).min(1.0)
    } else {
        0.0
    };
    0.5 * s_pc + 0.5 * motion
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Records with richness ≥ threshold, in input order.
    pub kept: Vec<PoolRecord>,
    /// One entry per input record.
    pub scored: Vec<RichnessRecord>,
    /// Set when nothing survived.
    pub warning: Option<String>,
}

pub fn filter_pool(pool: &[PoolRecord], threshold: f64, world: &WorldConfig) -> Result<FilterOutcome> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Precondition(format!("threshold {threshold} outside [0, 1]")));
    }
    let scored: Vec<RichnessRecord> = pool
        .par_iter()
        .map(|r| {
            let physics_richness = richness_score(r, world);
            RichnessRecord {
                record: r.clone(),
                physics_richness,
                physics_label: physics_richness >= threshold,
            }
        })
        .collect();
    let kept: Vec<PoolRecord> = scored
        .iter()
        .filter(|r| r.physics_label)
        .map(|r| r.record.clone())
        .collect();
    let warning = kept
        .is_empty()
        .then(|| format!("no record of {} reached richness {threshold}", pool.len()));
    Ok(FilterOutcome { kept, scored, warning })
}

/// Per-category record counts.
pub fn build_histogram(records: &[PoolRecord], num_categories: usize) -> Result<Vec<usize>> {
    let mut h = vec![0; num_categories];
    for r in records {
        let k = r.condition.category;
        *h.get_mut(k)
            .ok_or_else(|| Error::Precondition(format!("category {k} outside 0..{num_categories}")))? += 1;
    }
    Ok(h)
}

/// Mean overall score of `n_reps` generated representatives per category,
/// `None` for categories without filtered records.
///
/// Representatives are the category's highest-richness records (ties keep
/// input order); when fewer exist, the ranking is cycled. Each representative
/// uses its own stream derived from one draw of `rng`.
pub fn category_difficulty<G: Generator, R: Rng + ?Sized>(
    filtered: &[PoolRecord],
    world: &WorldConfig,
    generator: &G,
    n_reps: usize,
    rng: &mut R,
) -> Result<Vec<Option<f64>>> {
    if n_reps == 0 {
        return Err(Error::Precondition("n_reps must be at least 1".into()));
    }
    let k_count = world.num_categories();
    build_histogram(filtered, k_count)?;
    let base: u64 = rng.random();
    let mut out = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut ranked: Vec<(f64, &PoolRecord)> = filtered
            .iter()
            .filter(|r| r.condition.category == k)
            .map(|r| (richness_score(r, world), r))
            .collect();
        if ranked.is_empty() {
            out.push(None);
            continue;
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let stream = child_seed(base, k as u64);
        let scores: Vec<f64> = (0..n_reps)
            .into_par_iter()
            .map(|i| {
                let cond = &ranked[i % ranked.len()].1.condition;
                let mut rep_rng = seeded(child_seed(stream, i as u64));
                let clip = generator.generate(cond, &mut rep_rng)?;
                Ok(overall_score(&score(&clip, cond, world)))
            })
            .collect::<Result<_>>()?;
        out.push(Some(scores.iter().sum::<f64>() / n_reps as f64));
    }
    Ok(out)
}

/// Integer apportionment of `total` by `shares`: floors first, then one extra
/// unit to the largest fractional parts (ties to the lower index).
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (shares[a] - shares[a].floor(), shares[b] - shares[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Difficulty-weighted allocation `H_r(k) = min(H_f(k), round(N·r_k/Σ r_j))`
/// with `r_k = exp(τ·(1 − S_f(k)))`.
///
/// Categories without a score (no filtered records) take no share. The cap is
/// applied after rounding and the shortfall is not redistributed.
pub fn sample_budget(h_f: &[usize], s_f: &[Option<f64>], tau: f64, budget: usize) -> Result<Vec<usize>> {
    if h_f.len() != s_f.len() {
        return Err(Error::shape("difficulty scores", h_f.len(), s_f.len()));
    }
    if let Some(bad) = s_f.iter().flatten().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Precondition(format!("category score {bad} outside [0, 1]")));
    }
    if h_f.iter().all(|&h| h == 0) {
        return Ok(vec![0; h_f.len()]);
    }
    let r: Vec<f64> = h_f
        .iter()
        .zip(s_f)
        .map(|(&h, s)| match s {
            Some(s) if h > 0 => (tau * (1.0 - s)).exp(),
            _ => 0.0,
        })
        .collect();
    let total: f64 = r.iter().sum();
    if total == 0.0 {
        return Ok(vec![0; h_f.len()]);
    }
    let shares: Vec<f64> = r.iter().map(|rk| budget as f64 * rk / total).collect();
    Ok(largest_remainder(&shares, budget)
        .into_iter()
        .zip(h_f)
        .map(|(c, &h)| c.min(h))
        .collect())
}

/// Draws `h_r[k]` distinct records per category, re-simulates each winner
/// from its condition and returns the pairs in a seeded shuffled order.
pub fn draw_training_set<R: Rng + ?Sized>(
    filtered: &[PoolRecord],
    h_r: &[usize],
    world: &WorldConfig,
    rng: &mut R,
) -> Result<Vec<(Condition, Trajectory)>> {
    let h_f = build_histogram(filtered, world.num_categories())?;
    if h_r.len() != h_f.len() {
        return Err(Error::shape("sampling plan", h_f.len(), h_r.len()));
    }
    let mut chosen = Vec::new();
    for (k, (&want, &have)) in h_r.iter().zip(&h_f).enumerate() {
        if want > have {
            return Err(Error::Precondition(format!(
                "category {k}: {want} draws requested but only {have} records available"
            )));
        }
        let members: Vec<&PoolRecord> = filtered.iter().filter(|r| r.condition.category == k).collect();
        for i in index::sample(rng, have, want) {
            chosen.push(&members[i].condition);
        }
    }
    chosen.shuffle(rng);
    chosen
        .into_iter()
        .map(|c| {
            let cat = world.category(c.category)?;
            let clip = simulate(cat, &c.init_position, &c.init_velocity, world.frames, world.frame_step)?;
            Ok((c.clone(), clip))
        })
        .collect()
}

/// Everything the sampling stage decided, per category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryHistograms {
    pub names: Vec<String>,
    pub h_f: Vec<usize>,
    pub s_f: Vec<Option<f64>>,
    pub d: Vec<Option<f64>>,
    pub r: Vec<Option<f64>>,
    pub h_r: Vec<usize>,
}

const REPORT_HEADER: &str = "category,name,H_f,S_f,d,r,H_r";

impl CategoryHistograms {
    pub fn new(world: &WorldConfig, h_f: Vec<usize>, s_f: Vec<Option<f64>>, tau: f64, h_r: Vec<usize>) -> Self {
        let d: Vec<Option<f64>> = s_f.iter().map(|s| s.map(|s| 1.0 - s)).collect();
        let r = d.iter().map(|d| d.map(|d| (tau * d).exp())).collect();
        Self {
            names: world.categories.iter().map(|c| c.kind.name().to_string()).collect(),
            h_f,
            s_f,
            d,
            r,
            h_r,
        }
    }

    /// CSV with one row per category; absent values are written as `absent`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| x.to_string());
        let mut out = format!("{REPORT_HEADER}\n");
        for k in 0..self.h_f.len() {
            writeln!(
                out,
                "{k},{},{},{},{},{},{}",
                self.names[k],
                self.h_f[k],
                opt(self.s_f[k]),
                opt(self.d[k]),
                opt(self.r[k]),
                self.h_r[k]
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format {
            what: "sampling report",
            line,
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad(1, format!("expected header `{REPORT_HEADER}`")));
        }
        let mut h = Self {
            names: vec![],
            h_f: vec![],
            s_f: vec![],
            d: vec![],
            r: vec![],
            h_r: vec![],
        };
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(lineno, format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(lineno, format!("bad count `{s}`"))) };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s == "absent" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(lineno, format!("bad value `{s}`")))
                }
            };
            h.names.push(f[1].to_string());
            h.h_f.push(num(f[2])?);
            h.s_f.push(opt(f[3])?);
            h.d.push(opt(f[4])?);
            h.r.push(opt(f[5])?);
            h.h_r.push(num(f[6])?);
        }
        Ok(h)
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<4} {:<20} {:>6} {:>8} {:>8} {:>8} {:>6}\n",
            "k", "category", "H_f", "S_f", "d", "r", "H_r"
        );
        for k in 0..self.h_f.len() {
            writeln!(
                out,
                "{:<4} {:<20} {:>6} {:>8} {:>8} {:>8} {:>6}",
                k,
                self.names[k],
                self.h_f[k],
                opt(self.s_f[k]),
                opt(self.d[k]),
                opt(self.r[k]),
                self.h_r[k]
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{gen_pool, random_condition, Provenance};
    use crate::rng::StreamRng;

    struct Perfect<'a>(&'a WorldConfig);

    impl Generator for Perfect<'_> {
        fn generate(&self, c: &Condition, _: &mut StreamRng) -> Result<Trajectory> {
            let w = self.0;
            simulate(w.category(c.category)?, &c.init_position, &c.init_velocity, w.frames, w.frame_step)
        }
    }

    struct Frozen<'a>(&'a WorldConfig);

    impl Generator for Frozen<'_> {
        fn generate(&self, c: &Condition, _: &mut StreamRng) -> Result<Trajectory> {
            let w = self.0;
            let data = (0..w.frames).flat_map(|_| c.init_position.clone()).collect();
            Trajectory::new(w.frames, w.dims, w.frame_step, data)
        }
    }

    fn record(world: &WorldConfig, category: usize, rng: &mut StreamRng) -> PoolRecord {
        let condition = random_condition(world, category, rng);
        let trajectory = Perfect(world).generate(&condition, rng).unwrap();
        PoolRecord {
            condition,
            trajectory,
            corruption_magnitude: 0.0,
            provenance: Provenance::Clean,
        }
    }

    #[test]
    fn richness_rewards_motion_and_consistency() {
        let world = WorldConfig::default();
        let c = Condition {
            category: 0,
            init_position: vec![0.0, 0.0],
            init_velocity: vec![1.0, 0.8],
        };
        let clip = Perfect(&world).generate(&c, &mut seeded(0)).unwrap();
        let mut rec = PoolRecord {
            condition: c,
            trajectory: clip,
            corruption_magnitude: 0.0,
            provenance: Provenance::Clean,
        };
        assert!(richness_score(&rec, &world) >= 0.9);
        rec.trajectory = Frozen(&world).generate(&rec.condition, &mut seeded(0)).unwrap();
        assert!(richness_score(&rec, &world) <= 0.5);
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let world = WorldConfig::default();
        let pool = gen_pool(&world, 200, 0.5, &mut seeded(3)).unwrap();
        let all = filter_pool(&pool, 0.0, &world).unwrap();
        assert_eq!(all.kept, pool);
        let rich: Vec<f64> = all.scored.iter().map(|r| r.physics_richness).collect();
        let t = rich[17];
        let at = filter_pool(&pool, t, &world).unwrap();
        assert!(at.kept.contains(&pool[17]));
        assert_eq!(at.kept.len(), rich.iter().filter(|&&r| r >= t).count());
        let above = filter_pool(&pool, (t + 1e-9).min(1.0), &world).unwrap();
        if t < 1.0 {
            assert!(!above.kept.contains(&pool[17]));
        }
        let none = filter_pool(&pool[..0], 0.6, &world).unwrap();
        assert!(none.warning.is_some());
        assert!(filter_pool(&pool, 1.5, &world).is_err());
    }

    #[test]
    fn histogram_counts_categories() {
        let world = WorldConfig::default();
        let mut rng = seeded(1);
        let recs: Vec<PoolRecord> = [1, 0, 1, 1, 0].iter().map(|&k| record(&world, k, &mut rng)).collect();
        assert_eq!(build_histogram(&recs, 4).unwrap(), vec![2, 3, 0, 0]);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(build_histogram(&rev, 4).unwrap(), vec![2, 3, 0, 0]);
        assert_eq!(build_histogram(&[], 4).unwrap(), vec![0; 4]);
        assert!(build_histogram(&recs, 1).is_err());
    }

    #[test]
    fn difficulty_of_perfect_and_frozen_generators() {
        let world = WorldConfig::default();
        let mut rng = seeded(2);
        let recs: Vec<PoolRecord> = (0..12).map(|i| record(&world, i % 3, &mut rng)).collect();
        let s = category_difficulty(&recs, &world, &Perfect(&world), 4, &mut seeded(9)).unwrap();
        assert_eq!(&s[3], &None);
        for v in s.iter().take(3) {
            assert!((v.unwrap() - 1.0).abs() < 1e-9);
        }
        let frozen = category_difficulty(&recs, &world, &Frozen(&world), 4, &mut seeded(9)).unwrap();
        assert!(frozen[0].unwrap() < 0.9);
        assert_eq!(
            frozen,
            category_difficulty(&recs, &world, &Frozen(&world), 4, &mut seeded(9)).unwrap()
        );
    }

    #[test]
    fn budget_matches_hand_computed_allocations() {
        let s = [Some(0.9), Some(0.7), Some(0.4)];
        assert_eq!(sample_budget(&[50, 50, 50], &s, 3.0, 60).unwrap(), vec![8, 15, 37]);
        assert_eq!(sample_budget(&[5, 50, 50], &s, 3.0, 60).unwrap(), vec![5, 15, 37]);
        assert_eq!(sample_budget(&[0, 0, 0], &s, 3.0, 60).unwrap(), vec![0, 0, 0]);
        assert_eq!(
            sample_budget(&[50, 50, 50, 50], &[Some(0.1), Some(0.5), Some(0.9), Some(1.0)], 0.0, 100).unwrap(),
            vec![25; 4]
        );
        assert_eq!(sample_budget(&[0, 50], &[None, Some(0.5)], 3.0, 10).unwrap(), vec![0, 10]);
        assert!(sample_budget(&[1], &[Some(1.5)], 3.0, 10).is_err());
    }

    #[test]
    fn largest_remainder_hands_out_leftovers_by_fraction() {
        assert_eq!(largest_remainder(&[8.214, 14.968, 36.816], 60), vec![8, 15, 37]);
        assert_eq!(largest_remainder(&[1.5, 1.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[], 0), Vec::<usize>::new());
    }

    #[test]
    fn training_set_draws_within_categories() {
        let world = WorldConfig::default();
        let mut rng = seeded(4);
        let recs: Vec<PoolRecord> = (0..20).map(|i| record(&world, i % 4, &mut rng)).collect();
        let full = draw_training_set(&recs, &[5, 5, 5, 5], &world, &mut seeded(1)).unwrap();
        assert_eq!(full.len(), 20);
        for r in &recs {
            assert!(full.iter().any(|(c, t)| *c == r.condition && *t == r.trajectory));
        }
        let again = draw_training_set(&recs, &[5, 5, 5, 5], &world, &mut seeded(1)).unwrap();
        assert_eq!(full, again);
        assert!(draw_training_set(&recs, &[0; 4], &world, &mut seeded(1)).unwrap().is_empty());
        assert!(draw_training_set(&recs, &[6, 0, 0, 0], &world, &mut seeded(1)).is_err());
        let part = draw_training_set(&recs, &[2, 0, 3, 0], &world, &mut seeded(2)).unwrap();
        assert_eq!(part.iter().filter(|(c, _)| c.category == 0).count(), 2);
        assert_eq!(part.iter().filter(|(c, _)| c.category == 2).count(), 3);
    }

    #[test]
    fn report_round_trips() {
        let world = WorldConfig::default();
        let h = CategoryHistograms::new(&world, vec![3, 0, 5, 2], vec![Some(0.5), None, Some(0.25), Some(1.0)], 3.0, vec![1, 0, 4, 1]);
        assert_eq!(CategoryHistograms::from_csv(&h.to_csv()).unwrap(), h);
        assert!(h.to_table().contains("bounce"));
    }
}
