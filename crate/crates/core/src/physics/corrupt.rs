use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::world::Trajectory;
use crate::error::{Error, Result};

/// Ways a clip is made physically implausible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    /// Independent Gaussian offsets with std `magnitude` on every coordinate.
    Jitter,
    /// Frame-to-frame displacements shrink by `exp(−magnitude · t)`.
    DragDistortion,
    /// From a random frame on, the clip is shifted by `magnitude` in a random direction.
    Teleport,
    /// The last `⌈F · magnitude⌉` frames repeat the first frozen one.
    Freeze,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Jitter,
        CorruptionKind::DragDistortion,
        CorruptionKind::Teleport,
        CorruptionKind::Freeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Jitter => "jitter",
            CorruptionKind::DragDistortion => "drag_distortion",
            CorruptionKind::Teleport => "teleport",
            CorruptionKind::Freeze => "freeze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

pub fn corrupt<R: Rng + ?Sized>(
    traj: &Trajectory,
    kind: CorruptionKind,
    magnitude: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::Precondition(format!("corruption magnitude must be ≥ 0, got {magnitude}")));
    }
    let mut out = traj.clone();
    if magnitude == 0.0 {
        return Ok(out);
    }
    let frames = traj.frames();
    let dims = traj.dims();
    match kind {
        CorruptionKind::Jitter => {
            let noise = Normal::new(0.0, magnitude).map_err(|e| Error::Precondition(e.to_string()))?;
            for v in out.flat_mut() {
                *v += noise.sample(rng);
            }
        }
        CorruptionKind::DragDistortion => {
            let h = traj.frame_step();
            for k in 1..frames {
                let decay = (-magnitude * k as f64 * h).exp();
                for d in 0..dims {
                    let step = traj.frame(k)[d] - traj.frame(k - 1)[d];
                    let prev = out.frame(k - 1)[d];
                    out.frame_mut(k)[d] = prev + decay * step;
                }
            }
        }
        CorruptionKind::Teleport => {
            let start = rng.random_range(1..frames);
            let mut dir: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= magnitude / norm);
            for k in start..frames {
                for (x, o) in out.frame_mut(k).iter_mut().zip(&dir) {
                    *x += o;
                }
            }
        }
        CorruptionKind::Freeze => {
            let frozen = (frames as f64 * magnitude.min(1.0)).ceil() as usize;
            let start = frames - frozen.min(frames);
            let start = start.min(frames - 1);
            let held = traj.frame(start).to_vec();
            for k in start..frames {
                out.frame_mut(k).copy_from_slice(&held);
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::numeric(format!("{} corruption output", kind.name())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ramp() -> Trajectory {
        let data = (0..32).map(|i| i as f64 * 0.1).collect();
        Trajectory::new(16, 2, 0.1, data).unwrap()
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let t = ramp();
        let mut rng = seeded(1);
        for kind in CorruptionKind::ALL {
            assert_eq!(corrupt(&t, kind, 0.0, &mut rng).unwrap(), t);
        }
    }

    #[test]
    fn jitter_std_matches_magnitude() {
        let t = ramp();
        let mut rng = seeded(2);
        let sigma = 0.3;
        let mut diffs = Vec::new();
        for _ in 0..1000 {
            let j = corrupt(&t, CorruptionKind::Jitter, sigma, &mut rng).unwrap();
            diffs.extend(j.flat().iter().zip(t.flat()).map(|(a, b)| a - b));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - sigma).abs() < 0.1 * sigma, "std {std}");
    }

    #[test]
    fn freeze_half_holds_middle_frame() {
        let t = ramp();
        let f = corrupt(&t, CorruptionKind::Freeze, 0.5, &mut seeded(3)).unwrap();
        for k in 0..8 {
            assert_eq!(f.frame(k), t.frame(k));
        }
        for k in 8..16 {
            assert_eq!(f.frame(k), t.frame(8));
        }
        // Odd frame count: last ⌈F/2⌉ frames equal frame ⌊F/2⌋.
        let odd = Trajectory::new(5, 1, 0.1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = corrupt(&odd, CorruptionKind::Freeze, 0.5, &mut seeded(3)).unwrap();
        assert_eq!(f.flat(), &[0.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn teleport_and_drag_change_the_clip() {
        let t = ramp();
        let mut rng = seeded(4);
        let tp = corrupt(&t, CorruptionKind::Teleport, 0.5, &mut rng).unwrap();
        assert_eq!(tp.frame(0), t.frame(0));
        let last_shift: f64 = tp.frame(15).iter().zip(t.frame(15)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((last_shift.sqrt() - 0.5).abs() < 1e-12);
        let dr = corrupt(&t, CorruptionKind::DragDistortion, 2.0, &mut rng).unwrap();
        assert_eq!(dr.frame(0), t.frame(0));
        assert!(dr.frame(15)[0] < t.frame(15)[0]);
    }

    #[test]
    fn bad_inputs() {
        assert!(CorruptionKind::parse("melt").is_err());
        assert!(corrupt(&ramp(), CorruptionKind::Jitter, -1.0, &mut seeded(0)).is_err());
    }
}
