//! Runtime chunk selection, two-chunk opacity blending, and the residency
//! state machine used for streaming playback.
//!
//! The renderer always draws the union of the two nearest chunks' active
//! sets. Splats in both sets keep full opacity; splats exclusive to the
//! nearest chunk `m_f` are scaled by `t` and those exclusive to the other
//! chunk `m_o` by `1 - t`, where `t` is the clamped projection of the camera
//! onto the segment between the two centers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::scene::{ChunkPlan, Gaussian, LodLevel};
use crate::{Error, Result};

/// Ids of the two closest centers; ties go to the lower id.
pub fn nearest_two_chunks(centers: &[Vector3<f64>], c: &Vector3<f64>) -> (usize, Option<usize>) {
    assert!(!centers.is_empty(), "chunk plan has no centers");
    let mut best: [(f64, usize); 2] = [(f64::INFINITY, usize::MAX); 2];
    for (j, m) in centers.iter().enumerate() {
        let key = ((c - m).norm_squared(), j);
        if key < best[0] {
            best[1] = best[0];
            best[0] = key;
        } else if key < best[1] {
            best[1] = key;
        }
    }
    (best[0].1, (best[1].1 != usize::MAX).then_some(best[1].1))
}

/// `(t̄, t)` with `t̄ = (c − m_o)ᵀ(m_f − m_o) / ‖m_o − m_f‖²` and `t = clamp(t̄, 0, 1)`.
pub fn blend_factor(c: &Vector3<f64>, m_f: &Vector3<f64>, m_o: &Vector3<f64>) -> Result<(f64, f64)> {
    let axis = m_f - m_o;
    let len2 = axis.norm_squared();
    if !(len2 > 0.0) {
        return Err(Error::InvalidArgument("blend between coincident chunk centers".into()));
    }
    let t_bar = (c - m_o).dot(&axis) / len2;
    Ok((t_bar, t_bar.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendState {
    /// Resident chunks, nearest first. At most two.
    pub loaded_chunks: Vec<usize>,
    pub t_bar: f64,
    pub t: f64,
}

impl BlendState {
    pub fn empty() -> Self {
        Self { loaded_chunks: Vec::new(), t_bar: 1.0, t: 1.0 }
    }

    pub fn primary(&self) -> Option<usize> {
        self.loaded_chunks.first().copied()
    }

    pub fn secondary(&self) -> Option<usize> {
        self.loaded_chunks.get(1).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamEventKind {
    Load,
    Unload,
    SwapPrimary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub kind: StreamEventKind,
    pub chunk_id: usize,
    pub camera_position: [f64; 3],
}

/// Per-level union of two chunks' active sets with opacity modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedSelection {
    /// `per_level[l]` is sorted by index.
    pub per_level: Vec<Vec<(u32, f64)>>,
}

impl BlendedSelection {
    pub fn len(&self) -> usize {
        self.per_level.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat render list.
    pub fn gather<'a>(&self, levels: &'a [LodLevel]) -> Vec<(&'a Gaussian, f64)> {
        levels
            .iter()
            .zip(&self.per_level)
            .flat_map(|(level, set)| set.iter().map(move |&(i, m)| (&level.gaussians[i as usize], m)))
            .collect()
    }
}

/// Merges chunk `m_f`'s and `m_o`'s active sets. Both must be resident.
pub fn compose_active(
    plan: &ChunkPlan,
    resident: &[usize],
    m_f: usize,
    m_o: Option<usize>,
    t: f64,
) -> Result<BlendedSelection> {
    for id in std::iter::once(m_f).chain(m_o) {
        if id >= plan.len() {
            return Err(Error::InvalidArgument(format!("chunk {id} out of range")));
        }
        if !resident.contains(&id) {
            return Err(Error::InvalidArgument(format!("chunk {id} is not resident")));
        }
    }
    let f_sets = &plan.active_sets[m_f];
    let Some(o) = m_o.filter(|&o| o != m_f) else {
        return Ok(BlendedSelection {
            per_level: f_sets.iter().map(|s| s.iter().map(|&i| (i, 1.0)).collect()).collect(),
        });
    };
    let o_sets = &plan.active_sets[o];
    let per_level = f_sets
        .iter()
        .zip(o_sets)
        .map(|(a, b)| {
            let mut out = Vec::with_capacity(a.len().max(b.len()));
            let (mut i, mut j) = (0, 0);
            while i < a.len() || j < b.len() {
                match (a.get(i), b.get(j)) {
                    (Some(&x), Some(&y)) if x == y => {
                        out.push((x, 1.0));
                        i += 1;
                        j += 1;
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        out.push((x, t));
                        i += 1;
                    }
                    (Some(&x), None) => {
                        out.push((x, t));
                        i += 1;
                    }
                    (_, Some(&y)) => {
                        out.push((y, 1.0 - t));
                        j += 1;
                    }
                    (None, None) => unreachable!(),
                }
            }
            out
        })
        .collect();
    Ok(BlendedSelection { per_level })
}

/// The nearest chunk's set alone at full opacity (no blending).
pub fn hard_selection(plan: &ChunkPlan, c: &Vector3<f64>) -> BlendedSelection {
    let (f, _) = nearest_two_chunks(&plan.centers, c);
    compose_active(plan, &[f], f, None, 1.0).expect("nearest chunk is in range")
}

/// Blend selection for the current state.
pub fn blended_selection(plan: &ChunkPlan, state: &BlendState) -> Result<BlendedSelection> {
    let f = state
        .primary()
        .ok_or_else(|| Error::InvalidArgument("no resident chunk".into()))?;
    compose_active(plan, &state.loaded_chunks, f, state.secondary(), state.t)
}

/// State for the nearest two chunks at `c`, without event bookkeeping.
pub fn state_at(plan: &ChunkPlan, c: &Vector3<f64>) -> BlendState {
    let (f, o) = nearest_two_chunks(&plan.centers, c);
    let (t_bar, t) = match o {
        Some(o) => blend_factor(c, &plan.centers[f], &plan.centers[o]).unwrap_or((1.0, 1.0)),
        None => (1.0, 1.0),
    };
    BlendState { loaded_chunks: std::iter::once(f).chain(o).collect(), t_bar, t }
}

/// Advances the residency state to camera position `c`.
///
/// The resident pair always equals the nearest two chunks. When it changes,
/// outgoing chunks are unloaded before incoming ones are loaded, so at most
/// two are ever resident; `swap_primary` fires whenever the nearest chunk
/// changes.
pub fn stream_step(state: &BlendState, plan: &ChunkPlan, c: &Vector3<f64>) -> (BlendState, Vec<StreamEvent>) {
    let next = state_at(plan, c);
    let pos: [f64; 3] = (*c).into();
    let mut events = Vec::new();
    for &id in &state.loaded_chunks {
        if !next.loaded_chunks.contains(&id) {
            events.push(StreamEvent { kind: StreamEventKind::Unload, chunk_id: id, camera_position: pos });
        }
    }
    for &id in &next.loaded_chunks {
        if !state.loaded_chunks.contains(&id) {
            events.push(StreamEvent { kind: StreamEventKind::Load, chunk_id: id, camera_position: pos });
        }
    }
    if let (Some(old), Some(new)) = (state.primary(), next.primary()) {
        if old != new {
            events.push(StreamEvent { kind: StreamEventKind::SwapPrimary, chunk_id: new, camera_position: pos });
        }
    }
    (next, events)
}

/// Unique Gaussians held by the given resident chunks.
pub fn resident_count(plan: &ChunkPlan, resident: &[usize]) -> usize {
    match resident {
        [] => 0,
        [a] => plan.active_sets[*a].iter().map(Vec::len).sum(),
        [a, b, ..] => compose_active(plan, resident, *a, Some(*b), 1.0)
            .map(|s| s.len())
            .unwrap_or(0),
    }
}

/// Largest two-chunk union over all chunk pairs (the single chunk for
/// one-chunk plans).
pub fn max_pair_union(plan: &ChunkPlan) -> usize {
    if plan.len() == 1 {
        return resident_count(plan, &[0]);
    }
    let mut best = 0;
    for a in 0..plan.len() {
        for b in a + 1..plan.len() {
            best = best.max(resident_count(plan, &[a, b]));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan(centers: Vec<Vector3<f64>>, sets: Vec<Vec<Vec<u32>>>) -> ChunkPlan {
        let n = centers.len();
        ChunkPlan { radii: vec![1.0; n], centers, active_sets: sets, source_camera_assignment: vec![] }
    }

    #[test]
    fn nearest_two_basic_and_ties() {
        let c: Vec<_> = (0..8).map(|i| Vector3::new(i as f64 * 2.0, 0.0, 0.0)).collect();
        assert_eq!(nearest_two_chunks(&c, &c[5]).0, 5);
        // Equidistant from 3 (x=6) and 7 (x=14) with everything else farther.
        let mut c2 = c.clone();
        c2[3] = Vector3::new(-4.0, 0.0, 0.0);
        c2[7] = Vector3::new(4.0, 0.0, 0.0);
        for (i, m) in c2.iter_mut().enumerate() {
            if i != 3 && i != 7 {
                *m = Vector3::new(0.0, 50.0 + i as f64, 0.0);
            }
        }
        assert_eq!(nearest_two_chunks(&c2, &Vector3::zeros()), (3, Some(7)));
        assert_eq!(nearest_two_chunks(&c2[..1], &Vector3::zeros()), (0, None));
    }

    #[test]
    fn nearest_two_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let centers: Vec<_> = (0..5)
                .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 10.0)
                .collect();
            let c = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 10.0;
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by(|&a, &b| (c - centers[a]).norm().total_cmp(&(c - centers[b]).norm()));
            assert_eq!(nearest_two_chunks(&centers, &c), (order[0], Some(order[1])));
        }
    }

    #[test]
    fn blend_factor_endpoints() {
        let (mf, mo) = (Vector3::new(1.0, 2.0, 3.0), Vector3::new(-3.0, 0.5, 2.0));
        assert_eq!(blend_factor(&mf, &mf, &mo).unwrap(), (1.0, 1.0));
        let (tb, _) = blend_factor(&((mf + mo) / 2.0), &mf, &mo).unwrap();
        assert!((tb - 0.5).abs() < 1e-12);
        let beyond = mf + (mf - mo);
        let (tb, t) = blend_factor(&beyond, &mf, &mo).unwrap();
        assert!((tb - 2.0).abs() < 1e-12);
        assert_eq!(t, 1.0);
        assert!(blend_factor(&mf, &mf, &mf).is_err());
    }

    #[test]
    fn compose_modulation() {
        let p = plan(
            vec![Vector3::zeros(), Vector3::x()],
            vec![vec![vec![0, 2, 3]], vec![vec![1, 2, 4]]],
        );
        let sel = compose_active(&p, &[0, 1], 0, Some(1), 0.25).unwrap();
        assert_eq!(sel.per_level[0], vec![(0, 0.25), (1, 0.75), (2, 1.0), (3, 0.25), (4, 0.75)]);
        assert!(compose_active(&p, &[0], 0, Some(1), 0.25).is_err());

        let same = plan(vec![Vector3::zeros(), Vector3::x()], vec![vec![vec![0, 1]], vec![vec![0, 1]]]);
        let sel = compose_active(&same, &[0, 1], 0, Some(1), 0.3).unwrap();
        assert!(sel.per_level[0].iter().all(|&(_, m)| m == 1.0));
    }

    fn collinear() -> ChunkPlan {
        plan(
            vec![Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0), Vector3::new(20.0, 0.0, 0.0)],
            vec![vec![vec![0]], vec![vec![1]], vec![vec![2]]],
        )
    }

    #[test]
    fn stationary_camera_emits_nothing() {
        let p = collinear();
        let (s, ev) = stream_step(&BlendState::empty(), &p, &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(ev.len(), 2);
        let (s2, ev) = stream_step(&s, &p, &Vector3::new(1.0, 0.0, 0.0));
        assert!(ev.is_empty());
        assert_eq!(s, s2);
    }

    #[test]
    fn walking_through_collinear_chunks() {
        let p = collinear();
        let mut state = BlendState::empty();
        let mut log = Vec::new();
        for k in 0..=200 {
            let x = -2.0 + k as f64 * 0.1;
            let (s, ev) = stream_step(&state, &p, &Vector3::new(x, 0.3, 0.0));
            for e in ev {
                log.push((e.kind, e.chunk_id, x));
            }
            assert!(s.loaded_chunks.len() <= 2);
            state = s;
        }
        use StreamEventKind::*;
        let kinds: Vec<_> = log.iter().map(|&(k, id, _)| (k, id)).collect();
        assert_eq!(
            kinds,
            vec![(Load, 0), (Load, 1), (SwapPrimary, 1), (Unload, 0), (Load, 2), (SwapPrimary, 2)]
        );
        // Swap at the AB midpoint, reload when passing B.
        assert!((log[2].2 - 5.0).abs() <= 0.1 + 1e-9);
        assert!((log[3].2 - 10.0).abs() <= 0.1 + 1e-9);
    }

    #[test]
    fn single_chunk_never_swaps() {
        let p = plan(vec![Vector3::zeros()], vec![vec![vec![0, 1]]]);
        let mut state = BlendState::empty();
        for k in 0..50 {
            let (s, ev) = stream_step(&state, &p, &Vector3::new(k as f64, 0.0, 0.0));
            assert!(ev.iter().all(|e| e.kind != StreamEventKind::SwapPrimary));
            assert_eq!(s.t, 1.0);
            state = s;
        }
    }

    #[test]
    fn residency_counts() {
        let p = plan(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            vec![vec![vec![0, 1], vec![0]], vec![vec![1, 2], vec![]], vec![vec![5], vec![1, 2]]],
        );
        assert_eq!(resident_count(&p, &[0]), 3);
        assert_eq!(resident_count(&p, &[0, 1]), 4);
        assert_eq!(max_pair_union(&p), 6);
    }
}
