//! Joint regional grouping of two frames' pillars into attention windows.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::AttentionGroup;

/// One window's members: rows of the previous and of the current frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub id: [usize; 2],
    pub prev: Vec<usize>,
    pub cur: Vec<usize>,
}

impl Window {
    /// Whether cur queries here have any prev keys to attend to.
    pub fn has_keys(&self) -> bool {
        !self.prev.is_empty()
    }
}

/// Windows ordered by id. Windows with no cur pillar are not kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    pub windows: Vec<Window>,
    pub size: [usize; 2],
    pub shifted: bool,
    /// Prev pillars that landed in windows without queries.
    pub dropped_prev: usize,
}

/// `floor((i + s) / l)` per axis, with `s = l / 2` when shifted.
pub fn window_id(cell: [usize; 2], size: [usize; 2], shifted: bool) -> [usize; 2] {
    [0, 1].map(|k| {
        let s = if shifted { size[k] / 2 } else { 0 };
        (cell[k] + s) / size[k]
    })
}

pub fn joint_group(
    prev: &[[usize; 2]],
    cur: &[[usize; 2]],
    size: [usize; 2],
    shifted: bool,
) -> Result<WindowPartition> {
    if size.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "window size must be at least 1, got {size:?}"
        )));
    }
    let mut map: BTreeMap<[usize; 2], (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, &c) in cur.iter().enumerate() {
        map.entry(window_id(c, size, shifted)).or_default().1.push(i);
    }
    let mut dropped_prev = 0;
    for (i, &c) in prev.iter().enumerate() {
        match map.get_mut(&window_id(c, size, shifted)) {
            Some(w) => w.0.push(i),
            None => dropped_prev += 1,
        }
    }
    let windows = map
        .into_iter()
        .map(|(id, (prev, cur))| Window { id, prev, cur })
        .collect();
    Ok(WindowPartition {
        windows,
        size,
        shifted,
        dropped_prev,
    })
}

/// Self-attention partition of one frame: prev and cur are the same set.
pub fn self_group(coords: &[[usize; 2]], size: [usize; 2], shifted: bool) -> Result<WindowPartition> {
    joint_group(coords, coords, size, shifted)
}

impl WindowPartition {
    /// Attention groups of windows that have keys.
    pub fn attention_groups(&self) -> Vec<AttentionGroup> {
        self.windows
            .iter()
            .filter(|w| w.has_keys())
            .map(|w| AttentionGroup {
                queries: w.cur.clone(),
                keys: w.prev.clone(),
            })
            .collect()
    }

    /// Cur rows whose window holds no prev pillar.
    pub fn keyless_queries(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .windows
            .iter()
            .filter(|w| !w.has_keys())
            .flat_map(|w| w.cur.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }

    pub fn cur_count(&self) -> usize {
        self.windows.iter().map(|w| w.cur.len()).sum()
    }

    pub fn prev_count(&self) -> usize {
        self.windows.iter().map(|w| w.prev.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn unshifted_floor_arithmetic() {
        assert_eq!(window_id([0, 0], [8, 8], false), window_id([7, 7], [8, 8], false));
        assert_ne!(window_id([0, 0], [8, 8], false), window_id([8, 0], [8, 8], false));
    }

    #[test]
    fn shifted_arithmetic() {
        assert_eq!(window_id([0, 0], [8, 8], true), [0, 0]);
        assert_eq!(window_id([7, 7], [8, 8], true), [1, 1]);
    }

    fn random_coords(rng: &mut ChaCha8Rng, n: usize, span: usize) -> Vec<[usize; 2]> {
        let mut set = BTreeSet::new();
        while set.len() < n {
            set.insert([rng.gen_range(0..span), rng.gen_range(0..span)]);
        }
        let mut v: Vec<_> = set.into_iter().collect();
        // exercise arbitrary row order
        for i in (1..v.len()).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        v
    }

    #[test]
    fn partition_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for shifted in [false, true] {
            let prev = random_coords(&mut rng, 200, 50);
            let cur = random_coords(&mut rng, 200, 50);
            let part = joint_group(&prev, &cur, [8, 8], shifted).unwrap();
            let s = if shifted { 4 } else { 0 };
            let id = |c: [usize; 2]| [(c[0] + s) / 8, (c[1] + s) / 8];
            for w in &part.windows {
                assert!(!w.cur.is_empty());
                let want_cur: Vec<usize> = (0..cur.len()).filter(|&i| id(cur[i]) == w.id).collect();
                let want_prev: Vec<usize> = (0..prev.len()).filter(|&i| id(prev[i]) == w.id).collect();
                assert_eq!(w.cur, want_cur);
                assert_eq!(w.prev, want_prev);
            }
            assert_eq!(part.cur_count(), cur.len());
            assert_eq!(part.prev_count() + part.dropped_prev, prev.len());
            // every pair sharing a window id shares a window
            for i in 0..cur.len() {
                for j in 0..cur.len() {
                    let same = part.windows.iter().any(|w| w.cur.contains(&i) && w.cur.contains(&j));
                    assert_eq!(same, id(cur[i]) == id(cur[j]));
                }
            }
        }
    }

    #[test]
    fn far_pillars_never_share_unshifted_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cur = random_coords(&mut rng, 150, 40);
        let part = self_group(&cur, [8, 8], false).unwrap();
        for w in &part.windows {
            for &a in &w.cur {
                for &b in &w.cur {
                    let cheb = cur[a][0].abs_diff(cur[b][0]).max(cur[a][1].abs_diff(cur[b][1]));
                    assert!(cheb < 8);
                }
            }
        }
    }

    #[test]
    fn shift_changes_grouping() {
        let coords = [[0, 0], [5, 5], [9, 1]];
        let a = self_group(&coords, [8, 8], false).unwrap();
        let b = self_group(&coords, [8, 8], true).unwrap();
        assert_ne!(
            a.windows.iter().map(|w| w.cur.clone()).collect::<Vec<_>>(),
            b.windows.iter().map(|w| w.cur.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn keyless_windows_are_flagged_and_prev_only_dropped() {
        let prev = [[0, 0], [20, 20]];
        let cur = [[1, 1], [12, 12]];
        let part = joint_group(&prev, &cur, [8, 8], false).unwrap();
        assert_eq!(part.windows.len(), 2);
        assert_eq!(part.keyless_queries(), vec![1]);
        assert_eq!(part.dropped_prev, 1);
        assert_eq!(
            part.attention_groups(),
            vec![AttentionGroup {
                queries: vec![0],
                keys: vec![0]
            }]
        );
        assert!(joint_group(&prev, &cur, [0, 8], false).is_err());
    }
}
