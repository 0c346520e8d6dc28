//! Overlapping contiguous band groups and their merge back into a cube.
//!
//! Groups start every `n_subs - n_ovls` bands; when the last regular group
//! stops short of the final band, one extra group is placed flush against
//! the end. Merging averages all groups covering a band.

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::HsiCube;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    /// Bands per group.
    pub n_subs: usize,
    /// Bands shared by consecutive groups.
    pub n_ovls: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self { n_subs: 16, n_ovls: 4 }
    }
}

impl GroupingConfig {
    /// Profile for scenes with fewer bands: 8-band groups, 2 shared.
    pub fn small() -> Self {
        Self { n_subs: 8, n_ovls: 2 }
    }

    /// Single group spanning all `c ≥ 2` bands (no spectral grouping).
    pub fn single(c: usize) -> Self {
        Self { n_subs: c, n_ovls: 1 }
    }

    pub fn stride(&self) -> usize {
        self.n_subs - self.n_ovls
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ovls == 0 || self.n_ovls >= self.n_subs {
            return Err(Error::Grouping(format!("need 1 <= n_ovls < n_subs, got {self:?}")));
        }
        Ok(())
    }

    /// Closed-form group count for `c` bands.
    pub fn group_count(&self, c: usize) -> usize {
        (c - self.n_subs).div_ceil(self.stride()) + 1
    }
}

/// Half-open `(start, end)` band ranges covering `0..c`.
pub fn plan_groups(c: usize, cfg: &GroupingConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    if cfg.n_subs > c {
        return Err(Error::Grouping(format!("group size {} exceeds {c} bands", cfg.n_subs)));
    }
    let mut plan: Vec<(usize, usize)> =
        (0..).map(|k| k * cfg.stride()).take_while(|&s| s + cfg.n_subs <= c).map(|s| (s, s + cfg.n_subs)).collect();
    if plan.last().map_or(true, |&(_, end)| end < c) {
        plan.push((c - cfg.n_subs, c));
    }
    Ok(plan)
}

/// How many groups of `plan` cover each of the `c` bands.
pub fn coverage(plan: &[(usize, usize)], c: usize) -> Vec<usize> {
    let mut counts = vec![0; c];
    for &(a, b) in plan {
        for k in &mut counts[a..b.min(c)] {
            *k += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub start: usize,
    pub end: usize,
    /// `[H, W, end - start]`.
    pub data: Array3<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupList {
    pub groups: Vec<Group>,
    pub source_bands: usize,
}

impl GroupList {
    pub fn plan(&self) -> Vec<(usize, usize)> {
        self.groups.iter().map(|g| (g.start, g.end)).collect()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn group(cube: &HsiCube, cfg: &GroupingConfig) -> Result<GroupList> {
    let plan = plan_groups(cube.bands(), cfg)?;
    let groups = plan
        .into_iter()
        .map(|(start, end)| Group { start, end, data: cube.data().slice(s![.., .., start..end]).to_owned() })
        .collect();
    Ok(GroupList { groups, source_bands: cube.bands() })
}

/// Band-wise mean of every group slice covering the band.
pub fn merge(list: &GroupList) -> Result<HsiCube> {
    let first = list.groups.first().ok_or_else(|| Error::Grouping("empty group list".into()))?;
    let (h, w, _) = first.data.dim();
    let c = list.source_bands;
    let mut sum = Array3::<f64>::zeros((h, w, c));
    for g in &list.groups {
        if g.end > c || g.end <= g.start || g.data.dim() != (h, w, g.end - g.start) {
            return Err(Error::Grouping(format!("group {}..{} inconsistent with {h}x{w}x{c}", g.start, g.end)));
        }
        let mut dst = sum.slice_mut(s![.., .., g.start..g.end]);
        dst.zip_mut_with(&g.data, |d, &v| *d += v as f64);
    }
    let counts = coverage(&list.plan(), c);
    if let Some(b) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Grouping(format!("band {b} is not covered by any group")));
    }
    for (b, &k) in counts.iter().enumerate() {
        sum.index_axis_mut(Axis(2), b).mapv_inplace(|v| v / k as f64);
    }
    HsiCube::new(sum.mapv(|v| v as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n_subs: usize, n_ovls: usize) -> GroupingConfig {
        GroupingConfig { n_subs, n_ovls }
    }

    #[test]
    fn documented_plans() {
        assert_eq!(plan_groups(16, &cfg(16, 4)).unwrap(), vec![(0, 16)]);
        assert_eq!(plan_groups(28, &cfg(16, 4)).unwrap(), vec![(0, 16), (12, 28)]);
        assert_eq!(plan_groups(30, &cfg(16, 4)).unwrap(), vec![(0, 16), (12, 28), (14, 30)]);
        assert_eq!(plan_groups(16, &GroupingConfig::small()).unwrap(), vec![(0, 8), (6, 14), (8, 16)]);
        assert!(plan_groups(12, &cfg(16, 4)).is_err());
        assert!(plan_groups(30, &cfg(8, 8)).is_err());
        assert!(plan_groups(30, &cfg(8, 0)).is_err());
    }

    #[test]
    fn group_slices_hold_band_values() {
        let cube = HsiCube::from_fn(8, 8, 28, |(_, _, b)| b as f32).unwrap();
        let groups = group(&cube, &cfg(16, 4)).unwrap();
        assert_eq!(groups.len(), 2);
        let g1 = &groups.groups[1];
        for j in 0..16 {
            assert!(g1.data.index_axis(Axis(2), j).iter().all(|&v| v == (12 + j) as f32));
        }
    }

    #[test]
    fn overlap_bands_average() {
        let mut list = group(&HsiCube::filled(8, 8, 28, 0.0).unwrap(), &cfg(16, 4)).unwrap();
        list.groups[0].data.fill(1.0);
        list.groups[1].data.fill(3.0);
        let merged = merge(&list).unwrap();
        assert!(merged.band(13).iter().all(|&v| v == 2.0));
        assert!(merged.band(3).iter().all(|&v| v == 1.0));
        assert!(merged.band(20).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn three_way_overlap() {
        let mut list = group(&HsiCube::filled(8, 8, 30, 0.0).unwrap(), &cfg(16, 4)).unwrap();
        for (g, v) in list.groups.iter_mut().zip([0.0, 3.0, 6.0]) {
            g.data.fill(v);
        }
        let merged = merge(&list).unwrap();
        // bands 14 and 15 are covered by all three groups
        let counts = coverage(&list.plan(), 30);
        assert_eq!((counts[14], counts[15], counts[13], counts[16]), (3, 3, 2, 2));
        assert!(merged.band(14).iter().all(|&v| v == 3.0));
        assert!(merged.band(15).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn gap_is_rejected() {
        let mut list = group(&HsiCube::filled(8, 8, 28, 0.0).unwrap(), &cfg(16, 4)).unwrap();
        list.groups.truncate(1);
        assert!(merge(&list).is_err());
    }

    #[test]
    fn coverage_and_count_by_brute_force() {
        for n_subs in [2usize, 3, 8, 16] {
            for n_ovls in 1..n_subs {
                let c_cfg = cfg(n_subs, n_ovls);
                for c in n_subs..=256 {
                    let plan = plan_groups(c, &c_cfg).unwrap();
                    assert_eq!(plan.len(), c_cfg.group_count(c), "c={c} {c_cfg:?}");
                    let mut seen = vec![false; c];
                    for &(a, b) in &plan {
                        assert_eq!(b - a, n_subs);
                        seen[a..b].iter_mut().for_each(|s| *s = true);
                    }
                    assert!(seen.iter().all(|&s| s));
                    for pair in plan.windows(2) {
                        assert!(pair[1].0 > pair[0].0);
                        assert!(pair[0].1 - pair[1].0 >= n_ovls);
                    }
                    if n_subs >= 2 && c > n_subs {
                        assert!(plan.len() < c);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn merge_inverts_group(c in 2usize..40, n_subs in 2usize..20, n_ovls in 1usize..19, seed in 0u32..1000) {
            prop_assume!(n_subs <= c && n_ovls < n_subs);
            let cube = HsiCube::from_fn(8, 8, c, |(y, x, b)| ((seed as usize * 31 + y * 17 + x * 5 + b * 3) % 97) as f32 / 97.0).unwrap();
            let back = merge(&group(&cube, &cfg(n_subs, n_ovls)).unwrap()).unwrap();
            prop_assert_eq!(back.data(), cube.data());
        }
    }
}
