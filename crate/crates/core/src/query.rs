//! Read-side helpers for viewers: attribute tree listing and pixel-sized
//! downsampling of state intervals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sht::{Quark, StateInterval, StateValue};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub name: String,
    pub path: String,
    pub quark: Option<Quark>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeNode>,
}

/// Nests `paths` (indexed by quark) under a synthetic root.
pub fn attribute_tree(paths: &[String]) -> TreeNode {
    #[derive(Default)]
    struct Build {
        quark: Option<Quark>,
        children: BTreeMap<String, Build>,
    }
    let mut root = Build::default();
    for (q, p) in paths.iter().enumerate() {
        let mut node = &mut root;
        for part in p.split('/') {
            node = node.children.entry(part.to_owned()).or_default();
        }
        node.quark = Some(q as Quark);
    }
    fn finish(name: String, path: String, b: Build) -> TreeNode {
        let children = b
            .children
            .into_iter()
            .map(|(n, c)| {
                let p = if path.is_empty() {
                    n.clone()
                } else {
                    format!("{path}/{n}")
                };
                finish(n, p, c)
            })
            .collect();
        TreeNode {
            name,
            path,
            quark: b.quark,
            children,
        }
    }
    finish(String::new(), String::new(), root)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub t0: i64,
    pub t1: i64,
    pub value: StateValue,
    /// Intervals folded into this row.
    pub merged: u32,
}

/// Clips `intervals` (sorted by start) to `[t0, t1]` and folds consecutive
/// runs shorter than `resolution` that fall in one pixel into a single row
/// carrying the value that held longest. A resolution of 0 keeps every row.
pub fn downsample(intervals: &[StateInterval], t0: i64, t1: i64, resolution: i64) -> Vec<StateRow> {
    let mut out: Vec<StateRow> = Vec::new();
    let mut group: Vec<(i64, i64, &StateValue)> = Vec::new();
    let pixel = |t: i64| {
        if resolution > 0 {
            (t - t0).div_euclid(resolution)
        } else {
            t
        }
    };
    let flush = |group: &mut Vec<(i64, i64, &StateValue)>, out: &mut Vec<StateRow>| {
        if group.is_empty() {
            return;
        }
        let mut weight: Vec<(&StateValue, i64)> = Vec::new();
        for &(s, e, v) in group.iter() {
            match weight.iter_mut().find(|(w, _)| *w == v) {
                Some((_, d)) => *d += e - s,
                None => weight.push((v, e - s)),
            }
        }
        let best = weight.iter().fold(weight[0], |b, &w| if w.1 > b.1 { w } else { b });
        out.push(StateRow {
            t0: group[0].0,
            t1: group.last().unwrap().1,
            value: best.0.clone(),
            merged: group.len() as u32,
        });
        group.clear();
    };
    for iv in intervals {
        let (s, e) = (iv.start.max(t0), iv.end.min(t1));
        if iv.start > t1 || (iv.end <= t0 && iv.start != iv.end) || e < s {
            continue;
        }
        if resolution <= 0 || e - s >= resolution {
            flush(&mut group, &mut out);
            out.push(StateRow {
                t0: s,
                t1: e,
                value: iv.value.clone(),
                merged: 1,
            });
            continue;
        }
        if group.first().is_some_and(|g| pixel(g.0) != pixel(s)) {
            flush(&mut group, &mut out);
        }
        group.push((s, e, &iv.value));
    }
    flush(&mut group, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: i64, e: i64, v: &str) -> StateInterval {
        StateInterval::new(0, s, e, v)
    }

    #[test]
    fn tree_nests_paths() {
        let paths: Vec<String> = ["Threads", "Threads/n1:1", "Threads/n1:1/Operation", "Bus", "Bus/Volume"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let t = attribute_tree(&paths);
        assert_eq!(t.children.len(), 2);
        assert_eq!(t.children[0].name, "Bus");
        let op = &t.children[1].children[0].children[0];
        assert_eq!((op.path.as_str(), op.quark), ("Threads/n1:1/Operation", Some(2)));
    }

    #[test]
    fn full_resolution_keeps_rows() {
        let ivs = [iv(0, 5, "a"), iv(5, 6, "b"), iv(6, 20, "a")];
        let rows = downsample(&ivs, 0, 20, 0);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].t0, 5);
    }

    #[test]
    fn sub_pixel_runs_fold_to_dominant_value() {
        let ivs = [
            iv(0, 1, "a"),
            iv(1, 4, "b"),
            iv(4, 5, "a"),
            iv(5, 30, "c"),
            iv(31, 32, "d"),
        ];
        let rows = downsample(&ivs, 0, 40, 10);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].t0, rows[0].t1, rows[0].merged), (0, 5, 3));
        assert_eq!(rows[0].value, StateValue::from("b"));
        assert_eq!(rows[1].value, StateValue::from("c"));
        assert_eq!(rows[2].merged, 1);
    }

    #[test]
    fn rows_are_clipped() {
        let rows = downsample(&[iv(0, 100, "a")], 10, 50, 0);
        assert_eq!((rows[0].t0, rows[0].t1), (10, 50));
        assert!(downsample(&[iv(0, 5, "a")], 10, 50, 0).is_empty());
    }
}
