//! Reward/KL Pareto fronts over logged metrics.

use std::io::Write;
use std::path::Path;

use crate::error::{BondError, Result};
use crate::harness::run::csv_error;

pub const PARETO_HEADER: &str = "source,step,kl_to_ref,reward_mean,non_dominated";

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub source: String,
    pub step: u64,
    pub kl_to_ref: f64,
    pub reward_mean: f64,
    pub non_dominated: bool,
}

impl ParetoPoint {
    pub fn new(source: impl Into<String>, step: u64, kl_to_ref: f64, reward_mean: f64) -> Self {
        ParetoPoint {
            source: source.into(),
            step,
            kl_to_ref,
            reward_mean,
            non_dominated: false,
        }
    }

    /// No more KL, no less reward, and strictly better in one of them.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.kl_to_ref <= other.kl_to_ref
            && self.reward_mean >= other.reward_mean
            && (self.kl_to_ref < other.kl_to_ref || self.reward_mean > other.reward_mean)
    }
}

/// Sets `non_dominated` on every point.
pub fn mark_front(points: &mut [ParetoPoint]) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .kl_to_ref
            .total_cmp(&points[b].kl_to_ref)
            .then(points[b].reward_mean.total_cmp(&points[a].reward_mean))
    });
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let kl = points[order[i]].kl_to_ref;
        let mut j = i;
        while j < order.len() && points[order[j]].kl_to_ref == kl {
            j += 1;
        }
        // the group is sorted by reward descending
        let group_best = points[order[i]].reward_mean;
        for &k in &order[i..j] {
            let r = points[k].reward_mean;
            points[k].non_dominated = r == group_best && r > best_before;
        }
        best_before = best_before.max(group_best);
        i = j;
    }
}

/// Label of a metrics file: `<parent dir>/<file stem>`.
pub fn source_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

/// Reads `(step, kl_to_ref, reward_mean)` points from a metrics CSV.
pub fn read_points(path: &Path) -> Result<Vec<ParetoPoint>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| BondError::MissingColumn {
                path: path.display().to_string(),
                column: name.to_string(),
            })
    };
    let (step, kl, reward) = (
        column("step")?,
        column("kl_to_ref")?,
        column("reward_mean")?,
    );
    let source = source_label(path);
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let perr = |what: &str| BondError::Parse {
            path: path.display().to_string(),
            line: line + 2,
            message: format!("bad {what}"),
        };
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let s: u64 = get(step).parse().map_err(|_| perr("step"))?;
        let k: f64 = get(kl).parse().map_err(|_| perr("kl_to_ref"))?;
        let r: f64 = get(reward).parse().map_err(|_| perr("reward_mean"))?;
        if k.is_nan() || r.is_nan() {
            return Err(perr("value (NaN)"));
        }
        points.push(ParetoPoint::new(source.clone(), s, k, r));
    }
    Ok(points)
}

/// Reads every input, marks the joint front and returns all points.
pub fn pareto_from_files(paths: &[impl AsRef<Path>]) -> Result<Vec<ParetoPoint>> {
    if paths.is_empty() {
        return Err(BondError::EmptySamples);
    }
    let mut points = Vec::new();
    for p in paths {
        points.extend(read_points(p.as_ref())?);
    }
    mark_front(&mut points);
    Ok(points)
}

pub fn write_points(points: &[ParetoPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{PARETO_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.source, p.step, p.kl_to_ref, p.reward_mean, p.non_dominated as u8
        )?;
    }
    Ok(())
}

pub fn save_points(points: &[ParetoPoint], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| BondError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_points(points, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| BondError::io(path, e))
}

/// Non-dominated points whose source satisfies `pick` and whose KL lies in `[lo, hi]`.
pub fn count_front_in_range(
    points: &[ParetoPoint],
    lo: f64,
    hi: f64,
    pick: impl Fn(&str) -> bool,
) -> usize {
    points
        .iter()
        .filter(|p| p.non_dominated && pick(&p.source) && p.kl_to_ref >= lo && p.kl_to_ref <= hi)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<ParetoPoint> {
        v.iter()
            .enumerate()
            .map(|(i, &(k, r))| ParetoPoint::new("s", i as u64, k, r))
            .collect()
    }

    #[test]
    fn examples() {
        let mut one = pts(&[(0.3, 0.1)]);
        mark_front(&mut one);
        assert!(one[0].non_dominated);
        let mut two = pts(&[(1.0, 0.5), (1.0, 0.7)]);
        mark_front(&mut two);
        assert_eq!((two[0].non_dominated, two[1].non_dominated), (false, true));
        let mut dup = pts(&[(1.0, 0.5), (1.0, 0.5), (2.0, 0.5), (0.5, 0.2)]);
        mark_front(&mut dup);
        assert_eq!(
            dup.iter().map(|p| p.non_dominated).collect::<Vec<_>>(),
            vec![true, true, false, true]
        );
    }

    #[test]
    fn files_round_trip_and_missing_columns_fail() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("a.csv");
        std::fs::write(
            &good,
            "step,reward_mean,log_quantile_mean,kl_to_ref\n1,0.5,0,1\n2,0.7,0,1\n",
        )
        .unwrap();
        let bad = dir.path().join("b.csv");
        std::fs::write(&bad, "step,reward_mean\n1,0.5\n").unwrap();
        let points = pareto_from_files(&[&good]).unwrap();
        assert_eq!(points.iter().filter(|p| p.non_dominated).count(), 1);
        let mut out = Vec::new();
        write_points(&points, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(PARETO_HEADER));
        assert!(text.ends_with(",2,1,0.7,1\n"));
        match pareto_from_files(&[&good, &bad]) {
            Err(BondError::MissingColumn { column, .. }) => assert_eq!(column, "kl_to_ref"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn front_matches_pairwise_definition(v in prop::collection::vec((0u8..6, 0u8..6), 1..40)) {
            let mut points = pts(&v.iter().map(|&(k, r)| (k as f64, r as f64)).collect::<Vec<_>>());
            mark_front(&mut points);
            for p in &points {
                let dominated = points.iter().any(|q| q.dominates(p));
                prop_assert_eq!(p.non_dominated, !dominated);
            }
        }
    }
}
