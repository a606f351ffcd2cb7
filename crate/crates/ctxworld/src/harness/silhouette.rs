//! Silhouette coefficient for labeled point sets (Euclidean metric).

use crate::error::{Error, Result};

/// Mean silhouette over all points. For a point `i` with mean intra-class
/// distance `a` (singleton classes score 0 by convention) and smallest mean
/// distance to another class `b`, the silhouette is `(b - a) / max(a, b)`,
/// defined as 0 when both are 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(silhouette_samples(points, labels)?.iter().sum::<f64>() / points.len() as f64)
}

/// Per-point silhouette values.
pub fn silhouette_samples(points: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if points.len() != labels.len() {
        return Err(Error::Contract("points/labels length mismatch".into()));
    }
    if points.is_empty() {
        return Err(Error::Contract("silhouette needs at least one point".into()));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Contract("silhouette needs at least two classes".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("inconsistent point dimensions".into()));
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        let mut intra_sum = 0.0;
        let mut intra_n = 0usize;
        let mut inter: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist(p, q);
            if labels[j] == own {
                intra_sum += d;
                intra_n += 1;
            } else {
                let e = inter.entry(labels[j]).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        if intra_n == 0 {
            // Singleton class: defined as 0.
            out.push(0.0);
            continue;
        }
        let a = intra_sum / intra_n as f64;
        let b = inter
            .values()
            .map(|(s, n)| s / *n as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        out.push(if denom == 0.0 { 0.0 } else { (b - a) / denom });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_duplicate_clusters_score_one() {
        let points = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![9.0, 9.0], vec![9.0, 9.0]];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(silhouette_score(&points, &labels).unwrap(), 1.0);
    }

    #[test]
    fn identical_points_across_classes_score_zero() {
        let points = vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(silhouette_score(&points, &labels).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_two_cluster_example() {
        // Classes {0, 0.1} and {10, 10.1} on the line. Per point:
        //   a = 0.1; b = mean distance to the other pair.
        let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let labels = vec![0, 0, 1, 1];
        let s = silhouette_samples(&points, &labels).unwrap();
        let expected = [
            1.0 - 0.1 / ((10.0 + 10.1) / 2.0),
            1.0 - 0.1 / ((9.9 + 10.0) / 2.0),
            1.0 - 0.1 / ((10.0 + 9.9) / 2.0),
            1.0 - 0.1 / ((10.1 + 10.0) / 2.0),
        ];
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let mean = silhouette_score(&points, &labels).unwrap();
        assert!((mean - 0.99).abs() < 1e-4, "mean={mean}");
    }

    #[test]
    fn singleton_class_scores_zero() {
        let points = vec![vec![0.0], vec![5.0], vec![5.1]];
        let labels = vec![0, 1, 1];
        let s = silhouette_samples(&points, &labels).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.9);
    }

    #[test]
    fn contracts() {
        assert!(silhouette_score(&[vec![0.0]], &[0, 1]).is_err());
        assert!(silhouette_score(&[vec![0.0], vec![1.0]], &[0, 0]).is_err());
    }
}
