use crate::error::{Error, Result};

/// Classical uncut average precision. `ranks[i]` is the 1-based rank of
/// passage `i`. Returns `None` when there is no positive label.
pub fn average_precision(ranks: &[usize], labels: &[bool]) -> Result<Option<f64>> {
    if ranks.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "{} ranks but {} labels",
            ranks.len(),
            labels.len()
        )));
    }
    let n = ranks.len();
    let mut by_rank = vec![None; n];
    for (i, &r) in ranks.iter().enumerate() {
        if r == 0 || r > n || by_rank[r - 1].is_some() {
            return Err(Error::Precondition(format!("ranks are not a permutation of 1..={n}")));
        }
        by_rank[r - 1] = Some(labels[i]);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, label) in by_rank.into_iter().enumerate() {
        if label == Some(true) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Mean of the defined values and the number of skipped ones.
pub fn mean_average_precision(aps: &[Option<f64>]) -> (f64, usize) {
    let included: Vec<f64> = aps.iter().flatten().copied().collect();
    let skipped = aps.len() - included.len();
    if included.is_empty() {
        return (0.0, skipped);
    }
    (included.iter().sum::<f64>() / included.len() as f64, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(average_precision(&[1, 2, 3, 4, 5], &[true, true, false, false, false]).unwrap(), Some(1.0));
        let ap = average_precision(&[1, 2, 3], &[true, false, true]).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap = average_precision(&[2, 3, 1, 4], &[false, false, false, true]).unwrap().unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
        assert_eq!(average_precision(&[1, 2], &[false, false]).unwrap(), None);
    }

    #[test]
    fn rejects_bad_ranks() {
        assert!(average_precision(&[1, 1], &[true, false]).is_err());
        assert!(average_precision(&[0, 1], &[true, false]).is_err());
        assert!(average_precision(&[1], &[true, false]).is_err());
    }

    #[test]
    fn map_skips_undefined() {
        let (m, s) = mean_average_precision(&[Some(1.0), None, Some(0.5)]);
        assert_eq!((m, s), (0.75, 1));
    }
}
