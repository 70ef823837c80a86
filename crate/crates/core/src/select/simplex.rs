//! Euclidean projection onto the probability simplex (sort and threshold).

/// `argmin_{w ∈ Δ_n} ‖w − v‖₂`.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let w = simplex_project(&[0.9, 0.3, -0.1]);
        for (a, b) in w.iter().zip([0.8, 0.2, 0.0]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn member_unchanged_and_constant_becomes_uniform() {
        let v = [0.25, 0.5, 0.25];
        assert_eq!(simplex_project(&v), v.to_vec());
        for c in [-3.0, 0.0, 7.5] {
            let w = simplex_project(&[c; 4]);
            assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        }
    }
}
