/// Largest-remainder apportionment of `total` units across `weights`.
///
/// Each share starts at the floor of its exact quota; leftover units go to the
/// largest fractional remainders. Equal remainders favour the later index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(b.cmp(&a))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        shares[i] += 1;
    }
    shares
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn campus_mix_scaled_to_ten() {
        // quotas 7.056, 2.576, 0.368
        assert_eq!(largest_remainder(10, &[326.0, 119.0, 17.0]), vec![7, 3, 0]);
    }

    #[test]
    fn full_campus() {
        assert_eq!(largest_remainder(462, &[326.0, 119.0, 17.0]), vec![326, 119, 17]);
    }

    #[test]
    fn ties_go_to_later_index() {
        assert_eq!(largest_remainder(10, &[0.7, 0.15, 0.15]), vec![7, 1, 2]);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(largest_remainder(5, &[0.0, 0.0]), vec![0, 0]);
        assert_eq!(largest_remainder(0, &[1.0, 2.0]), vec![0, 0]);
    }
}
