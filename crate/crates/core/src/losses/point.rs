use crate::perspective::{PerspectivePoints, NUM_COORDS};

/// Mean squared error over the 18 coordinates, with the gradient w.r.t. `pred`
/// in interleaved `[x0, y0, x1, y1, ...]` order.
pub fn loss_pp(pred: &PerspectivePoints, gt: &PerspectivePoints) -> (f64, [f64; NUM_COORDS]) {
    let p = pred.to_flat();
    let g = gt.to_flat();
    let n = NUM_COORDS as f64;
    let mut grad = [0.0; NUM_COORDS];
    let mut sum = 0.0;
    for i in 0..NUM_COORDS {
        let d = p[i] - g[i];
        sum += d * d;
        grad[i] = 2.0 * d / n;
    }
    (sum / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_points() {
        let p = PerspectivePoints::from_points([[0.3, 0.7]; 9]);
        let (l, g) = loss_pp(&p, &p);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_offset() {
        let gt = PerspectivePoints::from_points([[0.3, 0.6]; 9]);
        let pred = PerspectivePoints::from_points([[0.4, 0.7]; 9]);
        let (l, _) = loss_pp(&pred, &gt);
        assert!((l - 0.01).abs() < 1e-15);
    }

    #[test]
    fn matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a: [[f64; 2]; 9] = std::array::from_fn(|_| [rng.random(), rng.random()]);
            let b: [[f64; 2]; 9] = std::array::from_fn(|_| [rng.random(), rng.random()]);
            let mut want = 0.0;
            for i in 0..9 {
                for d in 0..2 {
                    want += (a[i][d] - b[i][d]).powi(2);
                }
            }
            want /= 18.0;
            let (l, _) = loss_pp(&PerspectivePoints::from_points(a), &PerspectivePoints::from_points(b));
            assert!((l - want).abs() < 1e-15);
        }
    }
}
