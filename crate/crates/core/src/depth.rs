//! Depth prediction head: bin centers, per-pixel probability volumes,
//! probability-weighted depth, and an uncertainty map.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::{Error, Result};

/// Valid metric depth interval of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(0.0 <= d_min && d_min < d_max) || !d_min.is_finite() || !d_max.is_finite() {
            return Err(Error::Config(format!(
                "depth range requires 0 <= d_min < d_max, got [{d_min}, {d_max}]"
            )));
        }
        Ok(DepthRange { d_min, d_max })
    }

    pub fn span(&self) -> f64 {
        self.d_max - self.d_min
    }

    /// Indoor-style default: millimeter-resolution sensors capped at 10 m.
    pub fn indoor() -> Self {
        DepthRange {
            d_min: 1e-3,
            d_max: 10.0,
        }
    }

    /// Outdoor-style default: lidar capped at 80 m.
    pub fn outdoor() -> Self {
        DepthRange {
            d_min: 1e-3,
            d_max: 80.0,
        }
    }
}

/// Inference output for one image.
#[derive(Debug, Clone)]
pub struct DepthOutput {
    /// Per-pixel probability over bins at feature resolution, (h*w, N).
    pub prob: Array2<f64>,
    /// Bin centers, strictly increasing for positive bins.
    pub centers: Array1<f64>,
    /// Normalized bin lengths (simplex).
    pub bin_lengths: Array1<f64>,
    /// Depth map at full input resolution.
    pub depth: Array2<f64>,
    /// Probability-weighted spread around the predicted depth, full resolution.
    pub uncertainty: Array2<f64>,
    /// Scene class probabilities when the classification head is present.
    pub scene_probs: Option<Vec<f64>>,
    /// Feature-map resolution of `prob` (rows, cols).
    pub feature_hw: (usize, usize),
}

/// Convert normalized bin lengths to bin centers:
/// `c_i = d_min + (d_max - d_min) * (b_i / 2 + sum_{j<i} b_j)`.
///
/// Rejects vectors with negative entries or a sum off the simplex by more
/// than 1e-4.
pub fn bins_to_centers(b: ArrayView1<f64>, range: DepthRange) -> Result<Array1<f64>> {
    if b.is_empty() {
        return Err(Error::InvalidArgument("empty bin vector".into()));
    }
    if b.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "bin lengths must be nonnegative".into(),
        ));
    }
    let sum: f64 = b.sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidArgument(format!(
            "bin lengths must sum to 1 (got {sum})"
        )));
    }
    let mut centers = Array1::zeros(b.len());
    let mut acc = 0.0;
    for (i, &bi) in b.iter().enumerate() {
        centers[i] = range.d_min + range.span() * (bi / 2.0 + acc);
        acc += bi;
    }
    Ok(centers)
}

/// Differentiable version of [`bins_to_centers`] for use inside the
/// training graph. Inputs come from a softmax, so they are on the simplex by
/// construction; only a debug assertion guards it.
pub fn centers_from_bins(bins: &Var, range: DepthRange) -> Var {
    let n = bins.value().len();
    debug_assert!(n > 0);
    debug_assert!((bins.value().sum() - 1.0).abs() < 1e-4);
    let span = range.span();
    let b = bins.value();
    let mut values = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &bi in b.iter() {
        values.push(range.d_min + span * (bi / 2.0 + acc));
        acc += bi;
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[n]), values).unwrap();
    bins.graph().op(&[bins], value, move |g| {
        // dc_i/db_j = span * (1/2 if i == j else [j < i])
        let gs = g.as_slice().expect("contiguous grad");
        let mut db = vec![0.0; n];
        let mut suffix = 0.0;
        for j in (0..n).rev() {
            db[j] = span * (gs[j] / 2.0 + suffix);
            suffix += gs[j];
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(&[n]), db).unwrap())]
    })
}

/// Per-pixel bin probabilities from pixel features and bin embeddings.
///
/// `f_p` is (C, h, w), `f_b` is (N, C); logits are the scaled dot product
/// `<f_p[p], f_b[i]> / sqrt(C)`, normalized with a softmax over bins.
/// Returns shape (h*w, N).
pub fn probability_volume(f_p: &Var, f_b: &Var) -> Var {
    let &[c, h, w] = f_p.shape() else {
        panic!("probability_volume: f_p must be (C, h, w)")
    };
    let &[_, cb] = f_b.shape() else {
        panic!("probability_volume: f_b must be (N, C)")
    };
    assert_eq!(c, cb, "probability_volume: channel mismatch");
    let pixels = f_p.reshape(&[c, h * w]).t2(); // (hw, C)
    let logits = pixels.matmul(&f_b.t2()).scale(1.0 / (c as f64).sqrt());
    logits.softmax_lastdim()
}

/// Probability-weighted depth, upsampled to the output resolution.
///
/// `prob` is (h*w, N); the low-resolution expectation `sum_i c_i * P[p, i]`
/// is computed first, then bilinearly interpolated, so the result stays a
/// convex combination of bin centers.
pub fn expected_depth(
    prob: &Var,
    centers: &Var,
    feature_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Var {
    let (h, w) = feature_hw;
    let n = centers.value().len();
    assert_eq!(prob.shape(), [h * w, n], "expected_depth: shape mismatch");
    let lowres = prob.matmul(&centers.reshape(&[n, 1])); // (hw, 1)
    lowres
        .reshape(&[1, h, w])
        .resize(out_hw.0, out_hw.1)
        .reshape(&[out_hw.0, out_hw.1])
}

/// Probability-weighted standard deviation around the predicted depth.
///
/// `U[p] = sqrt(sum_i P[p,i] * (c_i - dhat[p])^2)`, evaluated at feature
/// resolution then upsampled. One-hot distributions give exactly zero.
pub fn uncertainty_map(
    prob: &Array2<f64>,
    centers: &Array1<f64>,
    feature_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Array2<f64> {
    let (h, w) = feature_hw;
    let n = centers.len();
    assert_eq!(prob.dim(), (h * w, n));
    let mut u = Array2::<f64>::zeros((h, w));
    for (pix, row) in prob.axis_iter(Axis(0)).enumerate() {
        let dhat: f64 = row.iter().zip(centers.iter()).map(|(p, c)| p * c).sum();
        let var: f64 = row
            .iter()
            .zip(centers.iter())
            .map(|(p, c)| p * (c - dhat) * (c - dhat))
            .sum();
        u[(pix / w, pix % w)] = var.max(0.0).sqrt();
    }
    crate::autodiff_resize_2d(&u, out_hw.0, out_hw.1)
}

/// Alternative uncertainty estimator: one minus the winning bin probability.
/// Exposed for comparison; zero for one-hot distributions as well.
pub fn uncertainty_map_peak(
    prob: &Array2<f64>,
    feature_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Array2<f64> {
    let (h, w) = feature_hw;
    let mut u = Array2::<f64>::zeros((h, w));
    for (pix, row) in prob.axis_iter(Axis(0)).enumerate() {
        let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        u[(pix / w, pix % w)] = 1.0 - peak;
    }
    crate::autodiff_resize_2d(&u, out_hw.0, out_hw.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Graph};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::sync::Arc;

    /// Independent oracle: evaluates the center formula term by term,
    /// summing the prefix explicitly for every index.
    fn centers_oracle(b: &[f64], range: DepthRange) -> Vec<f64> {
        (0..b.len())
            .map(|i| {
                let prefix: f64 = (0..i).map(|j| b[j]).sum();
                range.d_min + (range.d_max - range.d_min) * (b[i] / 2.0 + prefix)
            })
            .collect()
    }

    #[test]
    fn uniform_bins_centers() {
        let range = DepthRange::new(0.0, 8.0).unwrap();
        let c = bins_to_centers(array![0.25, 0.25, 0.25, 0.25].view(), range).unwrap();
        assert_eq!(c.as_slice().unwrap(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn single_bin_midpoint() {
        let range = DepthRange::new(0.0, 10.0).unwrap();
        let c = bins_to_centers(array![1.0].view(), range).unwrap();
        assert_eq!(c.as_slice().unwrap(), &[5.0]);
    }

    #[test]
    fn centers_match_cumulative_sum_oracle() {
        let range = DepthRange::new(1.0, 11.0).unwrap();
        let b = array![0.1, 0.2, 0.3, 0.4];
        let c = bins_to_centers(b.view(), range).unwrap();
        let expect = [1.5, 3.0, 5.5, 9.0];
        for (got, want) in c.iter().zip(expect) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let oracle = centers_oracle(b.as_slice().unwrap(), range);
        for (got, want) in c.iter().zip(oracle) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn centers_strictly_increasing_and_interior() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let range = DepthRange::indoor();
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = b.iter().sum();
            b.iter_mut().for_each(|v| *v /= s);
            let c = bins_to_centers(Array1::from(b).view(), range).unwrap();
            for i in 0..c.len() {
                assert!(c[i] > range.d_min && c[i] < range.d_max);
                if i > 0 {
                    assert!(c[i] > c[i - 1]);
                }
            }
        }
    }

    #[test]
    fn centers_reject_bad_input() {
        let range = DepthRange::indoor();
        assert!(bins_to_centers(array![-0.1, 1.1].view(), range).is_err());
        assert!(bins_to_centers(array![0.3, 0.3].view(), range).is_err());
    }

    #[test]
    fn graph_centers_match_plain_and_gradcheck() {
        let range = DepthRange::new(1.0, 11.0).unwrap();
        let b = array![0.1, 0.2, 0.3, 0.4];
        let g = Graph::new();
        let bv = g.leaf(Arc::new(b.clone().into_dyn()));
        let c = centers_from_bins(&bv, range);
        let plain = bins_to_centers(b.view(), range).unwrap();
        for (a, b) in c.value().iter().zip(plain.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        // gradient of a weighted sum of centers wrt b
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let warr = ArrayD::from_shape_vec(IxDyn(&[4]), weights).unwrap();
        let err = gradcheck::check(
            move |_, vars| {
                centers_from_bins(&vars[0], range)
                    .mul_mask(warr.clone())
                    .sum_all()
            },
            &[b.into_dyn()],
            1e-6,
            1e-3,
        );
        assert!(err < 1e-7, "centers grad err {err}");
    }

    #[test]
    fn probability_volume_softmax_oracle() {
        // C=1, f_p[p]=1, f_b=(0, ln 3): softmax(0, ln 3) = (0.25, 0.75)
        let g = Graph::new();
        let f_p = g.leaf(Arc::new(ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0)));
        let f_b = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![0.0, 3.0f64.ln()]).unwrap(),
        ));
        let p = probability_volume(&f_p, &f_b);
        assert_abs_diff_eq!(p.value()[[0, 0]], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.value()[[0, 1]], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn probability_volume_uniform_and_saturation() {
        let g = Graph::new();
        let f_p = g.leaf(Arc::new(ArrayD::zeros(IxDyn(&[4, 2, 3]))));
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let fb_data: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f_b = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[5, 4]), fb_data).unwrap(),
        ));
        let p = probability_volume(&f_p, &f_b);
        for v in p.value().iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-12);
        }

        // orthogonal columns, huge scale on column k -> one-hot
        let g = Graph::new();
        let mut fp = ArrayD::zeros(IxDyn(&[3, 1, 1]));
        fp[[1, 0, 0]] = 500.0; // s * e_1
        let f_p = g.leaf(Arc::new(fp));
        let mut fb = ArrayD::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            fb[[i, i]] = 1.0;
        }
        let f_b = g.leaf(Arc::new(fb));
        let p = probability_volume(&f_p, &f_b);
        assert!(p.value()[[0, 1]] > 1.0 - 1e-12);
    }

    #[test]
    fn expected_depth_oracle_cases() {
        let g = Graph::new();
        // one-hot picks the center
        let p = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.0, 0.0, 1.0]).unwrap(),
        ));
        let c = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 3.0, 5.0]).unwrap(),
        ));
        let d = expected_depth(&p, &c, (1, 1), (1, 1));
        assert_abs_diff_eq!(d.value()[[0, 0]], 5.0, epsilon = 1e-15);

        // direct inner-product oracle: (0.5, 0.3, 0.2) . (1, 3, 5) = 2.4
        let p = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.5, 0.3, 0.2]).unwrap(),
        ));
        let d = expected_depth(&p, &c, (1, 1), (1, 1));
        assert_abs_diff_eq!(d.value()[[0, 0]], 2.4, epsilon = 1e-12);

        // symmetric two-point mean
        let p = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, 0.5]).unwrap(),
        ));
        let c2 = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0, 6.0]).unwrap(),
        ));
        let d = expected_depth(&p, &c2, (1, 1), (1, 1));
        assert_abs_diff_eq!(d.value()[[0, 0]], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn uncertainty_oracle_cases() {
        // one-hot -> 0
        let prob = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap();
        let centers = array![1.0, 3.0, 5.0];
        let u = uncertainty_map(&prob, &centers, (1, 1), (1, 1));
        assert_eq!(u[(0, 0)], 0.0);

        // symmetric two-point: dhat=4, U=2
        let prob = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
        let u = uncertainty_map(&prob, &array![2.0, 6.0], (1, 1), (1, 1));
        assert_abs_diff_eq!(u[(0, 0)], 2.0, epsilon = 1e-12);

        // direct variance-sum oracle: sqrt(2.44)
        let prob = Array2::from_shape_vec((1, 3), vec![0.5, 0.3, 0.2]).unwrap();
        let u = uncertainty_map(&prob, &centers, (1, 1), (1, 1));
        assert_abs_diff_eq!(u[(0, 0)], 2.44f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn depth_gradients_match_finite_differences() {
        // full path: b -> centers, (f_p, f_b) -> P, weighted sum of the
        // 4x4 depth map as the scalar probe; random 4x4x8 instance.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let range = DepthRange::new(0.5, 9.5).unwrap();
        let c_dim = 8;
        let n = 5;
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = b.iter().sum();
        b.iter_mut().for_each(|v| *v /= s);
        let b = ArrayD::from_shape_vec(IxDyn(&[n]), b).unwrap();
        let f_p = {
            let data: Vec<f64> = (0..c_dim * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            ArrayD::from_shape_vec(IxDyn(&[c_dim, 4, 4]), data).unwrap()
        };
        let f_b = {
            let data: Vec<f64> = (0..n * c_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            ArrayD::from_shape_vec(IxDyn(&[n, c_dim]), data).unwrap()
        };
        let probe: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = ArrayD::from_shape_vec(IxDyn(&[8, 8]), probe).unwrap();
        let err = gradcheck::check(
            move |_, vars| {
                let centers = centers_from_bins(&vars[0], range);
                let p = probability_volume(&vars[1], &vars[2]);
                let d = expected_depth(&p, &centers, (4, 4), (8, 8));
                d.mul_mask(probe.clone()).sum_all()
            },
            &[b, f_p, f_b],
            1e-6,
            1e-3,
        );
        assert!(err < 1e-4, "depth path grad err {err}");
    }

    #[test]
    fn depth_stays_within_range_after_upsample() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let range = DepthRange::indoor();
        let g = Graph::new();
        let n = 8;
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = b.iter().sum();
        b.iter_mut().for_each(|v| *v /= s);
        let bv = g.leaf(Arc::new(ArrayD::from_shape_vec(IxDyn(&[n]), b).unwrap()));
        let centers = centers_from_bins(&bv, range);
        let logits: Vec<f64> = (0..25 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = g.leaf(Arc::new(
            ArrayD::from_shape_vec(IxDyn(&[25, n]), logits).unwrap(),
        ));
        let p = logits.softmax_lastdim();
        let d = expected_depth(&p, &centers, (5, 5), (20, 20));
        for &v in d.value().iter() {
            assert!(v >= range.d_min && v <= range.d_max);
        }
    }

    #[test]
    fn monotone_response_to_logit_increase() {
        // raising bin i's logit at one pixel moves the depth toward c_i
        let g = Graph::new();
        let range = DepthRange::new(0.0, 10.0).unwrap();
        let b = g.leaf(Arc::new(ArrayD::from_elem(IxDyn(&[4]), 0.25)));
        let centers = centers_from_bins(&b, range);
        let base = vec![0.1, -0.4, 0.2, 0.3];
        for i in 0..4 {
            let mk = |logits: Vec<f64>| {
                let l = g.leaf(Arc::new(
                    ArrayD::from_shape_vec(IxDyn(&[1, 4]), logits).unwrap(),
                ));
                let p = l.softmax_lastdim();
                expected_depth(&p, &centers, (1, 1), (1, 1)).value()[[0, 0]]
            };
            let d0 = mk(base.clone());
            let mut bumped = base.clone();
            bumped[i] += 0.5;
            let d1 = mk(bumped);
            let ci = centers.value()[[i]];
            assert!(
                (ci - d1).abs() < (ci - d0).abs(),
                "bumping logit {i} must pull depth toward its center"
            );
        }
    }
}
