//! Two-dimensional PCA projection for plotting embeddings.

use geat_core::numeric::Tensor;
use nalgebra::DMatrix;

/// Projects the rows of `points` onto their first two principal components.
///
/// Each component's sign is fixed so that its largest-magnitude loading is
/// positive. Missing components (fewer than two points or dimensions, or a
/// rank-deficient cloud) project to zero.
pub fn project_2d(points: &Tensor<f64>) -> Vec<[f64; 2]> {
    let (n, e) = (points.rows(), points.cols());
    let mut out = vec![[0.0; 2]; n];
    if n == 0 || e == 0 {
        return out;
    }
    let mut x = DMatrix::from_row_slice(n, e, points.data());
    for j in 0..e {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let scale = svd.singular_values.iter().copied().fold(0.0, f64::max);
    for (c, &i) in order.iter().take(2).enumerate() {
        if svd.singular_values[i] <= scale * 1e-12 {
            continue;
        }
        let mut v: Vec<f64> = v_t.row(i).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (k, &a)| if a.abs() > best.1.abs() { (k, a) } else { best });
        if lead.1 < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        for (r, row) in out.iter_mut().enumerate() {
            row[c] = x.row(r).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
    }
    out
}
