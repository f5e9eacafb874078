//! Central finite-difference gradient verification.
//!
//! This is the independent oracle for every gradient in the crate: it never
//! touches the reverse-mode machinery beyond reading the final grads.

use crate::numeric::tensor::{backward, Tensor};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must build a scalar loss from the given leaves each time it is
/// called (the graph is rebuilt per evaluation). `coords[i]` lists which
/// flat indices of leaf `i` to probe; probing everything is fine for small
/// tensors. Relative error uses `|fd - ad| / max(|fd|, |ad|, floor)`.
pub fn check_grads(
    leaves: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Tensor,
    coords: &[Vec<usize>],
    h: f64,
    floor: f64,
) -> GradCheckReport {
    for leaf in leaves {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    let loss = f(leaves);
    backward(&loss).expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst_coord: None };
    for (li, probe) in coords.iter().enumerate() {
        for &ci in probe {
            let orig = leaves[li].data()[ci];
            leaves[li].update_data(|d| d[ci] = orig + h);
            let fp = eval_scalar(leaves, f);
            leaves[li].update_data(|d| d[ci] = orig - h);
            let fm = eval_scalar(leaves, f);
            leaves[li].update_data(|d| d[ci] = orig);
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[li][ci];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = Some((li, ci));
            }
        }
    }
    report
}

fn eval_scalar(leaves: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    // Gradient tracking stays on; we only read the value.
    f(leaves).item().expect("gradcheck loss must be scalar")
}

/// Convenience: probe every coordinate of every leaf.
pub fn all_coords(leaves: &[Tensor]) -> Vec<Vec<usize>> {
    leaves.iter().map(|l| (0..l.numel()).collect()).collect()
}

/// Convenience: probe a deterministic stride-spread subset of coordinates.
pub fn spread_coords(leaves: &[Tensor], per_leaf: usize) -> Vec<Vec<usize>> {
    leaves
        .iter()
        .map(|l| {
            let n = l.numel();
            if n <= per_leaf {
                (0..n).collect()
            } else {
                (0..per_leaf).map(|i| i * n / per_leaf).collect()
            }
        })
        .collect()
}
