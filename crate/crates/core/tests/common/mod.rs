use psst_autodiff::{ParamSet, Tensor};

/// Largest absolute gap between `grad` and central differences of `f`.
pub fn fd_gap(params: &ParamSet, grad: &[f64], f: impl Fn(&ParamSet) -> f64) -> f64 {
    let base = params.flatten();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = params.clone();
        let mut x = base.clone();
        x[i] += eps;
        p.assign_flat(&x).unwrap();
        let up = f(&p);
        x[i] -= 2.0 * eps;
        p.assign_flat(&x).unwrap();
        let down = f(&p);
        worst = worst.max(((up - down) / (2.0 * eps) - grad[i]).abs());
    }
    worst
}

pub fn flat(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().to_vec()).collect()
}
