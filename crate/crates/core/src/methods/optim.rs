use crate::backbone::Matrix;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Matrix::zeros(*s)).collect(),
            v: shapes.iter().map(|s| Matrix::zeros(*s)).collect(),
            t: 0,
        }
    }

    /// One update at learning rate `lr`. `grads[k] = None` means a zero
    /// gradient (moments still decay). `decay[k]` enables weight decay.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>], decay: &[bool], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (k, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            match &grads[k] {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            let shrink = if decay[k] { 1.0 - lr * wd } else { 1.0 };
            ndarray::Zip::from(&mut **p).and(&*m).and(&*v).for_each(|p, m, v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                *p = *p * shrink - lr * update;
            });
        }
    }
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero
/// at `total`.
pub fn scheduled_lr(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        let rest = total.saturating_sub(warmup).max(1);
        base * total.saturating_sub(step) as f64 / rest as f64
    }
}
