use super::model::Model;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of a flat parameter list with its gradients:
    /// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut theta = p[i] as f64;
                theta -= self.lr * self.weight_decay * theta;
                theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p[i] = theta as f32;
            }
        }
    }

    /// Applies one update to every trainable parameter of `model` using its
    /// accumulated gradients.
    pub fn step(&mut self, model: &mut Model) {
        let mut params = model.params_mut();
        let grads: Vec<Vec<f32>> = params.iter().map(|p| p.grad.clone()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut values: Vec<&mut [f32]> = params.iter_mut().map(|p| p.value.data_mut()).collect();
        self.update(&mut values, &grad_refs);
    }
}

/// Divides the learning rate by a factor whenever the watched metric has not
/// strictly improved for `patience` consecutive epochs, down to a floor.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's metric (lower is better) and returns the learning
    /// rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
