use ndarray::ArrayD;

use super::Param;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub state: AdamState,
}

/// Moment estimates in parameter order, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}


impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        let trainable: Vec<&mut Param> = params.into_iter().filter(|p| p.trainable).collect();
        if self.state.m.is_empty() {
            self.state.m = trainable.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.state.v = self.state.m.clone();
        }
        assert_eq!(self.state.m.len(), trainable.len(), "optimizer/parameter mismatch");
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in trainable
            .into_iter()
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            let vals = p.value.as_slice_mut().expect("contiguous");
            let grads = p.grad.as_slice().expect("contiguous");
            let ms = m.as_slice_mut().expect("contiguous");
            let vs = v.as_slice_mut().expect("contiguous");
            for i in 0..vals.len() {
                let g = grads[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                let mhat = ms[i] / c1;
                let vhat = vs[i] / c2;
                vals[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
