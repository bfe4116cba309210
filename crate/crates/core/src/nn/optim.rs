use super::mlp::{Gradients, MlpModel, Real};

/// Adaptive moment estimation over every layer's weights and biases.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Gradients<F>,
    v: Gradients<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(model: &MlpModel<F>, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut MlpModel<F>, grads: &Gradients<F>) {
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let lr = F::of(self.learning_rate * bc2.sqrt() / bc1);
        let eps = F::of(self.eps * bc2.sqrt());
        for (((layer, g), m), v) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let update = |p: &mut F, g: &F, m: &mut F, v: &mut F| {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                *p = *p - lr * *m / (v.sqrt() + eps);
            };
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(update);
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && max_norm > 0.0 {
        grads.scale(F::of(max_norm / norm));
    }
    norm
}
