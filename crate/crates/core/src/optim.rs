//! SGD with momentum and coupled weight decay:
//! `v = mu v + (g + wd w)`, `w -= lr v`.

use std::collections::HashMap;

use ndarray::{Array2, Zip};

use crate::model::GazeModel;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<String, Array2<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr: lr as f32,
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter whose name passes `trainable`.
    pub fn step(&mut self, model: &mut GazeModel, trainable: &dyn Fn(&str) -> bool) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |name, p| {
            if !trainable(name) {
                return;
            }
            let v = velocity.entry(name.to_string()).or_insert_with(|| Array2::zeros(p.value.raw_dim()));
            Zip::from(&mut p.value).and(v).and(&p.grad).for_each(|w, v, &g| {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            });
        });
    }
}
