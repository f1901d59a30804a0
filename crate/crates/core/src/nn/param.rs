use super::{Real, Tensor};

/// A tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// `grad += delta` elementwise. Frozen parameters never receive gradient.
    pub fn accumulate(&mut self, delta: &[T]) {
        if !self.trainable {
            return;
        }
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            value: self.value.cast(),
            grad: self.grad.cast(),
            trainable: self.trainable,
        }
    }
}

/// Hierarchically named parameter access.
///
/// Names are dot-separated paths (`decoder.blocks.0.fc1.weight`) and the
/// visiting order is stable, so it doubles as the checkpoint order.
pub trait HasParams<T: Real> {
    fn params(&self) -> Vec<(String, &Parameter<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, p) in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Prefix every name in `items` with `scope.`.
pub fn scoped<P>(scope: &str, items: Vec<(String, P)>) -> std::vec::IntoIter<(String, P)> {
    items
        .into_iter()
        .map(|(name, p)| (format!("{scope}.{name}"), p))
        .collect::<Vec<_>>()
        .into_iter()
}
