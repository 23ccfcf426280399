use crate::params::ParamStore;
use crate::Matrix;

/// Exponential moving average of every parameter in a store.
///
/// The effective decay ramps up as `(1 + n) / (10 + n)` over the first
/// updates so early weights do not dominate.
#[derive(Debug, Clone)]
pub struct WeightAverage {
    pub decay: f64,
    updates: u64,
    values: Vec<Matrix>,
}

impl WeightAverage {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must lie in [0, 1)");
        Self {
            decay,
            updates: 0,
            values: store.iter().map(|(_, v)| v.clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        assert_eq!(store.len(), self.values.len(), "store changed size");
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for (avg, (_, v)) in self.values.iter_mut().zip(store.iter()) {
            avg.zip_mut_with(v, |a, &x| *a = d * *a + (1.0 - d) * x);
        }
        self.updates += 1;
    }

    /// Exchange the averaged weights with the store's current ones; calling
    /// it twice restores the original state.
    pub fn swap(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        assert_eq!(ids.len(), self.values.len(), "store changed size");
        for (avg, id) in self.values.iter_mut().zip(ids) {
            std::mem::swap(avg, store.value_mut(id));
        }
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }
}
