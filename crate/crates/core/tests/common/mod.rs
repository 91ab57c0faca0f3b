//! Shared helpers for the integration suites: random tensors and an
//! analytic-vs-central-finite-difference gradient checker that stays
//! independent of the graph's backward implementation.

pub mod cases;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vsdl_core::{Graph, Scalar, Tensor, Var};

pub fn rand_tensor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(lo..hi)))
}

/// One gradient-check instance: leaf tensors plus a builder that records the
/// computation and returns a scalar loss.
pub struct Case<S: Scalar> {
    pub name: String,
    pub leaves: Vec<Tensor<S>>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph<S>, &[Var]) -> Var>,
}

impl<S: Scalar> Case<S> {
    fn loss(&self, leaves: &[Tensor<S>]) -> f64 {
        let mut graph = Graph::new();
        let vars: Vec<Var> = leaves
            .iter()
            .map(|t| graph.leaf(t.clone(), false))
            .collect();
        let loss = (self.build)(&mut graph, &vars);
        graph.value(loss).item().to_f64().unwrap()
    }

    /// Analytic gradients of every leaf against central differences of the
    /// loss, `(f(x+h) - f(x-h)) / 2h`, at step `h`. Relative error per
    /// element must stay within `tol` (denominator `max(1, |a|, |n|)`).
    pub fn run(&self, h: f64, tol: f64) {
        let mut graph = Graph::new();
        let vars: Vec<Var> = self
            .leaves
            .iter()
            .map(|t| graph.leaf(t.clone(), true))
            .collect();
        let loss = (self.build)(&mut graph, &vars);
        assert!(
            graph.value(loss).is_scalar(),
            "{}: loss must be scalar",
            self.name
        );
        graph.backward(loss).expect("backward");

        for (li, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = graph
                .grad(*var)
                .unwrap_or(&vec![S::zero(); self.leaves[li].numel()])
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect();
            for ei in 0..self.leaves[li].numel() {
                let mut plus = self.leaves.clone();
                plus[li].data_mut()[ei] += S::lit(h);
                let mut minus = self.leaves.clone();
                minus[li].data_mut()[ei] -= S::lit(h);
                let numeric = (self.loss(&plus) - self.loss(&minus)) / (2.0 * h);
                let a = analytic[ei];
                let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel <= tol,
                    "{}: leaf {li} elem {ei}: analytic {a} vs numeric {numeric} (rel {rel:.3e} > {tol:.0e})",
                    self.name
                );
            }
        }
    }
}
