use rand::Rng;

use super::VelocityModel;

/// Two hidden layers of 64 units.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Feed-forward velocity network `(x, τ, one_hot(c)) ↦ v`.
///
/// Hidden layers use `tanh`; the output layer is linear. All parameters live
/// in one flat vector, layer by layer, each layer storing its weight matrix
/// (`fan_in × fan_out`, row-major) followed by its bias (`fan_out`).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    sizes: Vec<usize>,
    data_dim: usize,
    num_conditions: usize,
    params: Vec<f64>,
}

/// Activations of every layer from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    /// `activations[0]` are the inputs, the last entry is the output.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least one layer")
    }
}

fn layer_sizes(data_dim: usize, num_conditions: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(data_dim + 1 + num_conditions);
    sizes.extend_from_slice(hidden);
    sizes.push(data_dim);
    sizes
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl VelocityField {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(
        data_dim: usize,
        num_conditions: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut model = Self::zeros(data_dim, num_conditions, hidden);
        let mut offset = 0;
        for w in model.sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut model.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += (fan_in + 1) * fan_out;
        }
        model
    }

    pub fn zeros(data_dim: usize, num_conditions: usize, hidden: &[usize]) -> Self {
        assert!(data_dim > 0 && num_conditions > 0);
        let sizes = layer_sizes(data_dim, num_conditions, hidden);
        let params = vec![0.0; param_count(&sizes)];
        Self {
            sizes,
            data_dim,
            num_conditions,
            params,
        }
    }

    /// Rebuild from raw parts, checking that the parameter count is consistent.
    pub fn from_parts(
        sizes: Vec<usize>,
        data_dim: usize,
        num_conditions: usize,
        params: Vec<f64>,
    ) -> Option<Self> {
        if sizes.len() < 2
            || sizes[0] != data_dim + 1 + num_conditions
            || *sizes.last()? != data_dim
            || param_count(&sizes) != params.len()
        {
            return None;
        }
        Some(Self {
            sizes,
            data_dim,
            num_conditions,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Append the network input for one point to `out`.
    pub fn push_features(&self, x: &[f64], tau: f64, condition: usize, out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.data_dim);
        assert!(
            condition < self.num_conditions,
            "condition {condition} out of range"
        );
        out.extend_from_slice(x);
        out.push(tau);
        out.extend((0..self.num_conditions).map(|c| if c == condition { 1.0 } else { 0.0 }));
    }

    /// Batched forward pass over `rows` inputs stored row-major.
    ///
    /// Each row is computed independently with a fixed accumulation order, so
    /// results do not depend on how a set of points is split into batches.
    pub fn forward_batch(&self, inputs: &[f64], rows: usize) -> ForwardCache {
        assert_eq!(inputs.len(), rows * self.input_dim());
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(inputs.to_vec());
        let last = self.sizes.len() - 2;
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;

            let input = activations.last().unwrap();
            let mut out = vec![0.0; rows * fan_out];
            for (x, y) in input
                .chunks_exact(fan_in)
                .zip(out.chunks_exact_mut(fan_out))
            {
                y.copy_from_slice(bias);
                for (&xi, wrow) in x.iter().zip(weights.chunks_exact(fan_out)) {
                    for (yo, &wo) in y.iter_mut().zip(wrow) {
                        *yo += xi * wo;
                    }
                }
                if l != last {
                    y.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            activations.push(out);
        }
        ForwardCache { rows, activations }
    }

    /// Accumulate `∂(Σ d_out · output)/∂θ` into `grad`.
    pub fn backward_batch(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(d_out.len(), cache.output().len());
        let rows = cache.rows;
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += (w[0] + 1) * w[1];
        }

        // Gradient with respect to the pre-activation of the current layer.
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let weights = &self.params[off..off + fan_in * fan_out];
            let input = &cache.activations[l];
            {
                let (gw, gb) =
                    grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for (x, d) in input.chunks_exact(fan_in).zip(delta.chunks_exact(fan_out)) {
                    for (&xi, gwrow) in x.iter().zip(gw.chunks_exact_mut(fan_out)) {
                        for (g, &dv) in gwrow.iter_mut().zip(d) {
                            *g += xi * dv;
                        }
                    }
                    for (g, &dv) in gb.iter_mut().zip(d) {
                        *g += dv;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; rows * fan_in];
            for ((d, nx), h) in delta
                .chunks_exact(fan_out)
                .zip(next.chunks_exact_mut(fan_in))
                .zip(input.chunks_exact(fan_in))
            {
                for ((n, wrow), &hv) in nx.iter_mut().zip(weights.chunks_exact(fan_out)).zip(h) {
                    let s: f64 = wrow.iter().zip(d).map(|(w, d)| w * d).sum();
                    // `input` here is the tanh output of the previous layer.
                    *n = s * (1.0 - hv * hv);
                }
            }
            delta = next;
        }
    }

    /// Inputs for a batch of points.
    pub fn features_batch(&self, xs: &[f64], taus: &[f64], conditions: &[usize]) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(taus.len() * self.input_dim());
        for (x, (&tau, &c)) in xs
            .chunks_exact(self.data_dim)
            .zip(taus.iter().zip(conditions))
        {
            self.push_features(x, tau, c, &mut inputs);
        }
        inputs
    }
}

impl VelocityModel for VelocityField {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn velocity(&self, x: &[f64], tau: f64, condition: usize) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(self.input_dim());
        self.push_features(x, tau, condition, &mut inputs);
        self.forward_batch(&inputs, 1).output().to_vec()
    }

    fn velocity_batch(&self, xs: &[f64], taus: &[f64], conditions: &[usize]) -> Vec<f64> {
        let inputs = self.features_batch(xs, taus, conditions);
        self.forward_batch(&inputs, taus.len()).output().to_vec()
    }
}
