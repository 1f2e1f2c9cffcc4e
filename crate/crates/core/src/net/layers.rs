use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{linear, Tensor};

/// Fully connected layer acting on the last axis.
pub struct Linear {
    pub name: String,
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = Tensor::leaf(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )
        .expect("finite init");
        let b = bias.then(|| {
            Tensor::leaf(
                vec![fan_out],
                (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
            )
            .expect("finite init")
        });
        Self {
            name: name.to_string(),
            w,
            b,
        }
    }

    /// Final-quaternion style init: zero weights, fixed bias values.
    pub fn with_fixed_bias(rng: &mut ChaCha8Rng, name: &str, fan_in: usize, bias: &[f64]) -> Self {
        let _ = rng;
        let w = Tensor::leaf(vec![fan_in, bias.len()], vec![0.0; fan_in * bias.len()])
            .expect("finite init");
        let b = Tensor::leaf(vec![bias.len()], bias.to_vec()).expect("finite init");
        Self {
            name: name.to_string(),
            w,
            b: Some(b),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.w, self.b.as_ref())
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.w", self.name), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{}.b", self.name), b.clone()));
        }
    }
}

/// Linear layers with rectification between them; the final layer is linear
/// unless `relu_last`.
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, widths: &[usize], relu_last: bool) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(rng, &format!("{}.{}", name, i), w[0], w[1], true))
            .collect();
        Self { layers, relu_last }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.relu_last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for layer in &self.layers {
            layer.collect(out);
        }
    }
}

/// Two-layer block with an inner residual connection:
/// `relu(lin2(relu(lin1(x))) + relu(lin1(x)))`.
pub struct SkipBlock {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl SkipBlock {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, fan_in: usize, width: usize) -> Self {
        Self {
            lin1: Linear::new(rng, &format!("{}.in", name), fan_in, width, true),
            lin2: Linear::new(rng, &format!("{}.res", name), width, width, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.lin1.forward(x)?.relu();
        Ok(self.lin2.forward(&h)?.add(&h)?.relu())
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.lin1.collect(out);
        self.lin2.collect(out);
    }
}

/// Repeats a `[C]` (or `[1, C]`) tensor into `[n, C]` rows.
pub fn tile_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let c = t.numel();
    t.reshape(vec![1, c])?.gather(0, &vec![0; n], &[n])
}
