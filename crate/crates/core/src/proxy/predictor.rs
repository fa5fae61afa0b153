use rand::Rng;
use rand_distr::StandardNormal;

/// Two-layer perceptron `x → tanh(W1 x + b1) → W2 h + b2`, applied row by
/// row. For segmentation each row is one pixel, which makes it a pair of
/// 1×1 convolutions.
///
/// Parameters live in one flat vector laid out as `W1, b1, W2, b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub params: Vec<f64>,
}

/// Scale of the output layer relative to Xavier; keeps initial softmax
/// outputs close to uniform.
const OUTPUT_INIT_SCALE: f64 = 0.1;

impl Predictor {
    pub fn param_count(inputs: usize, hidden: usize, outputs: usize) -> usize {
        hidden * inputs + hidden + outputs * hidden + outputs
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::param_count(inputs, hidden, outputs));
        let s1 = 1.0 / (inputs as f64).sqrt();
        params.extend((0..hidden * inputs).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        let s2 = OUTPUT_INIT_SCALE / (hidden as f64).sqrt();
        params.extend((0..outputs * hidden).map(|_| s2 * rng.sample::<f64, _>(StandardNormal)));
        params.extend(std::iter::repeat_n(0.0, outputs));
        Predictor { inputs, hidden, outputs, params }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.inputs);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.outputs * self.hidden);
        (w1, b1, w2, b2)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// `x` holds `rows × inputs`; fills `hid` (`rows × hidden`) and `out`
    /// (`rows × outputs`).
    pub fn forward(&self, x: &[f64], rows: usize, hid: &mut Vec<f64>, out: &mut Vec<f64>) {
        let (ni, nh, no) = (self.inputs, self.hidden, self.outputs);
        debug_assert_eq!(x.len(), rows * ni);
        let (w1, b1, w2, b2) = self.split();
        hid.resize(rows * nh, 0.0);
        out.resize(rows * no, 0.0);
        for r in 0..rows {
            let xr = &x[r * ni..(r + 1) * ni];
            let hr = &mut hid[r * nh..(r + 1) * nh];
            for (j, h) in hr.iter_mut().enumerate() {
                let wj = &w1[j * ni..(j + 1) * ni];
                *h = (b1[j] + dot(wj, xr)).tanh();
            }
            let or = &mut out[r * no..(r + 1) * no];
            for (k, o) in or.iter_mut().enumerate() {
                *o = b2[k] + dot(&w2[k * nh..(k + 1) * nh], hr);
            }
        }
    }

    /// Accumulates `∂L/∂params` into `grad` (overwritten) given `dout =
    /// ∂L/∂out` and the activations of the matching forward call.
    pub fn backward(&self, x: &[f64], rows: usize, hid: &[f64], dout: &[f64], grad: &mut [f64], dh: &mut Vec<f64>) {
        let (ni, nh, no) = (self.inputs, self.hidden, self.outputs);
        let (_, _, w2, _) = self.split();
        grad.fill(0.0);
        let (gw1, rest) = grad.split_at_mut(nh * ni);
        let (gb1, rest) = rest.split_at_mut(nh);
        let (gw2, gb2) = rest.split_at_mut(no * nh);
        dh.resize(nh, 0.0);
        for r in 0..rows {
            let xr = &x[r * ni..(r + 1) * ni];
            let hr = &hid[r * nh..(r + 1) * nh];
            let dr = &dout[r * no..(r + 1) * no];
            dh.fill(0.0);
            for (k, &d) in dr.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb2[k] += d;
                let w2k = &w2[k * nh..(k + 1) * nh];
                let g2k = &mut gw2[k * nh..(k + 1) * nh];
                for j in 0..nh {
                    g2k[j] += d * hr[j];
                    dh[j] += d * w2k[j];
                }
            }
            for j in 0..nh {
                let d = dh[j] * (1.0 - hr[j] * hr[j]);
                if d == 0.0 {
                    continue;
                }
                gb1[j] += d;
                for (g, &xv) in gw1[j * ni..(j + 1) * ni].iter_mut().zip(xr) {
                    *g += d * xv;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Predictor::init(3, 4, 2, &mut rng);
        p.params.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        let rows = 5;
        let x: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coef: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        // L = Σ coef · out² / 2, so ∂L/∂out = coef · out
        let loss = |p: &Predictor| {
            let (mut h, mut o) = (Vec::new(), Vec::new());
            p.forward(&x, rows, &mut h, &mut o);
            o.iter().zip(&coef).map(|(o, c)| 0.5 * c * o * o).sum::<f64>()
        };
        let (mut h, mut o) = (Vec::new(), Vec::new());
        p.forward(&x, rows, &mut h, &mut o);
        let dout: Vec<f64> = o.iter().zip(&coef).map(|(o, c)| c * o).collect();
        let mut grad = vec![0.0; p.params.len()];
        p.backward(&x, rows, &h, &dout, &mut grad, &mut Vec::new());
        for k in 0..p.params.len() {
            let step = 1e-6;
            let mut hi = p.clone();
            hi.params[k] += step;
            let mut lo = p.clone();
            lo.params[k] -= step;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * step);
            assert!((fd - grad[k]).abs() <= 1e-6 + 1e-5 * fd.abs(), "param {k}: {fd} vs {}", grad[k]);
        }
    }
}
