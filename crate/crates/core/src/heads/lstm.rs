//! Single-layer LSTM cell with backpropagation through time.
//!
//! Gate order everywhere is input, forget, output, candidate:
//!
//! ```text
//! i = σ(x·W_i + h·U_i + b_i)    f = σ(x·W_f + h·U_f + b_f)
//! o = σ(x·W_o + h·U_o + b_o)    g = tanh(x·W_g + h·U_g + b_g)
//! c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
//! ```

use rand::Rng;

use crate::linalg::{sigmoid, Matrix};

pub const INPUT: usize = 0;
pub const FORGET: usize = 1;
pub const OUTPUT: usize = 2;
pub const CANDIDATE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `C_in x H` input weights per gate.
    pub input: [Matrix; 4],
    /// `H x H` recurrent weights per gate.
    pub recurrent: [Matrix; 4],
    pub bias: [Vec<f64>; 4],
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input: std::array::from_fn(|_| Matrix::zeros(input_dim, hidden)),
            recurrent: std::array::from_fn(|_| Matrix::zeros(hidden, hidden)),
            bias: std::array::from_fn(|_| vec![0.0; hidden]),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = std::array::from_fn(|_| Matrix::glorot(input_dim, hidden, rng));
        let recurrent = std::array::from_fn(|_| Matrix::glorot(hidden, hidden, rng));
        let mut bias: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        bias[FORGET].iter_mut().for_each(|b| *b = 1.0);
        Self {
            input,
            recurrent,
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.bias[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.input[0].rows()
    }

    pub(crate) fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(12);
        out.extend(self.input.iter().map(Matrix::as_slice));
        out.extend(self.recurrent.iter().map(Matrix::as_slice));
        out.extend(self.bias.iter().map(Vec::as_slice));
        out
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(12);
        out.extend(self.input.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.recurrent.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.bias.iter_mut().map(Vec::as_mut_slice));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub x: Vec<f64>,
    /// Gate activations after their nonlinearity.
    pub gates: [Vec<f64>; 4],
    pub cell: Vec<f64>,
    pub cell_tanh: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    pub steps: Vec<LstmStep>,
}

impl LstmTrace {
    /// Hidden state after the last input; zeros for an empty sequence.
    pub fn final_hidden(&self, hidden: usize) -> Vec<f64> {
        self.steps
            .last()
            .map_or_else(|| vec![0.0; hidden], |s| s.hidden.clone())
    }
}

/// Runs the recurrence from `h = c = 0` over `inputs` in the given order.
pub fn forward<'a, I>(params: &LstmParams, inputs: I) -> LstmTrace
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let hidden = params.hidden();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut steps = Vec::new();
    for x in inputs {
        let mut gates: [Vec<f64>; 4] = std::array::from_fn(|g| params.bias[g].clone());
        for (g, pre) in gates.iter_mut().enumerate() {
            params.input[g].accumulate_vec_mul(x, pre);
            params.recurrent[g].accumulate_vec_mul(&h, pre);
        }
        for (g, act) in gates.iter_mut().enumerate() {
            let f: fn(f64) -> f64 = if g == CANDIDATE { f64::tanh } else { sigmoid };
            act.iter_mut().for_each(|v| *v = f(*v));
        }
        for j in 0..hidden {
            c[j] = gates[FORGET][j] * c[j] + gates[INPUT][j] * gates[CANDIDATE][j];
        }
        let cell_tanh: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        h = gates[OUTPUT].iter().zip(&cell_tanh).map(|(o, t)| o * t).collect();
        steps.push(LstmStep {
            x: x.to_vec(),
            gates,
            cell: c.clone(),
            cell_tanh,
            hidden: h.clone(),
        });
    }
    LstmTrace { steps }
}

/// Backpropagates a gradient on the final hidden state through every step.
///
/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to each input, in the same order as the forward inputs.
pub fn backward(
    params: &LstmParams,
    trace: &LstmTrace,
    d_final_hidden: &[f64],
    grads: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let hidden = params.hidden();
    let input_dim = params.input_dim();
    let zero = vec![0.0; hidden];
    let mut dh = d_final_hidden.to_vec();
    let mut dc = vec![0.0; hidden];
    let mut dxs = vec![Vec::new(); trace.steps.len()];

    for t in (0..trace.steps.len()).rev() {
        let step = &trace.steps[t];
        let (h_prev, c_prev) = match t {
            0 => (&zero, &zero),
            _ => (&trace.steps[t - 1].hidden, &trace.steps[t - 1].cell),
        };
        let [i, f, o, g] = &step.gates;

        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        for j in 0..hidden {
            let tc = step.cell_tanh[j];
            dc[j] += dh[j] * o[j] * (1.0 - tc * tc);
            da[OUTPUT][j] = dh[j] * tc * o[j] * (1.0 - o[j]);
            da[INPUT][j] = dc[j] * g[j] * i[j] * (1.0 - i[j]);
            da[FORGET][j] = dc[j] * c_prev[j] * f[j] * (1.0 - f[j]);
            da[CANDIDATE][j] = dc[j] * i[j] * (1.0 - g[j] * g[j]);
            dc[j] *= f[j];
        }

        let mut dx = vec![0.0; input_dim];
        let mut dh_prev = vec![0.0; hidden];
        for gate in 0..4 {
            grads.input[gate].accumulate_outer(&step.x, &da[gate]);
            grads.recurrent[gate].accumulate_outer(h_prev, &da[gate]);
            grads.bias[gate]
                .iter_mut()
                .zip(&da[gate])
                .for_each(|(b, d)| *b += d);
            params.input[gate].accumulate_mul_vec(&da[gate], &mut dx);
            params.recurrent[gate].accumulate_mul_vec(&da[gate], &mut dh_prev);
        }
        dxs[t] = dx;
        dh = dh_prev;
    }
    dxs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_keep_state_at_zero() {
        let params = LstmParams::zeros(3, 3);
        let inputs = [vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 1.0]];
        let trace = forward(&params, inputs.iter().map(Vec::as_slice));
        for step in &trace.steps {
            assert!(step.gates[INPUT].iter().all(|v| *v == 0.5));
            assert!(step.gates[CANDIDATE].iter().all(|v| *v == 0.0));
            assert!(step.cell.iter().all(|v| *v == 0.0));
            assert!(step.hidden.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn empty_sequence_has_zero_final_state() {
        let params = LstmParams::zeros(2, 4);
        let trace = forward(&params, std::iter::empty());
        assert_eq!(trace.final_hidden(4), vec![0.0; 4]);
    }
}
