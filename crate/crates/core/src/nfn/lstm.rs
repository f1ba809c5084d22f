use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// One peephole LSTM layer. Matrices are stored `[in, out]` so a batch of
/// row vectors multiplies on the left; peephole weights are per-unit vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w_ix: Tensor,
    pub w_ih: Tensor,
    pub w_ic: Tensor,
    pub w_fx: Tensor,
    pub w_fh: Tensor,
    pub w_fc: Tensor,
    pub w_cx: Tensor,
    pub w_ch: Tensor,
    pub w_ox: Tensor,
    pub w_oh: Tensor,
    pub w_oc: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

/// Tape handles for an [`LstmLayer`], same field order.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ix: Var,
    pub w_ih: Var,
    pub w_ic: Var,
    pub w_fx: Var,
    pub w_fh: Var,
    pub w_fc: Var,
    pub w_cx: Var,
    pub w_ch: Var,
    pub w_ox: Var,
    pub w_oh: Var,
    pub w_oc: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_c: Var,
    pub b_o: Var,
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl LstmLayer {
    pub fn init<R: Rng + ?Sized>(input: usize, width: usize, rng: &mut R) -> Self {
        let bx = 1.0 / (input as f64).sqrt();
        let bh = 1.0 / (width as f64).sqrt();
        let mx = |rng: &mut R| uniform(rng, &[input, width], bx);
        let (w_ix, w_fx, w_cx, w_ox) = (mx(rng), mx(rng), mx(rng), mx(rng));
        let mh = |rng: &mut R| uniform(rng, &[width, width], bh);
        let (w_ih, w_fh, w_ch, w_oh) = (mh(rng), mh(rng), mh(rng), mh(rng));
        let pv = |rng: &mut R| uniform(rng, &[width], bh);
        let (w_ic, w_fc, w_oc) = (pv(rng), pv(rng), pv(rng));
        LstmLayer {
            w_ix,
            w_ih,
            w_ic,
            w_fx,
            w_fh,
            w_fc,
            w_cx,
            w_ch,
            w_ox,
            w_oh,
            w_oc,
            b_i: Tensor::zeros(&[width]),
            b_f: Tensor::full(&[width], 1.0),
            b_c: Tensor::zeros(&[width]),
            b_o: Tensor::zeros(&[width]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 15] {
        [
            &self.w_ix, &self.w_ih, &self.w_ic, &self.w_fx, &self.w_fh, &self.w_fc, &self.w_cx,
            &self.w_ch, &self.w_ox, &self.w_oh, &self.w_oc, &self.b_i, &self.b_f, &self.b_c,
            &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.w_ix,
            &mut self.w_ih,
            &mut self.w_ic,
            &mut self.w_fx,
            &mut self.w_fh,
            &mut self.w_fc,
            &mut self.w_cx,
            &mut self.w_ch,
            &mut self.w_ox,
            &mut self.w_oh,
            &mut self.w_oc,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }

    pub fn width(&self) -> usize {
        self.b_i.len()
    }

    pub fn input_size(&self) -> usize {
        self.w_ix.shape()[0]
    }

    /// Record the layer on the tape as trainable leaves (or constants).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<LstmVars> {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Ok(LstmVars {
            w_ix: leaf(&self.w_ix)?,
            w_ih: leaf(&self.w_ih)?,
            w_ic: leaf(&self.w_ic)?,
            w_fx: leaf(&self.w_fx)?,
            w_fh: leaf(&self.w_fh)?,
            w_fc: leaf(&self.w_fc)?,
            w_cx: leaf(&self.w_cx)?,
            w_ch: leaf(&self.w_ch)?,
            w_ox: leaf(&self.w_ox)?,
            w_oh: leaf(&self.w_oh)?,
            w_oc: leaf(&self.w_oc)?,
            b_i: leaf(&self.b_i)?,
            b_f: leaf(&self.b_f)?,
            b_c: leaf(&self.b_c)?,
            b_o: leaf(&self.b_o)?,
        })
    }
}

impl LstmVars {
    pub fn all(&self) -> [Var; 15] {
        [
            self.w_ix, self.w_ih, self.w_ic, self.w_fx, self.w_fh, self.w_fc, self.w_cx, self.w_ch,
            self.w_ox, self.w_oh, self.w_oc, self.b_i, self.b_f, self.b_c, self.b_o,
        ]
    }
}

/// `σ(x·wx + h·wh + c⊙wc + b)`.
#[allow(clippy::too_many_arguments)]
fn gate(g: &mut Graph, x: Var, h: Var, c: Var, wx: Var, wh: Var, wc: Var, b: Var) -> Result<Var> {
    let a = g.matmul(x, wx)?;
    let r = g.matmul(h, wh)?;
    let p = g.mul(c, wc)?;
    let s = g.add(a, r)?;
    let s = g.add(s, p)?;
    let s = g.add(s, b)?;
    g.sigmoid(s)
}

/// One recurrence step on `[B, in]` inputs and `[B, W]` states; returns
/// `(h, c)`.
pub fn lstm_step(g: &mut Graph, p: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let i = gate(g, x, h, c, p.w_ix, p.w_ih, p.w_ic, p.b_i)?;
    let f = gate(g, x, h, c, p.w_fx, p.w_fh, p.w_fc, p.b_f)?;
    let o = gate(g, x, h, c, p.w_ox, p.w_oh, p.w_oc, p.b_o)?;
    let a = g.matmul(x, p.w_cx)?;
    let r = g.matmul(h, p.w_ch)?;
    let s = g.add(a, r)?;
    let s = g.add(s, p.b_c)?;
    let cand = g.tanh(s)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Run a layer over a sequence of `[B, in]` inputs from zero state and
/// return the hidden state at every step.
pub fn lstm_sequence(g: &mut Graph, p: &LstmVars, xs: &[Var], width: usize) -> Result<Vec<Var>> {
    let b = g.shape(xs[0])[0];
    let mut h = g.constant(Tensor::zeros(&[b, width]))?;
    let mut c = h;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let (hn, cn) = lstm_step(g, p, x, h, c)?;
        out.push(hn);
        h = hn;
        c = cn;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(input: usize, width: usize) -> LstmLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = LstmLayer::init(input, width, &mut rng);
        for t in l.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        l
    }

    #[test]
    fn all_zero_params_give_half_gates_and_zero_state() {
        let l = zero_layer(2, 3);
        let mut g = Graph::new();
        let v = l.bind(&mut g, false).unwrap();
        let x = g
            .constant(Tensor::new(vec![1, 2], vec![0.4, -1.0]).unwrap())
            .unwrap();
        let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let (h, c) = lstm_step(&mut g, &v, x, z, z).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_and_closed_input_keep_cell() {
        let mut l = zero_layer(1, 2);
        l.b_f = Tensor::full(&[2], 800.0);
        l.b_i = Tensor::full(&[2], -800.0);
        l.b_c = Tensor::full(&[2], 0.3);
        let mut g = Graph::new();
        let v = l.bind(&mut g, false).unwrap();
        let x = g
            .constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap())
            .unwrap();
        let h = g
            .constant(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap())
            .unwrap();
        let c = g
            .constant(Tensor::new(vec![1, 2], vec![-0.7, 1.3]).unwrap())
            .unwrap();
        let (_, cn) = lstm_step(&mut g, &v, x, h, c).unwrap();
        assert_eq!(g.value(cn).data(), &[-0.7, 1.3]);
    }
}
