//! Dense layers and recurrent cells shared by the models.

use crate::error::Result;
use crate::numerics::{Bound, Init, ParamId, ParamSet, Scalar, Var};

/// `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        Linear {
            w: params.add(format!("{name}.w"), init.uniform(&[input, output], input)),
            b: params.add(format!("{name}.b"), init.zeros(&[1, output])),
        }
    }

    pub fn apply<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(b[self.w])?.add(b[self.b])
    }
}

/// Two linear layers with a tanh between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Mlp {
            hidden: Linear::new(params, init, &format!("{name}.0"), input, hidden),
            out: Linear::new(params, init, &format!("{name}.1"), hidden, output),
        }
    }

    pub fn apply<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.hidden.apply(b, x)?.tanh()?;
        self.out.apply(b, h)
    }
}

/// Elman cell: `h' = tanh(x W_x + h W_h + b)`.
#[derive(Clone, Copy, Debug)]
pub struct RnnCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl RnnCell {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        RnnCell {
            w_x: params.add(
                format!("{name}.w_x"),
                init.uniform(&[input, hidden], hidden),
            ),
            w_h: params.add(
                format!("{name}.w_h"),
                init.uniform(&[hidden, hidden], hidden),
            ),
            bias: params.add(format!("{name}.b"), init.zeros(&[1, hidden])),
        }
    }

    pub fn step<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.matmul(b[self.w_x])?
            .add(h.matmul(b[self.w_h])?)?
            .add(b[self.bias])?
            .tanh()
    }
}

/// LSTM cell with gate blocks ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        LstmCell {
            w_x: params.add(
                format!("{name}.w_x"),
                init.uniform(&[input, 4 * hidden], hidden),
            ),
            w_h: params.add(
                format!("{name}.w_h"),
                init.uniform(&[hidden, 4 * hidden], hidden),
            ),
            bias: params.add(format!("{name}.b"), init.zeros(&[1, 4 * hidden])),
            hidden,
        }
    }

    /// Returns the new `(h, c)`.
    pub fn step<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        h: Var<'t, T>,
        c: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let n = self.hidden;
        let z = x
            .matmul(b[self.w_x])?
            .add(h.matmul(b[self.w_h])?)?
            .add(b[self.bias])?;
        let i = z.slice_cols(0, n)?.sigmoid()?;
        let f = z.slice_cols(n, n)?.sigmoid()?;
        let g = z.slice_cols(2 * n, n)?.tanh()?;
        let o = z.slice_cols(3 * n, n)?.sigmoid()?;
        let c = f.mul(c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh()?)?;
        Ok((h, c))
    }
}

/// GRU cell with gate blocks ordered reset, update, candidate:
///
/// ```text
/// r  = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
/// z  = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
/// n  = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        GruCell {
            w_x: params.add(
                format!("{name}.w_x"),
                init.uniform(&[input, 3 * hidden], hidden),
            ),
            w_h: params.add(
                format!("{name}.w_h"),
                init.uniform(&[hidden, 3 * hidden], hidden),
            ),
            b_x: params.add(format!("{name}.b_x"), init.zeros(&[1, 3 * hidden])),
            b_h: params.add(format!("{name}.b_h"), init.zeros(&[1, 3 * hidden])),
            hidden,
        }
    }

    pub fn step<'t, T: Scalar>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = self.hidden;
        let gx = x.matmul(b[self.w_x])?.add(b[self.b_x])?;
        let gh = h.matmul(b[self.w_h])?.add(b[self.b_h])?;
        let r = gx.slice_cols(0, n)?.add(gh.slice_cols(0, n)?)?.sigmoid()?;
        let z = gx.slice_cols(n, n)?.add(gh.slice_cols(n, n)?)?.sigmoid()?;
        let cand = gx
            .slice_cols(2 * n, n)?
            .add(r.mul(gh.slice_cols(2 * n, n)?)?)?
            .tanh()?;
        z.one_minus()?.mul(cand)?.add(z.mul(h)?)
    }
}
