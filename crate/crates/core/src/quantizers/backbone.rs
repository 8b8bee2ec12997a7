//! Shared conv autoencoder backbone for the two map tokenizers.
//!
//! Encoder: patch conv (kernel = stride = P) -> gelu -> 1x1 -> gelu -> 1x1
//! to the latent width, so every latent column depends on exactly one patch.
//! Decoder: 1x1 in, residual 3x3 blocks at patch resolution, transposed-conv
//! upsample, a 3x3 smoothing stage at full resolution, 1x1 out, sigmoid.

use crate::error::{Error, Result};
use crate::map::patch_grid;
use crate::nn::{init, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub(crate) struct ConvParam {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BackboneShape {
    pub channels: usize,
    pub latent: usize,
    pub patch_size: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub dec_blocks: usize,
    pub smooth_width: usize,
}

impl BackboneShape {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.channels < 2
            || self.latent == 0
            || self.enc_width == 0
            || self.dec_width == 0
            || self.smooth_width == 0
        {
            return Err(Error::invalid("autoencoder widths must be positive"));
        }
        Ok(())
    }
}

/// Tape handles for every backbone parameter, in checkpoint order.
pub(crate) struct BackboneVars {
    enc_conv: (Var, Var),
    enc_fc: (Var, Var),
    enc_out: (Var, Var),
    dec_in: (Var, Var),
    dec_res: Vec<[Var; 4]>,
    dec_up: (Var, Var),
    dec_smooth: (Var, Var),
    dec_out: (Var, Var),
    pub ordered: Vec<Var>,
}

#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    shape: BackboneShape,
    enc_conv: ConvParam,
    enc_fc: ConvParam,
    enc_out: ConvParam,
    dec_in: ConvParam,
    dec_res: Vec<(ConvParam, ConvParam)>,
    dec_up: ConvParam,
    dec_smooth: ConvParam,
    dec_out: ConvParam,
}

impl Backbone {
    pub fn new(shape: BackboneShape, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let p = shape.patch_size;
        let conv = |cout: usize, cin: usize, k: usize, rng: &mut Rng| ConvParam {
            w: init::conv_kernel(cout, cin, k, k, rng),
            b: init::zeros(vec![cout]),
        };
        Ok(Backbone {
            enc_conv: conv(shape.enc_width, shape.channels, p, rng),
            enc_fc: conv(shape.enc_width, shape.enc_width, 1, rng),
            enc_out: conv(shape.latent, shape.enc_width, 1, rng),
            dec_in: conv(shape.dec_width, shape.latent, 1, rng),
            dec_res: (0..shape.dec_blocks)
                .map(|_| {
                    (
                        conv(shape.dec_width, shape.dec_width, 3, rng),
                        conv(shape.dec_width, shape.dec_width, 3, rng),
                    )
                })
                .collect(),
            dec_up: ConvParam {
                w: init::conv_transpose_kernel(shape.dec_width, shape.smooth_width, p, p, rng),
                b: init::zeros(vec![shape.smooth_width]),
            },
            dec_smooth: conv(shape.smooth_width, shape.smooth_width, 3, rng),
            dec_out: conv(shape.channels, shape.smooth_width, 1, rng),
            shape,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc.conv.w".into(), &self.enc_conv.w),
            ("enc.conv.b".into(), &self.enc_conv.b),
            ("enc.fc.w".into(), &self.enc_fc.w),
            ("enc.fc.b".into(), &self.enc_fc.b),
            ("enc.out.w".into(), &self.enc_out.w),
            ("enc.out.b".into(), &self.enc_out.b),
            ("dec.in.w".into(), &self.dec_in.w),
            ("dec.in.b".into(), &self.dec_in.b),
        ];
        for (i, (c1, c2)) in self.dec_res.iter().enumerate() {
            out.push((format!("dec.res{i}.c1.w"), &c1.w));
            out.push((format!("dec.res{i}.c1.b"), &c1.b));
            out.push((format!("dec.res{i}.c2.w"), &c2.w));
            out.push((format!("dec.res{i}.c2.b"), &c2.b));
        }
        out.push(("dec.up.w".into(), &self.dec_up.w));
        out.push(("dec.up.b".into(), &self.dec_up.b));
        out.push(("dec.smooth.w".into(), &self.dec_smooth.w));
        out.push(("dec.smooth.b".into(), &self.dec_smooth.b));
        out.push(("dec.out.w".into(), &self.dec_out.w));
        out.push(("dec.out.b".into(), &self.dec_out.b));
        out
    }

    /// Overwrite parameters from a flat list in [`Backbone::named_params`] order.
    pub fn set_params(&mut self, values: &[Tensor]) {
        let mut it = values.iter().cloned();
        let mut next = || it.next().expect("parameter count matches");
        self.enc_conv.w = next();
        self.enc_conv.b = next();
        self.enc_fc.w = next();
        self.enc_fc.b = next();
        self.enc_out.w = next();
        self.enc_out.b = next();
        self.dec_in.w = next();
        self.dec_in.b = next();
        for i in 0..self.dec_res.len() {
            self.dec_res[i].0.w = next();
            self.dec_res[i].0.b = next();
            self.dec_res[i].1.w = next();
            self.dec_res[i].1.b = next();
        }
        self.dec_up.w = next();
        self.dec_up.b = next();
        self.dec_smooth.w = next();
        self.dec_smooth.b = next();
        self.dec_out.w = next();
        self.dec_out.b = next();
    }

    pub fn leaf_params(&self, tape: &mut Tape<f32>) -> BackboneVars {
        let mut ordered = Vec::new();
        let pair = |tape: &mut Tape<f32>, ordered: &mut Vec<Var>, p: &ConvParam| {
            let w = tape.leaf(p.w.clone());
            let b = tape.leaf(p.b.clone());
            ordered.push(w);
            ordered.push(b);
            (w, b)
        };
        let enc_conv = pair(tape, &mut ordered, &self.enc_conv);
        let enc_fc = pair(tape, &mut ordered, &self.enc_fc);
        let enc_out = pair(tape, &mut ordered, &self.enc_out);
        let dec_in = pair(tape, &mut ordered, &self.dec_in);
        let dec_res = self
            .dec_res
            .iter()
            .map(|(c1, c2)| {
                let a = pair(tape, &mut ordered, c1);
                let b = pair(tape, &mut ordered, c2);
                [a.0, a.1, b.0, b.1]
            })
            .collect();
        let dec_up = pair(tape, &mut ordered, &self.dec_up);
        let dec_smooth = pair(tape, &mut ordered, &self.dec_smooth);
        let dec_out = pair(tape, &mut ordered, &self.dec_out);
        BackboneVars {
            enc_conv,
            enc_fc,
            enc_out,
            dec_in,
            dec_res,
            dec_up,
            dec_smooth,
            dec_out,
            ordered,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.shape.channels {
            return Err(Error::shape("autoencoder input", shape, &[self.shape.channels]));
        }
        patch_grid(shape[1], shape[2], self.shape.patch_size)?;
        Ok(())
    }

    /// Patch-local latent (latent, H/P, W/P), bounded to (-1, 1) so the
    /// straight-through binarizer never clips its gradient.
    pub fn encode_on(&self, tape: &mut Tape<f32>, vars: &BackboneVars, input: Var) -> Result<Var> {
        self.check_input(&tape.value(input).shape().to_vec())?;
        let p = self.shape.patch_size;
        let x = tape.conv2d(input, vars.enc_conv.0, Some(vars.enc_conv.1), p, 0)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, vars.enc_fc.0, Some(vars.enc_fc.1), 1, 0)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, vars.enc_out.0, Some(vars.enc_out.1), 1, 0)?;
        Ok(tape.tanh(x))
    }

    /// Probability map (C, H, W) from a (latent, h, w) grid.
    pub fn decode_on(&self, tape: &mut Tape<f32>, vars: &BackboneVars, latent: Var) -> Result<Var> {
        let got = tape.value(latent).shape().to_vec();
        if got.len() != 3 || got[0] != self.shape.latent {
            return Err(Error::shape("autoencoder latent", &got, &[self.shape.latent]));
        }
        let p = self.shape.patch_size;
        let mut x = tape.conv2d(latent, vars.dec_in.0, Some(vars.dec_in.1), 1, 0)?;
        x = tape.relu(x);
        for block in &vars.dec_res {
            let y = tape.conv2d(x, block[0], Some(block[1]), 1, 1)?;
            let y = tape.relu(y);
            let y = tape.conv2d(y, block[2], Some(block[3]), 1, 1)?;
            x = tape.add(x, y)?;
        }
        x = tape.relu(x);
        x = tape.conv_transpose2d(x, vars.dec_up.0, Some(vars.dec_up.1), p)?;
        x = tape.relu(x);
        x = tape.conv2d(x, vars.dec_smooth.0, Some(vars.dec_smooth.1), 1, 1)?;
        x = tape.relu(x);
        x = tape.conv2d(x, vars.dec_out.0, Some(vars.dec_out.1), 1, 0)?;
        Ok(tape.sigmoid(x))
    }

    /// Plain (no-gradient) encode.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.leaf_params(&mut tape);
        let x = tape.leaf(input.clone());
        let out = self.encode_on(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    /// Plain (no-gradient) decode.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.leaf_params(&mut tape);
        let x = tape.leaf(latent.clone());
        let out = self.decode_on(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}
