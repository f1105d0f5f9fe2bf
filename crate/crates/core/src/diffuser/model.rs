use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// Sinusoidal embedding of integer iterations, `[n, dim]`.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
    }
    Tensor::new(vec![ts.len(), 2 * half], data).expect("time embedding shape")
}

/// Gates are stored divided by this so Adam moves them as fast as a
/// typical activation.
const GATE_SCALE: f32 = 20.0;

/// Noise predictor: MLP over `[z ‖ time ‖ condition]` whose two hidden layers
/// are modulated by a per-layer scale and shift computed from
/// `[time ‖ condition]`.
///
/// The output is `a_t · z + g_t · mlp(..)` with `a_t`, `g_t` learned per
/// iteration (`den.gates`, initialized to 0 and 1). Predicting noise means
/// passing most of `z` through, which a hidden layer narrower than the
/// image cannot do on its own.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub pixels: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    layers: [Linear; 3],
    scales: [Linear; 2],
    shifts: [Linear; 2],
    gates: ParamId,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        pixels: usize,
        time_dim: usize,
        cond_dim: usize,
        hidden: usize,
        steps: usize,
        rng: &mut R,
    ) -> Self {
        let input = pixels + time_dim + cond_dim;
        let film = time_dim + cond_dim;
        let gain = 2f32.sqrt();
        let layers = [
            Linear::new(store, "den.l1", input, hidden, true, gain, rng),
            Linear::new(store, "den.l2", hidden, hidden, true, gain, rng),
            Linear::new(store, "den.out", hidden, pixels, true, 0.01, rng),
        ];
        let scales = [
            Linear::new(store, "den.scale1", film, hidden, true, 0.1, rng),
            Linear::new(store, "den.scale2", film, hidden, true, 0.1, rng),
        ];
        let shifts = [
            Linear::new(store, "den.shift1", film, hidden, true, 0.1, rng),
            Linear::new(store, "den.shift2", film, hidden, true, 0.1, rng),
        ];
        let gates = (0..steps).flat_map(|_| [0.0, 1.0 / GATE_SCALE]).collect();
        let gates = store.add("den.gates", Tensor::new(vec![steps, 2], gates).expect("gate shape"));
        Self {
            pixels,
            time_dim,
            cond_dim,
            hidden,
            steps,
            layers,
            scales,
            shifts,
            gates,
        }
    }

    /// Rebinds to parameters already in `store`; the time-embedding width is
    /// the only dimension not recoverable from the shapes.
    pub fn bind(store: &ParamStore, time_dim: usize) -> Result<Self> {
        let get = |n: &str| {
            Linear::bind(store, n).ok_or_else(|| Error::Format {
                what: "diffuser checkpoint",
                reason: format!("missing layer {n}"),
            })
        };
        let layers = [get("den.l1")?, get("den.l2")?, get("den.out")?];
        let scales = [get("den.scale1")?, get("den.scale2")?];
        let shifts = [get("den.shift1")?, get("den.shift2")?];
        let gates = store.id("den.gates").ok_or_else(|| Error::Format {
            what: "diffuser checkpoint",
            reason: "missing den.gates".into(),
        })?;
        let pixels = layers[2].d_out;
        let film = scales[0].d_in;
        let gate_shape = store.value(gates).shape();
        if film <= time_dim || layers[0].d_in != pixels + film || gate_shape.len() != 2 || gate_shape[1] != 2 {
            return Err(Error::Format {
                what: "diffuser checkpoint",
                reason: "layer widths are inconsistent".into(),
            });
        }
        Ok(Self {
            pixels,
            time_dim,
            cond_dim: film - time_dim,
            hidden: layers[0].d_out,
            steps: gate_shape[0],
            layers,
            scales,
            shifts,
            gates,
        })
    }

    /// Predicted noise for latents `z` at iterations `ts` under conditions `c`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Tensor,
        ts: &[usize],
        c: Tensor,
    ) -> Result<Var> {
        let n = z.rows();
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.steps) {
            return Err(Error::Domain(format!("iteration {t} outside 1..={}", self.steps)));
        }
        if ts.len() != n || c.rows() != n || c.cols() != self.cond_dim || z.cols() != self.pixels {
            return Err(Error::dim(
                "denoiser input",
                format!("[{n}, {}] with {n} times and [{n}, {}] conditions", self.pixels, self.cond_dim),
                format!("{:?} / {} / {:?}", z.shape(), ts.len(), c.shape()),
            ));
        }
        let z = tape.input(z);
        let temb = tape.input(time_embedding(ts, self.time_dim));
        let c = tape.input(c);
        let film = tape.concat(&[temb, c])?;
        let x = tape.concat(&[z, temb, c])?;
        let mut h = x;
        for i in 0..2 {
            h = self.layers[i].forward(tape, store, h)?;
            let scale = self.scales[i].forward(tape, store, film)?;
            let shift = self.shifts[i].forward(tape, store, film)?;
            let modulated = tape.mul(h, scale)?;
            h = tape.add(h, modulated)?;
            h = tape.add(h, shift)?;
            h = tape.silu(h);
        }
        let out = self.layers[2].forward(tape, store, h)?;
        let table = tape.param(store, self.gates);
        let table = tape.scale(table, GATE_SCALE);
        let gates = tape.embed_mean(table, ts.iter().map(|&t| vec![t - 1]).collect())?;
        let ones = tape.input(Tensor::full(&[1, self.pixels], 1.0));
        let pass = tape.slice_cols(gates, 0, 1)?;
        let pass = tape.matmul(pass, ones)?;
        let gain = tape.slice_cols(gates, 1, 1)?;
        let gain = tape.matmul(gain, ones)?;
        let passed = tape.mul(pass, z)?;
        let scaled = tape.mul(gain, out)?;
        tape.add(passed, scaled)
    }
}
