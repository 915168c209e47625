//! Strided-convolution autoencoder.

use lfs_nn::layers::{Conv2d, ConvTranspose2d, Linear};
use lfs_nn::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

/// Encoder: four stride-2 convolutions then a dense map to `c`.
/// Decoder: a dense map to the coarse code then four stride-2 transposed
/// convolutions ending in one channel. Leaky rectifiers on every hidden
/// layer, identity on both outputs.
#[derive(Clone, Debug)]
pub struct ConvLvm<S> {
    pub store: ParamStore<S>,
    pub k: usize,
    pub c: usize,
    pub slope: f64,
    enc: Vec<Conv2d>,
    enc_out: Linear,
    dec_in: Linear,
    dec: Vec<ConvTranspose2d>,
    code_channels: usize,
}

pub const STRIDED_LAYERS: usize = 4;

impl<S: Scalar> ConvLvm<S> {
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        c: usize,
        enc_channels: &[usize],
        dec_channels: &[usize],
        slope: f64,
        rng: &mut R,
    ) -> Self {
        assert_eq!(enc_channels.len(), STRIDED_LAYERS);
        assert_eq!(dec_channels.len(), STRIDED_LAYERS);
        let mut store = ParamStore::new(super::LVM_GROUP);
        let side = k >> STRIDED_LAYERS;
        let mut enc = Vec::new();
        let mut cin = 1;
        for (i, &cout) in enc_channels.iter().enumerate() {
            enc.push(Conv2d::new(
                &mut store,
                &format!("enc.conv{i}"),
                cin,
                cout,
                3,
                2,
                1,
                rng,
            ));
            cin = cout;
        }
        let code_channels = cin;
        let flat = code_channels * side * side;
        let enc_out = Linear::new(&mut store, "enc.dense", flat, c, true, rng);
        let dec_in = Linear::new(&mut store, "dec.dense", c, flat, true, rng);
        let mut dec = Vec::new();
        let mut cin = code_channels;
        for (i, &cout) in dec_channels.iter().enumerate() {
            dec.push(ConvTranspose2d::new(
                &mut store,
                &format!("dec.tconv{i}"),
                cin,
                cout,
                3,
                2,
                1,
                1,
                rng,
            ));
            cin = cout;
        }
        Self {
            store,
            k,
            c,
            slope,
            enc,
            enc_out,
            dec_in,
            dec,
            code_channels,
        }
    }

    /// Spatial side length after each encoder layer.
    pub fn encoder_sides(&self) -> Vec<usize> {
        (0..=STRIDED_LAYERS).map(|i| self.k >> i).collect()
    }

    /// `[b, k²] → [b, c]`
    pub fn encode_var(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let b = g.shape(x)[0];
        let slope = S::lit(self.slope);
        let mut h = g.reshape(x, &[b, 1, self.k, self.k]);
        for conv in &self.enc {
            h = conv.forward(g, store, h);
            h = g.leaky_relu(h, slope);
        }
        let side = self.k >> STRIDED_LAYERS;
        let h = g.reshape(h, &[b, self.code_channels * side * side]);
        self.enc_out.forward(g, store, h)
    }

    /// `[b, c] → [b, k²]`
    pub fn decode_var(&self, g: &mut Graph<S>, store: &ParamStore<S>, l: Var) -> Var {
        let b = g.shape(l)[0];
        let slope = S::lit(self.slope);
        let side = self.k >> STRIDED_LAYERS;
        let h = self.dec_in.forward(g, store, l);
        let h = g.leaky_relu(h, slope);
        let mut h = g.reshape(h, &[b, self.code_channels, side, side]);
        let last = self.dec.len() - 1;
        for (i, t) in self.dec.iter().enumerate() {
            h = t.forward(g, store, h);
            if i < last {
                h = g.leaky_relu(h, slope);
            }
        }
        g.reshape(h, &[b, self.k * self.k])
    }
}
