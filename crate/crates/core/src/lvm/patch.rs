//! Patch-transformer autoencoder.
//!
//! The encoder embeds non-overlapping patches, adds learned position
//! embeddings, runs a transformer encoder stack, then a transformer decoder
//! stack driven by one learned query token; that token's output state is the
//! latent vector. The decoder maps the latent linearly back to the frame, so
//! decoding depends on the latent alone.

use lfs_nn::layers::{DecoderLayer, EncoderLayer, Linear};
use lfs_nn::{fan_in_uniform, Graph, ParamId, ParamStore, Scalar, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct PatchLvm<S> {
    pub store: ParamStore<S>,
    pub k: usize,
    pub c: usize,
    pub patch: usize,
    embed: Linear,
    positions: ParamId,
    query: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
}

impl<S: Scalar> PatchLvm<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        c: usize,
        patch: usize,
        layers: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new(super::LVM_GROUP);
        let tokens = (k / patch) * (k / patch);
        let embed = Linear::new(&mut store, "embed", patch * patch, c, true, rng);
        let positions = store.add("positions", fan_in_uniform(rng, &[tokens, c], c));
        let query = store.add("query", fan_in_uniform(rng, &[1, c], c));
        let encoder = (0..layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc{i}"), c, heads, ff_hidden, rng))
            .collect();
        let decoder = (0..layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("dec{i}"), c, heads, ff_hidden, rng))
            .collect();
        let out = Linear::new(&mut store, "out", c, k * k, true, rng);
        Self {
            store,
            k,
            c,
            patch,
            embed,
            positions,
            query,
            encoder,
            decoder,
            out,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.k / self.patch) * (self.k / self.patch)
    }

    /// `[b, k²] → [b, c]`
    pub fn encode_var(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let b = g.shape(x)[0];
        let (p, q) = (self.patch, self.k / self.patch);
        let x = g.reshape(x, &[b, q, p, q, p]);
        let x = g.permute(x, &[0, 1, 3, 2, 4]);
        let x = g.reshape(x, &[b, q * q, p * p]);
        let h = self.embed.forward(g, store, x);
        let pos = g.param(store, self.positions);
        let mut h = g.add_trailing(h, pos);
        for layer in &self.encoder {
            h = layer.forward(g, store, h);
        }
        let query = g.param(store, self.query);
        let mut z = g.broadcast_batch(query, b);
        for layer in &self.decoder {
            z = layer.forward(g, store, z, h);
        }
        g.reshape(z, &[b, self.c])
    }

    /// `[b, c] → [b, k²]`
    pub fn decode_var(&self, g: &mut Graph<S>, store: &ParamStore<S>, l: Var) -> Var {
        self.out.forward(g, store, l)
    }
}
