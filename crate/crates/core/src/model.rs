//! The full captioner: patch backbone, word embedding, encoder stack, mesh
//! decoder and output head, wired per variant.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{TokenSequence, BOS, EOS, PAD};
use crate::decoder::{decoder_forward, DecoderBlock};
use crate::encoder::{encoder_forward, AttentionKind, EncoderBlock, EncoderSpec, FeatureLevels};
use crate::error::{Error, Result};
use crate::layers::{Affine, LayerNorm};
use crate::optim::AdamState;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::M5];

    pub fn attention(self) -> AttentionKind {
        match self {
            Variant::M1 | Variant::M2 => AttentionKind::Traditional,
            Variant::M3 => AttentionKind::MemoryAugmented,
            Variant::M4 | Variant::M5 => AttentionKind::StaticExpansion,
        }
    }

    pub fn mesh(self) -> bool {
        matches!(self, Variant::M2 | Variant::M3 | Variant::M5)
    }

    pub fn memory(self) -> bool {
        self == Variant::M3
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::M1 => "traditional attention, plain decoder",
            Variant::M2 => "traditional attention, mesh decoder",
            Variant::M3 => "memory-augmented attention, mesh decoder",
            Variant::M4 => "static expansion, plain decoder",
            Variant::M5 => "static expansion, mesh decoder",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::M4 => "m4",
            Variant::M5 => "m5",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            "m4" => Ok(Variant::M4),
            "m5" => Ok(Variant::M5),
            _ => Err(Error::config("variant", format!("`{s}` is not one of m1..m5"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Memory slots per encoder block; only read by M3.
    pub n_mem: usize,
    /// Expanded sequence length; only read by M4 and M5.
    pub expansion_len: usize,
    pub vocab_size: usize,
    /// Caption length `L`, BOS and EOS included.
    pub max_len: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale preset sized for the synthetic scenes.
    pub fn toy(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            d_model: 64,
            heads: 8,
            enc_blocks: 4,
            dec_blocks: 4,
            n_mem: 8,
            expansion_len: 32,
            vocab_size,
            max_len: 16,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            d_ff: 256,
            seed: 0,
        }
    }

    /// Smallest configuration exercising every mechanism; sized for
    /// finite-difference checks.
    pub fn micro(variant: Variant) -> Self {
        ModelConfig {
            variant,
            d_model: 8,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            n_mem: 2,
            expansion_len: 8,
            vocab_size: 11,
            max_len: 4,
            patch_size: 2,
            image_size: 4,
            channels: 3,
            d_ff: 16,
            seed: 0,
        }
    }

    /// Widths and lengths of the published configuration; far too slow for
    /// this engine but representable.
    pub fn paper(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 768,
            max_len: 53,
            image_size: 256,
            patch_size: 32,
            d_ff: 3072,
            n_mem: 40,
            expansion_len: 128,
            ..Self::toy(variant, vocab_size)
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("d_ff", self.d_ff),
            ("dec_blocks", self.dec_blocks),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("image_size {} is not divisible by {}", self.image_size, self.patch_size),
            ));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len", "must be at least 3"));
        }
        if self.vocab_size <= EOS + 1 {
            return Err(Error::config("vocab_size", "must exceed the reserved tokens"));
        }
        if self.variant.memory() && self.n_mem == 0 {
            return Err(Error::config("n_mem", "m3 needs at least one memory slot"));
        }
        if self.variant.attention() == AttentionKind::StaticExpansion && self.expansion_len == 0 {
            return Err(Error::config("expansion_len", "must be at least 1"));
        }
        Ok(())
    }

    fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            kind: self.variant.attention(),
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            n_mem: self.n_mem,
            expansion_len: self.expansion_len,
        }
    }
}

pub const HEAD_INIT_STD: f64 = 0.02;

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d_model]);
    let data = t.data_mut();
    for p in 0..len {
        for i in 0..d_model {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = p as f64 / rate;
            data[p * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Splits `[H × W × C]` into non-overlapping `p × p` patches, one row per
/// patch in reading order, pixels flattened as `(y, x, c)`.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::Input(format!("image must be H×W×C, got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Input(format!("image {h}×{w} does not tile into {patch}-pixel patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let d = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let start = ((py * patch + y) * w + px * patch) * c;
                out.extend_from_slice(&d[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, patch * patch * c], out)
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub patch_embed: Affine,
    pub token_embed: ParamId,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Affine,
    patch_positions: Tensor,
    word_positions: Tensor,
}

impl Captioner {
    /// Registers every parameter in a fixed order from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let patch_embed = Affine::register(&mut store, "backbone.patch_embed", config.patch_dim(), d, &mut rng)?;
        let token_embed = store.register(
            "embed.tokens",
            Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng),
        )?;
        let spec = config.encoder_spec();
        let encoder = (0..config.enc_blocks)
            .map(|i| EncoderBlock::register(&mut store, &format!("enc{i}"), &spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.dec_blocks)
            .map(|i| {
                DecoderBlock::register(
                    &mut store,
                    &format!("dec{i}"),
                    d,
                    config.heads,
                    config.d_ff,
                    config.variant.mesh(),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::register(&mut store, "head.norm", d)?;
        // Small output weights keep the untrained prediction close to uniform.
        let head = Affine::register_with_std(&mut store, "head.out", d, config.vocab_size, HEAD_INIT_STD, &mut rng)?;
        Ok(Captioner {
            patch_positions: sinusoidal_table(config.n_patches(), d),
            word_positions: sinusoidal_table(config.max_len, d),
            config,
            store,
            patch_embed,
            token_embed,
            encoder,
            decoder,
            final_norm,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if image.shape() != want {
            return Err(Error::Input(format!(
                "image shape {:?} does not match the configured {:?}",
                image.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Backbone output `E_1` followed by every encoder block output.
    pub fn encode(&self, g: &mut Graph, image: &Tensor) -> Result<FeatureLevels> {
        self.check_image(image)?;
        let patches = g.constant(extract_patches(image, self.config.patch_size)?);
        let e1 = self.patch_embed.forward(g, &self.store, patches)?;
        let e1 = g.add_const(e1, &self.patch_positions)?;
        encoder_forward(g, &self.store, e1, &self.encoder)
    }

    /// Next-token logits `[ids.len() × vocab_size]` given encoded levels.
    pub fn decode_logits(&self, g: &mut Graph, levels: &FeatureLevels, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "caption input has {} tokens, expected 1 to {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let table = g.param(&self.store, self.token_embed);
        let emb = g.gather_rows(table, ids)?;
        let pos = Tensor::new(
            vec![ids.len(), self.config.d_model],
            self.word_positions.data()[..ids.len() * self.config.d_model].to_vec(),
        )?;
        let d1 = g.add_const(emb, &pos)?;
        let out = decoder_forward(g, &self.store, d1, levels, &self.decoder)?;
        let out = self.final_norm.forward(g, &self.store, out)?;
        self.head.forward(g, &self.store, out)
    }

    /// Teacher-forced logits for caption input `ids`.
    pub fn forward(&self, g: &mut Graph, image: &Tensor, ids: &[usize]) -> Result<Var> {
        let levels = self.encode(g, image)?;
        self.decode_logits(g, &levels, ids)
    }

    /// Forward pass without gradient tracking.
    pub fn logits(&self, image: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, image, ids)?;
        Ok(g.value(out).clone())
    }

    /// Mean next-token cross-entropy over the non-PAD targets of `seq`.
    pub fn loss(&self, g: &mut Graph, image: &Tensor, seq: &TokenSequence) -> Result<Var> {
        if seq.ids.len() != self.config.max_len {
            return Err(Error::Input(format!(
                "token sequence has length {}, expected {}",
                seq.ids.len(),
                self.config.max_len
            )));
        }
        let logits = self.forward(g, image, seq.input())?;
        g.cross_entropy(logits, seq.target(), PAD)
    }

    /// Argmax decoding from BOS until EOS or `max_len` ids (BOS included).
    /// PAD and BOS are never emitted.
    pub fn greedy_decode(&self, image: &Tensor, max_len: usize) -> Result<TokenSequence> {
        let max_len = max_len.min(self.config.max_len);
        if max_len < 2 {
            return Err(Error::Input("greedy decoding needs max_len of at least 2".into()));
        }
        let mut g = Graph::inference();
        let levels = self.encode(&mut g, image)?;
        let mut ids = vec![BOS];
        while ids.len() < max_len {
            let logits = self.decode_logits(&mut g, &levels, &ids)?;
            let last = g.value(logits).row(ids.len() - 1);
            let next = last
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != PAD && i != BOS)
                .fold((EOS, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        let len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, len })
    }
}

/// One teacher-forcing example.
#[derive(Clone, Debug)]
pub struct Example {
    pub pixels: Tensor,
    pub tokens: TokenSequence,
}

fn sample_grads(model: &Captioner, ex: &Example) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, &ex.pixels, &ex.tokens)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, g.param_grads(model.store.len())))
}

/// Computes per-example gradients on up to `workers` threads and sums them
/// in example order, so the result does not depend on the worker count.
pub fn batch_gradients(
    model: &Captioner,
    batch: &[Example],
    workers: usize,
) -> Result<Vec<(f64, Vec<Option<Vec<f64>>>)>> {
    let workers = workers.clamp(1, batch.len().max(1));
    if workers == 1 {
        return batch.iter().map(|ex| sample_grads(model, ex)).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|ex| sample_grads(model, ex)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("gradient worker panicked")?);
        }
        Ok(out)
    })
}

/// One Adam update on the mean loss of `batch`; returns that mean loss.
pub fn train_step(
    model: &mut Captioner,
    batch: &[Example],
    adam: &mut AdamState,
    lr: f64,
    workers: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    let per_sample = batch_gradients(model, batch, workers)?;
    let scale = 1.0 / batch.len() as f64;
    model.store.zero_grad();
    let mut total = 0.0;
    for (loss, mut grads) in per_sample {
        total += loss;
        for v in grads.iter_mut().flatten() {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        model.store.accumulate_grads(&grads);
    }
    adam.step(&mut model.store, lr)?;
    Ok(total * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn micro(variant: Variant) -> ModelConfig {
        ModelConfig { seed: 1, ..ModelConfig::micro(variant) }
    }

    fn image(seed: u64, cfg: &ModelConfig) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[cfg.image_size, cfg.image_size, cfg.channels], 1.0, &mut r);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs().min(1.0));
        t
    }

    #[test]
    fn variant_matrix() {
        use AttentionKind::*;
        let rows = [
            (Variant::M1, Traditional, false, false),
            (Variant::M2, Traditional, true, false),
            (Variant::M3, MemoryAugmented, true, true),
            (Variant::M4, StaticExpansion, false, false),
            (Variant::M5, StaticExpansion, true, false),
        ];
        for (v, a, mesh, mem) in rows {
            assert_eq!((v.attention(), v.mesh(), v.memory()), (a, mesh, mem), "{v}");
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("m6".parse::<Variant>().is_err());
    }

    #[test]
    fn m2_adds_only_gates() {
        let m1 = Captioner::new(ModelConfig::toy(Variant::M1, 30)).unwrap();
        let m2 = Captioner::new(ModelConfig::toy(Variant::M2, 30)).unwrap();
        let d = 64;
        assert_eq!(m2.param_count(), m1.param_count() + 4 * (2 * d * d + d));
    }

    #[test]
    fn parameter_names_follow_variant() {
        for v in Variant::ALL {
            let m = Captioner::new(micro(v)).unwrap();
            let names: Vec<&str> = m.store.names().collect();
            let has = |s: &str| names.iter().any(|n| n.contains(s));
            assert_eq!(has("memory_k"), v.memory(), "{v}");
            assert_eq!(has("memory_v"), v.memory(), "{v}");
            assert_eq!(has("expansion"), v.attention() == AttentionKind::StaticExpansion, "{v}");
            assert_eq!(has("gate"), v.mesh(), "{v}");
            assert_eq!(has("enc0.attn.w_q"), v.attention() != AttentionKind::StaticExpansion, "{v}");
        }
    }

    #[test]
    fn patches_in_reading_order() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Tensor::new(vec![4, 4, 1], data).unwrap();
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(extract_patches(&img, 3).is_err());
    }

    #[test]
    fn sinusoid_values() {
        let t = sinusoidal_table(3, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(2, 2) - (2.0f64 / 100.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = micro(Variant::M5);
        let img = image(3, &cfg);
        let a = Captioner::new(cfg.clone()).unwrap().logits(&img, &[BOS, 5, 6, 7]).unwrap();
        let b = Captioner::new(cfg.clone()).unwrap().logits(&img, &[BOS, 5, 6, 7]).unwrap();
        assert_eq!(a.shape(), &[4, 11]);
        assert_eq!(a, b);
    }

    #[test]
    fn image_shape_mismatch_is_error() {
        let m = Captioner::new(micro(Variant::M1)).unwrap();
        assert!(m.logits(&Tensor::zeros(&[8, 8, 3]), &[BOS]).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = micro(Variant::M1);
        c.heads = 3;
        assert!(matches!(Captioner::new(c), Err(Error::Config { field, .. }) if field == "heads"));
        let mut c = micro(Variant::M1);
        c.patch_size = 3;
        assert!(Captioner::new(c).is_err());
        let mut c = micro(Variant::M3);
        c.n_mem = 0;
        assert!(Captioner::new(c).is_err());
    }

    #[test]
    fn empty_batch_is_error() {
        let mut m = Captioner::new(micro(Variant::M1)).unwrap();
        let mut adam = AdamState::new(&m.store, AdamConfig::default());
        assert!(train_step(&mut m, &[], &mut adam, 1e-3, 1).is_err());
    }

    #[test]
    fn worker_count_does_not_change_update() {
        let cfg = micro(Variant::M2);
        let batch: Vec<Example> = (0..3)
            .map(|i| Example {
                pixels: image(i, &cfg),
                tokens: TokenSequence { ids: vec![BOS, 4 + i as usize, EOS, PAD], len: 3 },
            })
            .collect();
        let run = |workers| {
            let mut m = Captioner::new(cfg.clone()).unwrap();
            let mut adam = AdamState::new(&m.store, AdamConfig::default());
            let loss = train_step(&mut m, &batch, &mut adam, 1e-2, workers).unwrap();
            (loss, m.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect::<Vec<_>>())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn greedy_decode_contract() {
        let cfg = micro(Variant::M4);
        let m = Captioner::new(cfg.clone()).unwrap();
        let img = image(9, &cfg);
        let a = m.greedy_decode(&img, 4).unwrap();
        assert_eq!(a, m.greedy_decode(&img, 4).unwrap());
        assert_eq!(a.ids.len(), 4);
        assert_eq!(a.ids[0], BOS);
        let body = &a.ids[1..a.len];
        let eos = body.iter().position(|&i| i == EOS).unwrap_or(body.len());
        assert!(body[..eos].iter().all(|&i| i != PAD && i != BOS));
        assert!(a.ids[a.len..].iter().all(|&i| i == PAD));
    }
}
