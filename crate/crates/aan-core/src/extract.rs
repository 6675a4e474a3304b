//! Per-domain feature extraction. Every payload is mapped into a common
//! F-width space by its domain's encoder, then tagged with a one-hot domain
//! vector, so cells only ever see F+B-wide inputs. Batched encoding groups
//! nodes by domain so each domain's encoder runs once per batch.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};
use crate::tree::{NodeId, Payload};

/// Raw input description for one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawSpec {
    Numeric { width: usize },
    Tokens { vocab: usize },
}

/// Encoder architecture choice, fixed per domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorKind {
    /// Raw width must already equal F.
    Identity,
    Affine,
    Mlp { hidden: usize },
    /// Mean of learned token embeddings; requires a token spec.
    TokenMean,
}

#[derive(Debug, Clone)]
enum EncoderParams {
    Identity,
    Affine { w: Tensor, b: Tensor },
    Mlp { w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor },
    TokenMean { table: Tensor },
}

/// Decoder back from F-space. Token domains decode into embedding space
/// (an F-to-F map); numeric domains decode to the raw width.
#[derive(Debug, Clone)]
enum DecoderParams {
    Identity,
    Affine { w: Tensor, b: Tensor },
    Mlp { w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor },
}

#[derive(Debug)]
pub struct DomainEntry {
    pub name: String,
    pub spec: RawSpec,
    encoder: EncoderParams,
    decoder: DecoderParams,
    /// Encoder invocations; one grouped call counts once however many rows.
    pub calls: Cell<usize>,
}

/// Immutable per-domain encoder/decoder table. Domain ids index into it.
#[derive(Debug)]
pub struct ExtractorRegistry {
    f: usize,
    entries: Vec<DomainEntry>,
}

fn init(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

impl ExtractorRegistry {
    pub fn new(
        f: usize,
        domains: Vec<(String, RawSpec, ExtractorKind)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Registry("no domains declared".into()));
        }
        let mut entries = Vec::new();
        for (name, spec, kind) in domains {
            let (encoder, decoder) = match (&spec, &kind) {
                (RawSpec::Numeric { width }, ExtractorKind::Identity) => {
                    if *width != f {
                        return Err(Error::Registry(format!(
                            "domain {name}: identity encoder needs raw width {f}, got {width}"
                        )));
                    }
                    (EncoderParams::Identity, DecoderParams::Identity)
                }
                (RawSpec::Numeric { width }, ExtractorKind::Affine) => (
                    EncoderParams::Affine {
                        w: init(vec![f, *width], *width, rng),
                        b: init(vec![f], *width, rng),
                    },
                    DecoderParams::Affine {
                        w: init(vec![*width, f], f, rng),
                        b: init(vec![*width], f, rng),
                    },
                ),
                (RawSpec::Numeric { width }, ExtractorKind::Mlp { hidden }) => (
                    EncoderParams::Mlp {
                        w1: init(vec![*hidden, *width], *width, rng),
                        b1: init(vec![*hidden], *width, rng),
                        w2: init(vec![f, *hidden], *hidden, rng),
                        b2: init(vec![f], *hidden, rng),
                    },
                    DecoderParams::Mlp {
                        w1: init(vec![*hidden, f], f, rng),
                        b1: init(vec![*hidden], f, rng),
                        w2: init(vec![*width, *hidden], *hidden, rng),
                        b2: init(vec![*width], *hidden, rng),
                    },
                ),
                (RawSpec::Tokens { vocab }, ExtractorKind::TokenMean) => (
                    EncoderParams::TokenMean {
                        table: init(vec![*vocab, f], f, rng),
                    },
                    // reconstruction target is the mean embedding, so the
                    // decoder stays in F-space
                    DecoderParams::Affine {
                        w: init(vec![f, f], f, rng),
                        b: init(vec![f], f, rng),
                    },
                ),
                (RawSpec::Tokens { .. }, k) => {
                    return Err(Error::Registry(format!(
                        "domain {name}: token inputs need the token-mean encoder, got {k:?}"
                    )));
                }
                (RawSpec::Numeric { .. }, ExtractorKind::TokenMean) => {
                    return Err(Error::Registry(format!(
                        "domain {name}: token-mean encoder over numeric input"
                    )));
                }
            };
            entries.push(DomainEntry {
                name,
                spec,
                encoder,
                decoder,
                calls: Cell::new(0),
            });
        }
        Ok(ExtractorRegistry { f, entries })
    }

    pub fn f(&self) -> usize {
        self.f
    }

    /// Domain count; also the width of the one-hot domain tag.
    pub fn b(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, domain: usize) -> Result<&DomainEntry> {
        self.entries
            .get(domain)
            .ok_or_else(|| Error::Registry(format!("unknown domain {domain}")))
    }

    pub fn domain_by_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn reset_call_counts(&self) {
        for e in &self.entries {
            e.calls.set(0);
        }
    }

    pub fn call_count(&self, domain: usize) -> usize {
        self.entries[domain].calls.get()
    }

    fn check_payload(&self, domain: usize, p: &Payload) -> Result<()> {
        let entry = self.entry(domain)?;
        match (&entry.spec, p) {
            (RawSpec::Numeric { width }, Payload::Numeric(v)) => {
                if v.len() != *width {
                    return Err(Error::Input(format!(
                        "domain {}: payload width {} vs declared {width}",
                        entry.name,
                        v.len()
                    )));
                }
            }
            (RawSpec::Tokens { vocab }, Payload::Tokens(t)) => {
                if t.is_empty() {
                    return Err(Error::Input(format!(
                        "domain {}: empty token payload",
                        entry.name
                    )));
                }
                if let Some(&bad) = t.iter().find(|&&x| x >= *vocab) {
                    return Err(Error::Input(format!(
                        "domain {}: token {bad} outside vocab {vocab}",
                        entry.name
                    )));
                }
            }
            (spec, got) => {
                return Err(Error::Input(format!(
                    "domain {}: payload kind does not match spec {spec:?} ({got:?})",
                    entry.name
                )));
            }
        }
        Ok(())
    }

    /// Bind all encoder/decoder parameters onto `tape` for one pass.
    pub fn bind(&self, tape: &Tape) -> BoundRegistry<'_> {
        let mut params = Vec::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for (d, e) in self.entries.iter().enumerate() {
            let enc = match &e.encoder {
                EncoderParams::Identity => BoundEncoder::Identity,
                EncoderParams::Affine { w, b } => {
                    let (wv, bv) = (tape.leaf(w), tape.leaf(b));
                    params.push((format!("extract.{d}.w"), wv));
                    params.push((format!("extract.{d}.b"), bv));
                    BoundEncoder::Affine { w: wv, b: bv }
                }
                EncoderParams::Mlp { w1, b1, w2, b2 } => {
                    let (v1, c1, v2, c2) =
                        (tape.leaf(w1), tape.leaf(b1), tape.leaf(w2), tape.leaf(b2));
                    params.push((format!("extract.{d}.w1"), v1));
                    params.push((format!("extract.{d}.b1"), c1));
                    params.push((format!("extract.{d}.w2"), v2));
                    params.push((format!("extract.{d}.b2"), c2));
                    BoundEncoder::Mlp { w1: v1, b1: c1, w2: v2, b2: c2 }
                }
                EncoderParams::TokenMean { table } => {
                    let tv = tape.leaf(table);
                    params.push((format!("extract.{d}.table"), tv));
                    BoundEncoder::TokenMean { table: tv }
                }
            };
            let dec = match &e.decoder {
                DecoderParams::Identity => BoundDecoder::Identity,
                DecoderParams::Affine { w, b } => {
                    let (wv, bv) = (tape.leaf(w), tape.leaf(b));
                    params.push((format!("decode.{d}.w"), wv));
                    params.push((format!("decode.{d}.b"), bv));
                    BoundDecoder::Affine { w: wv, b: bv }
                }
                DecoderParams::Mlp { w1, b1, w2, b2 } => {
                    let (v1, c1, v2, c2) =
                        (tape.leaf(w1), tape.leaf(b1), tape.leaf(w2), tape.leaf(b2));
                    params.push((format!("decode.{d}.w1"), v1));
                    params.push((format!("decode.{d}.b1"), c1));
                    params.push((format!("decode.{d}.w2"), v2));
                    params.push((format!("decode.{d}.b2"), c2));
                    BoundDecoder::Mlp { w1: v1, b1: c1, w2: v2, b2: c2 }
                }
            };
            encoders.push(enc);
            decoders.push(dec);
        }
        BoundRegistry {
            reg: self,
            encoders,
            decoders,
            params,
        }
    }

    /// Parameter storage in the exact order [`BoundRegistry::params`] reports.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (d, e) in self.entries.iter_mut().enumerate() {
            match &mut e.encoder {
                EncoderParams::Identity => {}
                EncoderParams::Affine { w, b } => {
                    out.push((format!("extract.{d}.w"), &mut *w));
                    out.push((format!("extract.{d}.b"), &mut *b));
                }
                EncoderParams::Mlp { w1, b1, w2, b2 } => {
                    out.push((format!("extract.{d}.w1"), &mut *w1));
                    out.push((format!("extract.{d}.b1"), &mut *b1));
                    out.push((format!("extract.{d}.w2"), &mut *w2));
                    out.push((format!("extract.{d}.b2"), &mut *b2));
                }
                EncoderParams::TokenMean { table } => {
                    out.push((format!("extract.{d}.table"), &mut *table));
                }
            }
            match &mut e.decoder {
                DecoderParams::Identity => {}
                DecoderParams::Affine { w, b } => {
                    out.push((format!("decode.{d}.w"), &mut *w));
                    out.push((format!("decode.{d}.b"), &mut *b));
                }
                DecoderParams::Mlp { w1, b1, w2, b2 } => {
                    out.push((format!("decode.{d}.w1"), &mut *w1));
                    out.push((format!("decode.{d}.b1"), &mut *b1));
                    out.push((format!("decode.{d}.w2"), &mut *w2));
                    out.push((format!("decode.{d}.b2"), &mut *b2));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
enum BoundEncoder {
    Identity,
    Affine { w: Var, b: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
    TokenMean { table: Var },
}

#[derive(Clone, Copy)]
enum BoundDecoder {
    Identity,
    Affine { w: Var, b: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

/// One pass's view of the registry: parameters as tape leaves.
pub struct BoundRegistry<'a> {
    reg: &'a ExtractorRegistry,
    encoders: Vec<BoundEncoder>,
    decoders: Vec<BoundDecoder>,
    params: Vec<(String, Var)>,
}

impl<'a> BoundRegistry<'a> {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn f(&self) -> usize {
        self.reg.f
    }

    pub fn b(&self) -> usize {
        self.reg.b()
    }

    /// Shared per-payload math; callers manage the invocation counter.
    fn apply(&self, tape: &Tape, domain: usize, p: &Payload) -> Result<Var> {
        self.reg.check_payload(domain, p)?;
        match (&self.encoders[domain], p) {
            (BoundEncoder::Identity, Payload::Numeric(v)) => {
                Ok(tape.leaf(&Tensor::vector(v.clone())?))
            }
            (BoundEncoder::Affine { w, b }, Payload::Numeric(v)) => {
                let x = tape.leaf(&Tensor::vector(v.clone())?);
                tape.add(tape.matvec(*w, x)?, *b)
            }
            (BoundEncoder::Mlp { w1, b1, w2, b2 }, Payload::Numeric(v)) => {
                let x = tape.leaf(&Tensor::vector(v.clone())?);
                let h = tape.activation(Activation::Tanh, tape.add(tape.matvec(*w1, x)?, *b1)?);
                tape.add(tape.matvec(*w2, h)?, *b2)
            }
            (BoundEncoder::TokenMean { table }, Payload::Tokens(t)) => {
                tape.embed_mean(*table, t)
            }
            _ => Err(Error::Input(format!(
                "domain {domain}: payload kind does not match its encoder"
            ))),
        }
    }

    /// Encode one payload into F-space. Counts one invocation.
    pub fn encode_one(&self, tape: &Tape, domain: usize, p: &Payload) -> Result<Var> {
        let out = self.apply(tape, domain, p)?;
        let e = self.reg.entry(domain)?;
        e.calls.set(e.calls.get() + 1);
        Ok(out)
    }

    /// Full node feature: encoder output followed by the one-hot domain tag.
    pub fn features(&self, tape: &Tape, domain: usize, p: &Payload) -> Result<Var> {
        let psi = self.encode_one(tape, domain, p)?;
        self.tag(tape, psi, domain)
    }

    fn tag(&self, tape: &Tape, psi: Var, domain: usize) -> Result<Var> {
        let b = self.b();
        let mut onehot = vec![0.0; b];
        onehot[domain] = 1.0;
        let tagv = tape.leaf(&Tensor::vector(onehot)?);
        tape.concat_vec(&[psi, tagv])
    }

    /// Feature vector for payload-less layer nodes: all zero, width F+B.
    pub fn zero_features(&self, tape: &Tape) -> Var {
        tape.zeros(vec![self.f() + self.b()])
    }

    /// Batched encoding: one encoder invocation per distinct domain present.
    /// Per-item results are bitwise identical to [`Self::encode_one`].
    pub fn encode_group<K: Ord + Copy>(
        &self,
        tape: &Tape,
        items: &[(K, usize, &Payload)],
    ) -> Result<BTreeMap<K, Var>> {
        let mut by_domain: BTreeMap<usize, Vec<(K, &Payload)>> = BTreeMap::new();
        for &(key, domain, p) in items {
            by_domain.entry(domain).or_default().push((key, p));
        }
        let mut out = BTreeMap::new();
        for (domain, group) in by_domain {
            // one invocation covers the whole group
            let e = self.reg.entry(domain)?;
            e.calls.set(e.calls.get() + 1);
            for (key, p) in group {
                let psi = self.apply(tape, domain, p)?;
                if out.insert(key, psi).is_some() {
                    return Err(Error::Input("duplicate key in encode_group".into()));
                }
            }
        }
        Ok(out)
    }

    /// Same as [`Self::encode_group`] but returning full F+B features.
    pub fn features_group<K: Ord + Copy>(
        &self,
        tape: &Tape,
        items: &[(K, usize, &Payload)],
    ) -> Result<BTreeMap<K, Var>> {
        let domains: BTreeMap<K, usize> = items.iter().map(|&(k, d, _)| (k, d)).collect();
        let encoded = self.encode_group(tape, items)?;
        let mut out = BTreeMap::new();
        for (key, psi) in encoded {
            out.insert(key, self.tag(tape, psi, domains[&key])?);
        }
        Ok(out)
    }

    /// Decode an F-wide reconstruction back toward the raw space (numeric
    /// domains) or embedding space (token domains).
    pub fn decode_one(&self, tape: &Tape, domain: usize, x_hat: Var) -> Result<Var> {
        self.reg.entry(domain)?;
        match &self.decoders[domain] {
            BoundDecoder::Identity => Ok(x_hat),
            BoundDecoder::Affine { w, b } => tape.add(tape.matvec(*w, x_hat)?, *b),
            BoundDecoder::Mlp { w1, b1, w2, b2 } => {
                let h = tape.activation(Activation::Tanh, tape.add(tape.matvec(*w1, x_hat)?, *b1)?);
                tape.add(tape.matvec(*w2, h)?, *b2)
            }
        }
    }

    /// Reconstruction target in the decoder's output space.
    pub fn decode_target(&self, tape: &Tape, domain: usize, p: &Payload) -> Result<Var> {
        let entry = self.reg.entry(domain)?;
        self.reg.check_payload(domain, p)?;
        match (&entry.spec, p) {
            (RawSpec::Numeric { .. }, Payload::Numeric(v)) => {
                Ok(tape.leaf(&Tensor::vector(v.clone())?))
            }
            (RawSpec::Tokens { .. }, Payload::Tokens(t)) => {
                let BoundEncoder::TokenMean { table } = self.encoders[domain] else {
                    return Err(Error::Registry(format!(
                        "domain {domain}: token spec without a token encoder"
                    )));
                };
                tape.embed_mean(table, t)
            }
            _ => unreachable!("check_payload verified the pairing"),
        }
    }
}

/// A batch item key: which tree, which node.
pub type ItemKey = (usize, NodeId);
