//! Low-rank adapters on attention projections.
//!
//! An adapter wraps one frozen projection `W: [d, k]` with factors
//! `A: [r, k]` and `B: [d, r]`; the adapted projection computes
//! `W h + B (A h)` with unit coefficient. `B` starts at zero so a fresh
//! adapter leaves its host unchanged, and `A` is Kaiming-uniform over the
//! fan-in `k` (bound `1/sqrt(k)`). Biases are never adapted.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use datadream_autograd::{gemm, AdamW, Gradients, Graph, ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::Container;
use crate::error::{Error, Result};
use crate::nn::LoraVars;
use crate::seed::{derive_seed, rng};

pub const INIT_SCHEME: &str = "kaiming_uniform_fan_in";
const BANK_MAGIC: [u8; 8] = *b"DDLORA\0\0";
pub const BANK_VERSION: u32 = 1;

/// Network that owns attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Host {
    Denoiser,
    TextEncoder,
    ImageTower,
    TextTower,
}

impl Host {
    pub const ALL: [Host; 4] = [Host::Denoiser, Host::TextEncoder, Host::ImageTower, Host::TextTower];

    pub fn as_str(self) -> &'static str {
        match self {
            Host::Denoiser => "denoiser",
            Host::TextEncoder => "text_encoder",
            Host::ImageTower => "image_tower",
            Host::TextTower => "text_tower",
        }
    }
}

impl FromStr for Host {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Host::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown adapter host {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    fn letter(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
        }
    }
}

/// `host.layer.proj`, e.g. `denoiser.3.v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetId {
    pub host: Host,
    pub layer: usize,
    pub proj: Proj,
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.host.as_str(), self.layer, self.proj.letter())
    }
}

impl FromStr for TargetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad target id {s:?}"));
        let mut parts = s.split('.');
        let host = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let layer = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let proj = match parts.next().ok_or_else(bad)? {
            "q" => Proj::Q,
            "k" => Proj::K,
            "v" => Proj::V,
            "o" => Proj::O,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(TargetId { host, layer, proj })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub target: TargetId,
    /// `[r, k]`
    pub a: Tensor,
    /// `[d, r]`
    pub b: Tensor,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Dense `B·A`.
    pub fn delta(&self) -> Tensor {
        let (d, r, k) = (self.d(), self.rank(), self.k());
        let mut out = Tensor::zeros([d, k]);
        gemm(d, r, k, 1.0, self.b.data(), r, 1, self.a.data(), k, 1, 0.0, out.data_mut(), k, 1);
        out
    }

    fn check_rank(&self) -> Result<()> {
        let (d, k, r) = (self.d(), self.k(), self.rank());
        if r == 0 || r >= d.min(k) || self.b.shape() != [d, r] {
            return Err(Error::invalid(format!(
                "adapter {} has rank {r} with d={d}, k={k}; need 0 < r < min(d, k)",
                self.target
            )));
        }
        Ok(())
    }
}

/// Fresh adapter for a `[d, k]` projection: `B = 0`, `A` Kaiming-uniform.
pub fn init_adapter(target: TargetId, d: usize, k: usize, r: usize, seed: u64) -> Result<LowRankAdapter> {
    if r == 0 || r >= d.min(k) {
        return Err(Error::invalid(format!(
            "rank {r} must satisfy 0 < r < min(d={d}, k={k})"
        )));
    }
    let mut g = rng(seed);
    Ok(LowRankAdapter {
        target,
        a: Tensor::uniform([r, k], 1.0 / (k as f32).sqrt(), &mut g),
        b: Tensor::zeros([d, r]),
    })
}

fn check_shapes(w: &Tensor, adapter: &LowRankAdapter) -> Result<()> {
    if w.shape() != [adapter.d(), adapter.k()] {
        return Err(Error::invalid(format!(
            "weight shape {:?} does not match adapter {} ({}x{})",
            w.shape(),
            adapter.target,
            adapter.d(),
            adapter.k()
        )));
    }
    Ok(())
}

/// `W h + B (A h)` for a single input vector.
pub fn adapted_projection(w: &Tensor, adapter: &LowRankAdapter, h: &[f32]) -> Result<Vec<f32>> {
    check_shapes(w, adapter)?;
    let (d, r, k) = (adapter.d(), adapter.rank(), adapter.k());
    if h.len() != k {
        return Err(Error::invalid(format!("input has {} values, projection expects {k}", h.len())));
    }
    let mut out = vec![0.0; d];
    gemm(d, k, 1, 1.0, w.data(), k, 1, h, 1, 1, 0.0, &mut out, 1, 1);
    let mut ah = vec![0.0; r];
    gemm(r, k, 1, 1.0, adapter.a.data(), k, 1, h, 1, 1, 0.0, &mut ah, 1, 1);
    gemm(d, r, 1, 1.0, adapter.b.data(), r, 1, &ah, 1, 1, 1.0, &mut out, 1, 1);
    Ok(out)
}

/// `W + B·A`.
pub fn merge_adapter(w: &Tensor, adapter: &LowRankAdapter) -> Result<Tensor> {
    check_shapes(w, adapter)?;
    let mut out = w.clone();
    let (d, r, k) = (adapter.d(), adapter.rank(), adapter.k());
    gemm(d, r, k, 1.0, adapter.b.data(), r, 1, adapter.a.data(), k, 1, 1.0, out.data_mut(), k, 1);
    Ok(out)
}

/// A network whose attention projections can carry adapters.
pub trait AttentionHost {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Every attention projection weight, in a fixed order.
    fn projections(&self) -> Vec<(TargetId, ParamId)>;
}

/// One adapter per projection of the targeted hosts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub hosts: Vec<Host>,
    pub adapters: Vec<LowRankAdapter>,
}

impl AdapterSet {
    pub fn new(hosts: Vec<Host>, adapters: Vec<LowRankAdapter>) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &adapters {
            a.check_rank()?;
            if !seen.insert(a.target) {
                return Err(Error::invalid(format!("duplicate adapter for {}", a.target)));
            }
            if !hosts.contains(&a.target.host) {
                return Err(Error::invalid(format!("adapter {} outside target hosts", a.target)));
            }
        }
        Ok(Self { hosts, adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.adapters.iter().map(LowRankAdapter::num_params).sum()
    }

    pub fn get(&self, target: &TargetId) -> Option<&LowRankAdapter> {
        self.adapters.iter().find(|a| &a.target == target)
    }

    /// Adds every factor to the graph.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> (LoraVars, Vec<(datadream_autograd::Var, datadream_autograd::Var)>) {
        let mut lora = LoraVars::none();
        let mut vars = Vec::with_capacity(self.adapters.len());
        for a in &self.adapters {
            let av = g.param(&a.a, trainable);
            let bv = g.param(&a.b, trainable);
            lora.insert(a.target, av, bv);
            vars.push((av, bv));
        }
        (lora, vars)
    }

    /// One optimizer step over all factors, gradients taken from `grads`.
    pub fn apply_step(
        &mut self,
        opt: &mut AdamW,
        lr: f64,
        vars: &[(datadream_autograd::Var, datadream_autograd::Var)],
        grads: &mut Gradients,
    ) {
        let mut gs = Vec::with_capacity(vars.len() * 2);
        for &(av, bv) in vars {
            gs.push(grads.take(av));
            gs.push(grads.take(bv));
        }
        let params = self
            .adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .zip(gs.iter().map(|g| g.as_deref()));
        opt.step(lr, params);
    }

    pub fn is_zero_delta(&self) -> bool {
        self.adapters.iter().all(|a| a.b.data().iter().all(|&v| v == 0.0))
    }
}

/// Creates fresh adapters for every projection of the hosts in `hosts`.
pub fn inject<M: AttentionHost + ?Sized>(model: &M, hosts: &[Host], rank: usize, seed: u64) -> Result<AdapterSet> {
    let projections = model.projections();
    let mut adapters = Vec::new();
    for &host in hosts {
        let mine: Vec<_> = projections.iter().filter(|(t, _)| t.host == host).collect();
        if mine.is_empty() {
            return Err(Error::config(format!("host {} has no attention layers", host.as_str())));
        }
        for (target, pid) in mine {
            let w = model.store().get(*pid);
            let (d, k) = (w.shape()[0], w.shape()[1]);
            let idx = adapters.len() as u64;
            adapters.push(init_adapter(*target, d, k, rank, derive_seed(seed, "adapter", idx))?);
        }
    }
    AdapterSet::new(hosts.to_vec(), adapters)
}

/// Copy of `model` with every adapter of `set` folded into its weights.
pub fn merged<M: AttentionHost + Clone>(model: &M, set: &AdapterSet) -> Result<M> {
    let mut out = model.clone();
    let projections = model.projections();
    for a in &set.adapters {
        let pid = projections
            .iter()
            .find(|(t, _)| *t == a.target)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::Compatibility(format!("model has no projection {}", a.target)))?;
        let w = out.store().get(pid);
        if w.shape() != [a.d(), a.k()] {
            return Err(Error::Compatibility(format!(
                "projection {} is {:?}, adapter expects {}x{}",
                a.target,
                w.shape(),
                a.d(),
                a.k()
            )));
        }
        let m = merge_adapter(w, a)?;
        *out.store_mut().get_mut(pid) = m;
    }
    Ok(out)
}

/// Checks that every adapter of `set` fits a projection of `model`.
pub fn check_compatible<M: AttentionHost + ?Sized>(model: &M, set: &AdapterSet) -> Result<()> {
    let projections = model.projections();
    for a in &set.adapters {
        match projections.iter().find(|(t, _)| *t == a.target) {
            Some((_, pid)) if model.store().get(*pid).shape() == [a.d(), a.k()] => {}
            _ => {
                return Err(Error::Compatibility(format!(
                    "adapter {} does not fit the model",
                    a.target
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One adapter set shared by all classes.
    Dset,
    /// One adapter set per class.
    Cls,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Dset => "dset",
            Regime::Cls => "cls",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dset" => Ok(Regime::Dset),
            "cls" => Ok(Regime::Cls),
            _ => Err(Error::config(format!("unknown regime {s:?} (expected dset or cls)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    init: String,
    hosts: Vec<Host>,
    entries: usize,
    num_classes: usize,
}

/// Trained adapters: one shared set (`dset`) or one per class (`cls`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    pub regime: Regime,
    pub rank: usize,
    pub seed: u64,
    pub num_classes: usize,
    entries: Vec<AdapterSet>,
}

impl AdapterBank {
    pub fn new(regime: Regime, rank: usize, seed: u64, num_classes: usize, entries: Vec<AdapterSet>) -> Result<Self> {
        let expected = match regime {
            Regime::Dset => 1,
            Regime::Cls => num_classes,
        };
        if entries.len() != expected {
            return Err(Error::invalid(format!(
                "{} bank over {num_classes} classes needs {expected} entries, got {}",
                regime.as_str(),
                entries.len()
            )));
        }
        for e in &entries {
            if let Some(a) = e.adapters.iter().find(|a| a.rank() != rank) {
                return Err(Error::invalid(format!("adapter {} has rank {}, bank rank {rank}", a.target, a.rank())));
            }
        }
        Ok(Self {
            regime,
            rank,
            seed,
            num_classes,
            entries,
        })
    }

    pub fn entries(&self) -> &[AdapterSet] {
        &self.entries
    }

    /// The adapter set used to generate class `label`.
    pub fn for_class(&self, label: usize) -> &AdapterSet {
        match self.regime {
            Regime::Dset => &self.entries[0],
            Regime::Cls => &self.entries[label],
        }
    }

    fn to_container(&self) -> Container {
        let mut fixed = Vec::with_capacity(13);
        fixed.push(match self.regime {
            Regime::Dset => 0u8,
            Regime::Cls => 1u8,
        });
        fixed.extend_from_slice(&(self.rank as u32).to_le_bytes());
        fixed.extend_from_slice(&self.seed.to_le_bytes());
        let meta = BankMeta {
            init: INIT_SCHEME.into(),
            hosts: self.entries.first().map(|e| e.hosts.clone()).unwrap_or_default(),
            entries: self.entries.len(),
            num_classes: self.num_classes,
        };
        let mut records = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            for a in &e.adapters {
                records.push((format!("{i}/{}/A", a.target), a.a.clone()));
                records.push((format!("{i}/{}/B", a.target), a.b.clone()));
            }
        }
        Container {
            magic: BANK_MAGIC,
            version: BANK_VERSION,
            fixed,
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            records,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes, BANK_MAGIC, BANK_VERSION)?;
        if c.fixed.len() != 13 {
            return Err(Error::integrity("header", "fixed header has wrong size"));
        }
        let regime = match c.fixed[0] {
            0 => Regime::Dset,
            1 => Regime::Cls,
            x => return Err(Error::integrity("header", format!("unknown regime tag {x}"))),
        };
        let rank = u32::from_le_bytes(c.fixed[1..5].try_into().expect("4 bytes")) as usize;
        let seed = u64::from_le_bytes(c.fixed[5..13].try_into().expect("8 bytes"));
        let meta: BankMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::integrity("header", format!("metadata: {e}")))?;
        if meta.init != INIT_SCHEME {
            return Err(Error::Format(format!("unknown init scheme {:?}", meta.init)));
        }
        let mut entries: Vec<Vec<LowRankAdapter>> = vec![Vec::new(); meta.entries];
        let mut records = c.records.into_iter();
        while let Some((name, a)) = records.next() {
            let (idx, target, which) = parse_record_name(&name)?;
            if which != "A" {
                return Err(Error::integrity(&name, "expected an A factor"));
            }
            let (bname, b) = records
                .next()
                .ok_or_else(|| Error::integrity(&name, "missing B factor"))?;
            let (bidx, btarget, bwhich) = parse_record_name(&bname)?;
            if (bidx, btarget, bwhich) != (idx, target, "B") {
                return Err(Error::integrity(&bname, "B factor does not follow its A factor"));
            }
            let entry = entries
                .get_mut(idx)
                .ok_or_else(|| Error::integrity(&name, "entry index out of range"))?;
            entry.push(LowRankAdapter { target, a, b });
        }
        let entries = entries
            .into_iter()
            .map(|adapters| AdapterSet::new(meta.hosts.clone(), adapters))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::integrity("adapters", e.to_string()))?;
        Self::new(regime, rank, seed, meta.num_classes, entries).map_err(|e| Error::integrity("header", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

fn parse_record_name(name: &str) -> Result<(usize, TargetId, &str)> {
    let bad = || Error::integrity(name, "malformed record name");
    let mut parts = name.split('/');
    let idx = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let target = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let which = parts.next().ok_or_else(bad)?;
    Ok((idx, target, which))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tid(layer: usize, proj: Proj) -> TargetId {
        TargetId {
            host: Host::Denoiser,
            layer,
            proj,
        }
    }

    #[test]
    fn init_is_zero_product_and_seeded() {
        let a = init_adapter(tid(0, Proj::Q), 8, 8, 2, 0).unwrap();
        assert!(a.b.data().iter().all(|&v| v == 0.0));
        assert!(a.delta().data().iter().all(|&v| v == 0.0));
        let b = init_adapter(tid(0, Proj::Q), 8, 8, 2, 0).unwrap();
        assert!(a.a.bitwise_eq(&b.a));
        assert!(a.a.data().iter().all(|v| v.abs() <= 1.0 / 8f32.sqrt()));
        assert!(init_adapter(tid(0, Proj::Q), 4, 4, 4, 0).is_err());
        assert!(init_adapter(tid(0, Proj::Q), 4, 4, 0, 0).is_err());
        assert_eq!(a.num_params(), 2 * (8 + 8));
    }

    fn hand_adapter() -> (Tensor, LowRankAdapter) {
        let w = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // rank 1 with d = k = 2 is the only valid hand example below min(d, k)
        let adapter = LowRankAdapter {
            target: tid(0, Proj::V),
            a: Tensor::new([1, 2], vec![0.0, 1.0]).unwrap(),
            b: Tensor::new([2, 1], vec![1.0, 0.0]).unwrap(),
        };
        (w, adapter)
    }

    #[test]
    fn hand_worked_projection_and_merge() {
        let (w, adapter) = hand_adapter();
        assert_eq!(adapted_projection(&w, &adapter, &[2.0, 3.0]).unwrap(), vec![5.0, 3.0]);
        assert_eq!(merge_adapter(&w, &adapter).unwrap().data(), &[1.0, 1.0, 0.0, 1.0]);
        assert!(adapted_projection(&w, &adapter, &[1.0]).is_err());
        let wrong = Tensor::zeros([3, 2]);
        assert!(merge_adapter(&wrong, &adapter).is_err());
    }

    #[test]
    fn fresh_adapter_merges_to_identity() {
        let mut r = rng(4);
        let w = Tensor::randn([6, 5], 1.0, &mut r);
        let a = init_adapter(tid(1, Proj::K), 6, 5, 3, 9).unwrap();
        assert!(merge_adapter(&w, &a).unwrap().bitwise_eq(&w));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn merged_matches_runtime_branch(seed in any::<u64>(), d in 2usize..9, k in 2usize..9) {
            let r = 1 + (seed as usize) % (d.min(k) - 1);
            let mut g = rng(seed);
            let w = Tensor::randn([d, k], 1.0, &mut g);
            let adapter = LowRankAdapter {
                target: tid(0, Proj::O),
                a: Tensor::randn([r, k], 1.0, &mut g),
                b: Tensor::randn([d, r], 1.0, &mut g),
            };
            let m = merge_adapter(&w, &adapter).unwrap();
            let dense = adapter.delta();
            let h = Tensor::randn([k], 1.0, &mut g);
            let y = adapted_projection(&w, &adapter, h.data()).unwrap();
            for i in 0..d {
                let mh: f32 = (0..k).map(|j| m.data()[i * k + j] * h.data()[j]).sum();
                let oracle: f32 = (0..k).map(|j| (w.data()[i * k + j] + dense.data()[i * k + j]) * h.data()[j]).sum();
                prop_assert!((mh - y[i]).abs() <= 1e-4 * (1.0 + y[i].abs()));
                prop_assert!((oracle - y[i]).abs() <= 1e-4 * (1.0 + y[i].abs()));
            }
        }
    }

    fn set(seed: u64, layers: usize) -> AdapterSet {
        let mut adapters = Vec::new();
        for l in 0..layers {
            for p in Proj::ALL {
                let mut a = init_adapter(tid(l, p), 6, 5, 2, seed + l as u64).unwrap();
                let mut g = rng(seed ^ 77);
                a.b = Tensor::randn([6, 2], 0.3, &mut g);
                adapters.push(a);
            }
        }
        AdapterSet::new(vec![Host::Denoiser], adapters).unwrap()
    }

    #[test]
    fn bank_round_trips_bit_exactly() {
        let bank = AdapterBank::new(Regime::Cls, 2, 42, 3, vec![set(1, 2), set(2, 2), set(3, 2)]).unwrap();
        let back = AdapterBank::decode(&bank.encode()).unwrap();
        assert_eq!(back.entries().len(), 3);
        assert_eq!(back.regime, Regime::Cls);
        assert_eq!(back.seed, 42);
        for (x, y) in bank.entries().iter().zip(back.entries()) {
            for (a, b) in x.adapters.iter().zip(&y.adapters) {
                assert_eq!(a.target, b.target);
                assert!(a.a.bitwise_eq(&b.a) && a.b.bitwise_eq(&b.b));
            }
        }
        let dset = AdapterBank::new(Regime::Dset, 2, 1, 5, vec![set(9, 1)]).unwrap();
        let back = AdapterBank::decode(&dset.encode()).unwrap();
        assert_eq!((back.regime, back.entries().len()), (Regime::Dset, 1));
    }

    #[test]
    fn truncated_bank_names_record() {
        let bank = AdapterBank::new(Regime::Dset, 2, 1, 2, vec![set(5, 1)]).unwrap();
        let bytes = bank.encode();
        match AdapterBank::decode(&bytes[..bytes.len() - 20]) {
            Err(Error::Integrity { record, .. }) => assert_eq!(record, "0/denoiser.0.o/B"),
            other => panic!("{other:?}"),
        }
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(matches!(AdapterBank::decode(&bumped), Err(Error::Format(_))));
    }

    #[test]
    fn bank_entry_counts_follow_regime() {
        assert!(AdapterBank::new(Regime::Dset, 2, 0, 3, vec![set(1, 1), set(2, 1)]).is_err());
        assert!(AdapterBank::new(Regime::Cls, 2, 0, 3, vec![set(1, 1)]).is_err());
    }

    #[test]
    fn target_ids_parse_back() {
        let t = TargetId {
            host: Host::TextTower,
            layer: 11,
            proj: Proj::K,
        };
        assert_eq!(t.to_string(), "text_tower.11.k");
        assert_eq!(t.to_string().parse::<TargetId>().unwrap(), t);
        assert!("denoiser.x.q".parse::<TargetId>().is_err());
    }
}
